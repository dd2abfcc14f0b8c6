# UI package: rendu SVG des scènes
