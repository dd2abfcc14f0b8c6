# Engine package: géométrie, réseaux, planificateurs et banc d'essai
