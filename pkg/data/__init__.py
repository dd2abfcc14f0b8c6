# Data package: scénarios, jeux de données et formats de fichiers
