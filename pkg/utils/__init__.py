# Particle dynamics driven by kernel density estimates
