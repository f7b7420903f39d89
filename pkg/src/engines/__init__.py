# Numerical engines of the vacuum-decay simulator
