"""Relative debugging of serial programs against their SPMD parallelizations."""
