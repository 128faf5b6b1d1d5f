"""Multi-task RL with genetic binary routing genotypes, a growable modular
actor network, and soft actor-critic training."""

__version__ = "0.1.0"
