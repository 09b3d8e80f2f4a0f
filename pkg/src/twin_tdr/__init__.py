"""Twin TD-regularized actor-critic toolkit."""

__version__ = "0.1.0"
