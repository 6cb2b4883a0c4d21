"""Physics-guided motion diffusion at toy scale."""

__version__ = "0.1.0"
