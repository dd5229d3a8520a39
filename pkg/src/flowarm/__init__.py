"""Flow-matching pixel world model with closed-loop arm control."""

__version__ = "0.1.0"
