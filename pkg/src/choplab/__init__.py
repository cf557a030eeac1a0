"""Head and layer chopping experiments on small transformer encoders."""

__version__ = "0.1.0"
