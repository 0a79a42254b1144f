"""klab: a desk-scale laboratory for kinetic transport with noise."""

__version__ = "0.1.0"
