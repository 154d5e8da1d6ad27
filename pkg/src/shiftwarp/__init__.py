"""Content-aware image retargeting with a learned attention-driven shift map."""

__version__ = "0.1.0"
