"""authpipe: patch-based art authentication experiments, from manifest to report."""

__version__ = "0.1.0"
