"""fmtd: fork moving-target defense laboratory for image classifiers."""

__version__ = "0.1.0"
