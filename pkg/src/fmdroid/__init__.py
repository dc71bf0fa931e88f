"""Android malware detection with second-order factorization machines."""

__version__ = "0.1.0"
