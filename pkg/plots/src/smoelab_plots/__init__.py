"""Figure rendering for smoelab metric CSVs (fluctuation, entropy ratio, load)."""

__version__ = "0.1.0"
