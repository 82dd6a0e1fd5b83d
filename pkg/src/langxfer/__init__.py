"""Cross-lingual transfer of a masked LM via sparse embedding initialization."""

__version__ = "0.1.0"
