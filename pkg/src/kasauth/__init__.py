"""kasauth: poset-based key assignment schemes for entity authentication."""

__version__ = "0.1.0"
