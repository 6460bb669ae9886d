"""Critical exponents and positive solutions for extremal elliptic operators."""

__version__ = "0.1.0"
