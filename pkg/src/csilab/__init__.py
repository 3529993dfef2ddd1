"""Link-level laboratory for Type-II CSI feedback with learned port selection
and reconstruction."""

__version__ = "0.1.0"
