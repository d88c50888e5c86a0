"""Turn-terminality classification: corpus tooling, fusion heads, grouped
cross-validation and mixed-model analysis."""

__version__ = "0.1.0"
