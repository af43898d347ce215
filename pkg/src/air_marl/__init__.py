"""Adaptive exploration via identity recognition on value-decomposition MARL,
with an exact enumeration oracle for the underlying information identities."""

__version__ = "0.1.0"
