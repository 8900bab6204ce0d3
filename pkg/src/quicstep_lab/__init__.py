"""Deterministic lab for split-path QUIC censorship circumvention."""

__version__ = "0.1.0"
