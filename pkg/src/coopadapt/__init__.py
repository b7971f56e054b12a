"""Deterministic cooperative-perception testbed for online plugin adaptation."""

__version__ = "0.1.0"
