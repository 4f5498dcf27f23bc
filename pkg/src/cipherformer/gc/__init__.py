"""Garbled-circuit engine: circuit IR, garbling/evaluation, oblivious transfer."""

from .circuit import Builder, Circuit

__all__ = ["Builder", "Circuit"]
