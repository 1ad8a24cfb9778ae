"""Periodic-reasoning toolkit: synthetic periodic signals, templated counting QA,
a tiny numpy decoder, channel-weighted (RLO) updates and an easy-to-hard curriculum."""

__version__ = "0.1.0"
