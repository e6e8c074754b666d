"""Synthetic two-domain benchmark, metrics and experiment drivers."""
