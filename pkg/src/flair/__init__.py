"""Coordinate networks with band-limited RC-GAUSS activations, on numpy."""
