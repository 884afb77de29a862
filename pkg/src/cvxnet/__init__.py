"""Convex networks for pricing options with convex payoffs."""
