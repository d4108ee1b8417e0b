"""Generative stochastic networks for sequence prediction."""
