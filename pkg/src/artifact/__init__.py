"""Offline meta-RL laboratory: point-robot tasks, scripted offline datasets,
a context-aware world model, and a prompt-conditioned decision transformer."""

__version__ = "0.1.0"
