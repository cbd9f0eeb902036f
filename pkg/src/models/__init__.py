"""Diffusion transformer, attention, objectives, training and checkpoints."""
