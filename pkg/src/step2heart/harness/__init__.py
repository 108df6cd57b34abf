"""Experiment configuration, run persistence, CLI and reporting."""
