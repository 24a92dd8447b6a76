"""Datasets, checkpoints, experiment orchestration and the CLI."""
