"""Evaluation, experiment drivers and command-line entry point."""
