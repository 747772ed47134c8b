"""Phantom generation, run configuration and the end-to-end pipeline."""
