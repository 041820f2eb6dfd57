"""Numerical services: model, stability, control, network and scenario runs."""
