"""Adaptive stress testing toolkit: black-box falsification solvers and the crosswalk scenario."""
