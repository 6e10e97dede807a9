"""Sliding-window inertial estimation with point/line/plane features and structure priors."""

__version__ = "0.1.0"
