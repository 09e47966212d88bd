"""Numerical toolkit for planar semi-dispersing billiards."""
