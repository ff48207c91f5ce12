"""Homography training-pair synthesis and cross-scale colour-invariant estimation."""
