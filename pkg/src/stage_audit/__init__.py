"""Benchmark generation and sensitivity auditing harness for 3D human pose
estimators: pose-conditioned renders, paired image generation with quality
filters, and a degradation-based evaluation protocol."""

__version__ = "0.1.0"
