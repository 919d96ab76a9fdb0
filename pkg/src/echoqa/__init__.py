"""Blind quality assessment of echocardiogram-like clips.

A numpy/numba neural stack (four-stream CNN + LSTM regressor), classical
quality indicators, a synthetic clip generator with analytic labels, and
training / evaluation / latency-benchmark tooling.
"""

__version__ = "0.1.0"

ATTRIBUTES = ("visibility", "clarity", "depth_gain", "foreshortening")
