"""Composable multivariate time-series forecasting pipelines.

Subpackages cover: a numpy-backed autodiff engine (tensor), series
preprocessing (preprocess), tokenization/encoding (encoding), network
backbones and attention variants (backbones), training and metrics
(training, metrics), the pipeline design space (space), dataset
meta-features and the rank meta-predictor (features, meta), and the
benchmark harness with its CLI (data, runner, cli).
"""

__version__ = "0.1.0"
