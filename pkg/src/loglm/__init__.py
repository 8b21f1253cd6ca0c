"""Unsupervised online anomaly detection over authentication logs with
recurrent language models, plus aggregate-feature baselines."""

__version__ = "0.1.0"
