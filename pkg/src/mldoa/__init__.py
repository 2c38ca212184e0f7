"""Resolution probability and MSE prediction for ML direction-of-arrival estimators."""
__version__ = "0.1.0"
