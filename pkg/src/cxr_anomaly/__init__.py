"""Abnormality localization on chest X-rays: data, losses, models, ensembles, metrics."""

__version__ = "0.1.0"
