"""Backdoor data-poisoning experiments on tabular GBDT and MLP models."""

__version__ = "0.1.0"
