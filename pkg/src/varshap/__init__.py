"""Variance SHAP for variational recurrent classifiers."""

__version__ = "0.1.0"
