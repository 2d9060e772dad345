"""Federated meta-learning with inexact ADMM and a Bregman knowledge-transfer regularizer."""

__version__ = "0.1.0"
