"""Contextual category prior: a linear layer followed by log-softmax."""

from __future__ import annotations

import numpy as np

from .autodiff import Linear, Module, Tensor, log_softmax, logsumexp


class PriorHead(Module):
    def __init__(self, d_model, n_categories, rng):
        self.linear = Linear(d_model, n_categories, rng)

    @property
    def weight(self):
        return self.linear.weight

    @property
    def bias(self):
        return self.linear.bias

    def __call__(self, h) -> Tensor:
        return log_softmax(self.linear(h), axis=-1)


def category_log_prior(params: PriorHead, h_i) -> np.ndarray:
    """``z - logsumexp(z)`` with ``z = W h_i + b``."""
    z = np.asarray(h_i, dtype=np.float64) @ params.weight.data.T + params.bias.data
    return z - logsumexp(z, axis=-1, keepdims=True)
