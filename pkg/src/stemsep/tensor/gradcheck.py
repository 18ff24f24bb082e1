"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .core import Tensor, backward


def grad_check(f, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must map the given tensors to a scalar Tensor. Error per element is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|); the max over
    all elements of all inputs is returned. Use 64-bit inputs.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ValueError("grad_check: all inputs must be Tensors with requires_grad")
        t.zero_grad()
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*inputs).data)
            flat[i] = orig - eps
            lo = float(f(*inputs).data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            ana = float(gflat[i])
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            if err > worst:
                worst = err
    return worst


def numeric_grad(f, t, eps=1e-5):
    """Central-difference gradient of scalar f with respect to tensor t."""
    flat = t.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data)
        flat[i] = orig - eps
        lo = float(f().data)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * eps)
    return g.reshape(t.shape)
