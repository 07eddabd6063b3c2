"""Shared test utilities: finite-difference gradient checks."""

import numpy as np

from vidtag import autograd as ag


def numeric_grad(loss_fn, arr, index, h=1e-4):
    old = arr[index]
    arr[index] = old + h
    with ag.no_grad():
        up = float(loss_fn().data)
    arr[index] = old - h
    with ag.no_grad():
        down = float(loss_fn().data)
    arr[index] = old
    return (up - down) / (2 * h)


def grad_check(loss_fn, tensors, samples=12, h=1e-4, seed=0):
    """Worst relative error between analytic and central-difference gradients.

    ``tensors`` are float64 leaves requiring grad. Up to ``samples`` entries
    per tensor are probed; the error per tensor is
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` in vector norm.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    r = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        picks = r.choice(flat.size, size=min(samples, flat.size), replace=False)
        a = np.array([g.reshape(-1)[i] for i in picks])
        n = np.array([numeric_grad(loss_fn, flat, i, h) for i in picks])
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale < 1e-10:
            continue
        worst = max(worst, np.linalg.norm(a - n) / scale)
    return worst


def projection_loss(out, seed=99):
    """Scalar ``sum(out * R)`` with a fixed random ``R``; every output entry matters."""
    R = np.random.default_rng(seed).normal(size=out.shape)
    return (out * R).sum()
