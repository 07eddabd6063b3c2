"""Training objectives.

``contrastive_loss`` aligns frame and GPS embeddings with a softmax
cross-entropy over their similarity matrix. ``weighted_hinge_loss`` pulls the
similarity between refined and ground-truth GPS embeddings toward the identity,
weighting off-diagonal (negative) and diagonal (positive) squared errors
separately, at frame level and at video level.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError


@dataclass(frozen=True)
class HingeWeights:
    alpha: float = 10.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("hinge weights must be positive")


def _t(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def contrastive_loss(V, G, scale=1.0, symmetric=False):
    """Row-wise cross-entropy of ``scale * V G^T`` against the identity targets."""
    V, G = _t(V), _t(G)
    if V.shape != G.shape or V.ndim != 2:
        raise ShapeError("contrastive_loss", V.shape, G.shape)
    n = V.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two pairs")
    logits = ag.matmul(V, G.T) * scale
    targets = np.arange(n)
    loss = ag.cross_entropy(logits, targets)
    if symmetric:
        loss = (loss + ag.cross_entropy(logits.T, targets)) * 0.5
    return loss


def _masks(n, dtype):
    upper = np.triu(np.ones((n, n), dtype=dtype), k=1)
    return upper, upper.T.copy(), np.eye(n, dtype=dtype)


def hinge_term(Gp, G, w: HingeWeights):
    """``alpha * (mean upper + mean lower) + beta * mean diag`` of ``(Gp G^T - I)^2``."""
    n = G.shape[0]
    sim = ag.matmul(Gp, G.T)
    upper, lower, eye = _masks(n, sim.dtype)
    M = ag.square(sim - eye)
    diag = (M * eye).sum() * (1.0 / n)
    if n < 2:
        return diag * w.beta
    off = n * (n - 1) / 2
    up = (M * upper).sum() * (1.0 / off)
    lo = (M * lower).sum() * (1.0 / off)
    return (up + lo) * w.alpha + diag * w.beta


def weighted_hinge_loss(Gp, G, Gp_seq, G_seq, w: HingeWeights = HingeWeights()):
    Gp, G, Gp_seq, G_seq = _t(Gp), _t(G), _t(Gp_seq), _t(G_seq)
    if Gp.shape != G.shape or Gp.ndim != 2:
        raise ShapeError("weighted_hinge_loss", Gp.shape, G.shape, "frame level")
    if Gp_seq.shape != G_seq.shape or Gp_seq.ndim != 2:
        raise ShapeError("weighted_hinge_loss", Gp_seq.shape, G_seq.shape, "video level")
    return hinge_term(Gp, G, w) + hinge_term(Gp_seq, G_seq, w)


def pooling_matrix(lengths, dtype=np.float32):
    """``(S, N)`` matrix averaging consecutive runs of ``lengths`` rows."""
    lengths = [int(n) for n in lengths]
    if any(n < 1 for n in lengths):
        raise ValueError("every sequence must be nonempty")
    P = np.zeros((len(lengths), sum(lengths)), dtype=dtype)
    start = 0
    for s, n in enumerate(lengths):
        P[s, start : start + n] = 1.0 / n
        start += n
    return P


def video_level_pool(frames, lengths):
    """Normalised mean of each sequence's frame embeddings.

    ``frames`` stacks all sequences' rows in order; ``lengths`` gives the
    row count of each sequence.
    """
    frames = _t(frames)
    P = Tensor(pooling_matrix(lengths, frames.dtype))
    return ag.l2_normalize(ag.matmul(P, frames), axis=-1)
