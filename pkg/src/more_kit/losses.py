"""Training objectives: contrastive task-embedding loss, token-level
generation loss, and their weighted combination."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

_MIN_NORM = 1e-12


@dataclass
class LossReport:
    """Per-step loss decomposition: total = gen_loss + lam * con_loss."""
    gen_loss: float
    con_loss: float
    lam: float
    total: float

    @classmethod
    def build(cls, gen_loss: float, con_loss: float, lam: float) -> "LossReport":
        return cls(gen_loss=gen_loss, con_loss=con_loss, lam=lam,
                   total=gen_loss + lam * con_loss)

    def to_dict(self) -> dict:
        return asdict(self)


def _row_normalize(x: Tensor, what: str) -> Tensor:
    norms_sq = T.tsum(T.mul(x, x), axis=-1, keepdims=True)
    if np.min(norms_sq.data) < _MIN_NORM ** 2:
        raise ValueError(f"zero-norm vector in {what} under cosine similarity")
    return T.mul(x, T.power(norms_sq, -0.5))


def contrastive_loss(samples_h: Tensor, task_id: int, E: Tensor, tau: float,
                     sim: str = "cosine", literal_sign: bool = False) -> Tensor:
    """Pull a homogeneous batch of sample representations toward its own
    task embedding and away from the others.

    Computes -(1/N) sum_i log softmax_k(sim(h_i, e_k) / tau)[task_id] with
    sim either cosine similarity or a raw dot product.  `literal_sign=True`
    flips to the positive-log form for exactness audits; the default
    negative-log form is the one that decreases as samples approach their
    task embedding.
    """
    samples_h = samples_h if isinstance(samples_h, Tensor) else Tensor(samples_h)
    E = E if isinstance(E, Tensor) else Tensor(E)
    if samples_h.ndim != 2 or E.ndim != 2:
        raise ValueError("samples_h and E must be 2-D (rows are vectors)")
    if samples_h.shape[0] == 0:
        raise ValueError("empty batch")
    if samples_h.shape[1] != E.shape[1]:
        raise ValueError(f"representation dimension {samples_h.shape[1]} != "
                         f"embedding dimension {E.shape[1]}")
    if not 0 <= task_id < E.shape[0]:
        raise ValueError(f"unknown task_id {task_id}")
    if tau <= 0:
        raise ValueError("temperature must be positive")

    if sim == "cosine":
        h = _row_normalize(samples_h, "samples_h")
        e = _row_normalize(E, "task embeddings")
    elif sim == "dot":
        h, e = samples_h, E
    else:
        raise ValueError(f"unknown similarity '{sim}'")

    sims = T.matmul(h, T.transpose_last(e))        # (N, T)
    probs = T.softmax(sims, temperature=tau)       # temperature-scaled rows
    own = T.narrow(probs, 1, task_id, 1)           # (N, 1)
    loss = T.mul(T.mean(T.log(own)), -1.0)
    if literal_sign:
        loss = T.mul(loss, -1.0)
    return loss


def generation_loss(predicted: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy: -log(predicted[target]) averaged over
    positions.  `predicted` rows must be valid distributions."""
    predicted = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
    if predicted.ndim < 2:
        raise ValueError("predicted must have at least (positions, vocab) axes")
    if np.min(predicted.data) < 0:
        raise ValueError("predicted probabilities must be nonnegative")
    sums = predicted.data.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-9:
        raise ValueError("predicted rows must sum to 1 within 1e-9")
    return T.cross_entropy(predicted, targets)


def total_loss(gen: Tensor | float, con: Tensor | float, lam: float) -> Tensor:
    """gen + lam * con."""
    gen = gen if isinstance(gen, Tensor) else Tensor(gen)
    con = con if isinstance(con, Tensor) else Tensor(con)
    return T.add(gen, T.mul(con, lam))
