"""Adaptive rank selection over a shared low-rank adapter.

One low-rank adapter serves every task: the rank-k "expert" is the prefix
A[:k, :], B[:, :k], so experts of different ranks share their overlap.  A
per-task embedding feeds a gate that puts a distribution over ranks; the
argmax rank is used in the forward pass and a straight-through multiplier
(forward value exactly 1) lets gradient reach the gate and embeddings.  The
selected expert's output is scaled by selected_rank / num_tasks.

After training, `freeze_mapping` replaces the gate computation with a stored
task -> rank lookup; the frozen forward is bit-identical to the gated one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .lora import LoraAdapter
from .tensor import Tensor

TRAIN_GATED = "train_gated"
FROZEN_MAPPING = "frozen_mapping"


class TaskEmbeddingTable:
    """One trainable embedding row per task, Kaiming-initialized
    (zero-mean Gaussian, variance 2/h)."""

    def __init__(self, num_tasks: int, h: int, rng: np.random.Generator):
        if num_tasks < 1 or h < 1:
            raise ValueError("num_tasks and h must be >= 1")
        self.num_tasks = num_tasks
        self.h = h
        self.E = Tensor(rng.normal(0.0, np.sqrt(2.0 / h), size=(num_tasks, h)),
                        requires_grad=True)

    def row(self, task_id: int) -> Tensor:
        if not 0 <= task_id < self.num_tasks:
            raise ValueError(f"unknown task_id {task_id}")
        return T.take_row(self.E, task_id)

    def append_row(self, row: np.ndarray) -> None:
        """Register one more task (few-shot transfer path)."""
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.h,):
            raise ValueError(f"embedding row must have shape ({self.h},)")
        self.E = Tensor(np.vstack([self.E.data, row]), requires_grad=True)
        self.num_tasks += 1


class RankGate:
    """Linear gate mapping a task embedding to logits over the r rank experts.

    Zero-initialized so every task starts with a uniform rank distribution;
    with ties breaking to the lowest rank, training begins at rank 1 and a
    task climbs only when its current expert stops paying off.
    """

    def __init__(self, r: int, h: int):
        if r < 1 or h < 1:
            raise ValueError("r and h must be >= 1")
        self.r = r
        self.h = h
        self.W_g = Tensor(np.zeros((r, h)), requires_grad=True)
        self.b_g = Tensor(np.zeros(r), requires_grad=True)

    def forward(self, e: Tensor) -> Tensor:
        """softmax(W_g e + b_g), a probability vector of length r."""
        return T.softmax(T.add(T.matmul(self.W_g, e), self.b_g), temperature=1.0)

    def probabilities(self, e_row: np.ndarray) -> np.ndarray:
        """Graph-free gate evaluation for diagnostics."""
        z = self.W_g.data @ e_row + self.b_g.data
        z = z - z.max()
        p = np.exp(z)
        return p / p.sum()


def ste_select(p: Tensor, r_t: int) -> Tensor:
    """Straight-through multiplier for the selected rank.

    Forward value is exactly 1.0 (the one-hot entry at the argmax); backward
    routes the upstream gradient untouched into entry r_t - 1 of p, via
    p + sg[one_hot(p) - p] followed by indexing.
    """
    if p.ndim != 1:
        raise ValueError("ste_select expects a probability vector")
    idx = int(np.argmax(p.data))
    if r_t != idx + 1:
        raise ValueError(f"r_t={r_t} inconsistent with argmax(p)={idx + 1}")
    hard = T.one_hot(idx, p.shape[0])
    surrogate = T.add(p, T.stop_gradient(T.sub(hard, p)))
    return T.take(surrogate, idx)


@dataclass
class SelectionEvent:
    task_id: int
    rank: int


class MoreLayer:
    """A low-rank adapter whose active rank prefix is chosen per task.

    Ablation switches:
      disable_linear_scaling -- drop the selected_rank / num_tasks factor
      soft_selection         -- probability-weighted sum over all rank
                                prefixes instead of the argmax expert
      disable_ste            -- argmax routing without the straight-through
                                path (gate and embeddings get no gradient
                                from the adapter output)
      no_task_embeddings     -- feed the gate a constant vector instead of a
                                task embedding (selection becomes task-blind)
    """

    def __init__(self, adapter: LoraAdapter, num_tasks: int, h: int,
                 rng: np.random.Generator, *,
                 disable_linear_scaling: bool = False,
                 soft_selection: bool = False,
                 disable_ste: bool = False,
                 no_task_embeddings: bool = False):
        if num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        self.adapter = adapter
        self.num_tasks = num_tasks
        # the linear-scaling denominator is captured at build time and does
        # not move when extra tasks are registered later (transfer runs)
        self.scale_denominator = num_tasks
        self.embeddings = TaskEmbeddingTable(num_tasks, h, rng)
        self.gate = RankGate(adapter.r, h)
        self.mode = TRAIN_GATED
        self.frozen_map: np.ndarray | None = None
        self.disable_linear_scaling = disable_linear_scaling
        self.soft_selection = soft_selection
        self.disable_ste = disable_ste
        self.no_task_embeddings = no_task_embeddings
        self.log_selections = False
        self.selection_log: list[SelectionEvent] = []

    @property
    def r(self) -> int:
        return self.adapter.r

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.adapter.A, "B": self.adapter.B,
                "W_g": self.gate.W_g, "b_g": self.gate.b_g,
                "E": self.embeddings.E}

    def trainable_parameters(self) -> dict[str, Tensor]:
        """Parameters still updated in the current mode."""
        if self.mode == FROZEN_MAPPING:
            return {"A": self.adapter.A, "B": self.adapter.B}
        params = self.parameters()
        if self.no_task_embeddings:
            params.pop("E")
        return params

    # -- selection ---------------------------------------------------------
    def _gate_input(self, task_id: int) -> Tensor:
        if self.no_task_embeddings:
            self._check_task(task_id)
            return Tensor(np.ones(self.embeddings.h))
        return self.embeddings.row(task_id)

    def gate_forward(self, task_id: int) -> tuple[Tensor, int]:
        """Probability vector over rank experts and the selected 1-based rank
        (ties break to the lowest rank)."""
        p = self.gate.forward(self._gate_input(task_id))
        r_t = 1 + int(np.argmax(p.data))
        return p, r_t

    def current_rank(self, task_id: int) -> int:
        """Graph-free selected rank for diagnostics and freezing."""
        if self.mode == FROZEN_MAPPING:
            return int(self.frozen_map[task_id])
        self._check_task(task_id)
        e_row = np.ones(self.embeddings.h) if self.no_task_embeddings \
            else self.embeddings.E.data[task_id]
        p = self.gate.probabilities(e_row)
        return 1 + int(np.argmax(p))

    def _rank_scale(self, r_t: int) -> float:
        return 1.0 if self.disable_linear_scaling else r_t / self.scale_denominator

    def _prefix_update(self, x: Tensor, r_t: int, rows: bool) -> Tensor:
        """scale * B_t A_t x for the rank-r_t prefix (no STE multiplier)."""
        A_t = T.slice_rows(self.adapter.A, r_t)
        B_t = T.slice_cols(self.adapter.B, r_t)
        if rows:
            update = T.matmul(T.matmul(x, T.transpose_last(A_t)), T.transpose_last(B_t))
        else:
            update = T.matmul(B_t, T.matmul(A_t, x))
        return T.mul(update, self._rank_scale(r_t))

    def _soft_update(self, x: Tensor, p: Tensor, rows: bool) -> Tensor:
        """Probability-weighted sum over all rank prefixes.

        sum_j p_j s_j B_j A_j x  ==  B diag(w) A x  with  w_i = sum_{j>=i} p_j s_j,
        where s_j is the per-rank scale; differentiable in p.
        """
        r = self.adapter.r
        scales = np.array([self._rank_scale(j) for j in range(1, r + 1)])
        upper = np.triu(np.ones((r, r)))  # upper[i, j] = 1 for j >= i
        w = T.matmul(Tensor(upper), T.mul(p, Tensor(scales)))
        weighted_A = T.mul(T.reshape(w, (r, 1)), self.adapter.A)
        if rows:
            return T.matmul(T.matmul(x, T.transpose_last(weighted_A)),
                            T.transpose_last(self.adapter.B))
        return T.matmul(self.adapter.B, T.matmul(weighted_A, x))

    def _contribution(self, x: Tensor, task_id: int, rows: bool) -> Tensor:
        if self.mode == FROZEN_MAPPING:
            return self._prefix_update(x, int(self.frozen_map[task_id]), rows)

        p, r_t = self.gate_forward(task_id)
        if self.log_selections:
            self.selection_log.append(SelectionEvent(task_id, r_t))
        if self.soft_selection:
            return self._soft_update(x, p, rows)
        update = self._prefix_update(x, r_t, rows)
        if self.disable_ste:
            return update
        return T.mul(update, ste_select(p, r_t))

    # -- forward -----------------------------------------------------------
    def forward(self, x: Tensor, task_id: int) -> Tensor:
        """Column convention: x is (d,) or (d, n)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[0] != self.adapter.d:
            raise ValueError(f"input contracting dimension {x.shape[0]} != {self.adapter.d}")
        self._check_task(task_id)
        base = T.matmul(self.adapter.w0, x)
        return T.add(base, self._contribution(x, task_id, rows=False))

    def forward_rows(self, h: Tensor, task_id: int) -> Tensor:
        """Row-activation convention: h (..., d) -> (..., m)."""
        if h.shape[-1] != self.adapter.d:
            raise ValueError(f"input feature dimension {h.shape[-1]} != {self.adapter.d}")
        self._check_task(task_id)
        base = T.matmul(h, T.transpose_last(self.adapter.w0))
        return T.add(base, self._contribution(h, task_id, rows=True))

    def _check_task(self, task_id: int) -> None:
        if not 0 <= task_id < self.num_tasks:
            raise ValueError(f"unknown task_id {task_id}")

    def register_extra_task(self, embedding_row: np.ndarray) -> int:
        """Add a task after build (transfer runs): grows the embedding table
        but leaves the scaling denominator untouched."""
        if self.mode != TRAIN_GATED:
            raise ValueError("cannot register tasks on a frozen layer")
        self.embeddings.append_row(embedding_row)
        self.num_tasks += 1
        return self.num_tasks - 1

    # -- freezing ----------------------------------------------------------
    def freeze_mapping(self) -> "MoreLayer":
        """Record the selected rank for every task and bypass the gate from
        now on; forwards become gate-free and bit-identical to the gated path."""
        if self.mode != TRAIN_GATED:
            raise ValueError("layer is already frozen")
        self.frozen_map = np.array([self.current_rank(t) for t in range(self.num_tasks)],
                                   dtype=np.int64)
        self.mode = FROZEN_MAPPING
        return self


def allocation_histogram(layers: list[MoreLayer]) -> np.ndarray:
    """Task x rank count matrix: how many layers select each rank for each
    task under current weights.  Rows sum to the number of layers."""
    if not layers:
        raise ValueError("no layers given")
    num_tasks = layers[0].num_tasks
    r = max(layer.r for layer in layers)
    counts = np.zeros((num_tasks, r), dtype=np.int64)
    for layer in layers:
        if layer.num_tasks != num_tasks:
            raise ValueError("layers disagree on task count")
        for t in range(num_tasks):
            counts[t, layer.current_rank(t) - 1] += 1
    return counts
