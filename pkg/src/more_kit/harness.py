"""Training loop, evaluation, few-shot transfer, and diagnostic exports."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import LossReport, contrastive_loss, generation_loss, total_loss
from .optim import AdamW
from .rank_experts import allocation_histogram
from .sampling import TaskRegistry
from .synth import Sample, SyntheticTask, SyntheticTaskSpec, evaluate, generate_tasks
from .tensor import NumericsError, Tensor
from .transformer import Backbone


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""

    def __init__(self, step: int, cause: str):
        super().__init__(f"training diverged at step {step}: {cause}")
        self.step = step


@dataclass
class RunMetrics:
    """Append-only record stream for one run, stamped with seed and step."""
    seed: int
    records: list[dict] = field(default_factory=list)

    def append(self, kind: str, step: int, **payload) -> dict:
        record = {"kind": kind, "step": step, "seed": self.seed}
        record.update(payload)
        self.records.append(record)
        return record

    def last_eval(self) -> dict | None:
        for record in reversed(self.records):
            if record["kind"] == "eval":
                return record
        return None


@contextlib.contextmanager
def _selection_logging(model: Backbone, enabled: bool):
    layers = model.more_layers()
    previous = [l.log_selections for l in layers]
    for l in layers:
        l.log_selections = enabled
    try:
        yield
    finally:
        for l, prev in zip(layers, previous):
            l.log_selections = prev


def batch_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.stack([s.tokens for s in samples])
    targets = np.array([s.label for s in samples], dtype=np.int64)
    return ids, targets


def compute_losses(model: Backbone, ids: np.ndarray, targets: np.ndarray,
                   task_id: int | None, lam: float, tau: float,
                   literal_sign: bool = False) -> tuple[Tensor, LossReport]:
    """Batch loss: token cross-entropy at the label position plus the
    per-site contrastive terms averaged across rank-expert sites."""
    dists, pooled = model.forward(ids, task_id)
    seq = ids.shape[1]
    last = T.reshape(T.narrow(dists, 1, seq - 1, 1),
                     (ids.shape[0], model.config.vocab_size))
    gen = generation_loss(last, targets)

    use_cl = lam != 0.0 and pooled and not model.ablations.get("no_task_embeddings")
    if use_cl:
        terms = []
        for name, reps in pooled.items():
            layer = model.site(name).adapter
            if reps.shape[1] != layer.embeddings.h:
                raise ValueError(
                    f"site {name}: representation width {reps.shape[1]} != "
                    f"embedding dimension {layer.embeddings.h}; the contrastive "
                    "loss needs h == width == ffn_width")
            terms.append(contrastive_loss(reps, task_id, layer.embeddings.E, tau,
                                          literal_sign=literal_sign))
        con = terms[0]
        for term in terms[1:]:
            con = T.add(con, term)
        con = T.mul(con, 1.0 / len(terms))
    else:
        con = Tensor(0.0)
    loss = total_loss(gen, con, lam)
    return loss, LossReport.build(gen.item(), con.item(), lam)


def _eval_record(model: Backbone, tasks: list[SyntheticTask]) -> dict:
    accuracy = evaluate(model, tasks)
    payload = {"accuracy": accuracy,
               "mean_accuracy": float(np.mean(list(accuracy.values())))}
    if model.more_layers():
        payload["allocation"] = allocation_histogram(model.more_layers()).tolist()
    return payload


def train(model: Backbone, registry: TaskRegistry, tasks: list[SyntheticTask],
          *, steps: int, batch_size: int, lr: float, lam: float, tau: float,
          weight_decay: float = 0.0, warmup_frac: float = 0.1,
          seed: int = 0, log_every: int = 10, eval_every: int = 100,
          literal_sign: bool = False) -> RunMetrics:
    """Gradient descent over the combined loss with balanced task batches.

    Deterministic given the seed; raises TrainingDiverged if any op yields a
    non-finite value.
    """
    metrics = RunMetrics(seed=seed)
    sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    optimizer = AdamW(model.named_trainable(), lr=lr, weight_decay=weight_decay,
                      total_steps=steps, warmup_frac=warmup_frac)

    metrics.append("eval", 0, **_eval_record(model, tasks))
    if steps == 0:
        return metrics

    hash_before = model.frozen_hash()
    with _selection_logging(model, True):
        for step in range(1, steps + 1):
            task_id, samples = registry.next_batch(batch_size, sample_rng)
            ids, targets = batch_arrays(samples)
            try:
                loss, report = compute_losses(
                    model, ids, targets,
                    task_id if model.adapter_mode == "more" else None,
                    lam, tau, literal_sign)
                optimizer.zero_grad()
                loss.backward()
            except NumericsError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            lr_now = optimizer.current_lr()
            optimizer.step()
            if step % log_every == 0 or step == steps:
                metrics.append("loss", step, task=registry.tasks[task_id].name,
                               lr=lr_now, **report.to_dict())
            if step % eval_every == 0 or step == steps:
                with _selection_logging(model, False):
                    metrics.append("eval", step, **_eval_record(model, tasks))
    if model.frozen_hash() != hash_before:
        raise RuntimeError("frozen backbone changed during training")
    return metrics


# -- few-shot transfer -------------------------------------------------------

def _nearest_source_task(model: Backbone, shot_ids: np.ndarray) -> int:
    """Source task whose embeddings best match the new samples' mean
    representations, scored under that task's own routing and averaged
    across rank-expert sites."""
    scores = []
    num_source = model.more_layers()[0].embeddings.num_tasks
    for t in range(num_source):
        _, pooled = model.forward(shot_ids, task_id=t)
        sims = []
        for name, reps in pooled.items():
            e_row = model.site(name).adapter.embeddings.E.data[t]
            h_bar = reps.data.mean(axis=0)
            denom = np.linalg.norm(e_row) * np.linalg.norm(h_bar)
            sims.append(float(e_row @ h_bar / denom) if denom > 0 else 0.0)
        scores.append(float(np.mean(sims)))
    return int(np.argmax(scores))


def few_shot_transfer(model: Backbone, new_task: SyntheticTask, k_shots: int,
                      init_policy: str, *, steps: int, batch_size: int,
                      lr: float, lam: float, tau: float, seed: int,
                      weight_decay: float = 0.0, warmup_frac: float = 0.1,
                      ) -> dict:
    """Register a new task on a trained model and fine-tune on k examples.

    init_policy 'kaiming' draws fresh embedding rows; 'copy_nearest' copies
    the globally nearest source task's row at every site.
    """
    if k_shots < 1:
        raise ValueError("k_shots must be >= 1")
    if init_policy not in ("kaiming", "copy_nearest"):
        raise ValueError(f"unknown init_policy '{init_policy}'")
    layers = model.more_layers()
    if not layers:
        raise ValueError("few-shot transfer needs a rank-expert model")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    shots = new_task.train[:k_shots]
    if len(shots) < k_shots:
        raise ValueError(f"new task has only {len(shots)} training samples")
    shot_ids, shot_targets = batch_arrays(shots)

    copied_from: int | None = None
    if init_policy == "copy_nearest":
        copied_from = _nearest_source_task(model, shot_ids)
    new_id = None
    for layer in layers:
        if init_policy == "copy_nearest":
            row = layer.embeddings.E.data[copied_from].copy()
        else:
            row = rng.normal(0.0, np.sqrt(2.0 / layer.embeddings.h),
                             size=layer.embeddings.h)
        new_id = layer.register_extra_task(row)

    if steps > 0:
        optimizer = AdamW(model.named_trainable(), lr=lr,
                          weight_decay=weight_decay, total_steps=steps,
                          warmup_frac=warmup_frac)
        for step in range(1, steps + 1):
            idx = rng.integers(0, len(shots), size=min(batch_size, len(shots)))
            ids = shot_ids[idx]
            targets = shot_targets[idx]
            try:
                loss, _ = compute_losses(model, ids, targets, new_id, lam, tau)
                optimizer.zero_grad()
                loss.backward()
            except NumericsError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            optimizer.step()

    accuracy = evaluate(model, [new_task])[new_task.spec.name]
    return {"task": new_task.spec.name, "task_id": new_id, "k_shots": k_shots,
            "init_policy": init_policy, "copied_from": copied_from,
            "steps": steps, "seed": seed, "accuracy": accuracy}


def make_transfer_task(config, backbone_seed: int, spec: SyntheticTaskSpec,
                       existing: list[SyntheticTask], seed: int,
                       max_rank: int) -> SyntheticTask:
    """Generate one extra task whose dataset is disjoint from the source tasks."""
    specs = [t.spec for t in existing] + [spec]
    _, tasks = generate_tasks(config, backbone_seed, specs, seed, max_rank)
    return tasks[-1]


# -- exports ------------------------------------------------------------------

def export_embeddings(model: Backbone, path) -> int:
    """Write every site's task-embedding rows as CSV
    (task_id, layer, site, e0..e{h-1}); returns the row count.

    Floats are written with shortest round-trip repr, so re-parsing
    reproduces the float64 values bit-for-bit.
    """
    layers = model.more_layers()
    if not layers:
        raise ValueError("model has no task embeddings to export")
    h = layers[0].embeddings.h
    rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task_id,layer,site," + ",".join(f"e{i}" for i in range(h)) + "\n")
        for site in model.sites:
            layer_idx, proj = site.name.split(".")
            adapter = site.adapter
            for t in range(adapter.embeddings.num_tasks):
                values = ",".join(repr(float(x)) for x in adapter.embeddings.E.data[t])
                fh.write(f"{t},{layer_idx.removeprefix('layer')},{proj},{values}\n")
                rows += 1
    return rows
