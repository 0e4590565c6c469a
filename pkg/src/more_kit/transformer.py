"""Frozen encoder-only transformer exposing six adapter sites per layer.

Every block adapts its attention projections (q, k, v, o) and FFN projections
(wi, wo).  The backbone itself (embeddings, layer norms, projection bases,
token head) is random-initialized, then frozen; only adapters train.
Classification-style tasks predict a label token at the final sequence
position through the vocabulary head, so token cross-entropy applies directly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .lora import LoraAdapter
from .rank_experts import MoreLayer
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v", "o", "wi", "wo")
ADAPTER_MODES = ("none", "lora_fixed", "more")
_LN_EPS = 1e-5


@dataclass
class BackboneConfig:
    num_layers: int
    width: int  # model dimension; projections are square (m = d)
    ffn_width: int
    num_heads: int
    vocab_size: int
    max_seq_len: int

    def validate(self) -> None:
        for name in ("num_layers", "width", "ffn_width", "num_heads",
                     "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.num_heads != 0:
            raise ValueError(f"width {self.width} not divisible by "
                             f"num_heads {self.num_heads}")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    centered = T.sub(x, mu)
    var = T.mean(T.mul(centered, centered), axis=-1, keepdims=True)
    inv = T.power(T.add(var, _LN_EPS), -0.5)
    return T.add(T.mul(T.mul(centered, inv), gain), bias)


class AdapterSite:
    """One adapted projection: a frozen base matrix optionally wrapped by a
    fixed-rank adapter or a gated rank-expert layer."""

    def __init__(self, name: str, base: np.ndarray,
                 adapter: LoraAdapter | MoreLayer | None):
        self.name = name
        self.adapter = adapter
        if isinstance(adapter, MoreLayer):
            self.base = adapter.adapter.w0
        elif isinstance(adapter, LoraAdapter):
            self.base = adapter.w0
        else:
            self.base = Tensor(base)

    @property
    def in_width(self) -> int:
        return self.base.shape[1]

    def apply(self, h: Tensor, task_id: int | None) -> Tensor:
        if isinstance(self.adapter, MoreLayer):
            if task_id is None:
                raise ValueError(f"site {self.name} needs a task_id")
            return self.adapter.forward_rows(h, task_id)
        if isinstance(self.adapter, LoraAdapter):
            return self.adapter.forward_rows(h)
        return T.matmul(h, T.transpose_last(self.base))

    def trainable(self) -> dict[str, Tensor]:
        if isinstance(self.adapter, MoreLayer):
            return {f"{self.name}.{k}": v
                    for k, v in self.adapter.trainable_parameters().items()}
        if isinstance(self.adapter, LoraAdapter):
            return {f"{self.name}.{k}": v for k, v in self.adapter.parameters().items()}
        return {}

    def all_adapter_params(self) -> dict[str, Tensor]:
        if isinstance(self.adapter, MoreLayer):
            return {f"{self.name}.{k}": v for k, v in self.adapter.parameters().items()}
        return self.trainable()


class Backbone:
    """Frozen transformer plus per-site adapters; built via `build`."""

    def __init__(self, config: BackboneConfig, adapter_mode: str, seed: int,
                 r: int | None = None, num_tasks: int | None = None,
                 h: int | None = None, alpha_scaling: float = 1.0,
                 ablations: dict | None = None):
        config.validate()
        if adapter_mode not in ADAPTER_MODES:
            raise ValueError(f"unknown adapter_mode '{adapter_mode}'")
        if adapter_mode != "none":
            if r is None or r < 1:
                raise ValueError("adapter modes need a rank r >= 1")
            if r > config.width:
                raise ValueError(f"rank {r} exceeds width {config.width}")
        if adapter_mode == "more":
            if num_tasks is None or num_tasks < 1:
                raise ValueError("more mode needs num_tasks >= 1")
            if h is None or h < 1:
                raise ValueError("more mode needs an embedding dimension h >= 1")
        self.config = config
        self.adapter_mode = adapter_mode
        self.seed = seed
        self.r = r
        self.num_tasks = num_tasks
        self.h = h
        self.alpha_scaling = alpha_scaling
        self.ablations = dict(ablations or {})

        # separate streams so the frozen backbone is identical across
        # adapter modes for the same seed
        frozen_ss, adapter_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(frozen_ss)
        arng = np.random.default_rng(adapter_ss)
        cfg = config
        m, F, V = cfg.width, cfg.ffn_width, cfg.vocab_size
        self.frozen: dict[str, Tensor] = {}
        self.frozen["tok_emb"] = Tensor(rng.normal(size=(V, m)))
        self.frozen["pos_emb"] = Tensor(rng.normal(size=(cfg.max_seq_len, m)))

        flags = {k: bool(self.ablations.get(k, False))
                 for k in ("disable_linear_scaling", "soft_selection",
                           "disable_ste", "no_task_embeddings")}
        self.sites: list[AdapterSite] = []
        for layer in range(cfg.num_layers):
            for ln in ("ln1", "ln2"):
                self.frozen[f"layer{layer}.{ln}.gain"] = Tensor(np.ones(m))
                self.frozen[f"layer{layer}.{ln}.bias"] = Tensor(np.zeros(m))
            for proj in PROJECTIONS:
                out_w, in_w = {
                    "q": (m, m), "k": (m, m), "v": (m, m), "o": (m, m),
                    "wi": (F, m), "wo": (m, F),
                }[proj]
                base = rng.normal(0.0, 1.0 / np.sqrt(in_w), size=(out_w, in_w))
                name = f"layer{layer}.{proj}"
                adapter: LoraAdapter | MoreLayer | None = None
                if adapter_mode == "lora_fixed":
                    adapter = LoraAdapter(base, r, arng, alpha_scaling)
                elif adapter_mode == "more":
                    adapter = MoreLayer(LoraAdapter(base, r, arng, alpha_scaling),
                                        num_tasks, h, arng, **flags)
                site = AdapterSite(name, base, adapter)
                self.sites.append(site)
                self.frozen[f"{name}.w0"] = site.base
        self.frozen["final_ln.gain"] = Tensor(np.ones(m))
        self.frozen["final_ln.bias"] = Tensor(np.zeros(m))
        self.frozen["head"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), size=(V, m)))

    # -- parameter access ---------------------------------------------------
    def named_trainable(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for site in self.sites:
            params.update(site.trainable())
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        """All adapter parameters plus frozen backbone arrays (checkpointing)."""
        params: dict[str, Tensor] = {}
        for site in self.sites:
            params.update(site.all_adapter_params())
        params.update(self.frozen)
        return params

    def more_layers(self) -> list[MoreLayer]:
        return [s.adapter for s in self.sites if isinstance(s.adapter, MoreLayer)]

    def site(self, name: str) -> AdapterSite:
        for s in self.sites:
            if s.name == name:
                return s
        raise KeyError(name)

    def frozen_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.frozen):
            digest.update(name.encode())
            digest.update(self.frozen[name].data.tobytes())
        return digest.hexdigest()

    def freeze_mapping(self) -> None:
        for layer in self.more_layers():
            layer.freeze_mapping()

    @property
    def frozen_mapping(self) -> bool:
        layers = self.more_layers()
        return bool(layers) and all(l.mode == "frozen_mapping" for l in layers)

    # -- forward -------------------------------------------------------------
    def forward(self, token_ids: np.ndarray, task_id: int | None = None,
                collect_attention: list | None = None
                ) -> tuple[Tensor, dict[str, Tensor]]:
        """Token ids (batch, seq) -> per-position vocabulary distributions
        (batch, seq, vocab) plus, per rank-expert site, the mean-pooled input
        activation used as the sample representation."""
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ValueError("token_ids must be (batch, seq)")
        cfg = self.config
        if ids.shape[1] > cfg.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds "
                             f"max_seq_len {cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError("token id out of vocabulary range")

        seq = ids.shape[1]
        x = Tensor(self.frozen["tok_emb"].data[ids] + self.frozen["pos_emb"].data[:seq])
        pooled: dict[str, Tensor] = {}

        heads = cfg.num_heads
        head_dim = cfg.width // heads
        inv_sqrt = 1.0 / np.sqrt(head_dim)
        for layer in range(cfg.num_layers):
            x1 = layer_norm(x, self.frozen[f"layer{layer}.ln1.gain"],
                            self.frozen[f"layer{layer}.ln1.bias"])
            q = self._apply_site(f"layer{layer}.q", x1, task_id, pooled)
            k = self._apply_site(f"layer{layer}.k", x1, task_id, pooled)
            v = self._apply_site(f"layer{layer}.v", x1, task_id, pooled)
            ctx_heads = []
            for i in range(heads):
                q_h = T.narrow(q, -1, i * head_dim, head_dim)
                k_h = T.narrow(k, -1, i * head_dim, head_dim)
                v_h = T.narrow(v, -1, i * head_dim, head_dim)
                scores = T.mul(T.matmul(q_h, T.transpose_last(k_h)), inv_sqrt)
                attn = T.softmax(scores)
                if collect_attention is not None:
                    collect_attention.append(attn)
                ctx_heads.append(T.matmul(attn, v_h))
            ctx = T.concat(ctx_heads, axis=-1)
            x = T.add(x, self._apply_site(f"layer{layer}.o", ctx, task_id, pooled))

            x2 = layer_norm(x, self.frozen[f"layer{layer}.ln2.gain"],
                            self.frozen[f"layer{layer}.ln2.bias"])
            act = T.tanh(self._apply_site(f"layer{layer}.wi", x2, task_id, pooled))
            x = T.add(x, self._apply_site(f"layer{layer}.wo", act, task_id, pooled))

        x = layer_norm(x, self.frozen["final_ln.gain"], self.frozen["final_ln.bias"])
        logits = T.matmul(x, T.transpose_last(self.frozen["head"]))
        return T.softmax(logits), pooled

    def _apply_site(self, name: str, h: Tensor, task_id: int | None,
                    pooled: dict[str, Tensor]) -> Tensor:
        site = self.site(name)
        if isinstance(site.adapter, MoreLayer):
            pooled[name] = T.mean(h, axis=1)  # (batch, in_width)
        return site.apply(h, task_id)

    def predict_labels(self, token_ids: np.ndarray, task_id: int | None = None) -> np.ndarray:
        """Argmax token at the final position, graph-free output."""
        dists, _ = self.forward(token_ids, task_id)
        return np.argmax(dists.data[:, -1, :], axis=-1)


def build(config: BackboneConfig, adapter_mode: str, seed: int,
          r: int | None = None, num_tasks: int | None = None,
          h: int | None = None, alpha_scaling: float = 1.0,
          ablations: dict | None = None) -> Backbone:
    return Backbone(config, adapter_mode, seed, r=r, num_tasks=num_tasks,
                    h=h, alpha_scaling=alpha_scaling, ablations=ablations)
