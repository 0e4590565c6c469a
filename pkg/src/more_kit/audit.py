"""Closed-form trainable-parameter budgets and live-count verification.

Budgets per method, with L layers, rank r, model dims (m, d), n parallel
modules, T tasks, and task-embedding dimension h:

    lora       6Lr(m + d)
    multilora  6nLr(m + d) + 6Ld
    mixlora    2nLr(m + d) + 2Lnm
    moelora    6Lr(m + d) + 6Lh(n + T)
    more       6Lr(m + d) + 6Lh(r + T)

The gate bias (r per site, 6Lr total) is not part of the published rank-expert
budget; the audit reports it separately instead of folding it in.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .transformer import Backbone

METHODS = ("lora", "multilora", "mixlora", "moelora", "more")


def budget(method: str, L: int, r: int, m: int, d: int,
           n: int | None = None, T: int | None = None, h: int | None = None) -> int:
    """Exact trainable-parameter count for one method."""
    for name, value in (("L", L), ("r", r), ("m", m), ("d", d)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1")
    if method == "lora":
        return 6 * L * r * (m + d)
    if method == "multilora":
        if n is None:
            raise ValueError("multilora budget needs n")
        return 6 * n * L * r * (m + d) + 6 * L * d
    if method == "mixlora":
        if n is None:
            raise ValueError("mixlora budget needs n")
        return 2 * n * L * r * (m + d) + 2 * L * n * m
    if method == "moelora":
        if n is None or T is None or h is None:
            raise ValueError("moelora budget needs n, T, and h")
        return 6 * L * r * (m + d) + 6 * L * h * (n + T)
    if method == "more":
        if T is None or h is None:
            raise ValueError("more budget needs T and h")
        return 6 * L * r * (m + d) + 6 * L * h * (r + T)
    raise ValueError(f"unknown method '{method}' (expected one of {METHODS})")


@dataclass
class SiteCount:
    name: str
    adapter_params: int     # A and B
    selector_params: int    # gate weight + task embeddings
    bias_params: int        # gate bias, outside the published formula
    expected_adapter: int
    expected_selector: int

    @property
    def mismatch(self) -> bool:
        return (self.adapter_params != self.expected_adapter
                or self.selector_params != self.expected_selector)


@dataclass
class AuditReport:
    method: str
    budget_total: int
    live_total: int
    live_adapter: int
    live_selector: int
    bias_unaccounted: int
    exact: bool
    inference_effective: int      # after task->rank freezing
    selector_inference_skippable: bool
    mismatched_sites: list[str] = field(default_factory=list)
    sites: list[SiteCount] = field(default_factory=list)

    def to_json(self) -> str:
        payload = asdict(self)
        payload["status"] = "exact" if self.exact else "mismatch"
        return json.dumps(payload, indent=2, sort_keys=True)


def audit(model: Backbone) -> AuditReport:
    """Compare the live per-site trainable counts of a built model against
    the closed-form budget; mismatching sites are report content."""
    cfg = model.config
    L = cfg.num_layers
    m = d = cfg.width
    if model.adapter_mode == "none":
        raise ValueError("nothing to audit: model has no adapters")
    r = model.r
    method = "lora" if model.adapter_mode == "lora_fixed" else "more"
    T = model.num_tasks
    h = model.h

    sites: list[SiteCount] = []
    for site in model.sites:
        adapter = site.adapter
        if method == "lora":
            a_count = adapter.A.data.size + adapter.B.data.size
            s_count, b_count = 0, 0
            exp_s = 0
        else:
            a_count = adapter.adapter.A.data.size + adapter.adapter.B.data.size
            s_count = adapter.gate.W_g.data.size + adapter.embeddings.E.data.size
            b_count = adapter.gate.b_g.data.size
            exp_s = h * (r + T)
        out_w, in_w = site.base.shape
        sites.append(SiteCount(
            name=site.name,
            adapter_params=a_count,
            selector_params=s_count,
            bias_params=b_count,
            expected_adapter=r * (out_w + in_w),
            expected_selector=exp_s,
        ))

    live_adapter = sum(s.adapter_params for s in sites)
    live_selector = sum(s.selector_params for s in sites)
    bias_total = sum(s.bias_params for s in sites)
    expected_total = budget(method, L, r, m, d, T=T, h=h)
    live_total = live_adapter + live_selector
    mismatched = [s.name for s in sites if s.mismatch]
    exact = live_total == expected_total and not mismatched

    frozen = model.adapter_mode == "more" and model.frozen_mapping
    return AuditReport(
        method=method,
        budget_total=expected_total,
        live_total=live_total,
        live_adapter=live_adapter,
        live_selector=live_selector,
        bias_unaccounted=bias_total,
        exact=exact,
        inference_effective=budget("lora", L, r, m, d) if (method == "more" and frozen)
        else live_total,
        selector_inference_skippable=frozen,
        mismatched_sites=mismatched,
        sites=sites,
    )
