"""Causal tracing over MLP outputs: which layers carry the evidence for one prediction?

A clean run caches every layer's MLP output.  Corrupted runs add Gaussian
noise to the patch-token embeddings; restored runs are corrupted runs in
which one layer's MLP output is put back to its clean value.  The indirect
effect of layer ``l`` is the recovered probability of the true label.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import json

import numpy as np

from .errors import ConfigError
from .model import HookSite, TinyViT, embed_tokens, forward, softmax

FLAG_MARGIN = 0.01


@dataclass(frozen=True)
class TraceConfig:
    noise_sigma: float = 0.1
    n_runs: int = 32
    top_k: int = 3
    seed: int = 0
    restore_site: str = "mlp_out"
    restore_tokens: str = "all"

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be at least 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceResult:
    ie_per_layer: np.ndarray
    p_clean: float
    p_corrupt_mean: float
    selected_layers: list[int]
    corruption_failed: bool = False
    label: int = -1

    def to_dict(self) -> dict:
        return {
            "ie_per_layer": [float(x) for x in self.ie_per_layer],
            "p_clean": self.p_clean,
            "p_corrupt_mean": self.p_corrupt_mean,
            "selected_layers": list(self.selected_layers),
            "corruption_failed": self.corruption_failed,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceResult":
        return cls(np.asarray(d["ie_per_layer"], dtype=np.float64), d["p_clean"], d["p_corrupt_mean"],
                   [int(x) for x in d["selected_layers"]], d.get("corruption_failed", False), d.get("label", -1))


def corrupt_embedding(token_states: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add N(0, sigma^2) noise to every row except row 0 (CLS).  Works on (T, d) or (B, T, d)."""
    x = np.asarray(token_states)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=x.shape) * sigma
    noise[..., 0, :] = 0.0
    return (x + noise).astype(x.dtype)


def select_layers(ie_per_layer, top_k: int) -> list[int]:
    """Indices of the ``top_k`` largest values, ascending; ties go to the lower index."""
    ie = np.asarray(ie_per_layer, dtype=np.float64)
    if not 0 <= top_k <= len(ie):
        raise ConfigError(f"top_k={top_k} out of range for {len(ie)} layers")
    order = np.lexsort((np.arange(len(ie)), -ie))
    return sorted(int(i) for i in order[:top_k])


def _true_prob(logits, label):
    return softmax(logits.astype(np.float64))[:, label]


def indirect_effects(model: TinyViT, image, label: int, config: TraceConfig = TraceConfig()) -> TraceResult:
    n_layers = model.config.n_layers
    if config.top_k > n_layers:
        raise ConfigError(f"top_k={config.top_k} exceeds {n_layers} layers")
    sites = [HookSite(l, config.restore_site, config.restore_tokens) for l in range(n_layers)]
    clean_logits, clean = forward(model, image, capture=set(sites))
    p_clean = float(_true_prob(clean_logits, label)[0])

    h0 = embed_tokens(model, image)[0]
    runs = np.stack([corrupt_embedding(h0, config.noise_sigma, config.seed + r) for r in range(config.n_runs)])
    corrupt_logits, _ = forward(model, embed=runs)
    p_corrupt = _true_prob(corrupt_logits, label)

    ie = np.zeros((config.n_runs, n_layers))
    for l, hs in enumerate(sites):
        restored_logits, _ = forward(model, embed=runs, patches={hs: clean[hs][0]})
        ie[:, l] = _true_prob(restored_logits, label) - p_corrupt
    mean_ie = ie.mean(axis=0)
    p_corrupt_mean = float(p_corrupt.mean())
    return TraceResult(
        ie_per_layer=mean_ie,
        p_clean=p_clean,
        p_corrupt_mean=p_corrupt_mean,
        selected_layers=select_layers(mean_ie, config.top_k),
        corruption_failed=p_clean <= p_corrupt_mean + FLAG_MARGIN,
        label=int(label),
    )


def trace_set(model: TinyViT, samples, config: TraceConfig = TraceConfig()) -> list[TraceResult]:
    return [indirect_effects(model, samples.images[i], int(samples.labels[i]), config) for i in range(len(samples))]


def save_traces(path, traces: list[TraceResult], meta: dict | None = None) -> None:
    doc = {"schema": "xedit.trace/1", "meta": meta or {}, "traces": [t.to_dict() for t in traces]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_traces(path) -> list[TraceResult]:
    with open(path) as fh:
        doc = json.load(fh)
    return [TraceResult.from_dict(d) for d in doc["traces"]]
