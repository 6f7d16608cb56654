"""Null-space constrained closed-form editing of MLP weights.

An MLP weight matrix ``W`` is read as a key-value memory: the CLS-token input
of the matrix is the key, its output the value.  Anchor keys ``K0`` define a
protected subspace; updates are right-multiplied by ``P``, the projector onto
the eigenvectors of ``K0 K0^T`` whose eigenvalues are at most the threshold,
so ``(W + dW P) K0 = W K0`` for those keys.  New values ``V1`` for edit keys
``K1`` come from a few gradient steps on the classification loss, and the
update solves

    min ||(W + dW P) K1 - V1||^2 + ||dW P Kp||^2 + ||dW P||^2

in closed form, ``dW = R K1^T P (Cp P + K1 K1^T P + I)^{-1}`` with
``R = V1 - W K1`` and ``Cp = Kp Kp^T`` the covariance of earlier edit keys.
Because ``dW (I - P) = 0`` for that solution, the applied update ``dW P``
equals ``dW`` and is the exact minimiser over the projected subspace.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import time

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, NumericalError, ShapeError
from .model import HookSite, TinyViT, embed_tokens, forward, gelu, gelu_grad, grad_wrt_site, predict
from .numerics import as_matrix, matmul, solve_spd, sym_eig

KEY_SITE = {"fc1": "mlp_in", "fc2": "mlp_hidden"}


@dataclass(frozen=True)
class EditConfig:
    eig_threshold: float = 1e-2
    target_steps: int = 5
    target_lr: float = 0.1
    edit_target: str = "fc2"
    top_k: int = 3
    # split each sample's residual over the target layers it has left
    spread_residual: bool = True

    def __post_init__(self):
        if self.eig_threshold <= 0:
            raise ConfigError("eig_threshold must be positive")
        if self.target_steps < 0:
            raise ConfigError("target_steps must be non-negative")
        if self.edit_target not in KEY_SITE:
            raise ConfigError(f"edit_target must be one of {sorted(KEY_SITE)}")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Projection:
    C0: np.ndarray
    anchor_count: int
    P: np.ndarray
    kept_dim: int


@dataclass
class ProjectionCache:
    eig_threshold: float
    entries: dict[tuple[int, str], Projection] = field(default_factory=dict)

    def get(self, layer: int, target: str) -> Projection:
        try:
            return self.entries[(layer, target)]
        except KeyError:
            raise ConfigError(f"no projector built for layer {layer} {target}") from None

    def save(self, path, meta: dict | None = None) -> None:
        tensors, info = {}, {}
        for (layer, target), e in sorted(self.entries.items()):
            tensors[f"{layer}.{target}.C0"] = e.C0
            tensors[f"{layer}.{target}.P"] = e.P
            info[f"{layer}.{target}"] = {"anchor_count": e.anchor_count, "kept_dim": e.kept_dim}
        save_tensors(path, tensors, kind="projection", dtype="f8",
                     meta={"eig_threshold": self.eig_threshold, "entries": info, **(meta or {})})

    @classmethod
    def load(cls, path) -> "ProjectionCache":
        tensors, manifest = load_tensors(path, kind="projection")
        meta = manifest["meta"]
        cache = cls(meta["eig_threshold"])
        for key, info in meta["entries"].items():
            layer, target = key.split(".")
            cache.entries[(int(layer), target)] = Projection(
                tensors[f"{key}.C0"], info["anchor_count"], tensors[f"{key}.P"], info["kept_dim"])
        return cache


@dataclass
class SequentialState:
    Cp: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    n_prior_keys: dict[tuple[int, str], int] = field(default_factory=dict)

    def cov(self, layer: int, target: str, dim: int) -> np.ndarray:
        return self.Cp.get((layer, target), np.zeros((dim, dim)))

    def add(self, layer: int, target: str, keys: np.ndarray) -> None:
        k = as_matrix(keys, "keys")
        key = (layer, target)
        self.Cp[key] = self.cov(layer, target, k.shape[0]) + k @ k.T
        self.n_prior_keys[key] = self.n_prior_keys.get(key, 0) + k.shape[1]

    def save(self, path, meta: dict | None = None) -> None:
        tensors = {f"{l}.{t}.Cp": c for (l, t), c in sorted(self.Cp.items())}
        counts = {f"{l}.{t}": n for (l, t), n in self.n_prior_keys.items()}
        save_tensors(path, tensors, kind="sequential", dtype="f8", meta={"n_prior_keys": counts, **(meta or {})})

    @classmethod
    def load(cls, path) -> "SequentialState":
        tensors, manifest = load_tensors(path, kind="sequential")
        state = cls()
        for key, n in manifest["meta"]["n_prior_keys"].items():
            layer, target = key.split(".")
            state.Cp[(int(layer), target)] = tensors[f"{key}.Cp"]
            state.n_prior_keys[(int(layer), target)] = n
        return state


@dataclass
class SampleOutcome:
    index: int
    layers: list[int]
    pred_before: int
    pred_after: int
    label: int
    delta_norms: dict[int, float]
    residual_before: dict[int, float]
    residual_after: dict[int, float]


@dataclass
class EditOutcome:
    samples: list[SampleOutcome] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def n_corrected(self) -> int:
        return sum(s.pred_after == s.label for s in self.samples)

    def to_dict(self) -> dict:
        return {"seconds": self.seconds, "n_corrected": self.n_corrected, "samples": [asdict(s) for s in self.samples]}


# ---------------------------------------------------------------------------
# keys and projectors


def _key_hook(layer: int, target: str) -> HookSite:
    return HookSite(layer, KEY_SITE[target], "cls_only")


def layer_keys(model: TinyViT, images, layers, target: str, batch: int = 256) -> dict[int, np.ndarray]:
    """CLS keys feeding ``target`` at each layer, as float64 (d_in, n) matrices."""
    sites = {l: _key_hook(l, target) for l in layers}
    chunks: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    for i in range(0, len(images), batch):
        _, trace = forward(model, images[i : i + batch], capture=set(sites.values()))
        for l, hs in sites.items():
            chunks[l].append(trace[hs].astype(np.float64))
    dim = model.fc_weight(0, target).shape[1]
    return {l: (np.concatenate(c).T if c else np.zeros((dim, 0))) for l, c in chunks.items()}


def accumulate_anchor_cov(model: TinyViT, anchors, layer: int, edit_target: str = "fc2"):
    """Non-central covariance ``C0 = sum_a k_a k_a^T`` of anchor keys.  Returns ``(C0, K)``."""
    keys = layer_keys(model, anchors.images, [layer], edit_target)[layer]
    return keys @ keys.T, keys.shape[1]


def build_projection(C0, eig_threshold: float = 1e-2, anchor_count: int | None = None):
    """Projector onto eigenvectors of ``C0`` with eigenvalue <= threshold.  Returns ``(P, kept_dim)``.

    With ``anchor_count`` the threshold applies to the per-anchor second
    moment ``C0 / anchor_count`` instead of the raw sum.
    """
    eig = sym_eig(C0)
    lam = eig.eigenvalues
    if anchor_count:
        lam = lam / anchor_count
    keep = lam <= eig_threshold
    u = eig.eigenvectors[:, keep]
    return u @ u.T, int(keep.sum())


def build_projection_cache(model: TinyViT, anchors, layers, edit_target: str = "fc2",
                           eig_threshold: float = 1e-2, normalize: bool = True) -> ProjectionCache:
    cache = ProjectionCache(eig_threshold)
    keys = layer_keys(model, anchors.images, list(layers), edit_target)
    for l, k in keys.items():
        c0 = k @ k.T
        p, kept = build_projection(c0, eig_threshold, k.shape[1] if normalize else None)
        cache.entries[(l, edit_target)] = Projection(c0, k.shape[1], p, kept)
    return cache


# ---------------------------------------------------------------------------
# targets


def _current_values(model: TinyViT, keys: np.ndarray, layer: int, target: str) -> np.ndarray:
    """Output of the edited matrix at the CLS position, bias included; (M, d_out)."""
    w = model.fc_weight(layer, target).astype(np.float64)
    b = model.params[f"blocks.{layer}.{target}.bias"].astype(np.float64)
    return keys.T @ w.T + b


def _block_input(model: TinyViT, images, layer: int) -> np.ndarray:
    if layer == 0:
        return embed_tokens(model, images)
    hs = HookSite(layer - 1, "block_out")
    return forward(model, images, capture={hs})[1][hs]


def _value_loss_grad(model: TinyViT, h_in, labels, layer: int, target: str, values: np.ndarray):
    """Per-example cross-entropy and its gradient w.r.t. the CLS value of ``target``."""
    if target == "fc2":
        site = HookSite(layer, "mlp_out", "cls_only")
        ce, g = grad_wrt_site(model, None, labels, site, values, block_input=h_in)
        return ce.astype(np.float64), g.astype(np.float64)
    # fc1 produces the pre-activation; chain through the GELU at the hidden site
    site = HookSite(layer, "mlp_hidden", "cls_only")
    ce, g = grad_wrt_site(model, None, labels, site, gelu(values), block_input=h_in)
    return ce.astype(np.float64), g.astype(np.float64) * gelu_grad(values)


def optimize_targets(model: TinyViT, images, labels, layer: int, edit_target: str = "fc2",
                     steps: int = 5, lr: float = 0.1, max_halvings: int = 20):
    """Refine CLS values by gradient descent on cross-entropy of the true label.

    Returns ``(k1, v1, losses)`` with keys ``(d_in, M)``, values ``(d_out, M)``
    and the per-step loss history ``(steps + 1, M)``.  Each sample's loss is
    non-increasing: a step that would raise it is retried at half the rate.
    """
    if steps < 0:
        raise ConfigError("steps must be non-negative")
    images = np.asarray(images)
    labels = np.asarray(labels).astype(np.int64)
    k1 = layer_keys(model, images, [layer], edit_target)[layer]
    v = _current_values(model, k1, layer, edit_target)
    h_in = _block_input(model, images, layer)
    loss, grad = _value_loss_grad(model, h_in, labels, layer, edit_target, v)
    history = [loss.copy()]
    rate = np.full(len(labels), float(lr))
    for step in range(steps):
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite target gradient at step {step}")
        trial = v - rate[:, None] * grad
        t_loss, t_grad = _value_loss_grad(model, h_in, labels, layer, edit_target, trial)
        for _ in range(max_halvings):
            worse = t_loss > loss
            if not worse.any():
                break
            rate[worse] *= 0.5
            trial[worse] = v[worse] - rate[worse, None] * grad[worse]
            t_loss, t_grad = _value_loss_grad(model, h_in, labels, layer, edit_target, trial)
        # anything still worse after all halvings keeps its previous value
        stay = t_loss > loss
        trial[stay] = v[stay]
        if stay.any():
            t_loss, t_grad = _value_loss_grad(model, h_in, labels, layer, edit_target, trial)
        v, loss, grad = trial, t_loss, t_grad
        history.append(loss.copy())
    return k1, v.T, np.array(history)


# ---------------------------------------------------------------------------
# closed form


def system_matrix(K1, P, Cp) -> np.ndarray:
    K1 = as_matrix(K1, "K1")
    P = as_matrix(P, "P")
    Cp = as_matrix(Cp, "Cp")
    return Cp @ P + K1 @ K1.T @ P + np.eye(P.shape[0])


def closed_form_delta(R, K1, P, Cp=None, return_raw: bool = False):
    """Applied update ``dW* P`` for residuals ``R`` (d_out, M) and keys ``K1`` (d_in, M).

    ``dW*`` solves ``dW* A = R K1^T P`` with ``A = Cp P + K1 K1^T P + I``,
    computed as the transposed solve ``A^T dW*^T = (R K1^T P)^T``.
    """
    R = as_matrix(R, "R")
    K1 = as_matrix(K1, "K1")
    P = as_matrix(P, "P")
    d_in = K1.shape[0]
    if Cp is None:
        Cp = np.zeros((d_in, d_in))
    Cp = as_matrix(Cp, "Cp")
    if R.shape[1] != K1.shape[1] or K1.shape[1] < 1:
        raise ShapeError(f"R is {R.shape} and K1 is {K1.shape}; need matching, non-zero sample counts")
    if P.shape != (d_in, d_in) or Cp.shape != (d_in, d_in):
        raise ShapeError(f"P {P.shape} and Cp {Cp.shape} must both be {d_in}x{d_in}")
    A = system_matrix(K1, P, Cp)
    rhs = matmul(matmul(R, K1.T), P)
    raw = solve_spd(A.T, rhs.T).T
    applied = raw @ P
    return (applied, raw) if return_raw else applied


def edit_objective(delta, W, K1, V1, P, Kp=None) -> float:
    """Objective minimised by :func:`closed_form_delta`, evaluated at ``delta``."""
    dp = delta @ P
    fit = (W + dp) @ K1 - V1
    val = np.sum(fit * fit) + np.sum(dp * dp)
    if Kp is not None and np.size(Kp):
        prior = dp @ Kp
        val += np.sum(prior * prior)
    return float(val)


# ---------------------------------------------------------------------------
# editing


def edit_batch(model: TinyViT, edits, traces, proj_cache: ProjectionCache, seq_state: SequentialState,
               config: EditConfig = EditConfig()):
    """Edit all samples of ``edits`` jointly; returns ``(edited_model, outcome)``.

    Target layers are processed in ascending order.  At each layer the
    samples that selected it contribute one key/target column each, with the
    residual split evenly over the layers that sample still has to visit.
    Keys and targets are recomputed after every layer edit.
    """
    if len(traces) != len(edits):
        raise ShapeError(f"{len(edits)} edit samples but {len(traces)} trace results")
    target = config.edit_target
    model = model.copy()
    outcome = EditOutcome()
    if len(edits) == 0:
        return model, outcome
    labels = edits.labels.astype(np.int64)
    layer_sets = [list(t.selected_layers) for t in traces]
    for layers in layer_sets:
        for l in layers:
            proj_cache.get(l, target)

    pred_before = predict(model, edits.images)[0]
    t0 = time.perf_counter()
    records = [SampleOutcome(i, layer_sets[i], int(pred_before[i]), -1, int(labels[i]), {}, {}, {})
               for i in range(len(edits))]
    for layer in sorted({l for ls in layer_sets for l in ls}):
        members = np.array([i for i, ls in enumerate(layer_sets) if layer in ls])
        remaining = np.array([sum(1 for l in layer_sets[i] if l >= layer) for i in members], dtype=np.float64)
        k1, v1, _ = optimize_targets(model, edits.images[members], labels[members], layer, target,
                                     config.target_steps, config.target_lr)
        v_cur = _current_values(model, k1, layer, target).T
        R = v1 - v_cur
        if config.spread_residual:
            R = R / remaining
        proj = proj_cache.get(layer, target)
        Cp = seq_state.cov(layer, target, k1.shape[0])
        delta = closed_form_delta(R, k1, proj.P, Cp)
        w = model.fc_weight(layer, target)
        model.params[f"blocks.{layer}.{target}.weight"] = (w.astype(np.float64) + delta).astype(w.dtype)
        seq_state.add(layer, target, k1)
        moved = delta @ k1
        norm = float(np.linalg.norm(delta))
        for j, i in enumerate(members):
            rec = records[i]
            rec.delta_norms[layer] = norm
            rec.residual_before[layer] = float(np.linalg.norm(R[:, j]))
            rec.residual_after[layer] = float(np.linalg.norm(R[:, j] - moved[:, j]))
    outcome.seconds = time.perf_counter() - t0
    pred_after = predict(model, edits.images)[0]
    for rec, p in zip(records, pred_after):
        rec.pred_after = int(p)
    outcome.samples = records
    return model, outcome


def edit_sequential(model: TinyViT, edits, traces, proj_cache: ProjectionCache, seq_state: SequentialState,
                    config: EditConfig = EditConfig()):
    """One edit batch per sample, in order; earlier samples are protected through ``seq_state``."""
    total = EditOutcome()
    for i in range(len(edits)):
        model, out = edit_batch(model, edits.subset([i]), [traces[i]], proj_cache, seq_state, config)
        rec = out.samples[0]
        rec.index = i
        total.samples.append(rec)
        total.seconds += out.seconds
    # per-sample predictions were taken right after each sample's edit; refresh to the final model
    final = predict(model, edits.images)[0] if len(edits) else []
    for rec, p in zip(total.samples, final):
        rec.pred_after = int(p)
    return model, total
