"""A small pre-LN vision transformer in numpy, with hook sites and a hand-written backward pass.

Every block exposes four hook sites (see :data:`SITES`).  A forward pass can
capture activations at any of them and can substitute ("patch") values at any
of them; patched values are treated as leaves by the backward pass, which is
what :func:`grad_wrt_site` relies on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from .errors import ConfigError, ShapeError

SITES = ("mlp_in", "mlp_hidden", "mlp_out", "block_out")
TOKEN_MODES = ("all", "cls_only")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 6
    d_mlp: int = 128
    n_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "d_model", "n_heads", "n_layers", "d_mlp"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HookSite:
    layer: int
    site: str
    tokens: str = "all"

    def __post_init__(self):
        if self.site not in SITES:
            raise ShapeError(f"unknown hook site {self.site!r}; expected one of {SITES}")
        if self.tokens not in TOKEN_MODES:
            raise ShapeError(f"unknown token mode {self.tokens!r}")


def site_width(config: ModelConfig, site: str) -> int:
    return config.d_mlp if site == "mlp_hidden" else config.d_model


@dataclass
class TinyViT:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "TinyViT":
        return TinyViT(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "TinyViT":
        return TinyViT(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def fc_weight(self, layer: int, target: str) -> np.ndarray:
        if target not in ("fc1", "fc2"):
            raise ConfigError(f"edit target must be fc1 or fc2, got {target!r}")
        return self.params[f"blocks.{layer}.{target}.weight"]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = config.d_model, config.d_mlp
    shapes = {
        "patch_embed.weight": (d, config.patch_dim),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.n_tokens, d),
    }
    for i in range(config.n_layers):
        b = f"blocks.{i}."
        shapes.update({
            b + "ln1.weight": (d,),
            b + "ln1.bias": (d,),
            b + "attn.q.weight": (d, d),
            b + "attn.k.weight": (d, d),
            b + "attn.v.weight": (d, d),
            b + "attn.o.weight": (d, d),
            b + "ln2.weight": (d,),
            b + "ln2.bias": (d,),
            b + "fc1.weight": (m, d),
            b + "fc1.bias": (m,),
            b + "fc2.weight": (d, m),
            b + "fc2.bias": (d,),
        })
    shapes.update({
        "ln_f.weight": (d,),
        "ln_f.bias": (d,),
        "head.weight": (config.n_classes, d),
        "head.bias": (config.n_classes,),
    })
    return shapes


def init_model(config: ModelConfig, dtype=np.float32) -> TinyViT:
    """Seeded init: uniform(+-1/sqrt(fan_in)) projections, zero biases, unit LN gains."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif ".ln" in name or name.startswith("ln_f"):
            arr = np.ones(shape)
        elif name in ("cls_token", "pos_embed"):
            arr = rng.uniform(-0.02, 0.02, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return TinyViT(config, params)


# ---------------------------------------------------------------------------
# primitives


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(gy, g, cache):
    xhat, rstd = cache
    axes = tuple(range(gy.ndim - 1))
    gg = (gy * xhat).sum(axis=axes)
    gb = gy.sum(axis=axes)
    gx_hat = gy * g
    gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    return gx, gg, gb


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _linear(x, w, b=None):
    y = x @ w.T
    return y if b is None else y + b


def _wgrad(gy, x):
    return gy.reshape(-1, gy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


# ---------------------------------------------------------------------------
# forward


def as_batch(model: TinyViT, images) -> np.ndarray:
    """Images (uint8 or float) to a float batch of shape (B, C, S, S) scaled to [0, 1]."""
    x = np.asarray(images)
    cfg = model.config
    scale = 1.0 / 255.0 if x.dtype == np.uint8 else 1.0
    x = x.astype(model.dtype) * model.dtype.type(scale)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None] if cfg.channels == 1 else x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"image batch shape {np.shape(images)} incompatible with config")
    return x


def patchify(model: TinyViT, x: np.ndarray) -> np.ndarray:
    cfg = model.config
    n, p = cfg.image_size // cfg.patch_size, cfg.patch_size
    bsz = x.shape[0]
    x = x.reshape(bsz, cfg.channels, n, p, n, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(bsz, n * n, cfg.patch_dim)


def embed_tokens(model: TinyViT, images) -> np.ndarray:
    """Token states (B, T, d) after adding positional embeddings; row 0 is CLS."""
    return _embed(model, images)[0]


def _embed(model, images):
    prm = model.params
    x = as_batch(model, images)
    pt = patchify(model, x)
    tok = _linear(pt, prm["patch_embed.weight"], prm["patch_embed.bias"])
    cls = np.broadcast_to(prm["cls_token"], (x.shape[0], 1, model.config.d_model))
    h = np.concatenate([cls, tok], axis=1) + prm["pos_embed"]
    return h, pt


class _Hooks:
    """Applies patches and records captures at hook sites during one forward pass."""

    def __init__(self, patches, capture):
        self.patches = dict(patches or {})
        self.capture = set(capture or ())
        self.trace: dict[HookSite, np.ndarray] = {}
        self.masks: dict[tuple[int, str], np.ndarray] = {}
        for hs in list(self.patches) + list(self.capture):
            if not isinstance(hs, HookSite):
                raise ShapeError(f"hook keys must be HookSite, got {hs!r}")

    def __call__(self, layer: int, site: str, value: np.ndarray) -> np.ndarray:
        full = self.patches.get(HookSite(layer, site, "all"))
        cls = self.patches.get(HookSite(layer, site, "cls_only"))
        if full is not None or cls is not None:
            value = value.copy()
            mask = np.zeros(value.shape[:2] + (1,), dtype=bool)
            if full is not None:
                full = np.asarray(full, dtype=value.dtype)
                if full.shape not in (value.shape, value.shape[1:]):
                    raise ShapeError(f"patch at layer {layer} {site} has shape {full.shape}, expected {value.shape}")
                value[...] = full
                mask[...] = True
            if cls is not None:
                cls = np.asarray(cls, dtype=value.dtype)
                want = (value.shape[0], value.shape[2])
                if cls.shape not in (want, want[1:]):
                    raise ShapeError(f"cls patch at layer {layer} {site} has shape {cls.shape}, expected {want}")
                value[:, 0, :] = cls
                mask[:, 0] = True
            self.masks[(layer, site)] = mask
        for tokens in TOKEN_MODES:
            hs = HookSite(layer, site, tokens)
            if hs in self.capture:
                self.trace[hs] = (value if tokens == "all" else value[:, 0, :]).copy()
        return value


def _forward(model: TinyViT, images=None, capture=(), patches=None, embed=None, keep_cache=False, start_layer=0):
    cfg = model.config
    prm = model.params
    if not 0 <= start_layer < cfg.n_layers or (start_layer and embed is None):
        raise ShapeError(f"cannot start at layer {start_layer} without its input states")
    for hs in list(patches or {}) + list(capture or ()):
        if not start_layer <= hs.layer < cfg.n_layers:
            raise ShapeError(f"hook layer {hs.layer} out of range for layers {start_layer}..{cfg.n_layers - 1}")
    hooks = _Hooks(patches, capture)
    pt = None
    if embed is None:
        h, pt = _embed(model, images)
    else:
        h = np.asarray(embed, dtype=model.dtype)
        if h.ndim == 2:
            h = h[None]
        if h.shape[1:] != (cfg.n_tokens, cfg.d_model):
            raise ShapeError(f"input state override has shape {h.shape}")
    bsz, t, d = h.shape
    nh, hd = cfg.n_heads, cfg.head_dim
    scale = model.dtype.type(1.0 / math.sqrt(hd))
    caches = {}
    for i in range(start_layer, cfg.n_layers):
        b = f"blocks.{i}."
        c = {"h_in": h}
        a, c["ln1"] = _layer_norm(h, prm[b + "ln1.weight"], prm[b + "ln1.bias"])
        c["a"] = a
        q = _linear(a, prm[b + "attn.q.weight"]).reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        k = _linear(a, prm[b + "attn.k.weight"]).reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        v = _linear(a, prm[b + "attn.v.weight"]).reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        c.update(q=q, k=k, v=v, att=att, ctx=ctx)
        h = h + _linear(ctx, prm[b + "attn.o.weight"])
        c["h_mid"] = h
        m_in, c["ln2"] = _layer_norm(h, prm[b + "ln2.weight"], prm[b + "ln2.bias"])
        m_in = hooks(i, "mlp_in", m_in)
        pre = _linear(m_in, prm[b + "fc1.weight"], prm[b + "fc1.bias"])
        hid = hooks(i, "mlp_hidden", gelu(pre))
        out = hooks(i, "mlp_out", _linear(hid, prm[b + "fc2.weight"], prm[b + "fc2.bias"]))
        h = hooks(i, "block_out", h + out)
        c.update(m_in=m_in, pre=pre, hid=hid)
        if keep_cache:
            caches[i] = c
    z, lnf = _layer_norm(h[:, 0, :], prm["ln_f.weight"], prm["ln_f.bias"])
    logits = _linear(z, prm["head.weight"], prm["head.bias"])
    cache = None
    if keep_cache:
        cache = {"blocks": caches, "start": start_layer, "z": z, "lnf": lnf, "pt": pt, "masks": hooks.masks, "shape": (bsz, t, d)}
    return logits, hooks.trace, cache


def forward(model: TinyViT, images=None, capture=(), patches=None, embed=None, start_layer=0):
    """Run the model; returns ``(logits, trace)``.

    ``images`` may be a single (S, S) grid or a batch.  ``embed`` replaces the
    token states entering block ``start_layer`` (with the default 0, the
    states after positional embedding, as used for corrupted runs).  Patch
    values may be given per batch or per example (broadcast over the batch).
    """
    logits, trace, _ = _forward(model, images, capture, patches, embed, start_layer=start_layer)
    return logits, trace


def predict(model: TinyViT, images):
    """Returns ``(classes, probs)``; ties resolve to the lowest class index."""
    logits, _ = forward(model, images)
    probs = softmax(logits.astype(np.float64))
    return np.argmax(probs, axis=-1), probs


# ---------------------------------------------------------------------------
# backward


def _masked(g, masks, layer, site):
    mask = masks.get((layer, site))
    return g if mask is None else np.where(mask, 0.0, g).astype(g.dtype)


def _backward(model: TinyViT, cache, g_logits, stop_at: HookSite | None = None):
    """Reverse pass.  Returns ``(grads, site_grad)``.

    Gradients stop at patched positions.  With ``stop_at`` the pass ends as
    soon as the gradient at that site is known.
    """
    cfg = model.config
    prm = model.params
    masks = cache["masks"]
    bsz, t, d = cache["shape"]
    nh, hd = cfg.n_heads, cfg.head_dim
    scale = model.dtype.type(1.0 / math.sqrt(hd))
    grads: dict[str, np.ndarray] = {}

    grads["head.weight"] = g_logits.T @ cache["z"]
    grads["head.bias"] = g_logits.sum(axis=0)
    gz = g_logits @ prm["head.weight"]
    gcls, grads["ln_f.weight"], grads["ln_f.bias"] = _layer_norm_back(gz, prm["ln_f.weight"], cache["lnf"])
    gh = np.zeros((bsz, t, d), dtype=g_logits.dtype)
    gh[:, 0, :] = gcls

    def reached(layer, site, g):
        if stop_at is not None and stop_at.layer == layer and stop_at.site == site:
            return g if stop_at.tokens == "all" else g[:, 0, :]
        return None

    for i in reversed(range(cache["start"], cfg.n_layers)):
        b = f"blocks.{i}."
        c = cache["blocks"][i]
        if (r := reached(i, "block_out", gh)) is not None:
            return grads, r
        gh = _masked(gh, masks, i, "block_out")
        gout = gh
        if (r := reached(i, "mlp_out", gout)) is not None:
            return grads, r
        gout = _masked(gout, masks, i, "mlp_out")
        grads[b + "fc2.weight"] = _wgrad(gout, c["hid"])
        grads[b + "fc2.bias"] = gout.sum(axis=(0, 1))
        ghid = gout @ prm[b + "fc2.weight"]
        if (r := reached(i, "mlp_hidden", ghid)) is not None:
            return grads, r
        ghid = _masked(ghid, masks, i, "mlp_hidden")
        gpre = ghid * gelu_grad(c["pre"])
        grads[b + "fc1.weight"] = _wgrad(gpre, c["m_in"])
        grads[b + "fc1.bias"] = gpre.sum(axis=(0, 1))
        gm = gpre @ prm[b + "fc1.weight"]
        if (r := reached(i, "mlp_in", gm)) is not None:
            return grads, r
        gm = _masked(gm, masks, i, "mlp_in")
        gx, grads[b + "ln2.weight"], grads[b + "ln2.bias"] = _layer_norm_back(gm, prm[b + "ln2.weight"], c["ln2"])
        gh = gh + gx

        grads[b + "attn.o.weight"] = _wgrad(gh, c["ctx"])
        gctx = (gh @ prm[b + "attn.o.weight"]).reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        gatt = gctx @ v.transpose(0, 1, 3, 2)
        gv = att.transpose(0, 1, 3, 2) @ gctx
        gs = att * (gatt - (gatt * att).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q

        def merge(x):
            return x.transpose(0, 2, 1, 3).reshape(bsz, t, d)

        gq, gk, gv = merge(gq), merge(gk), merge(gv)
        a = c["a"]
        grads[b + "attn.q.weight"] = _wgrad(gq, a)
        grads[b + "attn.k.weight"] = _wgrad(gk, a)
        grads[b + "attn.v.weight"] = _wgrad(gv, a)
        ga = gq @ prm[b + "attn.q.weight"] + gk @ prm[b + "attn.k.weight"] + gv @ prm[b + "attn.v.weight"]
        gx, grads[b + "ln1.weight"], grads[b + "ln1.bias"] = _layer_norm_back(ga, prm[b + "ln1.weight"], c["ln1"])
        gh = gh + gx

    if stop_at is not None or cache["start"]:
        raise ShapeError(f"site {stop_at} not reached in backward pass")
    grads["pos_embed"] = gh.sum(axis=0)
    grads["cls_token"] = gh[:, 0, :].sum(axis=0)
    if cache["pt"] is not None:
        grads["patch_embed.weight"] = _wgrad(gh[:, 1:, :], cache["pt"])
        grads["patch_embed.bias"] = gh[:, 1:, :].sum(axis=(0, 1))
    else:
        grads["patch_embed.weight"] = np.zeros_like(prm["patch_embed.weight"])
        grads["patch_embed.bias"] = np.zeros_like(prm["patch_embed.bias"])
    return {k: grads[k] for k in prm}, None


def _check_labels(model, labels, n):
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= model.config.n_classes):
        raise ShapeError(f"label out of range [0, {model.config.n_classes})")
    return y


def cross_entropy(logits, labels):
    """Per-example cross-entropy and d(sum CE)/d(logits)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(labels))
    ce = lse - z[rows, labels]
    g = softmax(logits)
    g[rows, labels] -= 1.0
    return ce, g


def loss_and_grads(model: TinyViT, images, labels):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    logits, _, cache = _forward(model, images, keep_cache=True)
    y = _check_labels(model, labels, logits.shape[0])
    if logits.shape[0] == 0:
        raise ShapeError("empty batch")
    ce, g = cross_entropy(logits, y)
    g = g / logits.shape[0]
    grads, _ = _backward(model, cache, g.astype(logits.dtype))
    return float(ce.mean()), grads


def grad_wrt_site(model: TinyViT, images, labels, site: HookSite, override, block_input=None):
    """Gradient of cross-entropy w.r.t. a patched activation, parameters fixed.

    For a batch the loss is the *sum* of per-example cross-entropies, so each
    example's gradient is independent of the others.  Returns ``(loss, grad)``
    with per-example losses.  ``block_input`` (the residual stream entering
    ``site.layer``) skips recomputing the earlier blocks.
    """
    if site.site not in ("mlp_hidden", "mlp_out"):
        raise ShapeError(f"grad_wrt_site supports mlp_hidden and mlp_out, got {site.site}")
    if block_input is None:
        logits, _, cache = _forward(model, images, patches={site: override}, keep_cache=True)
    else:
        logits, _, cache = _forward(model, None, patches={site: override}, embed=block_input,
                                    keep_cache=True, start_layer=site.layer)
    y = _check_labels(model, labels, logits.shape[0])
    ce, g = cross_entropy(logits, y)
    _, gsite = _backward(model, cache, g.astype(logits.dtype), stop_at=site)
    return ce, gsite
