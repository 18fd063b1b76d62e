"""Positional-encoded MLP radiance fields with hand-written backprop and Adam.

A ``MultiModel`` holds one MLP per partition group and routes each sample
point to the MLP of its group; without a partition it wraps a single MLP.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .partition import ScenePartition, groups_of_points


@dataclass(frozen=True)
class EncodingConfig:
    l_pos: int = 10
    l_dir: int = 4

    def __post_init__(self):
        if self.l_pos < 0 or self.l_dir < 0:
            raise ValueError("encoding frequency counts must be >= 0")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.l_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.l_dir


def encode(v, n_freqs: int) -> np.ndarray:
    """``[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(...)]``."""
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    if n_freqs == 0:
        return v.copy()
    lead = v.shape[:-1]
    out = np.empty(lead + (3 + 6 * n_freqs,), dtype=v.dtype)
    out[..., :3] = v
    for k in range(n_freqs):
        arg = v * v.dtype.type(2.0**k * np.pi)
        out[..., 3 + 6 * k : 6 + 6 * k] = np.sin(arg)
        out[..., 6 + 6 * k : 9 + 6 * k] = np.cos(arg)
    return out


def _relu(x):
    return np.maximum(x, 0, out=x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Mlp:
    """NeRF-style radiance MLP.

    Trunk of ``n_layers`` ReLU layers on the encoded position, a ReLU density
    head, a linear feature layer, then one ReLU layer on ``[feature, encoded
    direction]`` feeding a sigmoid color head. Density never sees direction.
    """

    def __init__(self, pos_dim: int, dir_dim: int, n_layers: int = 4, width: int = 64,
                 dir_width: int | None = None, seed: int | np.random.Generator = 0,
                 dtype=np.float32):
        if n_layers < 1 or width < 1:
            raise ValueError("need at least one hidden layer of positive width")
        self.pos_dim, self.dir_dim = pos_dim, dir_dim
        self.n_layers, self.width = n_layers, width
        self.dir_width = dir_width or max(width // 2, 1)
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        shapes = self.layer_shapes()
        self.params: dict[str, np.ndarray] = {}
        for name, (fan_in, fan_out) in shapes.items():
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype)
            self.params[f"{name}.b"] = np.zeros(fan_out, dtype=self.dtype)

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        fan_in = self.pos_dim
        for i in range(self.n_layers):
            shapes[f"trunk{i}"] = (fan_in, self.width)
            fan_in = self.width
        shapes["sigma"] = (self.width, 1)
        shapes["feat"] = (self.width, self.width)
        shapes["dir"] = (self.width + self.dir_dim, self.dir_width)
        shapes["rgb"] = (self.dir_width, 3)
        return shapes

    def zero_(self) -> "Mlp":
        for p in self.params.values():
            p[...] = 0
        return self

    def forward(self, xe: np.ndarray, de: np.ndarray, keep: bool = True):
        """Returns ``(rgb, sigma, cache)``; ``cache`` is None when ``keep`` is False."""
        p = self.params
        xe = np.asarray(xe, dtype=self.dtype)
        de = np.asarray(de, dtype=self.dtype)
        acts = [xe]
        h = xe
        for i in range(self.n_layers):
            h = _relu(h @ p[f"trunk{i}.W"] + p[f"trunk{i}.b"])
            acts.append(h)
        sigma_pre = (h @ p["sigma.W"] + p["sigma.b"])[:, 0]
        sigma = np.maximum(sigma_pre, 0)
        feat = h @ p["feat.W"] + p["feat.b"]
        cat = np.concatenate([feat, de], axis=1)
        hd = _relu(cat @ p["dir.W"] + p["dir.b"])
        rgb = _sigmoid(hd @ p["rgb.W"] + p["rgb.b"])
        if not (np.all(np.isfinite(sigma)) and np.all(np.isfinite(rgb))):
            raise FloatingPointError("non-finite radiance field output")
        cache = (acts, sigma_pre, cat, hd, rgb) if keep else None
        return rgb, sigma, cache

    def backward(self, cache, drgb: np.ndarray, dsigma: np.ndarray) -> dict[str, np.ndarray]:
        if cache is None:
            raise ValueError("backward needs the cache of a forward(keep=True) pass")
        acts, sigma_pre, cat, hd, rgb = cache
        p = self.params
        drgb = np.asarray(drgb, dtype=self.dtype)
        dsigma = np.asarray(dsigma, dtype=self.dtype)
        g: dict[str, np.ndarray] = {}

        dz = drgb * rgb * (1 - rgb)
        g["rgb.W"] = hd.T @ dz
        g["rgb.b"] = dz.sum(axis=0)
        dhd = (dz @ p["rgb.W"].T) * (hd > 0)
        g["dir.W"] = cat.T @ dhd
        g["dir.b"] = dhd.sum(axis=0)
        dfeat = (dhd @ p["dir.W"].T)[:, : self.width]
        g["feat.W"] = acts[-1].T @ dfeat
        g["feat.b"] = dfeat.sum(axis=0)
        ds = (dsigma * (sigma_pre > 0))[:, None]
        g["sigma.W"] = acts[-1].T @ ds
        g["sigma.b"] = ds.sum(axis=0)
        dh = dfeat @ p["feat.W"].T + ds @ p["sigma.W"].T
        for i in range(self.n_layers - 1, -1, -1):
            dh = dh * (acts[i + 1] > 0)
            g[f"trunk{i}.W"] = acts[i].T @ dh
            g[f"trunk{i}.b"] = dh.sum(axis=0)
            if i:
                dh = dh @ p[f"trunk{i}.W"].T
        return g

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def field_eval(mlp: Mlp, x, d, enc: EncodingConfig):
    """Color and density at one normalized position ``x`` seen from direction ``d``."""
    xe = encode(np.asarray(x, dtype=mlp.dtype).reshape(1, 3), enc.l_pos)
    de = encode(np.asarray(d, dtype=mlp.dtype).reshape(1, 3), enc.l_dir)
    rgb, sigma, _ = mlp.forward(xe, de, keep=False)
    return rgb[0], float(sigma[0])


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned box mapped to [-1, 1]^3 before encoding."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return 2.0 * (pts - lo) / (hi - lo) - 1.0

    def to_json_dict(self) -> dict:
        return {"lo": list(map(float, self.lo)), "hi": list(map(float, self.hi))}

    @classmethod
    def from_json_dict(cls, d) -> "SceneBounds":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


@dataclass
class ForwardContext:
    groups: np.ndarray
    routes: list[tuple[int, np.ndarray, object]] = field(default_factory=list)


class MultiModel:
    """One MLP per scene-partition group, or a single MLP when ``partition`` is None."""

    def __init__(self, models: list[Mlp], enc: EncodingConfig, bounds: SceneBounds,
                 partition: ScenePartition | None = None):
        if partition is None:
            if len(models) != 1:
                raise ValueError("without a partition exactly one model is used")
        else:
            if len(models) != partition.m_groups:
                raise ValueError(f"need {partition.m_groups} models, got {len(models)}")
        self.models = models
        self.enc = enc
        self.bounds = bounds
        self.partition = partition

    @classmethod
    def create(cls, enc: EncodingConfig, bounds: SceneBounds, partition: ScenePartition | None,
               n_layers: int = 4, width: int = 64, seed: int = 0, dtype=np.float32) -> "MultiModel":
        m = 1 if partition is None else partition.m_groups
        rng = np.random.default_rng(seed)
        models = [Mlp(enc.pos_dim, enc.dir_dim, n_layers, width, seed=rng, dtype=dtype) for _ in range(m)]
        return cls(models, enc, bounds, partition)

    @property
    def m_groups(self) -> int:
        return len(self.models)

    @property
    def dtype(self):
        return self.models[0].dtype

    def route(self, points: np.ndarray) -> np.ndarray:
        if self.partition is None:
            return np.zeros(points.shape[0], dtype=np.int64)
        return groups_of_points(self.partition, points)

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"g{m}.{k}": v for m, mlp in enumerate(self.models) for k, v in mlp.params.items()}

    def forward(self, points, dirs, keep: bool = True):
        """Evaluate world-space ``points`` (P, 3) with unit ``dirs`` (P, 3).

        Returns ``(rgb, sigma, ctx)`` in input order.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        if points.shape != dirs.shape:
            raise ValueError("points and dirs must have the same shape")
        groups = self.route(points)
        xn = self.bounds.normalize(points).astype(self.dtype)
        dn = dirs.astype(self.dtype)
        n = points.shape[0]
        rgb = np.empty((n, 3), dtype=self.dtype)
        sigma = np.empty(n, dtype=self.dtype)
        ctx = ForwardContext(groups)
        for m, mlp in enumerate(self.models):
            idx = np.flatnonzero(groups == m) if self.m_groups > 1 else slice(None)
            if self.m_groups > 1 and idx.size == 0:
                continue
            xe = encode(xn[idx], self.enc.l_pos)
            de = encode(dn[idx], self.enc.l_dir)
            try:
                c, s, cache = mlp.forward(xe, de, keep=keep)
            except FloatingPointError as exc:
                bad = np.arange(n)[idx][0]
                raise FloatingPointError(f"{exc} (group {m}, first point index {bad})") from None
            rgb[idx] = c
            sigma[idx] = s
            if keep:
                ctx.routes.append((m, idx, cache))
        return rgb, sigma, ctx if keep else None

    def backward(self, ctx: ForwardContext | None, drgb, dsigma) -> dict[str, np.ndarray]:
        if ctx is None:
            raise ValueError("backward needs the context of a forward(keep=True) pass")
        grads = {}
        done = set()
        for m, idx, cache in ctx.routes:
            g = self.models[m].backward(cache, drgb[idx], dsigma[idx])
            grads.update({f"g{m}.{k}": v for k, v in g.items()})
            done.add(m)
        for m, mlp in enumerate(self.models):
            if m not in done:
                grads.update({f"g{m}.{k}": v for k, v in mlp.zero_grads().items()})
        return grads


def multi_eval(mm: MultiModel, points, dirs):
    rgb, sigma, _ = mm.forward(points, dirs, keep=False)
    return rgb, sigma


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        st = cls(**kw)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient keys differ")
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {grads[k].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in sorted(params):
        p, g = params[k], grads[k].astype(params[k].dtype, copy=False)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
