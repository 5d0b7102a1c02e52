"""GroupMax activation, Parameterized Affine Networks and the Partial GroupMax Network.

The Partial GroupMax Network ``f(x, y)`` is convex in ``x`` for every ``y``:
all affine maps acting on hidden convex features are generated with
elementwise-positive weights, and the only nonlinearity applied to ``x``-paths
is a per-group max (or its log-sum-exp smoothing).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

DEFAULT_SOFT_BETA = 4096.0


def group_max(h, groups: int, soft_beta: float = math.inf) -> Tensor:
    """Per-group maximum of the last axis (``G * E`` -> ``G``)."""
    return ad.group_max(h, groups, soft_beta)


@dataclass(frozen=True)
class PanSpec:
    """Shape of one Parameterized Affine Network.

    ``d_y == 0`` selects direct mode: ``W`` and ``b`` are plain parameters and
    do not depend on the conditioning input.
    """

    d_y: int
    d_in: int
    d_out: int
    positive: bool = False
    hidden_dim: int = 24
    layers: int = 2
    slope: float = 0.01
    bias: bool = True

    @property
    def direct(self) -> bool:
        return self.d_y == 0

    @property
    def positive_scale(self) -> float:
        s = 1.0 / self.d_in
        if self.direct:
            s /= math.sqrt(self.d_in)
        return s


class ParameterizedAffine:
    """Emits ``(W(y), b(y))`` for an affine map ``z -> W z + b``."""

    def __init__(self, spec: PanSpec, store: ParamStore, prefix: str, rng: np.random.Generator):
        self.spec = spec
        self.prefix = prefix
        self.store = store
        s = spec
        if s.direct:
            bound = 1.0 / math.sqrt(s.d_in)
            store.add(f"{prefix}.W", rng.uniform(-bound, bound, (s.d_out, s.d_in)))
            if s.bias:
                store.add(f"{prefix}.b", rng.uniform(-bound, bound, (s.d_out,)))
            return
        dims = [s.d_y] + [s.hidden_dim] * s.layers
        for k in range(s.layers):
            bound = 1.0 / math.sqrt(dims[k])
            store.add(f"{prefix}.l{k}.w", rng.uniform(-bound, bound, (dims[k + 1], dims[k])))
            store.add(f"{prefix}.l{k}.b", rng.uniform(-bound, bound, (dims[k + 1],)))
        bound = 1.0 / math.sqrt(dims[-1])
        store.add(f"{prefix}.hW.w", rng.uniform(-bound, bound, (s.d_out * s.d_in, dims[-1])))
        store.add(f"{prefix}.hW.b", rng.uniform(-bound, bound, (s.d_out * s.d_in,)))
        if s.bias:
            store.add(f"{prefix}.hb.w", rng.uniform(-bound, bound, (s.d_out, dims[-1])))
            store.add(f"{prefix}.hb.b", rng.uniform(-bound, bound, (s.d_out,)))

    def __call__(self, y: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        s, p, st = self.spec, self.prefix, self.store
        if s.direct:
            W = st[f"{p}.W"]
            b = st[f"{p}.b"] if s.bias else None
        else:
            if y is None:
                raise ValueError(f"{p}: conditioning input required (d_y={s.d_y})")
            y = ad.as_tensor(y)
            if y.ndim != 2 or y.shape[1] != s.d_y:
                raise ValueError(f"{p}: expected y of shape (B, {s.d_y}), got {y.shape}")
            hcur = y
            for k in range(s.layers):
                hcur = ad.leaky_relu(ad.matvec(st[f"{p}.l{k}.w"], hcur) + st[f"{p}.l{k}.b"], s.slope)
            W = ad.matvec(st[f"{p}.hW.w"], hcur) + st[f"{p}.hW.b"]
            W = ad.reshape(W, (y.shape[0], s.d_out, s.d_in))
            b = ad.matvec(st[f"{p}.hb.w"], hcur) + st[f"{p}.hb.b"] if s.bias else None
        if s.positive:
            W = ad.scale(ad.softplus(W), s.positive_scale)
        return W, b


@dataclass(frozen=True)
class PgmnSpec:
    """Topology of a Partial GroupMax Network.

    ``soft_beta`` is the inverse temperature of the smoothed group max used
    when a forward call does not override it; ``math.inf`` means hard max.
    """

    d_x: int
    d_y: int = 0
    K: int = 1
    G: int = 10
    E: int = 32
    soft_beta: float = DEFAULT_SOFT_BETA
    pan_hidden: int = 24
    pan_layers: int = 2
    slope: float = 0.01
    h_x: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.h_x is not None and self.h_x != self.G * self.E:
            raise ValueError(f"h_x ({self.h_x}) must equal G * E ({self.G} * {self.E})")
        if self.d_x < 1 or self.d_y < 0 or self.K < 0 or self.G < 1 or self.E < 1:
            raise ValueError(f"invalid network dimensions: {self}")

    @property
    def hidden(self) -> int:
        return self.G * self.E

    @property
    def layout(self) -> tuple[int, int, int, int]:
        return (self.K, self.d_x, self.G, self.E)

    @classmethod
    def default(cls, n: int, m: int, dist: str = "uniform", **overrides) -> "PgmnSpec":
        h_x = (24 if dist == "bernoulli" else 64) * (m + 3)
        G = 2 * (m + 3)
        kw = dict(
            d_x=m,
            d_y=(n - 1) * m,
            K=1 if n == 1 else 2,
            G=G,
            E=h_x // G,
            pan_hidden=24 * (m + 3),
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h_x"] = self.hidden
        d["soft_beta"] = None if math.isinf(self.soft_beta) else self.soft_beta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PgmnSpec":
        d = dict(d)
        if d.get("soft_beta") is None:
            d["soft_beta"] = math.inf
        return cls(**d)


class PartialGroupMaxNet:
    """``f(x, y)``: convex in ``x``, continuous in ``(x, y)``.

    One instance is shared by all players; a player's identity enters only
    through the ordering of the conditioning vector.
    """

    def __init__(self, spec: PgmnSpec, seed: int = 0):
        self.spec = spec
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        s = spec
        h = s.hidden

        def pan(prefix, d_in, d_out, positive, bias=True):
            ps = PanSpec(s.d_y, d_in, d_out, positive, s.pan_hidden, s.pan_layers, s.slope, bias)
            return ParameterizedAffine(ps, self.params, prefix, rng)

        self.pan_x = []
        self.pan_r = {}
        for k in range(s.K):
            self.pan_x.append(pan(f"x{k}", s.d_x if k == 0 else s.G, h, positive=k > 0))
            if k > 0:
                # the bias output of residual maps is never used
                self.pan_r[k] = pan(f"r{k}", s.d_x, h, positive=False, bias=False)
        self.pan_x.append(pan(f"x{s.K}", s.G if s.K else s.d_x, 1, positive=True))
        self.pan_r[s.K] = pan(f"r{s.K}", s.d_x, 1, positive=False, bias=False)
        self.params.freeze()

    # -- affine maps ---------------------------------------------------------

    def _cond(self, y, batch: int | None):
        if self.spec.d_y == 0:
            return None
        if y is None:
            raise ValueError(f"conditioning input of width {self.spec.d_y} required")
        y = ad.as_tensor(y)
        if y.ndim == 1:
            y = ad.reshape(y, (1, -1))
        if y.shape[1] != self.spec.d_y:
            raise ValueError(f"expected conditioning width {self.spec.d_y}, got {y.shape[1]}")
        return y

    def affine_maps(self, y=None):
        """All ``(Wx, Wr, b)`` hidden maps and the final ``(wx, wr, b)``."""
        y = self._cond(y, None)
        layers = []
        for k in range(self.spec.K):
            Wx, b = self.pan_x[k](y)
            Wr = self.pan_r[k](y)[0] if k > 0 else None
            layers.append((Wx, Wr, b))
        wx, b = self.pan_x[self.spec.K](y)
        wr, _ = self.pan_r[self.spec.K](y)
        return layers, (wx, wr, b)

    # -- forward -------------------------------------------------------------

    def forward(self, x, y=None, soft_beta: float | None = None, maps=None) -> Tensor:
        """Network value for each row of ``x`` (shape ``(B, d_x)``)."""
        s = self.spec
        beta = s.soft_beta if soft_beta is None else soft_beta
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != s.d_x:
            raise ValueError(f"expected x of shape (B, {s.d_x}), got {x.shape}")
        layers, (wx, wr, b) = self.affine_maps(y) if maps is None else maps
        cur = x
        for Wx, Wr, bk in layers:
            hk = ad.matvec(Wx, cur) + bk
            if Wr is not None:
                hk = hk + ad.matvec(Wr, x)
            cur = group_max(hk, s.G, beta)
        z = ad.matvec(wx, cur) + ad.matvec(wr, x) + b
        return ad.reshape(z, (x.shape[0],))

    def __call__(self, x, y=None, soft_beta=None) -> Tensor:
        return self.forward(x, y, soft_beta)

    def value(self, x, y=None, soft_beta=None) -> np.ndarray:
        return self.forward(np.atleast_2d(x), y, soft_beta).value

    # -- kernel packs --------------------------------------------------------

    @property
    def layout(self) -> tuple[int, int, int, int]:
        return self.spec.layout

    def pack(self, y=None) -> np.ndarray:
        """Effective weights flattened for the kernels; ``(P,)`` or ``(B, P)``."""
        layers, (wx, wr, b) = self.affine_maps(y)
        parts = []
        for Wx, Wr, bk in layers:
            parts.append(Wx.value)
            if Wr is not None:
                parts.append(Wr.value)
            parts.append(bk.value)
        parts += [wx.value, wr.value, b.value]
        if self.spec.d_y == 0:
            return np.concatenate([p.ravel() for p in parts])
        B = parts[0].shape[0]
        return np.concatenate([p.reshape(B, -1) for p in parts], axis=1)

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "params": {k: v.ravel().tolist() for k, v in self.params.values().items()},
        }

    def load_params(self, params: dict) -> None:
        shaped = {}
        for name, t in self.params:
            if name not in params:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.size != t.value.size:
                raise ValueError(f"parameter {name!r}: {arr.size} values, expected {t.value.size}")
            shaped[name] = arr.reshape(t.value.shape)
        self.params.load(shaped)

    @classmethod
    def from_dict(cls, d: dict) -> "PartialGroupMaxNet":
        net = cls(PgmnSpec.from_dict(d["spec"]))
        net.load_params(d["params"])
        return net


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def linear_pricing_net(weights, soft_beta: float = math.inf) -> PartialGroupMaxNet:
    """A zero-hidden-layer network computing ``<weights, x>`` (weights > 0)."""
    w = np.asarray(weights, dtype=np.float64)
    spec = PgmnSpec(d_x=w.size, d_y=0, K=0, G=1, E=1, soft_beta=soft_beta)
    net = PartialGroupMaxNet(spec)
    scale = 1.0 / (w.size * math.sqrt(w.size))
    net.params["x0.W"].value = inverse_softplus(w / scale).reshape(1, -1)
    net.params["x0.b"].value = np.zeros(1)
    net.params["r0.W"].value = np.zeros((1, w.size))
    return net
