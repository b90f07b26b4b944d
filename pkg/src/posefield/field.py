"""Positional encoding with coarse-to-fine annealing and the MLP radiance field."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class EncodingConfig:
    L_x: int = 10
    L_d: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.L_x < 0 or self.L_d < 0:
            raise ValueError("frequency counts must be >= 0")

    def width(self, L: int) -> int:
        return (3 if self.include_input else 0) + 6 * L


@dataclass(frozen=True)
class MlpConfig:
    depth: int = 4
    width: int = 128
    skip_layers: tuple = (2,)

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width must be positive")
        if any(s >= self.depth for s in self.skip_layers):
            raise ValueError("skip index beyond depth")


def anneal_weights(alpha: float, L: int) -> np.ndarray:
    """Per-frequency window: 0 below alpha, cosine ramp across one unit, 1 above."""
    k = np.arange(L)
    x = np.clip(alpha - k, 0.0, 1.0)
    return (1.0 - np.cos(x * np.pi)) / 2.0


def encode(x, alpha: float, L: int, include_input: bool = True) -> ad.Var:
    """Annealed sinusoidal encoding of (N, 3) points or directions.

    Frequency block k is (sin(2^k pi x), cos(2^k pi x)) scaled by the
    anneal window; the raw input always passes through.
    """
    x = ad.as_var(x)
    parts = [x] if include_input else []
    if L > 0:
        w = anneal_weights(alpha, L)
        # one fused (N, 3L) phase tensor: block k is 2^k pi x
        S = np.kron(2.0 ** np.arange(L) * np.pi, np.eye(3))
        w_rep = np.repeat(w, 3)
        phases = x @ ad.constant(S.astype(x.value.dtype))
        parts.append(ad.sin(phases) * w_rep)
        parts.append(ad.cos(phases) * w_rep)
    return ad.concat(parts, axis=-1)


class Mlp:
    """Plain fully-connected net with ReLU and input skip connections."""

    def __init__(self, in_dim: int, cfg: MlpConfig, out_dim: int, name: str, rng):
        self.cfg = cfg
        self.name = name
        self.weights = []
        self.biases = []
        d = in_dim
        for i in range(cfg.depth):
            if i in cfg.skip_layers:
                d += in_dim
            w = rng.normal(0.0, np.sqrt(2.0 / d), (d, cfg.width))
            self.weights.append(ad.Param(w, f"{name}.w{i}"))
            self.biases.append(ad.Param(np.zeros(cfg.width), f"{name}.b{i}"))
            d = cfg.width
        w = rng.normal(0.0, np.sqrt(1.0 / d), (d, out_dim))
        self.weights.append(ad.Param(w, f"{name}.wout"))
        self.biases.append(ad.Param(np.zeros(out_dim), f"{name}.bout"))

    @property
    def params(self) -> list:
        return [*self.weights, *self.biases]

    def __call__(self, x: ad.Var) -> ad.Var:
        h = x
        for i in range(self.cfg.depth):
            if i in self.cfg.skip_layers:
                h = ad.concat([h, x], axis=-1)
            h = ad.dense(h, self.weights[i], self.biases[i], "relu")
        return ad.dense(h, self.weights[-1], self.biases[-1])


class RadianceField:
    """Coarse/fine MLP pair mapping encoded (point, direction) to (color, density).

    Density comes through softplus, color through sigmoid. With
    single_mlp the fine head aliases the coarse one.
    """

    def __init__(
        self,
        encoding: EncodingConfig = EncodingConfig(),
        mlp: MlpConfig = MlpConfig(),
        single_mlp: bool = False,
        seed: int = 0,
    ):
        self.encoding = encoding
        self.mlp_cfg = mlp
        self.single_mlp = single_mlp
        self.seed = seed
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> None:
        in_dim = self.encoding.width(self.encoding.L_x) + self.encoding.width(self.encoding.L_d)
        self.coarse = Mlp(in_dim, self.mlp_cfg, 4, "coarse", rng)
        self.fine = self.coarse if self.single_mlp else Mlp(in_dim, self.mlp_cfg, 4, "fine", rng)

    def reinitialize(self, seed: int) -> None:
        """Fresh random parameters; callers must re-collect params afterwards."""
        self._init_params(np.random.default_rng(seed))

    @property
    def params(self) -> list:
        ps = list(self.coarse.params)
        if self.fine is not self.coarse:
            ps += self.fine.params
        return ps

    def head(self, which: str) -> Mlp:
        if which == "coarse":
            return self.coarse
        if which == "fine":
            return self.fine
        raise ValueError(f"unknown head {which!r}")

    def query(self, points, dirs, alpha: float, which: str = "coarse"):
        """Evaluate one head on (N, 3) points and directions.

        Directions are normalized internally; returns (color in [0,1]^3,
        density >= 0) as Vars of shape (N, 3) and (N,).
        """
        points = ad.as_var(points)
        dirs = ad.as_var(dirs)
        if not (np.all(np.isfinite(points.value)) and np.all(np.isfinite(dirs.value))):
            raise ValueError("non-finite points or directions in field query")
        dn = dirs / ad.norm(dirs, axis=-1, keepdims=True)
        feat = ad.concat(
            [
                encode(points, alpha, self.encoding.L_x, self.encoding.include_input),
                encode(dn, float(self.encoding.L_d), self.encoding.L_d, self.encoding.include_input),
            ],
            axis=-1,
        )
        raw = self.head(which)(feat)
        color = ad.sigmoid(raw[(slice(None), slice(0, 3))])
        density = ad.softplus(raw[(slice(None), 3)])
        if not np.all(np.isfinite(raw.value)):
            raise FloatingPointError(f"non-finite activations in {which} head")
        return color, density

    # checkpoint helpers -------------------------------------------------
    def state_dict(self) -> dict:
        return {p.name: np.asarray(p.value, dtype=np.float64) for p in self.params}

    def load_state_dict(self, state: dict) -> None:
        for p in self.params:
            if p.name not in state:
                raise KeyError(f"checkpoint is missing parameter {p.name}")
            if state[p.name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            p.value = np.array(state[p.name], dtype=ad.default_dtype())


def field_eval(field: RadianceField, which: str, x, d, alpha: float | None = None):
    """Single-point evaluation; alpha defaults to the full encoding."""
    a = field.encoding.L_x if alpha is None else alpha
    c, s = field.query(np.atleast_2d(x), np.atleast_2d(d), a, which)
    return c.value[0], float(s.value[0])
