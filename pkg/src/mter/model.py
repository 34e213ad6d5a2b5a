"""Factor model and Tucker reconstruction algebra."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ShapeError

PARAM_NAMES = ("U", "I", "F", "f_dummy", "O", "G1", "G2", "G3")


@dataclass(frozen=True)
class Dims:
    """Latent sizes for users (a), items (b), features (c), opinions (d)."""

    a: int = 8
    b: int = 8
    c: int = 6
    d: int = 6

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 1:
                raise ConfigError(f"latent dimension {f.name} must be >= 1")


@dataclass
class FactorModel:
    """Shared factor matrices plus one core tensor per observation tensor.

    ``F`` holds the ``p`` real features; ``f_dummy`` is the extra row used
    only when reconstructing the overall-rating slice, so the feature
    matrix of the rating tensor is ``vstack([F, f_dummy])``.
    """

    U: np.ndarray
    I: np.ndarray
    F: np.ndarray
    f_dummy: np.ndarray
    O: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    G3: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.check_shapes()

    @property
    def dims(self) -> Dims:
        return Dims(self.U.shape[1], self.I.shape[1], self.F.shape[1], self.O.shape[1])

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """Entity counts ``(m, n, p, q)``."""
        return self.U.shape[0], self.I.shape[0], self.F.shape[0], self.O.shape[0]

    @property
    def F_tilde(self) -> np.ndarray:
        return np.vstack([self.F, self.f_dummy[None, :]])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "FactorModel":
        return FactorModel(**{k: v.copy() for k, v in self.arrays().items()})

    def check_shapes(self):
        a, b, c, d = self.U.shape[1], self.I.shape[1], self.F.shape[1], self.O.shape[1]
        expected = {
            "f_dummy": (c,),
            "G1": (a, b, c),
            "G2": (a, c, d),
            "G3": (b, c, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("U", "I", "F", "O"):
            if getattr(self, name).ndim != 2:
                raise ShapeError(f"{name} must be a matrix")

    def is_nonnegative(self) -> bool:
        return all((arr >= 0).all() for arr in self.arrays().values())

    def scaled(self, factor: float) -> "FactorModel":
        return FactorModel(**{k: v * factor for k, v in self.arrays().items()})

    # Vectorised helpers used by training and evaluation.

    def overall_scores(self, user: int) -> np.ndarray:
        """Predicted overall rating of every item for one user."""
        core = np.einsum("rtv,r,v->t", self.G1, self.U[user], self.f_dummy)
        return self.I @ core

    def feature_scores(self, user: int, item: int) -> np.ndarray:
        """Predicted affinity of every real feature (dummy excluded)."""
        core = np.einsum("rtv,r,t->v", self.G1, self.U[user], self.I[item])
        return self.F @ core

    def phrase_scores(self, user: int, item: int, feature: int) -> np.ndarray:
        """Opinion scores of every phrase for one (user, item, feature)."""
        yu = self.O @ np.einsum("rvs,r,v->s", self.G2, self.U[user], self.F[feature])
        yi = self.O @ np.einsum("tvs,t,v->s", self.G3, self.I[item], self.F[feature])
        return yu * yi


def init_model(dims: Dims, m: int, n: int, p: int, q: int, seed=0, scale: float = 0.1) -> FactorModel:
    """Draw every parameter i.i.d. uniform on ``(0, scale]``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if scale <= 0:
        raise ConfigError(f"init scale must be > 0, got {scale}")
    if min(m, n, p, q) < 1:
        raise ConfigError(f"entity counts must be >= 1, got m={m} n={n} p={p} q={q}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a, b, c, d = dims.a, dims.b, dims.c, dims.d

    def draw(*shape):
        # 1 - U[0, 1) lies in (0, 1]
        return scale * (1.0 - rng.random(shape))

    return FactorModel(
        U=draw(m, a), I=draw(n, b), F=draw(p, c), f_dummy=draw(c), O=draw(q, d),
        G1=draw(a, b, c), G2=draw(a, c, d), G3=draw(b, c, d),
    )


def mode_product(core: np.ndarray, M: np.ndarray, mode: int) -> np.ndarray:
    """n-mode product ``core x_mode M`` with 1-based ``mode``.

    Every mode-``mode`` fiber of ``core`` is multiplied by ``M``, so the
    output size along that mode is ``M.shape[0]``.
    """
    if mode not in (1, 2, 3) or core.ndim != 3:
        raise ShapeError(f"mode must be 1, 2 or 3 on a 3-way array (got mode={mode}, ndim={core.ndim})")
    M = np.atleast_2d(M)
    axis = mode - 1
    if M.shape[1] != core.shape[axis]:
        raise ShapeError(
            f"matrix has {M.shape[1]} columns but core has size {core.shape[axis]} along mode {mode}"
        )
    out = np.tensordot(M, core, axes=(1, axis))
    return np.moveaxis(out, 0, axis)


def _check_index(value, size, what):
    if not 0 <= value < size:
        raise IndexError(f"{what} index {value} out of range [0, {size})")


def _chain(core, a, b, c) -> float:
    out = mode_product(core, a[None, :], 1)
    out = mode_product(out, b[None, :], 2)
    out = mode_product(out, c[None, :], 3)
    return float(out[0, 0, 0])


def predict_x(model: FactorModel, i: int, j: int, k: int) -> float:
    """Reconstructed user-item-feature affinity; ``k == p`` is the overall rating."""
    m, n, p, _ = model.shape
    _check_index(i, m, "user")
    _check_index(j, n, "item")
    _check_index(k, p + 1, "feature")
    frow = model.f_dummy if k == p else model.F[k]
    return _chain(model.G1, model.U[i], model.I[j], frow)


def predict_overall(model: FactorModel, i: int, j: int) -> float:
    return predict_x(model, i, j, model.F.shape[0])


def _check_phrase_args(model, k, w):
    _, _, p, q = model.shape
    if k == p:
        raise ValueError("the overall-rating feature has no opinion phrases")
    _check_index(k, p, "feature")
    _check_index(w, q, "phrase")


def predict_yu(model: FactorModel, i: int, k: int, w: int) -> float:
    _check_phrase_args(model, k, w)
    _check_index(i, model.shape[0], "user")
    return _chain(model.G2, model.U[i], model.F[k], model.O[w])


def predict_yi(model: FactorModel, j: int, k: int, w: int) -> float:
    _check_phrase_args(model, k, w)
    _check_index(j, model.shape[1], "item")
    return _chain(model.G3, model.I[j], model.F[k], model.O[w])


def opinion_score(model: FactorModel, i: int, j: int, k: int, w: int) -> float:
    """Score of phrase ``w`` for user ``i`` describing feature ``k`` of item ``j``."""
    return predict_yu(model, i, k, w) * predict_yi(model, j, k, w)
