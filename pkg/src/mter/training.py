"""Joint objective, analytic gradients and projected AdaGrad training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit

from .errors import ConfigError, TrainingDivergence
from .model import PARAM_NAMES, Dims, FactorModel, init_model
from .tensors import PairOrderSet, SparseTensor3, TrainingTensors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lambda_b: float = 1.0
    lambda_f: float = 0.01
    lambda_g: float = 0.01
    batch_x: int = 256
    batch_yu: int = 128
    batch_yi: int = 128
    n_s_bpr: int = 256
    t_iter: int = 20000
    eta: float = 0.05
    ada_eps: float = 1e-8
    seed: int = 0
    dims: Dims = field(default_factory=Dims)
    init_scale: float = 0.5
    eval_interval: int = 100

    def __post_init__(self):
        for name in ("lambda_b", "lambda_f", "lambda_g"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_x", "batch_yu", "batch_yi", "eval_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_s_bpr < 0:
            raise ConfigError("n_s_bpr must be >= 0")
        if self.t_iter < 1:
            raise ConfigError("t_iter must be >= 1")
        if self.eta <= 0 or self.ada_eps <= 0 or self.init_scale <= 0:
            raise ConfigError("eta, ada_eps and init_scale must be > 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        dims = out.pop("dims")
        out.update(dims)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        """Build from flat (possibly string-valued) keys; latent sizes are ``a b c d``."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        dims = {}
        for key, raw in values.items():
            if key in ("a", "b", "c", "d"):
                dims[key] = int(raw)
            elif key in types and key != "dims":
                conv = int if types[key] == "int" else float
                try:
                    kwargs[key] = conv(raw)
                except ValueError:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from None
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if dims:
            kwargs["dims"] = Dims(**{**asdict(Dims()), **dims})
        return cls(**kwargs)


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


@dataclass
class Batches:
    """Sampled observations: coordinates plus target values per tensor.

    ``pairs`` rows are ``(user, preferred item, other item)``.
    """

    x_coords: np.ndarray
    x_values: np.ndarray
    yu_coords: np.ndarray
    yu_values: np.ndarray
    yi_coords: np.ndarray
    yi_values: np.ndarray
    pairs: np.ndarray

    @classmethod
    def empty(cls) -> "Batches":
        c = np.empty((0, 3), np.int64)
        v = np.empty(0)
        return cls(c, v, c, v, c, v, c)

    @classmethod
    def from_tensors(cls, x=None, yu=None, yi=None, pairs=None) -> "Batches":
        """Full-batch view of whole tensors (all stored entries)."""
        out = cls.empty()
        for name, t in (("x", x), ("yu", yu), ("yi", yi)):
            if t is not None:
                setattr(out, f"{name}_coords", t.coords)
                setattr(out, f"{name}_values", t.values)
        if pairs is not None:
            out.pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
        return out


@dataclass
class LossRecord:
    """Loss components at one iteration; ``bpr`` already carries its weight."""

    iteration: int
    x: float
    yu: float
    yi: float
    bpr: float
    reg: float

    @property
    def total(self) -> float:
        return self.x + self.yu + self.yi + self.bpr + self.reg

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


class LossTrace(list):
    """List of :class:`LossRecord` taken every ``eval_interval`` iterations."""

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self])


def bpr_term(model: FactorModel, pairs) -> float:
    """Negative log-likelihood of the pairwise orders, unweighted."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    if not len(pairs):
        return 0.0
    scores = _overall(model, pairs)
    # -ln sigmoid(d) = ln(1 + exp(-d))
    return float(np.logaddexp(0.0, -scores).sum())


def _overall(model, pairs):
    # difference of predicted overall ratings for (user, j) and (user, l)
    Gf = model.G1 @ model.f_dummy
    Ui = model.U[pairs[:, 0]]
    diff = model.I[pairs[:, 1]] - model.I[pairs[:, 2]]
    return np.einsum("nr,rt,nt->n", Ui, Gf, diff)


def _forward(G, A, B, C):
    """Predict ``sum G[r,t,v] A[n,r] B[n,t] C[n,v]`` for every row ``n``.

    Also returns ``G`` contracted with ``C`` (shape n x a x b) for reuse in
    :func:`_backward`.
    """
    a, b, c = G.shape
    GC = (C @ G.reshape(a * b, c).T).reshape(-1, a, b)
    pred = np.einsum("nr,nr->n", A, (GC @ B[:, :, None])[:, :, 0])
    return pred, GC


def _backward(G, A, B, C, GC, w):
    """Gradients w.r.t. each factor row and the core, given upstream weights ``w``."""
    a, b, c = G.shape
    wcol = w[:, None]
    gA = wcol * (GC @ B[:, :, None])[:, :, 0]
    gB = wcol * (A[:, None, :] @ GC)[:, 0, :]
    GA = (A @ G.reshape(a, b * c)).reshape(-1, b, c)
    gC = wcol * (B[:, None, :] @ GA)[:, 0, :]
    BC = (B[:, :, None] * C[:, None, :]).reshape(len(w), b * c)
    gG = ((wcol * A).T @ BC).reshape(a, b, c)
    return gA, gB, gC, gG


def _regularization(model, cfg):
    f = sum(float((getattr(model, k) ** 2).sum()) for k in ("U", "I", "F", "f_dummy", "O"))
    g = sum(float((getattr(model, k) ** 2).sum()) for k in ("G1", "G2", "G3"))
    return cfg.lambda_f * f + cfg.lambda_g * g


def loss_and_gradients(model: FactorModel, batches: Batches, cfg: TrainConfig, iteration: int = 0):
    """Return ``(LossRecord, grads)`` of the joint objective on ``batches``.

    Squared error is summed over the sampled entries, the ranking term over
    the sampled pairs, and L2 penalties cover every parameter in full.
    """
    p = model.F.shape[0]
    grads = {
        name: (2 * cfg.lambda_g if name.startswith("G") else 2 * cfg.lambda_f) * arr
        for name, arr in model.arrays().items()
    }
    gFt = np.vstack([grads["F"], grads["f_dummy"][None, :]])
    Ft = model.F_tilde

    # rating tensor entries and ranking pairs share the G1 contraction
    xc = batches.x_coords
    pairs = batches.pairs
    rows_u = np.concatenate([xc[:, 0], pairs[:, 0], pairs[:, 0]])
    rows_i = np.concatenate([xc[:, 1], pairs[:, 1], pairs[:, 2]])
    rows_f = np.concatenate([xc[:, 2], np.full(2 * len(pairs), p, np.int64)])
    loss_x = bpr = 0.0
    if len(rows_u):
        A, B, C = model.U[rows_u], model.I[rows_i], Ft[rows_f]
        pred, GC = _forward(model.G1, A, B, C)
        nx = len(xc)
        resid = pred[:nx] - batches.x_values
        loss_x = float(resid @ resid)
        w = np.empty(len(rows_u))
        w[:nx] = 2.0 * resid
        if len(pairs):
            np_ = len(pairs)
            d = pred[nx:nx + np_] - pred[nx + np_:]
            bpr = cfg.lambda_b * float(np.logaddexp(0.0, -d).sum())
            coef = -cfg.lambda_b * expit(-d)
            w[nx:nx + np_] = coef
            w[nx + np_:] = -coef
        gA, gB, gC, gG = _backward(model.G1, A, B, C, GC, w)
        np.add.at(grads["U"], rows_u, gA)
        np.add.at(grads["I"], rows_i, gB)
        np.add.at(gFt, rows_f, gC)
        grads["G1"] = grads["G1"] + gG

    grads["F"] = gFt[:p]
    grads["f_dummy"] = gFt[p]

    losses = {}
    for name, core, owner in (("yu", "G2", "U"), ("yi", "G3", "I")):
        coords = getattr(batches, f"{name}_coords")
        if not len(coords):
            losses[name] = 0.0
            continue
        G = getattr(model, core)
        A = getattr(model, owner)[coords[:, 0]]
        B = model.F[coords[:, 1]]
        C = model.O[coords[:, 2]]
        # core axes are (owner, feature, opinion)
        pred, GC = _forward(G, A, B, C)
        resid = pred - getattr(batches, f"{name}_values")
        losses[name] = float(resid @ resid)
        gA, gB, gC, gG = _backward(G, A, B, C, GC, 2.0 * resid)
        np.add.at(grads[owner], coords[:, 0], gA)
        np.add.at(grads["F"], coords[:, 1], gB)
        np.add.at(grads["O"], coords[:, 2], gC)
        grads[core] = grads[core] + gG

    record = LossRecord(iteration, loss_x, losses["yu"], losses["yi"], bpr, _regularization(model, cfg))
    return record, grads


def joint_loss(model: FactorModel, batches: Batches, cfg: TrainConfig) -> LossRecord:
    """Objective value on the given batches, without gradients."""
    Ft = model.F_tilde
    parts = {}
    for name, core, feats in (("x", "G1", Ft), ("yu", "G2", model.F), ("yi", "G3", model.F)):
        coords = getattr(batches, f"{name}_coords")
        if not len(coords):
            parts[name] = 0.0
            continue
        first = model.U if name != "yi" else model.I
        second = model.I if name == "x" else feats
        third = feats if name == "x" else model.O
        pred, _ = _forward(getattr(model, core), first[coords[:, 0]], second[coords[:, 1]], third[coords[:, 2]])
        resid = pred - getattr(batches, f"{name}_values")
        parts[name] = float(resid @ resid)
    bpr = cfg.lambda_b * bpr_term(model, batches.pairs)
    return LossRecord(0, parts["x"], parts["yu"], parts["yi"], bpr, _regularization(model, cfg))


def compute_gradients(model: FactorModel, batches: Batches, cfg: TrainConfig) -> dict[str, np.ndarray]:
    return loss_and_gradients(model, batches, cfg)[1]


class AdaState(dict):
    """Accumulated squared gradients, one array per model parameter."""

    @classmethod
    def zeros_like(cls, model: FactorModel) -> "AdaState":
        return cls({k: np.zeros_like(v) for k, v in model.arrays().items()})


def adagrad_project_step(model: FactorModel, grads: dict, state: AdaState, eta: float, ada_eps: float):
    """One AdaGrad step followed by projection onto the non-negative orthant.

    Updates ``model`` and ``state`` in place and returns both.
    """
    for name in PARAM_NAMES:
        g = grads[name]
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise TrainingDivergence(f"non-finite gradient for {name}: {bad} of {g.size} entries")
        acc = state[name]
        acc += g * g
        theta = getattr(model, name)
        theta -= eta * g / np.sqrt(acc + ada_eps)
        np.maximum(theta, 0.0, out=theta)
    return model, state


class PairSampler:
    """Draws (user, preferred, other) triples from a :class:`PairOrderSet`.

    A user is drawn proportionally to their review count and one of their
    rated items ``j`` uniformly. A fair coin then picks the comparison item:
    a strictly lower-rated item the user also rated, or an item the user
    never reviewed. Attempts whose chosen branch has no candidate are
    redrawn from scratch, up to ``max_retries`` rounds.
    """

    def __init__(self, pairs: PairOrderSet, max_retries: int = 50):
        self.n_items = pairs.n_items
        self.max_retries = max_retries
        counts = np.asarray(pairs.review_counts, dtype=np.float64).copy()
        n_rated = np.array([len(r) for r in pairs.rated], dtype=np.int64)
        counts[n_rated == 0] = 0
        total = counts.sum()
        self.user_probs = counts / total if total > 0 else None
        self._user_cdf = np.cumsum(self.user_probs) if total > 0 else None
        self.n_rated = n_rated
        self.offsets = np.concatenate([[0], np.cumsum(n_rated)[:-1]]).astype(np.int64)
        flat, lower = [], []
        for ratings in pairs.rated:
            order = sorted(ratings, key=lambda it: (ratings[it], it))
            first_at = {}
            for pos, it in enumerate(order):
                first_at.setdefault(ratings[it], pos)
                lower.append(first_at[ratings[it]])
            flat.extend(order)
        self.flat = np.array(flat, dtype=np.int64)
        self.lower = np.array(lower, dtype=np.int64)
        self.rated_keys = np.sort(
            np.array([u * self.n_items + it for u, r in enumerate(pairs.rated) for it in r], dtype=np.int64)
        )

    def _is_rated(self, users, items):
        keys = users * self.n_items + items
        pos = np.searchsorted(self.rated_keys, keys)
        pos = np.minimum(pos, len(self.rated_keys) - 1)
        return self.rated_keys[pos] == keys

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.user_probs is None or size <= 0:
            return np.empty((0, 3), np.int64)
        out = []
        pending = size
        for _ in range(self.max_retries):
            if pending == 0:
                break
            u = np.searchsorted(self._user_cdf, rng.random(pending) * self._user_cdf[-1], side="right")
            cnt = self.n_rated[u]
            pos = self.offsets[u] + (rng.random(pending) * cnt).astype(np.int64)
            j = self.flat[pos]
            use_lower = rng.random(pending) < 0.5
            n_lower = self.lower[pos]
            l = self.flat[self.offsets[u] + (rng.random(pending) * n_lower).astype(np.int64)]
            ok = np.where(use_lower, n_lower > 0, cnt < self.n_items)
            unrev = ~use_lower & ok
            if unrev.any():
                idx = np.flatnonzero(unrev)
                cand = rng.integers(self.n_items, size=len(idx))
                bad = self._is_rated(u[idx], cand)
                while bad.any():
                    cand[bad] = rng.integers(self.n_items, size=int(bad.sum()))
                    bad = self._is_rated(u[idx], cand)
                l[idx] = cand
            out.append(np.stack([u[ok], j[ok], l[ok]], axis=1))
            pending -= int(ok.sum())
        if pending:
            log.debug("pair sampler skipped %d draws after %d retries", pending, self.max_retries)
        return np.concatenate(out).astype(np.int64) if out else np.empty((0, 3), np.int64)


def _draw(t: SparseTensor3, rng, size):
    if t.nnz == 0:
        return np.empty((0, 3), np.int64), np.empty(0)
    idx = rng.integers(t.nnz, size=size)
    return t.coords[idx], t.values[idx]


def sample_batches(tensors: TrainingTensors, cfg: TrainConfig, rng: np.random.Generator,
                   sampler: PairSampler | None = None) -> Batches:
    """Uniform draws with replacement from each tensor's stored entries, plus ranking pairs."""
    xc, xv = _draw(tensors.x, rng, cfg.batch_x)
    uc, uv = _draw(tensors.yu, rng, cfg.batch_yu)
    ic, iv = _draw(tensors.yi, rng, cfg.batch_yi)
    if cfg.lambda_b > 0 and cfg.n_s_bpr > 0:
        sampler = sampler or PairSampler(tensors.pairs)
        pairs = sampler.sample(rng, cfg.n_s_bpr)
    else:
        pairs = np.empty((0, 3), np.int64)
    return Batches(xc, xv, uc, uv, ic, iv, pairs)


def train(tensors: TrainingTensors, cfg: TrainConfig, model: FactorModel | None = None,
          callback=None) -> tuple[FactorModel, LossTrace]:
    """Run ``cfg.t_iter`` sample / gradient / projected-AdaGrad iterations.

    ``callback(iteration, model)`` is invoked whenever a loss record is
    taken. Raises :class:`TrainingDivergence` if the loss stops being finite.
    """
    if tensors.x.nnz == 0:
        raise ConfigError("rating tensor has no observed entries")
    rng = np.random.default_rng(cfg.seed)
    m, n, p1 = tensors.x.dims
    q = tensors.yu.dims[2]
    if model is None:
        model = init_model(cfg.dims, m, n, p1 - 1, q, rng, cfg.init_scale)
    else:
        model = model.copy()
    state = AdaState.zeros_like(model)
    sampler = PairSampler(tensors.pairs) if cfg.lambda_b > 0 and cfg.n_s_bpr > 0 else None
    trace = LossTrace()
    for it in range(cfg.t_iter):
        batches = sample_batches(tensors, cfg, rng, sampler)
        record, grads = loss_and_gradients(model, batches, cfg, iteration=it)
        if not np.isfinite(record.total):
            trace.append(record)
            raise TrainingDivergence(f"loss became non-finite at iteration {it}", trace)
        try:
            adagrad_project_step(model, grads, state, cfg.eta, cfg.ada_eps)
        except TrainingDivergence as exc:
            trace.append(record)
            raise TrainingDivergence(f"iteration {it}: {exc}", trace) from None
        if it % cfg.eval_interval == 0 or it == cfg.t_iter - 1:
            trace.append(record)
            log.debug("iter %d loss %.4f", it, record.total)
            if callback is not None:
                callback(it, model)
    return model, trace


def relative_bpr_weight(cfg: TrainConfig, m: int, n: int) -> float:
    """Ranking-term weight normalised by the number of possible pairs ``m * n**2``."""
    if m < 1 or n < 1:
        raise ConfigError("m and n must be >= 1")
    return cfg.lambda_b * cfg.n_s_bpr * cfg.t_iter / (m * n * n)


def lambda_for_phi(phi: float, cfg: TrainConfig, m: int, n: int) -> float:
    """Inverse of :func:`relative_bpr_weight` for a target ``phi``."""
    return phi * m * n * n / (cfg.n_s_bpr * cfg.t_iter)
