"""Level-2 outcome regressor p(y | x, w) and level-3 propensity model p(w | x).

Both are kernel GLMs on standardised proxies.  The outcome model gates two
expansions, ``g(x, w) = w g1(x) + (1 - w) g0(x)``; the propensity model has a
single expansion ``h``.  Cross-population similarity is scaled by transfer
factors (``delta`` for outcomes, ``eta`` for treatment) learned jointly with
the coefficients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import MultiSourceDataset, OutcomeKind, stack
from .errors import DegenerateTreatment, DimMismatch, NoConvergence, NonFiniteLoss
from .kernels import L2_DELTA, L3_ETA, BlockLayout, TransferFactors, logit_grad, sqdist
from .optim import ParamPacker, adam_minimize
from .seeding import rng_for

_LOG2PI = math.log(2.0 * math.pi)


def _log_sigmoid(f):
    return -np.logaddexp(0.0, -f)


@dataclass(frozen=True)
class AuxConfig:
    gamma: float = 1.0
    anchor_budget: int = 2000
    lengthscale: Optional[float] = None
    learn_lengthscale: bool = False
    lr: float = 1e-2
    max_iter: int = 2000
    tol: float = 1e-6
    window: int = 20
    factor_init: float = 0.0


@dataclass(frozen=True)
class Standardiser:
    loc: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardiser":
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.loc) / self.scale


def _factors(level: str, n_pops: int, policy: str, init: float) -> TransferFactors:
    from .confounder import default_factors
    return default_factors(n_pops, policy if n_pops > 1 else "full", init, level)


def _median_ls(points: np.ndarray) -> float:
    from .confounder import median_lengthscale
    return median_lengthscale(points)


# ---------------------------------------------------------------- shared GLM engine


@dataclass(eq=False)
class _GLM:
    """Gated kernel GLM: ``f = sum_h gate_h * (K beta_h)`` with a fixed design."""

    xs: np.ndarray
    tags: np.ndarray
    n_pops: int
    t: np.ndarray                 # targets
    gates: List[np.ndarray]
    bernoulli: bool
    a_idx: np.ndarray
    d2: np.ndarray = field(init=False, repr=False)
    d2aa: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        xa = self.xs[self.a_idx]
        self.d2 = sqdist(self.xs, xa)
        self.d2aa = sqdist(xa, xa)
        at = self.tags[self.a_idx]
        self.lay = BlockLayout(self.tags, at, self.n_pops)
        self.lay_aa = BlockLayout(at, at, self.n_pops)
        self.G = np.column_stack(self.gates)

    def evaluate(self, params: Mapping, factors: TransferFactors, gamma: float, grad=True):
        fac = factors.with_logits(params["logits"]) if factors.learnable else factors
        Lam = fac.matrix()
        ell = math.exp(float(params["log_ls"]))
        s = -0.5 / ell ** 2
        B = np.exp(self.d2 * s)
        Baa = np.exp(self.d2aa * s)
        K = self.lay.apply(B, Lam)
        Kaa = self.lay_aa.apply(Baa, Lam)
        Bm = np.column_stack([params[f"beta{h}"] for h in range(self.G.shape[1])])
        f = np.sum(self.G * (K @ Bm), axis=1)
        if self.bernoulli:
            nll = -float(np.sum(self.t * _log_sigmoid(f) + (1 - self.t) * _log_sigmoid(-f)))
            r = self.t - expit(f)
        else:
            nll = float(np.sum(0.5 * (self.t - f) ** 2) + 0.5 * _LOG2PI * f.shape[0])
            r = self.t - f
        KaaB = Kaa @ Bm
        J = nll + gamma * float(np.sum(Bm * KaaB))
        if not grad:
            return J, None
        g = {}
        dF = -r[:, None] * self.G
        gB = K.T @ dF + 2.0 * gamma * KaaB
        for h in range(self.G.shape[1]):
            g[f"beta{h}"] = gB[:, h]
        dK = dF @ Bm.T
        dKaa = gamma * (Bm @ Bm.T)
        if fac.learnable:
            g["logits"] = logit_grad(fac, self.lay.offdiag_grad(dK, B)
                                     + self.lay_aa.offdiag_grad(dKaa, Baa))
        if "log_ls" in params:
            g["log_ls"] = np.array((np.vdot(np.multiply(dK, K, out=dK), self.d2)
                                    + np.vdot(np.multiply(dKaa, Kaa, out=dKaa), self.d2aa)) / ell ** 2)
        return J, {k: g[k] for k in params}


def _fit_glm(glm: _GLM, factors: TransferFactors, config: AuxConfig, ls0: float):
    params0 = {f"beta{h}": np.zeros(glm.a_idx.shape[0]) for h in range(len(glm.gates))}
    params0["log_ls"] = np.array(math.log(ls0))
    if factors.learnable:
        params0["logits"] = factors.logits.copy()
    learn = [k for k in params0 if k != "log_ls" or config.learn_lengthscale]
    fixed = {k: v for k, v in params0.items() if k not in learn}
    packer = ParamPacker({k: params0[k] for k in learn},
                         {k: 1.0 / math.sqrt(max(glm.a_idx.shape[0], 1))
                          for k in params0 if k.startswith("beta")})

    def fun(vec):
        p = dict(fixed)
        p.update(packer.unpack(vec))
        J, g = glm.evaluate(p, factors, config.gamma)
        return J, packer.pack_grad(g)

    try:
        with np.errstate(over="ignore", under="ignore"):
            res = adam_minimize(fun, packer.pack(params0), lr=config.lr, max_iter=config.max_iter,
                                tol=config.tol, window=config.window)
    except (NonFiniteLoss, FloatingPointError) as exc:
        raise NoConvergence(str(exc)) from exc
    if not np.isfinite(res.fun):
        raise NoConvergence("objective is not finite")
    out = dict(fixed)
    out.update(packer.unpack(res.x))
    fac = factors.with_logits(out["logits"]) if factors.learnable else factors
    return out, fac, res


def _design(data: MultiSourceDataset, config: AuxConfig, seed: int, key: str):
    from .confounder import select_anchors
    st = stack(data)
    std = Standardiser.fit(st.x[st.pop == 0])
    xs = std(st.x)
    a_idx = select_anchors(st.sizes, config.anchor_budget, (key,), seed)
    ls = config.lengthscale if config.lengthscale is not None else \
        _median_ls(xs[a_idx][st.pop[a_idx] == 0])
    return st, std, xs, a_idx, ls


@dataclass(eq=False)
class _KernelExpansion:
    std: Standardiser
    anchors: np.ndarray
    anchor_tags: np.ndarray
    lengthscale: float
    factors: TransferFactors

    @property
    def d_x(self) -> int:
        return self.anchors.shape[1]

    def design(self, x, tag: int = 0) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.d_x:
            raise DimMismatch(f"x has {x.shape[1]} columns, model expects {self.d_x}")
        B = np.exp(sqdist(self.std(x), self.anchors) * (-0.5 / self.lengthscale ** 2))
        return B * self.factors.matrix()[tag, self.anchor_tags][None, :]


# ---------------------------------------------------------------- outcome regressor


@dataclass(eq=False)
class OutcomeRegressor(_KernelExpansion):
    """Fitted ``p(y | x, w)``.  Continuous outcomes live on a standardised
    scale internally; ``y_loc``/``y_scale`` map back to raw units."""

    beta_g0: np.ndarray = None
    beta_g1: np.ndarray = None
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS
    sigma_y_tilde: Optional[float] = None
    gamma: float = 1.0
    y_loc: float = 0.0
    y_scale: float = 1.0

    @property
    def delta(self) -> TransferFactors:
        return self.factors

    def g(self, x, w, tag: int = 0) -> np.ndarray:
        D = self.design(x, tag)
        w = np.broadcast_to(np.asarray(w, dtype=float), (D.shape[0],))
        return w * (D @ self.beta_g1) + (1.0 - w) * (D @ self.beta_g0)

    def predict(self, x, w) -> np.ndarray:
        """Mean (raw units) or probability per row."""
        f = self.g(x, w)
        if self.outcome_kind is OutcomeKind.BINARY:
            return expit(f)
        return self.y_loc + self.y_scale * f

    def sample(self, x, w, rng: np.random.Generator) -> np.ndarray:
        f = self.g(x, w)
        if self.outcome_kind is OutcomeKind.BINARY:
            return (rng.uniform(size=f.shape) < expit(f)).astype(float)
        return self.y_loc + self.y_scale * (f + self.sigma_y_tilde * rng.standard_normal(f.shape))


def fit_outcome(data: MultiSourceDataset, config: AuxConfig = AuxConfig(), policy: str = "adaptive",
                seed: int = 0) -> OutcomeRegressor:
    """Minimise the outcome negative log-likelihood plus RKHS penalties over
    ``beta_g0``, ``beta_g1`` and the ``delta`` logits."""
    if policy == "none" and data.m > 0:
        return fit_outcome(data.target_only(), config, "none", seed)
    st, std, xs, a_idx, ls = _design(data, config, seed, "anchor_y")
    kind = st.schema.outcome_kind
    if kind is OutcomeKind.BINARY:
        loc, scale = 0.0, 1.0
    else:
        yt = st.y[st.pop == 0]
        loc, scale = float(yt.mean()), float(yt.std()) or 1.0
    t = (st.y - loc) / scale
    glm = _GLM(xs, st.pop, st.n_pops, t, [1.0 - st.w, st.w], kind is OutcomeKind.BINARY, a_idx)
    factors = _factors(L2_DELTA, st.n_pops, policy, config.factor_init)
    params, fac, _ = _fit_glm(glm, factors, config, ls)
    model = OutcomeRegressor(
        std=std, anchors=xs[a_idx].copy(), anchor_tags=st.pop[a_idx].copy(),
        lengthscale=math.exp(float(params["log_ls"])), factors=fac,
        beta_g0=params["beta0"].copy(), beta_g1=params["beta1"].copy(),
        outcome_kind=kind, gamma=config.gamma, y_loc=loc, y_scale=scale,
    )
    if kind is OutcomeKind.CONTINUOUS:
        tgt = st.pop == 0
        resid = t[tgt] - model.g(st.x[tgt], st.w[tgt])
        sd = float(np.sqrt(np.mean(resid ** 2)))
        model.sigma_y_tilde = sd if sd > 0 else 1e-12
    return model


def predict_outcome(x, w, model: OutcomeRegressor):
    out = model.predict(x, w)
    key = "prob" if model.outcome_kind is OutcomeKind.BINARY else "mean"
    return {key: out}


def sample_outcome(x, w, model: OutcomeRegressor, seed) -> np.ndarray:
    return model.sample(x, w, np.random.default_rng(seed))


# ---------------------------------------------------------------- propensity


@dataclass(eq=False)
class PropensityModel(_KernelExpansion):
    beta_h: np.ndarray = None
    gamma: float = 1.0

    @property
    def eta(self) -> TransferFactors:
        return self.factors

    def h(self, x, tag: int = 0) -> np.ndarray:
        return self.design(x, tag) @ self.beta_h

    def predict(self, x) -> np.ndarray:
        return expit(self.h(x))

    def sample(self, x, rng: np.random.Generator) -> np.ndarray:
        p = self.predict(x)
        return (rng.uniform(size=p.shape) < p).astype(float)


def fit_propensity(data: MultiSourceDataset, config: AuxConfig = AuxConfig(), policy: str = "adaptive",
                   seed: int = 0) -> PropensityModel:
    """Minimise the treatment Bernoulli negative log-likelihood plus an RKHS
    penalty over ``beta_h`` and the ``eta`` logits."""
    if policy == "none" and data.m > 0:
        return fit_propensity(data.target_only(), config, "none", seed)
    st, std, xs, a_idx, ls = _design(data, config, seed, "anchor_w")
    if np.all(st.w == st.w[0]):
        raise DegenerateTreatment("treatment is constant in the training data")
    glm = _GLM(xs, st.pop, st.n_pops, st.w, [np.ones_like(st.w)], True, a_idx)
    factors = _factors(L3_ETA, st.n_pops, policy, config.factor_init)
    params, fac, _ = _fit_glm(glm, factors, config, ls)
    return PropensityModel(
        std=std, anchors=xs[a_idx].copy(), anchor_tags=st.pop[a_idx].copy(),
        lengthscale=math.exp(float(params["log_ls"])), factors=fac,
        beta_h=params["beta0"].copy(), gamma=config.gamma,
    )


def predict_propensity(x, model: PropensityModel) -> np.ndarray:
    return model.predict(x)


def sample_treatment(x, model: PropensityModel, seed) -> np.ndarray:
    return model.sample(x, np.random.default_rng(seed))
