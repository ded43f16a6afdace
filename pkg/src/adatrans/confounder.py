"""Level-1 transfer: kernel variational inference over the latent confounder.

Six functions are fitted jointly.  ``f_q0``/``f_q1`` map ``[x; y]`` to the
mean of the Gaussian posterior ``q(z | x, w, y)``; ``f_y0``, ``f_y1``, ``f_w``
and ``f_x`` map a confounder draw to the outcome, treatment and proxy
likelihoods.  Every function is a kernel expansion over anchor points with
the transferable kernel of :mod:`adatrans.kernels`, and the objective is the
negative Monte-Carlo ELBO plus RKHS penalties ``gamma_c * a^T K a``.

Confounder draws use a fixed-noise reparameterisation: ``eps`` is drawn once
per fit and ``z = f_q(x, w, y) + sigma_q * eps`` is recomputed from the
current parameters at every evaluation, which makes the objective a
deterministic function of the parameters.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import MultiSourceDataset, OutcomeKind, PopulationData, Stacked, stack
from .errors import DimMismatch, NoConvergence, NonFiniteLoss
from .kernels import (
    L1_LAMBDA,
    BlockLayout,
    BaseKernelSpec,
    TransferFactors,
    factor_grad,
    logit_grad,
    sqdist,
)
from .optim import ParamPacker, adam_minimize
from .seeding import rng_for

log = logging.getLogger(__name__)

Z_FUNCS = ("y0", "y1", "w", "x")
Q_FUNCS = ("q0", "q1")
FUNCS = Z_FUNCS + Q_FUNCS
_LOG2PI = math.log(2.0 * math.pi)


def log_sigmoid(f):
    return -np.logaddexp(0.0, -f)


@dataclass(frozen=True)
class StructuralConfig:
    d_z: int = 2
    sigma_z: float = math.sqrt(8.0)
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS
    sigma_y: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))
        if self.d_z < 1 or not self.sigma_z > 0 or not self.sigma_y > 0:
            raise ValueError("need d_z >= 1, sigma_z > 0 and sigma_y > 0")


@dataclass(frozen=True)
class ConfounderConfig:
    """Fitting options for the level-1 model.

    ``gamma`` is one regulariser for every function or a mapping keyed by
    function name; ``gamma_grid`` (optional) lists alternative common values
    that are tried and selected on the validation criterion.
    """

    structural: StructuralConfig = StructuralConfig()
    n_samples: int = 5
    restarts: int = 5
    max_iter: int = 2000
    lr: float = 1e-2
    tol: float = 1e-6
    window: int = 20
    gamma: object = 1.0
    gamma_grid: tuple = ()
    anchor_budget: int = 2000
    q_anchor_budget: int = 2000
    init_scale: float = 0.1
    sigma_q_init: float = 1.0
    z_lengthscale: float = 1.5
    z_kernel: str = "rbf"
    q_lengthscale: Optional[float] = None
    learn_hyper: bool = True
    factor_init: float = 0.0
    val_samples: int = 5

    def gammas(self, common: Optional[float] = None) -> Dict[str, float]:
        if common is not None:
            g = {c: float(common) for c in FUNCS}
        elif isinstance(self.gamma, Mapping):
            g = {c: float(self.gamma.get(c, 1.0)) for c in FUNCS}
        else:
            g = {c: float(self.gamma) for c in FUNCS}
        if any(not v > 0 for v in g.values()):
            raise ValueError("regularisers must be positive")
        return g


# ---------------------------------------------------------------- anchors


def select_anchors(sizes: Sequence[int], budget: int, rng_key: Tuple, seed: int) -> np.ndarray:
    """Global row indices of anchors for contiguous population blocks.

    The target block (first) is kept whole when it fits the budget; the rest
    of the budget is split across sources in proportion to their size.  Each
    population subsamples from its own stream.
    """
    sizes = [int(s) for s in sizes]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    if sum(sizes) <= budget:
        return np.arange(sum(sizes))
    take = [min(sizes[0], budget)]
    rest = budget - take[0]
    src_total = sum(sizes[1:])
    for s in sizes[1:]:
        take.append(min(s, int(rest * s // src_total)) if src_total else 0)
    out = []
    for k, (start, size, t) in enumerate(zip(starts, sizes, take)):
        if t >= size:
            out.append(np.arange(start, start + size))
        elif t > 0:
            pick = rng_for(seed, *rng_key, k).choice(size, size=t, replace=False)
            out.append(start + np.sort(pick))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# ---------------------------------------------------------------- augmented data


@dataclass(eq=False)
class AugmentedDataset:
    """Observations, fixed reparameterisation noise, and anchor layout.

    ``z`` holds the materialised draws ``f_q + sigma_q * eps`` for the
    parameters it was last built with; :func:`materialize` refreshes it.
    """

    x: np.ndarray            # (N, d_x)
    w: np.ndarray            # (N,)
    y: np.ndarray            # (N,) standardised when continuous
    pop: np.ndarray          # (N,) population index, used for seeding
    tags: np.ndarray         # (N,) population index seen by the kernels
    n_pops: int              # populations seen by the kernels
    sizes: tuple
    x_binary: np.ndarray     # (d_x,) bool
    structural: StructuralConfig
    eps: np.ndarray          # (N, L, d_z)
    q_idx: np.ndarray        # anchor observations for f_q
    z_idx: np.ndarray        # anchor augmented rows for f_y*, f_w, f_x
    y_loc: float = 0.0
    y_scale: float = 1.0
    z_kernel: str = "rbf"
    z: Optional[np.ndarray] = None
    # cached, parameter independent pieces
    v: np.ndarray = field(init=False, repr=False)
    d2q: np.ndarray = field(init=False, repr=False)
    d2qq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.v = np.hstack([self.x, self.y[:, None]])
        vq = self.v[self.q_idx]
        self.d2q = sqdist(self.v, vq)
        self.d2qq = sqdist(vq, vq)
        tq = self.tags[self.q_idx]
        rt = np.repeat(self.tags, self.L)
        self.lay_q = BlockLayout(self.tags, tq, self.n_pops)
        self.lay_qq = BlockLayout(tq, tq, self.n_pops)
        self.lay_z = BlockLayout(rt, rt[self.z_idx], self.n_pops)
        self.lay_aa = BlockLayout(rt[self.z_idx], rt[self.z_idx], self.n_pops)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def L(self) -> int:
        return self.eps.shape[1]

    @property
    def d_z(self) -> int:
        return self.eps.shape[2]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def row_tags(self) -> np.ndarray:
        return np.repeat(self.tags, self.L)

    @property
    def n_rows(self) -> int:
        return self.N * self.L


def standardisation(st: Stacked) -> Tuple[float, float]:
    if st.schema.outcome_kind is OutcomeKind.BINARY:
        return 0.0, 1.0
    yt = st.y[st.pop == 0]
    loc = float(np.mean(yt))
    scale = float(np.std(yt))
    return loc, (scale if scale > 0 else 1.0)


def build_augmented(data: MultiSourceDataset, structural: StructuralConfig, L: int, seed: int,
                    anchor_budget: int = 2000, q_anchor_budget: int = 2000,
                    pool: bool = False, z_kernel: str = "rbf") -> AugmentedDataset:
    """Stack the populations, draw the fixed noise and pick anchors.

    With ``pool`` every row carries kernel tag 0 (plain pooling); seeds and
    anchors stay per population so pooled and fully-transferred fits share
    their random inputs.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if data.schema.outcome_kind != structural.outcome_kind:
        raise DimMismatch("data outcome kind differs from the structural config")
    st = stack(data)
    loc, scale = standardisation(st)
    y = (st.y - loc) / scale
    eps = np.concatenate([
        rng_for(seed, "eps", k).standard_normal((n, L, structural.d_z))
        for k, n in enumerate(st.sizes)
    ]) if st.n else np.zeros((0, L, structural.d_z))
    q_idx = select_anchors(st.sizes, q_anchor_budget, ("anchor_q",), seed)
    z_idx = select_anchors([n * L for n in st.sizes], anchor_budget, ("anchor_z",), seed)
    tags = np.zeros_like(st.pop) if pool else st.pop.copy()
    return AugmentedDataset(
        x=st.x, w=st.w, y=y, pop=st.pop, tags=tags,
        n_pops=1 if pool else st.n_pops, sizes=st.sizes,
        x_binary=np.array(st.schema.x_binary, dtype=bool), structural=structural,
        eps=eps, q_idx=q_idx, z_idx=z_idx, y_loc=loc, y_scale=scale, z_kernel=z_kernel,
    )


def resample_augmented(data: MultiSourceDataset, params: Mapping, L: int, seed: int,
                       structural: StructuralConfig, **kwargs) -> AugmentedDataset:
    """Fresh augmented dataset with ``z`` materialised for ``params``."""
    aug = build_augmented(data, structural, L, seed, **kwargs)
    materialize(aug, params)
    return aug


# ---------------------------------------------------------------- parameters


def default_factors(n_pops: int, policy: str = "adaptive", init: float = 0.0,
                    level: str = L1_LAMBDA) -> TransferFactors:
    if policy == "adaptive":
        m = n_pops - 1
        return TransferFactors(level, n_pops, logits=np.full(m * (m + 1) // 2, float(init)))
    if policy == "full":
        return TransferFactors.pinned(level, n_pops, 1.0)
    if policy == "none":
        return TransferFactors.pinned(level, n_pops, 0.0)
    raise ValueError(f"unknown transfer policy {policy!r}")


def median_lengthscale(points: np.ndarray) -> float:
    d2 = sqdist(points, points)
    vals = d2[np.triu_indices_from(d2, k=1)]
    vals = vals[vals > 0]
    if vals.size == 0:
        return 1.0
    return float(np.sqrt(0.5 * np.median(vals)))


def init_params(aug: AugmentedDataset, config: ConfounderConfig, restart: int, seed: int,
                factors: TransferFactors) -> Dict[str, np.ndarray]:
    """Zero likelihood coefficients, random posterior coefficients.

    Restarts differ only in ``alpha_q0``/``alpha_q1``; those draws come from
    per-population streams so a population's initial values do not depend
    on which other populations are present.
    """
    d_z = aug.d_z
    A_z = aug.z_idx.shape[0]
    pop_q = aug.pop[aug.q_idx]
    qa = {}
    for name in ("alpha_q0", "alpha_q1"):
        arr = np.zeros((aug.q_idx.shape[0], d_z))
        for k in np.unique(pop_q):
            sel = pop_q == k
            arr[sel] = config.init_scale * rng_for(seed, "init_" + name, restart, int(k)) \
                .standard_normal((int(sel.sum()), d_z))
        qa[name] = arr
    if config.q_lengthscale is not None:
        q_ls = float(config.q_lengthscale)
    else:
        ref = aug.v[aug.q_idx][pop_q == 0] if np.any(pop_q == 0) else aug.v[aug.q_idx]
        q_ls = median_lengthscale(ref)
    params = {
        "alpha_y0": np.zeros(A_z),
        "alpha_y1": np.zeros(A_z),
        "alpha_w": np.zeros(A_z),
        "alpha_x": np.zeros((A_z, aug.d_x)),
        "alpha_q0": qa["alpha_q0"],
        "alpha_q1": qa["alpha_q1"],
        "log_sigma_q": np.array(math.log(config.sigma_q_init)),
        "log_ls": np.log(np.array([config.z_lengthscale, q_ls])),
    }
    if factors.learnable:
        params["lambda_logits"] = factors.logits.copy()
    return params


def _factors_from(params: Mapping, template: TransferFactors) -> TransferFactors:
    if template.learnable and "lambda_logits" in params:
        return template.with_logits(params["lambda_logits"])
    return template


def _stack_z(params: Mapping) -> np.ndarray:
    """Columns ``[y0, y1, w, x_1..x_dx]`` of the z-function coefficients."""
    return np.column_stack([params["alpha_y0"], params["alpha_y1"], params["alpha_w"],
                            params["alpha_x"]])


def _gamma_cols(gammas: Mapping[str, float], d_x: int) -> np.ndarray:
    return np.array([gammas["y0"], gammas["y1"], gammas["w"]] + [gammas["x"]] * d_x)


# ---------------------------------------------------------------- forward / backward


@dataclass
class Evaluation:
    J: float
    neg_elbo: float
    nll: float
    kl: float
    reg: float
    grads: Optional[Dict[str, np.ndarray]] = None


def _mask(Lam: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    return Lam[pa[:, None], pb[None, :]]


def _bern_ll(t, f):
    return t * log_sigmoid(f) + (1.0 - t) * log_sigmoid(-f)


def posterior_mean(aug: AugmentedDataset, params: Mapping, Lam: np.ndarray):
    """Posterior means for every observation, plus the q-kernel pieces."""
    ell = math.exp(float(params["log_ls"][1]))
    Bq = np.exp(aug.d2q * (-0.5 / ell ** 2))
    Kq = aug.lay_q.apply(Bq, Lam)
    F0 = Kq @ params["alpha_q0"]
    F1 = Kq @ params["alpha_q1"]
    mean = aug.w[:, None] * F1 + (1.0 - aug.w)[:, None] * F0
    return mean, Kq, Bq


def materialize(aug: AugmentedDataset, params: Mapping, factors: Optional[TransferFactors] = None) -> np.ndarray:
    """Recompute ``z = f_q + sigma_q * eps`` in place; returns (N*L, d_z)."""
    if factors is None:
        if "lambda_logits" in params:
            factors = TransferFactors(L1_LAMBDA, aug.n_pops, logits=params["lambda_logits"])
        else:
            factors = TransferFactors.pinned(L1_LAMBDA, aug.n_pops, 1.0)
    Lam = _factors_from(params, factors).matrix()
    mean, _, _ = posterior_mean(aug, params, Lam)
    sq = math.exp(float(params["log_sigma_q"]))
    aug.z = (mean[:, None, :] + sq * aug.eps).reshape(-1, aug.d_z)
    return aug.z


def evaluate(aug: AugmentedDataset, params: Mapping, factors: TransferFactors,
             gammas: Mapping[str, float], grad: bool = True) -> Evaluation:
    """Objective J (and its gradient) at ``params``.

    Also refreshes ``aug.z``.  The gradient covers every key of ``params``.
    """
    S = aug.structural
    fac = _factors_from(params, factors)
    if fac.n_pops != aug.n_pops:
        raise DimMismatch(f"factors cover {fac.n_pops} populations, data has {aug.n_pops}")
    Lam = fac.matrix()
    N, L, d_z, d_x = aug.N, aug.L, aug.d_z, aug.d_x
    ell_z, ell_q = np.exp(params["log_ls"])
    sq = math.exp(float(params["log_sigma_q"]))

    # posterior means and confounder draws
    mean, Kq, Bq = posterior_mean(aug, params, Lam)
    Z = (mean[:, None, :] + sq * aug.eps).reshape(-1, d_z)
    aug.z = Z
    rtags = aug.row_tags
    Za = Z[aug.z_idx]
    atags = rtags[aug.z_idx]
    rbf = aug.z_kernel == "rbf"
    if rbf:
        d2z = sqdist(Z, Za)
        d2aa = sqdist(Za, Za)
        s = -0.5 / ell_z ** 2
        B = np.exp(d2z * s)
        Baa = np.exp(d2aa * s)
    else:
        B = Z @ Za.T + 1.0
        Baa = Za @ Za.T + 1.0
    K = aug.lay_z.apply(B, Lam)
    Kaa = aug.lay_aa.apply(Baa, Lam)
    A = _stack_z(params)
    F = K @ A

    # likelihood terms, shaped (N, L[, d_x])
    w = aug.w[:, None]
    fy0 = F[:, 0].reshape(N, L)
    fy1 = F[:, 1].reshape(N, L)
    fy = w * fy1 + (1.0 - w) * fy0
    y = aug.y[:, None]
    if S.outcome_kind is OutcomeKind.CONTINUOUS:
        ll_y = -0.5 * ((y - fy) / S.sigma_y) ** 2 - math.log(S.sigma_y) - 0.5 * _LOG2PI
        r_y = (y - fy) / S.sigma_y ** 2
    else:
        ll_y = _bern_ll(y, fy)
        r_y = y - expit(fy)
    fw = F[:, 2].reshape(N, L)
    ll_w = _bern_ll(w, fw)
    fx = F[:, 3:].reshape(N, L, d_x)
    xx = aug.x[:, None, :]
    xb = aug.x_binary[None, None, :]
    if aug.x_binary.all():
        ll_x = _bern_ll(xx, fx)
    else:
        ll_x = np.where(xb, _bern_ll(xx, fx), -0.5 * (xx - fx) ** 2 - 0.5 * _LOG2PI)
    nll = -(ll_y.sum() + ll_w.sum() + ll_x.sum()) / L

    sz2 = S.sigma_z ** 2
    kl = float(N * d_z * (math.log(S.sigma_z / sq) + sq * sq / (2 * sz2) - 0.5)
               + (mean ** 2).sum() / (2 * sz2))

    gcol = _gamma_cols(gammas, d_x)
    KaaA = Kaa @ A
    reg = float(np.sum(gcol * np.sum(A * KaaA, axis=0)))
    tq = aug.tags[aug.q_idx]
    Bqq = np.exp(aug.d2qq * (-0.5 / ell_q ** 2))
    Kqq = aug.lay_qq.apply(Bqq, Lam)
    Aq = np.hstack([params["alpha_q0"], params["alpha_q1"]])
    gq = np.repeat([gammas["q0"], gammas["q1"]], d_z)
    KqqAq = Kqq @ Aq
    reg += float(np.sum(gq * np.sum(Aq * KqqAq, axis=0)))

    neg_elbo = float(nll + kl)
    ev = Evaluation(J=neg_elbo + reg, neg_elbo=neg_elbo, nll=float(nll), kl=kl, reg=reg)
    if not grad:
        return ev

    g: Dict[str, np.ndarray] = {}
    P = aug.n_pops
    r_w = w - expit(fw)
    r_x = np.where(xb, xx - expit(fx), xx - fx)
    dF = np.empty_like(F)
    dF[:, 0] = (-((1.0 - w) * r_y) / L).reshape(-1)
    dF[:, 1] = (-(w * r_y) / L).reshape(-1)
    dF[:, 2] = (-r_w / L).reshape(-1)
    dF[:, 3:] = (-r_x / L).reshape(-1, d_x)
    gA = K.T @ dF + 2.0 * gcol * KaaA
    g["alpha_y0"], g["alpha_y1"], g["alpha_w"] = gA[:, 0], gA[:, 1], gA[:, 2]
    g["alpha_x"] = gA[:, 3:]

    dK = dF @ A.T
    dKaa = (A * gcol) @ A.T
    dLam = np.zeros((P, P))
    if fac.learnable:
        dLam += aug.lay_z.offdiag_grad(dK, B) + aug.lay_aa.offdiag_grad(dKaa, Baa)
    if rbf:
        GK = np.multiply(dK, K, out=dK)
        GKaa = np.multiply(dKaa, Kaa, out=dKaa)
        dlog_z = (np.vdot(GK, d2z) + np.vdot(GKaa, d2aa)) / ell_z ** 2
        # d2(u, v) = |u|^2 + |v|^2 - 2 u.v, and dJ/d d2 = s * GK
        dZ = (2.0 * s) * (Z * GK.sum(axis=1)[:, None] - GK @ Za)
        dZa = (2.0 * s) * (Za * GK.sum(axis=0)[:, None] - GK.T @ Z)
        Es = GKaa + GKaa.T
        dZa += (2.0 * s) * (Za * Es.sum(axis=1)[:, None] - Es @ Za)
    else:
        # B = Z Za^T + 1; dJ/dB is dK with the factors applied
        W = aug.lay_z.apply(dK, Lam, out=dK)
        Waa = aug.lay_aa.apply(dKaa, Lam, out=dKaa)
        dlog_z = 0.0
        dZ = W @ Za
        dZa = W.T @ Z + (Waa + Waa.T) @ Za
    np.add.at(dZ, aug.z_idx, dZa)
    dZ = dZ.reshape(N, L, d_z)

    dmean = dZ.sum(axis=1) + mean / sz2
    dsq = float(np.sum(dZ * aug.eps)) + N * d_z * (-1.0 / sq + sq / sz2)
    g["log_sigma_q"] = np.array(sq * dsq)

    dFq = np.hstack([(1.0 - aug.w)[:, None] * dmean, aug.w[:, None] * dmean])
    gAq = Kq.T @ dFq + 2.0 * gq * KqqAq
    g["alpha_q0"], g["alpha_q1"] = gAq[:, :d_z], gAq[:, d_z:]
    dKq = dFq @ Aq.T
    dKqq = (Aq * gq) @ Aq.T
    if fac.learnable:
        dLam += aug.lay_q.offdiag_grad(dKq, Bq) + aug.lay_qq.offdiag_grad(dKqq, Bqq)
    dlog_q = (np.vdot(np.multiply(dKq, Kq, out=dKq), aug.d2q)
              + np.vdot(np.multiply(dKqq, Kqq, out=dKqq), aug.d2qq)) / ell_q ** 2
    g["log_ls"] = np.array([dlog_z, dlog_q])
    if fac.learnable:
        g["lambda_logits"] = logit_grad(fac, dLam)
    ev.grads = {k: g[k] for k in params}
    return ev


def neg_elbo(params: Mapping, aug: AugmentedDataset, factors: TransferFactors) -> float:
    """Negative Monte-Carlo ELBO (likelihood averaged over L draws, one KL per observation)."""
    ones = {c: 1.0 for c in FUNCS}
    return evaluate(aug, params, factors, ones, grad=False).neg_elbo


def objective_J(params: Mapping, aug: AugmentedDataset, factors: TransferFactors,
                gammas: Mapping[str, float]) -> float:
    return evaluate(aug, params, factors, gammas, grad=False).J


def grad_J(params: Mapping, aug: AugmentedDataset, factors: TransferFactors,
           gammas: Mapping[str, float]) -> Dict[str, np.ndarray]:
    return evaluate(aug, params, factors, gammas, grad=True).grads


def kl_gaussian(mean: np.ndarray, sigma_q: float, sigma_z: float) -> float:
    """KL( N(mean, sigma_q^2 I) || N(0, sigma_z^2 I) ) for one observation."""
    mean = np.asarray(mean, dtype=float)
    return float(np.sum(math.log(sigma_z / sigma_q)
                        + (sigma_q ** 2 + mean ** 2) / (2 * sigma_z ** 2) - 0.5))


# ---------------------------------------------------------------- Hessian blocks


def hessian_block(aug: AugmentedDataset, params: Mapping, factors: TransferFactors,
                  gammas: Mapping[str, float], c: str, column: Optional[int] = None) -> np.ndarray:
    """Hessian of J in ``alpha_c`` with the posterior coefficients held fixed.

    ``D^T diag(v * phi(D a) * phi(-D a)) D + 2 gamma K`` for Bernoulli blocks,
    ``D^T diag(v / sigma^2) D + 2 gamma K`` for Gaussian ones; ``v`` carries
    the ``1/L`` Monte-Carlo weight and the treatment gating of ``f_y0``/``f_y1``.
    """
    if c not in Z_FUNCS:
        raise ValueError(f"Hessian blocks exist for {Z_FUNCS}, not {c!r}")
    S = aug.structural
    Lam = _factors_from(params, factors).matrix()
    Z = materialize(aug, params, factors)
    rtags = aug.row_tags
    Za = Z[aug.z_idx]
    atags = rtags[aug.z_idx]
    if aug.z_kernel == "rbf":
        s = -0.5 / math.exp(float(params["log_ls"][0])) ** 2
        D = aug.lay_z.apply(np.exp(sqdist(Z, Za) * s), Lam)
        K = aug.lay_aa.apply(np.exp(sqdist(Za, Za) * s), Lam)
    else:
        D = aug.lay_z.apply(Z @ Za.T + 1.0, Lam)
        K = aug.lay_aa.apply(Za @ Za.T + 1.0, Lam)
    wr = np.repeat(aug.w, aug.L)
    if c in ("y0", "y1"):
        gate = wr if c == "y1" else 1.0 - wr
        if S.outcome_kind is OutcomeKind.CONTINUOUS:
            v = gate / S.sigma_y ** 2
        else:
            f = wr * (D @ params["alpha_y1"]) + (1.0 - wr) * (D @ params["alpha_y0"])
            p = expit(f)
            v = gate * p * (1.0 - p)
    elif c == "w":
        p = expit(D @ params["alpha_w"])
        v = p * (1.0 - p)
    else:
        col = 0 if column is None else column
        if aug.x_binary[col]:
            p = expit(D @ params["alpha_x"][:, col])
            v = p * (1.0 - p)
        else:
            v = np.ones(Z.shape[0])
    return (D.T * (v / aug.L)) @ D + 2.0 * gammas[c] * K


def hessian_block_psd_check(aug: AugmentedDataset, params: Mapping, factors: TransferFactors,
                            gammas: Mapping[str, float], c: str) -> float:
    """Minimum eigenvalue of the ``alpha_c`` Hessian (over all columns for ``x``)."""
    cols = range(aug.d_x) if c == "x" else [None]
    return min(float(np.linalg.eigvalsh(hessian_block(aug, params, factors, gammas, c, k))[0])
               for k in cols)


# ---------------------------------------------------------------- fitted model


@dataclass(eq=False)
class ConfounderModel:
    """Fitted level-1 model; all kernel expansions are held explicitly."""

    structural: StructuralConfig
    x_binary: np.ndarray
    q_anchors: np.ndarray        # (A_q, d_x + 1) standardised [x; y]
    q_tags: np.ndarray
    z_anchors: np.ndarray        # (A_z, d_z)
    z_tags: np.ndarray
    alpha: Dict[str, np.ndarray]
    lengthscale_z: float
    lengthscale_q: float
    sigma_q: float
    factors: TransferFactors
    y_loc: float = 0.0
    y_scale: float = 1.0
    z_kernel: str = "rbf"
    objective: float = float("nan")
    val_score: float = float("nan")
    restart: int = 0
    gamma: Dict[str, float] = field(default_factory=dict)
    history: List[float] = field(default_factory=list)
    seed: int = 0

    @property
    def d_x(self) -> int:
        return self.x_binary.shape[0]

    @property
    def d_z(self) -> int:
        return self.structural.d_z

    def _design(self, points: np.ndarray, anchors: np.ndarray, atags: np.ndarray,
                ell: float, tag: int, family: str = "rbf") -> np.ndarray:
        if family == "rbf":
            B = np.exp(sqdist(points, anchors) * (-0.5 / ell ** 2))
        else:
            B = points @ anchors.T + 1.0
        return B * self.factors.matrix()[tag, atags][None, :]

    def standardise_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_loc) / self.y_scale

    def f_q(self, x, w, y, tag: int = 0) -> np.ndarray:
        """Posterior mean for rows of ``x`` with treatments ``w`` and raw outcomes ``y``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.d_x:
            raise DimMismatch(f"x has {x.shape[1]} columns, model expects {self.d_x}")
        n = x.shape[0]
        w = np.broadcast_to(np.asarray(w, dtype=float), (n,))
        y = np.broadcast_to(self.standardise_y(y), (n,))
        D = self._design(np.hstack([x, y[:, None]]), self.q_anchors, self.q_tags,
                         self.lengthscale_q, tag)
        return w[:, None] * (D @ self.alpha["q1"]) + (1.0 - w)[:, None] * (D @ self.alpha["q0"])

    def z_design(self, z, tag: int = 0) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.d_z:
            raise DimMismatch(f"z has {z.shape[1]} columns, model expects {self.d_z}")
        return self._design(z, self.z_anchors, self.z_tags, self.lengthscale_z, tag,
                            self.z_kernel)

    def f_z(self, c: str, z, tag: int = 0) -> np.ndarray:
        return self.z_design(z, tag) @ self.alpha[c]

    def expected_outcome(self, w, z, tag: int = 0) -> np.ndarray:
        """E[y | w, z] on the raw outcome scale; probability for binary outcomes."""
        D = self.z_design(z, tag)
        w = np.broadcast_to(np.asarray(w, dtype=float), (D.shape[0],))
        f = w * (D @ self.alpha["y1"]) + (1.0 - w) * (D @ self.alpha["y0"])
        if self.structural.outcome_kind is OutcomeKind.BINARY:
            return expit(f)
        return self.y_loc + self.y_scale * f

    def effect_given_z(self, z, tag: int = 0) -> np.ndarray:
        """``E[y | 1, z] - E[y | 0, z]`` for each row of ``z``."""
        D = self.z_design(z, tag)
        if self.structural.outcome_kind is OutcomeKind.BINARY:
            return expit(D @ self.alpha["y1"]) - expit(D @ self.alpha["y0"])
        return self.y_scale * (D @ (self.alpha["y1"] - self.alpha["y0"]))

    def sample_z(self, x, w, y, eps: np.ndarray, tag: int = 0) -> np.ndarray:
        return self.f_q(x, w, y, tag) + self.sigma_q * np.asarray(eps)

    @property
    def transfer_factors(self) -> np.ndarray:
        return self.factors.target_source()


def expected_outcome(w, z, model: ConfounderModel) -> np.ndarray:
    return model.expected_outcome(w, z)


def f_q(x, w, y, model: ConfounderModel) -> np.ndarray:
    return model.f_q(x, w, y)


def _model_from(aug: AugmentedDataset, params: Mapping, factors: TransferFactors,
                gammas: Mapping[str, float], **meta) -> ConfounderModel:
    fac = _factors_from(params, factors)
    materialize(aug, params, factors)
    ell_z, ell_q = np.exp(params["log_ls"])
    return ConfounderModel(
        structural=aug.structural,
        x_binary=aug.x_binary.copy(),
        q_anchors=aug.v[aug.q_idx].copy(),
        q_tags=aug.tags[aug.q_idx].copy(),
        z_anchors=aug.z[aug.z_idx].copy(),
        z_tags=aug.row_tags[aug.z_idx].copy(),
        alpha={c: np.array(params["alpha_" + c], copy=True) for c in FUNCS},
        lengthscale_z=float(ell_z),
        lengthscale_q=float(ell_q),
        sigma_q=math.exp(float(params["log_sigma_q"])),
        factors=fac,
        y_loc=aug.y_loc,
        y_scale=aug.y_scale,
        z_kernel=aug.z_kernel,
        gamma=dict(gammas),
        **meta,
    )


def validation_score(model: ConfounderModel, val: PopulationData, seed: int, L: int = 5) -> float:
    """Held-out negative ELBO per observation on target rows, fresh noise."""
    S = model.structural
    n = val.n
    if n == 0:
        return float("nan")
    mean = model.f_q(val.x, val.w, val.y)
    eps = rng_for(seed, "val_eps").standard_normal((n, L, model.d_z))
    Z = (mean[:, None, :] + model.sigma_q * eps).reshape(-1, model.d_z)
    D = model.z_design(Z)
    F = {c: (D @ model.alpha[c]).reshape((n, L) + (() if c != "x" else (model.d_x,)))
         for c in Z_FUNCS}
    w = val.w[:, None]
    fy = w * F["y1"] + (1.0 - w) * F["y0"]
    y = model.standardise_y(val.y)[:, None]
    if S.outcome_kind is OutcomeKind.CONTINUOUS:
        ll_y = -0.5 * ((y - fy) / S.sigma_y) ** 2 - math.log(S.sigma_y) - 0.5 * _LOG2PI
    else:
        ll_y = _bern_ll(y, fy)
    ll_w = _bern_ll(w, F["w"])
    xx = val.x[:, None, :]
    xb = model.x_binary[None, None, :]
    ll_x = np.where(xb, _bern_ll(xx, F["x"]), -0.5 * (xx - F["x"]) ** 2 - 0.5 * _LOG2PI)
    nll = -(ll_y.sum() + ll_w.sum() + ll_x.sum()) / L
    kl = sum(kl_gaussian(m, model.sigma_q, S.sigma_z) for m in mean)
    return float((nll + kl) / n)


# ---------------------------------------------------------------- fitting


def coef_scales(params: Mapping[str, np.ndarray]) -> Dict[str, float]:
    """Per-block step scales: coefficient blocks over ``A`` anchors move by
    ``1/sqrt(A)`` per unit step so function values change at a rate that
    does not grow with the anchor count."""
    return {k: 1.0 / math.sqrt(max(np.shape(v)[0], 1))
            for k, v in params.items() if k.startswith("alpha_")}


def _optimise(aug: AugmentedDataset, params0: Dict[str, np.ndarray], factors: TransferFactors,
              gammas: Mapping[str, float], config: ConfounderConfig, learn: Iterable[str]):
    learn = [k for k in params0 if k in set(learn)]
    fixed = {k: v for k, v in params0.items() if k not in learn}
    packer = ParamPacker({k: params0[k] for k in learn}, coef_scales(params0))

    def fun(vec):
        p = dict(fixed)
        p.update(packer.unpack(vec))
        try:
            ev = evaluate(aug, p, factors, gammas, grad=True)
        except FloatingPointError:
            return float("inf"), np.zeros_like(vec)
        return ev.J, packer.pack_grad(ev.grads)

    with np.errstate(over="ignore", under="ignore"):
        res = adam_minimize(fun, packer.pack(params0), lr=config.lr, max_iter=config.max_iter,
                            tol=config.tol, window=config.window)
    out = dict(fixed)
    out.update(packer.unpack(res.x))
    return out, res


def learnable_keys(params: Mapping, config: ConfounderConfig) -> List[str]:
    keys = [k for k in params if k.startswith("alpha_") or k == "lambda_logits"]
    if config.learn_hyper:
        keys += ["log_sigma_q", "log_ls"]
    return keys


def fit(data: MultiSourceDataset, config: ConfounderConfig = ConfounderConfig(),
        policy: str = "adaptive", val: Optional[PopulationData] = None, seed: int = 0,
        pool: bool = False, factors: Optional[TransferFactors] = None) -> ConfounderModel:
    """Fit the level-1 model by minimising J over ``config.restarts`` restarts.

    ``policy`` is ``adaptive`` (learn the factors), ``full`` (all 1) or
    ``none`` (all 0).  Under ``none`` the objective separates by population,
    so only the target block is optimised; sources cannot influence it.  The
    winning restart (and regulariser from ``gamma_grid``) has the lowest
    held-out negative ELBO on ``val``, or the lowest J when ``val`` is None;
    ties go to the lowest index.
    """
    if policy == "none" and data.m > 0:
        return fit(data.target_only(), config, "none", val, seed, pool)
    aug = build_augmented(data, config.structural, config.n_samples, seed,
                          config.anchor_budget, config.q_anchor_budget, pool, config.z_kernel)
    if factors is None:
        factors = default_factors(aug.n_pops, policy if aug.n_pops > 1 else "full",
                                  config.factor_init)
    grid = list(config.gamma_grid) or [None]
    best: Optional[ConfounderModel] = None
    best_key = None
    for gi, common in enumerate(grid):
        gammas = config.gammas(common)
        for r in range(config.restarts):
            params0 = init_params(aug, config, r, seed, factors)
            try:
                params, res = _optimise(aug, params0, factors, gammas, config,
                                        learnable_keys(params0, config))
            except (NonFiniteLoss, FloatingPointError) as exc:
                log.warning("restart %d failed: %s", r, exc)
                continue
            if not np.isfinite(res.fun):
                continue
            model = _model_from(aug, params, factors, gammas, objective=res.fun, restart=r,
                                history=res.history, seed=seed)
            score = validation_score(model, val, seed, config.val_samples) \
                if val is not None and val.n > 0 else res.fun
            model.val_score = score
            key = (score, gi, r)
            if np.isfinite(score) and (best_key is None or key[0] < best_key[0]):
                best, best_key = model, key
    if best is None:
        raise NoConvergence("every restart produced a non-finite objective")
    return best
