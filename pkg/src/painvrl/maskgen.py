"""Invariant mask learning.

The mask ``m`` in [0, 1]^d splits every item vector into an invariant part ``m*f`` and a
variant part ``(1-m)*f``. Two attention MLPs weight the parts, a clipped-Gaussian
perturbation ``mu`` of ``m`` scales the fused vector, and ``m`` follows the min-norm
combination of the ERM and IRM gradients plus L2 decay.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, pareto
from .backbone import Adam, Batch, ItemGraph, LossWeights, ModelParams, NonFiniteError
from .dataset import FeatureTable, sample_negatives
from .envid import EnvPartition
from .numgrad import finite_diff_grad
from .pareto import ParetoWeights

log = logging.getLogger(__name__)

# lambda default from the reference experimental setup
DEFAULT_LAMBDA = 1.0


@dataclass
class MaskState:
    m: np.ndarray
    sigma: float = 0.1
    lam: float = DEFAULT_LAMBDA
    step: float = 0.1

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        if np.any(self.m < 0) or np.any(self.m > 1):
            raise ValueError("mask entries must lie in [0, 1]")
        if self.sigma < 0 or self.lam < 0 or self.step < 0:
            raise ValueError("sigma, lambda and step must be >= 0")

    @classmethod
    def initial(cls, d: int, **kw) -> "MaskState":
        return cls(np.full(d, 0.5), **kw)


@dataclass
class MaskSample:
    mu: np.ndarray
    epsilon: np.ndarray


def to_invariant(m, f):
    """Phi = m * f, computed so that ``Phi + (f - Phi) == f`` holds bit for bit.

    For m >= 1/2 the product m * f lies within a factor of two of f, so f - Phi is
    exact. Below 1/2 the roles swap: Psi = (1 - m) * f is rounded and Phi = f - Psi
    is the exact remainder. Either way Phi is within one ulp of f of the plain product.
    """
    m = np.asarray(m, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.where(m >= 0.5, m * f, f - (1.0 - m) * f)


def to_variant(m, f):
    """Psi = f - Phi."""
    f = np.asarray(f, dtype=np.float64)
    return f - to_invariant(m, f)


def clip_mu(m, eps):
    return np.clip(np.asarray(m) + eps, 0.0, 1.0)


def sample_mu(state: MaskState, rng: np.random.Generator) -> MaskSample:
    eps = rng.normal(0.0, state.sigma, size=state.m.shape) if state.sigma > 0 else np.zeros_like(state.m)
    return MaskSample(clip_mu(state.m, eps), eps)


# ---------------------------------------------------------------- attention

def _attention_inputs(users, items, params: ModelParams, raw: np.ndarray) -> np.ndarray:
    return np.concatenate([params.p_t[users], params.p_f[users], params.t[items], raw[items]], axis=1)


def attention_weights(users, items, params: ModelParams, raw: np.ndarray, softmax: bool = False):
    """(alpha_phi, alpha_psi, cache) for each pair; ``raw`` is the item feature table."""
    x = _attention_inputs(users, items, params, raw)
    a = params.attn
    hid1 = np.tanh(x @ a["A1"].T + a["b1"])
    hid2 = np.tanh(x @ a["A2"].T + a["b2"])
    z1 = hid1 @ a["v1"] + a["c1"][0]
    z2 = hid2 @ a["v2"] + a["c2"][0]
    if softmax:
        top = np.maximum(z1, z2)
        e1, e2 = np.exp(z1 - top), np.exp(z2 - top)
        a_phi, a_psi = e1 / (e1 + e2), e2 / (e1 + e2)
    else:
        a_phi, a_psi = backbone.sigmoid(z1), backbone.sigmoid(z2)
    if not (np.all(np.isfinite(a_phi)) and np.all(np.isfinite(a_psi))):
        raise NonFiniteError("non-finite attention weight")
    cache = (users, items, x, hid1, hid2, softmax)
    return a_phi, a_psi, cache


def attention_backward(g_phi, g_psi, a_phi, a_psi, cache, params: ModelParams, grads: dict) -> None:
    """Accumulate attention-MLP and embedding gradients into ``grads`` in place."""
    users, items, x, hid1, hid2, softmax = cache
    if softmax:
        s = g_phi * a_phi + g_psi * a_psi
        dz1, dz2 = a_phi * (g_phi - s), a_psi * (g_psi - s)
    else:
        dz1, dz2 = g_phi * a_phi * (1 - a_phi), g_psi * a_psi * (1 - a_psi)
    a = params.attn
    dx = np.zeros_like(x)
    for tag, dz, hid in (("1", dz1, hid1), ("2", dz2, hid2)):
        grads["attn.v" + tag] += hid.T @ dz
        grads["attn.c" + tag] += dz.sum(keepdims=True)
        dpre = (dz[:, None] * a["v" + tag]) * (1.0 - hid * hid)
        grads["attn.A" + tag] += dpre.T @ x
        grads["attn.b" + tag] += dpre.sum(axis=0)
        dx += dpre @ a["A" + tag]
    k = params.k
    np.add.at(grads["p_t"], users, dx[:, :k])
    np.add.at(grads["p_f"], users, dx[:, k:2 * k])
    np.add.at(grads["t"], items, dx[:, 2 * k:3 * k])


def attention_fuse(u: int, i: int, phi, psi, params: ModelParams, features: FeatureTable,
                   softmax: bool = False) -> np.ndarray:
    """h = alpha_phi * phi + alpha_psi * psi for a single pair."""
    phi, psi = np.asarray(phi, dtype=np.float64), np.asarray(psi, dtype=np.float64)
    if phi.shape != (features.dim,) or psi.shape != (features.dim,):
        raise ValueError(f"phi and psi must have length {features.dim}")
    a_phi, a_psi, _ = attention_weights(np.array([u]), np.array([i]), params, features.vectors, softmax)
    return a_phi[0] * phi + a_psi[0] * psi


# ---------------------------------------------------------------- losses

@dataclass
class MaskContext:
    """Everything the mask objective needs besides ``m``, ``mu`` and the parameters.

    ``batches`` holds one frozen (positives + negatives) batch per environment.
    """

    partition: EnvPartition
    features: FeatureTable
    graph: ItemGraph
    weights: LossWeights = field(default_factory=LossWeights)
    neg_ratio: int = 1
    softmax: bool = False
    reduction: str = "sum"
    batches: list = field(default_factory=list)
    _terms: list = field(default_factory=list, repr=False)

    def resample(self, rng: np.random.Generator) -> None:
        data = self.partition.data
        self.batches = []
        for sub in self.partition.subsets():
            if sub.num_positives == 0:
                self.batches.append(None)
                continue
            negs = sample_negatives(sub, self.neg_ratio, rng, exclude=data)
            self.batches.append(Batch.from_set(negs))
        self._terms = [None if b is None else backbone.expand_terms(b, self.graph, self.weights)
                       for b in self.batches]

    def env_terms(self):
        """``(env, terms, norm)`` per non-empty environment; ``norm`` divides that environment's loss."""
        if not self._terms:
            raise RuntimeError("call resample() before evaluating mask losses")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        return [(e, t, self.batches[e].pos_users.size if self.reduction == "mean" else 1)
                for e, t in enumerate(self._terms) if t is not None]


def _fused(terms, m, mu, params, ctx: MaskContext, attn=None):
    if attn is None:
        attn = attention_weights(terms.users, terms.items, params, ctx.features.vectors, ctx.softmax)
    a_phi, a_psi, cache = attn
    F = ctx.features.vectors[terms.items]
    phi = to_invariant(m, F)
    h = a_phi[:, None] * phi + a_psi[:, None] * (F - phi)
    return h, F, attn


def env_losses(ctx: MaskContext, m, mu, params: ModelParams) -> np.ndarray:
    """Per-environment total loss on content mu*h (divided by the positive count under ``reduction="mean"``)."""
    out = []
    for _, terms, npos in ctx.env_terms():
        h, _, _ = _fused(terms, m, mu, params, ctx)
        loss, _, _ = backbone.terms_loss_grad(terms, mu * h, params)
        out.append(loss / npos)
    return np.array(out)


def erm_loss(ctx: MaskContext, sample: MaskSample, params: ModelParams, state: MaskState) -> float:
    return float(np.mean(env_losses(ctx, state.m, sample.mu, params)))


def env_scale_grads(ctx: MaskContext, m, mu, params: ModelParams, attn_cache=None) -> np.ndarray:
    """(num_envs, d): gradient of each environment loss w.r.t. the feature-scaling vector mu."""
    rows = []
    for n, (e, terms, npos) in enumerate(ctx.env_terms()):
        attn = None if attn_cache is None else attn_cache[n]
        h, _, _ = _fused(terms, m, mu, params, ctx, attn)
        _, _, d_rows = backbone.terms_loss_grad(terms, mu * h, params)
        rows.append((d_rows * h).sum(axis=0) / npos)
    return np.array(rows)


def _penalty_from_grads(g_env: np.ndarray, mu) -> float:
    if g_env.shape[0] <= 1:
        return 0.0
    var = g_env.var(axis=0)  # population variance across environments
    return float(np.sum((var * mu) ** 2))


def irm_penalty(ctx: MaskContext, sample: MaskSample, params: ModelParams, state: MaskState,
                attn_cache=None) -> float:
    """||Var_e(dL^e/dmu) * mu||^2; zero with a single environment."""
    if len(ctx.env_terms()) <= 1:
        return 0.0
    return _penalty_from_grads(env_scale_grads(ctx, state.m, sample.mu, params, attn_cache), sample.mu)


def mask_objective(ctx: MaskContext, sample: MaskSample, params: ModelParams, state: MaskState,
                   w: ParetoWeights) -> float:
    reg = 0.5 * state.lam * float(state.m @ state.m)
    out = reg
    if w.w_erm:
        out += w.w_erm * erm_loss(ctx, sample, params, state)
    if w.w_irm:
        out += w.w_irm * irm_penalty(ctx, sample, params, state)
    return out


def erm_grads(ctx: MaskContext, sample: MaskSample, params: ModelParams, state: MaskState):
    """ERM loss with its analytic gradients: ``(loss, grad_m, grads_theta)``.

    ``epsilon`` is held fixed; the clip passes gradient only where 0 < m + eps < 1.
    """
    m, mu = state.m, sample.mu
    inner = m + sample.epsilon
    dmu = ((inner > 0.0) & (inner < 1.0)).astype(np.float64)
    envs = ctx.env_terms()
    n_env = len(envs)
    g_m = np.zeros_like(m)
    grads = backbone.zero_grads(params)
    total = 0.0
    for _, terms, npos in envs:
        h, F, attn = _fused(terms, m, mu, params, ctx)
        a_phi, a_psi, cache = attn
        loss, core, d_rows = backbone.terms_loss_grad(terms, mu * h, params)
        c = 1.0 / (npos * n_env)
        total += loss * c
        d_rows = d_rows * c
        for key, g in core.items():
            grads[key] += g * c
        d_h = d_rows * mu
        g_m += (d_rows * h).sum(axis=0) * dmu
        g_m += (d_h * (a_phi - a_psi)[:, None] * F).sum(axis=0)
        g_phi = np.einsum("nd,nd->n", d_h, m * F)
        g_psi = np.einsum("nd,nd->n", d_h, (1.0 - m) * F)
        attention_backward(g_phi, g_psi, a_phi, a_psi, cache, params, grads)
    return total, g_m, grads


def grad_mask(ctx: MaskContext, sample: MaskSample, params: ModelParams, state: MaskState,
              which: str, h: float = 1e-5) -> np.ndarray:
    """d-vector gradient w.r.t. ``m`` of the ERM loss (analytic) or the IRM penalty (finite differences)."""
    which = which.upper()
    if which == "ERM":
        return erm_grads(ctx, sample, params, state)[1]
    if which != "IRM":
        raise ValueError("which must be 'ERM' or 'IRM'")
    if len(ctx.env_terms()) <= 1:
        return np.zeros_like(state.m)
    # attention does not depend on m; reuse it across probes
    cache = [attention_weights(t.users, t.items, params, ctx.features.vectors, ctx.softmax)
             for _, t, _ in ctx.env_terms()]
    eps = sample.epsilon

    def penalty(mm):
        mu = clip_mu(mm, eps)
        return _penalty_from_grads(env_scale_grads(ctx, mm, mu, params, cache), mu)

    return finite_diff_grad(penalty, state.m, h)


def update_mask(state: MaskState, g_erm, g_irm, weights: ParetoWeights | None = None) -> MaskState:
    """m <- clip(m - s (w_erm g_erm + w_irm g_irm + lambda m), 0, 1); weights solved when not given."""
    w = weights if weights is not None else pareto.solve_weights(g_erm, g_irm)
    d = pareto.combined_direction(g_erm, g_irm, w)
    m = np.clip(state.m - state.step * (d + state.lam * state.m), 0.0, 1.0)
    return replace(state, m=m)


def normalize_grads(g_erm, g_irm, mode: str = "none"):
    """Put the two mask gradients on a common scale before the min-norm solve.

    The ERM gradient and the variance penalty's gradient differ by orders of magnitude,
    and the min-norm weight then collapses onto whichever is smaller. ``"l2"`` rescales
    each to unit length (zero vectors stay zero); ``"none"`` passes them through.
    """
    if mode == "none":
        return g_erm, g_irm
    if mode != "l2":
        raise ValueError("grad_norm must be 'l2' or 'none'")
    out = []
    for g in (g_erm, g_irm):
        n = float(np.linalg.norm(g))
        out.append(g / n if n > 0 else g)
    return out[0], out[1]


@dataclass
class MaskHistory:
    w_erm: list = field(default_factory=list)
    raw_w_erm: list = field(default_factory=list)
    erm: list = field(default_factory=list)
    irm: list = field(default_factory=list)
    delta: list = field(default_factory=list)


def fit_mask(ctx: MaskContext, params: ModelParams, state: MaskState, iters: int,
             rng: np.random.Generator, theta_lr: float = 1e-2, fixed_w_erm: float | None = None,
             sigma_decay: float = 0.9, decay_every: int = 10, tol: float = 1e-5,
             grad_norm: str = "none", on_iter=None):
    """Alternate one Pareto-weighted step on ``m`` with one Adam step on the mask model.

    The model parameters follow the ERM gradient (the IRM penalty's parameter
    gradient is second order and is not propagated). Returns
    ``(state, params, history)``.
    """
    params = params.copy()
    arrays = params.arrays()
    opt = Adam(theta_lr)
    hist = MaskHistory()
    for it in range(iters):
        ctx.resample(rng)
        sample = sample_mu(state, rng)
        erm, g_erm, g_theta = erm_grads(ctx, sample, params, state)
        g_irm = grad_mask(ctx, sample, params, state, "IRM")
        g_erm, g_irm = normalize_grads(g_erm, g_irm, grad_norm)
        if fixed_w_erm is None:
            w = pareto.solve_weights(g_erm, g_irm)
        else:
            w = ParetoWeights.fixed(fixed_w_erm)
        new_state = update_mask(state, g_erm, g_irm, w)
        delta = float(np.max(np.abs(new_state.m - state.m))) if state.m.size else 0.0
        irm = irm_penalty(ctx, sample, params, state)
        opt.step(arrays, g_theta)
        state = new_state
        if decay_every and (it + 1) % decay_every == 0:
            state = replace(state, sigma=state.sigma * sigma_decay)
        hist.w_erm.append(w.w_erm)
        hist.raw_w_erm.append(w.raw)
        hist.erm.append(erm)
        hist.irm.append(irm)
        hist.delta.append(delta)
        if on_iter is not None:
            on_iter(it, erm, irm, w)
        log.debug("mask iter %d erm %.5f irm %.3e w_erm %.3f (raw %.3f) dm %.2e",
                  it, erm, irm, w.w_erm, w.raw, delta)
        if delta < tol:
            break
    return state, params, hist


def write_mask(m, features: FeatureTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in enumerate(np.asarray(m).tolist()):
            fh.write(f"{k}\t{features.modality_of(k)}\t{v:.10f}\n")


def read_mask(path) -> np.ndarray:
    vals = [float(line.split("\t")[2]) for line in open(path, encoding="utf-8").read().splitlines() if line]
    return np.array(vals)
