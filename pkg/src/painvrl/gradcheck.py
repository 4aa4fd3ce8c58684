"""Finite-difference checks of the analytic gradients on tiny random instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone, maskgen
from .backbone import Batch, ItemGraph, LossWeights, ModelParams
from .dataset import FeatureTable, InteractionSet, sample_negatives
from .envid import EnvPartition
from .numgrad import GradReport, check_gradient, finite_diff_grad


@dataclass
class TinyInstance:
    data: InteractionSet
    batch: Batch
    graph: ItemGraph
    features: FeatureTable
    params: ModelParams
    weights: LossWeights
    partition: EnvPartition


def tiny_instance(rng: np.random.Generator, max_users: int = 5, max_items: int = 5,
                  max_k: int = 4, max_d: int = 6, num_envs: int = 2) -> TinyInstance:
    """Random instance with every user keeping at least one non-interacted item."""
    nu = int(rng.integers(2, max_users + 1))
    ni = int(rng.integers(3, max_items + 1))
    k = int(rng.integers(1, max_k + 1))
    d = int(rng.integers(1, max_d + 1))
    users, items = [], []
    for u in range(nu):
        n = int(rng.integers(1, ni))
        for i in rng.choice(ni, size=n, replace=False):
            users.append(u)
            items.append(int(i))
    data = InteractionSet(nu, ni, users, items)
    data = sample_negatives(data, 1, rng)
    graph = ItemGraph.from_interactions(data, num_neighbors=2)
    features = FeatureTable(rng.standard_normal((ni, d)))
    # larger-than-default parameters so the gradients are not all tiny
    params = backbone.init_params(nu, ni, k, d, rng)
    params = params.with_vector(rng.uniform(-0.8, 0.8, size=params.vector().size))
    weights = LossWeights(eta=float(rng.uniform(0, 0.5)), kappa=float(rng.uniform(0, 0.5)))
    n_env = min(num_envs, data.num_positives)
    assignment = np.arange(data.num_positives) % n_env
    return TinyInstance(data, Batch.from_set(data), graph, features, params, weights,
                        EnvPartition(data, n_env, rng.permutation(assignment)))


def _inject(grad: np.ndarray, inject_bug: bool) -> np.ndarray:
    if inject_bug and grad.size:
        grad = grad.copy()
        worst = int(np.argmax(np.abs(grad)))
        grad[worst] = grad[worst] * 1.5 + 1e-3
    return grad


def check_total_loss(inst: TinyInstance, tol: float = 1e-4, h: float = 1e-5,
                     inject_bug: bool = False) -> GradReport:
    """Analytic gradient of the three-part loss vs central differences (all segments)."""
    p = inst.params
    layout = p.layout()
    content = inst.features.vectors

    def f(vec):
        return backbone.total_loss(inst.batch, inst.graph, content, p.with_vector(vec), inst.weights)

    analytic = layout.flatten(backbone.grad_total_loss(inst.batch, inst.graph, content, p, inst.weights))
    numeric = finite_diff_grad(f, p.vector(), h)
    return check_gradient(_inject(analytic, inject_bug), numeric, tol)


def check_mask_erm(inst: TinyInstance, rng: np.random.Generator, tol: float = 1e-4, h: float = 1e-5,
                   inject_bug: bool = False) -> tuple[GradReport, GradReport]:
    """ERM mask loss: gradient w.r.t. ``m`` and w.r.t. the mask-model parameters.

    ``m`` and ``epsilon`` are drawn so that no ``m + epsilon`` lies within ``2h`` of a clip
    boundary, where the one-sided derivative would differ from the probe.
    """
    d = inst.features.dim
    ctx = maskgen.MaskContext(inst.partition, inst.features, inst.graph, inst.weights)
    ctx.resample(rng)
    m = rng.uniform(0.05, 0.95, size=d)
    eps = rng.normal(0.0, 0.1, size=d)
    inner = m + eps
    near = (np.abs(inner) < 4 * h) | (np.abs(inner - 1.0) < 4 * h)
    eps[near] += 0.01
    state = maskgen.MaskState(m, sigma=0.1)
    sample = maskgen.MaskSample(maskgen.clip_mu(m, eps), eps)
    _, g_m, g_theta = maskgen.erm_grads(ctx, sample, inst.params, state)

    def f_m(mm):
        s = maskgen.MaskSample(maskgen.clip_mu(mm, eps), eps)
        return maskgen.erm_loss(ctx, s, inst.params, maskgen.MaskState(mm, sigma=0.1))

    p = inst.params
    layout = p.layout()

    def f_theta(vec):
        return maskgen.erm_loss(ctx, sample, p.with_vector(vec), state)

    rep_m = check_gradient(_inject(g_m, inject_bug), finite_diff_grad(f_m, m, h), tol)
    rep_t = check_gradient(layout.flatten(g_theta), finite_diff_grad(f_theta, p.vector(), h), tol)
    return rep_m, rep_t


def run_suite(num_instances: int, seed: int = 0, tol: float = 1e-4, h: float = 1e-5,
              inject_bug: bool = False) -> list[tuple[str, int, GradReport]]:
    """``(check, instance, report)`` for every check on ``num_instances`` random instances."""
    rng = np.random.default_rng(seed)
    out = []
    for n in range(num_instances):
        inst = tiny_instance(rng)
        out.append(("total_loss", n, check_total_loss(inst, tol, h, inject_bug)))
        rep_m, rep_t = check_mask_erm(inst, rng, tol, h, inject_bug)
        out.append(("mask_erm_m", n, rep_m))
        out.append(("mask_erm_theta", n, rep_t))
    return out
