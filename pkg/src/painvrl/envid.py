"""Heterogeneous environment identification by per-environment models and argmax reassignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import backbone
from .backbone import ItemGraph, LossWeights, ModelParams, TrainConfig
from .dataset import InteractionSet

log = logging.getLogger(__name__)


@dataclass(eq=False)
class EnvPartition:
    """Environment index for every positive of ``data`` (aligned with its positive arrays)."""

    data: InteractionSet
    num_envs: int
    assignment: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        if self.assignment.shape != (self.data.num_positives,):
            raise ValueError("assignment must have one entry per positive")
        if self.assignment.size and (self.assignment.min() < 0 or self.assignment.max() >= self.num_envs):
            raise ValueError("environment index out of range")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_envs)

    def indices(self, e: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == e)

    def subset(self, e: int) -> InteractionSet:
        return self.data.subset(self.indices(e))

    def subsets(self) -> list[InteractionSet]:
        return [self.subset(e) for e in range(self.num_envs)]

    def copy(self) -> "EnvPartition":
        return EnvPartition(self.data, self.num_envs, self.assignment.copy())


@dataclass
class EnvModels:
    models: list[ModelParams]

    def __len__(self):
        return len(self.models)


@dataclass
class IdentifyResult:
    partition: EnvPartition
    models: EnvModels
    reassignments: list[int] = field(default_factory=list)
    converged: bool = False


INIT_METHODS = ("kmeans", "random")


def init_partition(data: InteractionSet, num_envs: int, rng: np.random.Generator,
                   method: str = "random", variant_content: np.ndarray | None = None) -> EnvPartition:
    """Starting partition: uniform random labels, or k-means over the variant vectors of the
    interacted items.

    A random start is a fixed point of the argmax reassignment once the per-environment
    models memorise their own subsets, so k-means is what ``identify`` uses by default.
    """
    if num_envs < 1:
        raise ValueError("num_envs must be >= 1")
    if method == "random":
        return EnvPartition(data, num_envs, rng.integers(0, num_envs, size=data.num_positives))
    if method != "kmeans":
        raise ValueError(f"unknown init method {method!r}; expected one of {INIT_METHODS}")
    if variant_content is None:
        raise ValueError("k-means initialisation needs the variant content")
    if num_envs == 1:
        return EnvPartition(data, 1, np.zeros(data.num_positives, dtype=np.int64))
    points = np.asarray(variant_content, dtype=np.float64)[data.pos_items]
    seed = int(rng.integers(2**31 - 1))
    _, labels = kmeans2(points, num_envs, minit="++", seed=seed)
    return EnvPartition(data, num_envs, labels)


def repair_empty(partition: EnvPartition, rng: np.random.Generator) -> EnvPartition:
    """Give every empty environment one random interaction stolen from the largest one."""
    part = partition.copy()
    if part.data.num_positives < part.num_envs:
        raise ValueError("fewer interactions than environments")
    for e in range(part.num_envs):
        sizes = part.sizes()
        if sizes[e] == 0:
            donor = int(np.argmax(sizes))
            pick = rng.choice(part.indices(donor))
            part.assignment[pick] = e
            log.info("environment %d was empty; moved interaction %d from environment %d", e, pick, donor)
    return part


def train_env_models(partition: EnvPartition, variant_content: np.ndarray, graph: ItemGraph,
                     weights: LossWeights, cfg: TrainConfig, rng: np.random.Generator,
                     init: EnvModels | None = None, k: int = 8) -> EnvModels:
    """Fit one backbone per environment with the variant representations as content."""
    data = partition.data
    models = []
    for e in range(partition.num_envs):
        sub = partition.subset(e)
        if init is not None:
            start = init.models[e]
        else:
            start = backbone.init_params(data.num_users, data.num_items, k, variant_content.shape[1], rng)
        models.append(backbone.train(start, sub, variant_content, graph, weights, cfg, rng, exclude=data))
    return EnvModels(models)


def env_scores(users, items, models: EnvModels, variant_content: np.ndarray) -> np.ndarray:
    """(num_pairs, num_envs) matrix of environment-model scores."""
    rows = variant_content[items]
    return np.stack([backbone.pair_scores(users, items, rows, p) for p in models.models], axis=1)


def assign_environment(u: int, i: int, models: EnvModels, variant: np.ndarray) -> int:
    """argmax_e score_e(u, i, variant); ties go to the lowest index."""
    scores = [backbone.score(u, i, variant, p) for p in models.models]
    return int(np.argmax(scores))


def reassign(partition: EnvPartition, models: EnvModels, variant_content: np.ndarray) -> EnvPartition:
    data = partition.data
    scores = env_scores(data.pos_users, data.pos_items, models, variant_content)
    return EnvPartition(data, partition.num_envs, np.argmax(scores, axis=1))


def identify(data: InteractionSet, variant_content: np.ndarray, num_envs: int, max_rounds: int,
             rng: np.random.Generator, graph: ItemGraph | None = None,
             weights: LossWeights | None = None, cfg: TrainConfig | None = None, k: int = 8,
             init: EnvPartition | None = None, warm_start: bool = False,
             init_method: str = "kmeans") -> IdentifyResult:
    """Alternate environment-model fitting and argmax reassignment.

    Stops when a round reassigns nothing or after ``max_rounds`` rounds.
    """
    graph = graph if graph is not None else ItemGraph.from_interactions(data)
    weights = weights if weights is not None else LossWeights()
    cfg = cfg if cfg is not None else TrainConfig(epochs=20)
    if init is not None:
        part = init.copy()
    else:
        part = init_partition(data, num_envs, rng, init_method, variant_content)
    if part.num_envs != num_envs:
        raise ValueError("initial partition has a different environment count")
    result = IdentifyResult(part, EnvModels([]))
    models = None
    for rnd in range(max(1, max_rounds)):
        part = repair_empty(part, rng)
        models = train_env_models(part, variant_content, graph, weights, cfg, rng,
                                  init=models if warm_start else None, k=k)
        new = reassign(part, models, variant_content)
        changed = int(np.count_nonzero(new.assignment != part.assignment))
        result.reassignments.append(changed)
        log.info("envid round %d: %d reassignments, sizes %s", rnd, changed, new.sizes().tolist())
        part = new
        if changed == 0:
            result.converged = True
            break
    if not result.converged:
        log.info("envid: partition still moving after %d rounds", max_rounds)
    result.partition = part
    result.models = models
    return result


def write_partition(partition: EnvPartition, path) -> None:
    data = partition.data
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, e in zip(data.pos_users.tolist(), data.pos_items.tolist(), partition.assignment.tolist()):
            fh.write(f"{u}\t{i}\t{e}\n")


def read_partition(path, data: InteractionSet, num_envs: int | None = None) -> EnvPartition:
    rows = [line.split("\t") for line in open(path, encoding="utf-8").read().splitlines() if line]
    lookup = {(int(u), int(i)): int(e) for u, i, e in rows}
    assignment = np.array([lookup[(u, i)] for u, i in zip(data.pos_users.tolist(), data.pos_items.tolist())])
    n = num_envs if num_envs is not None else int(assignment.max()) + 1
    return EnvPartition(data, n, assignment)
