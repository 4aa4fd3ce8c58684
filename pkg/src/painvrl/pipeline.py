"""End-to-end training: split, T rounds of environment identification and mask fitting,
then the final model on the invariant representations.

Every phase writes a checkpoint under ``<run_dir>/checkpoints``; a resumed run reloads
the newest one and replays nothing before it. All randomness comes from one root seed
through named sub-streams, so a resumed run matches an uninterrupted one bit for bit.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import backbone, dataset, envid, evaluation, maskgen
from .backbone import ItemGraph, LossWeights, ModelParams, TrainConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import format_config
from .dataset import FeatureTable, InteractionSet, SplitSpec

log = logging.getLogger(__name__)

SPLIT_ENVS = 2


class StageError(RuntimeError):
    """A pipeline phase failed; ``stage`` names it."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


class RunLockedError(RuntimeError):
    pass


@dataclass
class RunConfig:
    T: int = 3
    num_envs: int = 10
    split_ratio: float = 0.1
    envid_rounds: int = 10
    envid_init: str = "kmeans"
    epochs_him: int = 20
    iters_mask: int = 40
    epochs_final: int = 500
    k: int = 64
    eta: float = 1e-4
    kappa: float = 1e-2
    num_neighbors: int = 10
    sigma: float = 0.1
    lam: float = 1.0
    step: float = 0.01
    mask_reduction: str = "sum"
    grad_norm: str = "none"
    theta_lr: float = 1e-2
    softmax: bool = False
    fixed_w_erm: float | None = None
    mask_tol: float = 1e-3
    neg_ratio: int = 1
    batch_size: int = 512
    lr: float = 1e-2
    seed: int = 0
    K: int = 10
    run_dir: str | None = None

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError("T must be >= 1")
        counts = ("num_envs", "envid_rounds", "epochs_him", "iters_mask", "epochs_final", "k",
                  "num_neighbors", "neg_ratio", "batch_size", "K")
        for name in counts:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.num_envs < 1 or self.k < 1 or self.neg_ratio < 1 or self.batch_size < 1 or self.K < 1:
            raise ValueError("num_envs, k, neg_ratio, batch_size and K must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.fixed_w_erm is not None and not 0.0 <= self.fixed_w_erm <= 1.0:
            raise ValueError("fixed_w_erm must lie in [0, 1]")
        if self.envid_init not in envid.INIT_METHODS:
            raise ValueError(f"envid_init must be one of {envid.INIT_METHODS}")
        if self.mask_reduction not in ("sum", "mean"):
            raise ValueError("mask_reduction must be 'sum' or 'mean'")
        if self.grad_norm not in ("none", "l2"):
            raise ValueError("grad_norm must be 'none' or 'l2'")
        maskgen.MaskState(np.zeros(0), self.sigma, self.lam, self.step)
        LossWeights(self.eta, self.kappa)

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.eta, self.kappa)

    def train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(epochs=epochs, lr=self.lr, batch_size=self.batch_size, neg_ratio=self.neg_ratio)


def sub_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent stream per (root seed, stage name, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), index]))


def sub_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class RunArtifacts:
    params: ModelParams
    mask: np.ndarray
    split: SplitSpec
    partition: envid.EnvPartition | None
    metrics: dict
    masks: list = field(default_factory=list)        # m after each outer iteration
    w_erm: list = field(default_factory=list)        # mean ERM weight per outer iteration
    reassignments: list = field(default_factory=list)
    mask_losses: list = field(default_factory=list)  # (erm, irm) of the last mask iteration
    complementarity: list = field(default_factory=list)


# ---------------------------------------------------------------- phases

def make_split(data: InteractionSet, features: FeatureTable, cfg: RunConfig,
               graph: ItemGraph | None = None) -> tuple[SplitSpec, envid.EnvPartition]:
    """Two-environment identification on all interactions, then the IID/OOD split."""
    graph = graph if graph is not None else ItemGraph.from_interactions(data, cfg.num_neighbors)
    psi = maskgen.to_variant(np.full(features.dim, 0.5), features.vectors)
    rng = sub_rng(cfg.seed, "split")
    res = envid.identify(data, psi, SPLIT_ENVS, cfg.envid_rounds, rng, graph=graph,
                         weights=cfg.loss_weights(), cfg=cfg.train_config(cfg.epochs_him),
                         k=cfg.k, init_method=cfg.envid_init)
    split = dataset.split_iid_ood(data, res.partition.assignment, cfg.split_ratio, sub_rng(cfg.seed, "split", 1))
    return split, res.partition


def train_final(mask: maskgen.MaskState | np.ndarray, data: InteractionSet, features: FeatureTable,
                cfg: RunConfig, graph: ItemGraph | None = None, on_epoch=None) -> ModelParams:
    """Fresh backbone trained on the invariant content m * f only."""
    m = mask.m if isinstance(mask, maskgen.MaskState) else np.asarray(mask, dtype=np.float64)
    graph = graph if graph is not None else ItemGraph.from_interactions(data, cfg.num_neighbors)
    phi = maskgen.to_invariant(m, features.vectors)
    rng = sub_rng(cfg.seed, "final")
    params = backbone.init_params(data.num_users, data.num_items, cfg.k, features.dim, rng)
    return backbone.train(params, data, phi, graph, cfg.loss_weights(), cfg.train_config(cfg.epochs_final),
                          rng, on_epoch=on_epoch)


def complementarity_ok(m, features: FeatureTable) -> bool:
    f = features.vectors
    return bool(np.array_equal(maskgen.to_invariant(m, f) + maskgen.to_variant(m, f), f))


# ---------------------------------------------------------------- run state

def _stage_names(T: int) -> list[str]:
    names = ["split"]
    for t in range(T):
        names += [f"envid{t}", f"mask{t}"]
    return names + ["final"]


@dataclass
class _State:
    stage: str = ""
    split_assignment: np.ndarray | None = None
    partition: np.ndarray | None = None
    m: np.ndarray | None = None
    sigma: float = 0.0
    theta: ModelParams | None = None
    final: ModelParams | None = None
    stopped: bool = False
    log_lines: list = field(default_factory=list)
    history: dict = field(default_factory=lambda: {"masks": [], "w_erm": [], "reassignments": [],
                                                   "mask_losses": [], "complementarity": []})


def _save_state(path: Path, st: _State) -> None:
    arrays = {}
    if st.split_assignment is not None:
        arrays["split_assignment"] = st.split_assignment
    if st.partition is not None:
        arrays["partition"] = st.partition
    if st.m is not None:
        arrays["m"] = st.m
    for prefix, p in (("theta", st.theta), ("final", st.final)):
        if p is not None:
            for k, v in p.arrays().items():
                arrays[f"{prefix}/{k}"] = v
    meta = {"stage": st.stage, "sigma": st.sigma, "stopped": st.stopped,
            "log": st.log_lines, "history": st.history}
    save_checkpoint(path, arrays, meta)


def _load_state(path: Path) -> _State:
    arrays, meta = load_checkpoint(path)

    def params(prefix):
        sub = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
        return ModelParams.from_arrays(sub) if sub else None

    st = _State(stage=meta["stage"], sigma=meta["sigma"], stopped=meta["stopped"],
                log_lines=list(meta["log"]), history=meta["history"])
    if "split_assignment" in arrays:
        st.split_assignment = arrays["split_assignment"].astype(np.int64)
    if "partition" in arrays:
        st.partition = arrays["partition"].astype(np.int64)
    if "m" in arrays:
        st.m = arrays["m"]
    st.theta = params("theta")
    st.final = params("final")
    return st


def latest_checkpoint(run_dir) -> Path | None:
    """Most advanced checkpoint in ``run_dir`` (None when there is none)."""
    ckdir = Path(run_dir) / "checkpoints"
    found = sorted(ckdir.glob("*.ckpt")) if ckdir.exists() else []
    return max(found, key=lambda p: _stage_rank(p.stem)) if found else None


def _stage_rank(stage: str) -> tuple:
    if stage == "split":
        return (0, 0, 0)
    if stage == "final":
        return (2, 0, 0)
    for kind, sub in (("envid", 0), ("mask", 1)):
        if stage.startswith(kind) and stage[len(kind):].isdigit():
            return (1, int(stage[len(kind):]), sub)
    raise ValueError(f"unknown stage {stage!r}")


def _log_line(st: _State, epoch, stage: str, loss: float, w_erm=None) -> None:
    w = "-" if w_erm is None else f"{w_erm:.6f}"
    st.log_lines.append(f"{epoch}\t{stage}\t{loss:.6f}\t{w}")


def _write_text(path: Path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))


def _checkpoint(run_dir: Path | None, st: _State) -> None:
    if run_dir is None:
        return
    _save_state(run_dir / "checkpoints" / f"{st.stage}.ckpt", st)
    _write_text(run_dir / "log.txt", st.log_lines)


def run(cfg: RunConfig, data: InteractionSet, features: FeatureTable,
        values: dict | None = None, resume: bool = False) -> RunArtifacts:
    """Full training run on ``data`` (all positives, split inside) and item ``features``.

    With ``cfg.run_dir`` set, the resolved config, checkpoints, ``log.txt``,
    ``partition.tsv``, ``mask.tsv``, ``metrics.tsv`` and the split files are written
    there; ``values`` is the resolved key-value config to echo. ``resume`` continues
    from the newest checkpoint in that directory.
    """
    cfg.validate()
    if features.num_items != data.num_items:
        raise ValueError(f"features cover {features.num_items} items, data has {data.num_items}")
    run_dir = Path(cfg.run_dir) if cfg.run_dir else None
    if run_dir is None:
        if resume:
            raise ValueError("resume needs a run directory")
        return _run(cfg, data, features, None, None)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / "run.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunLockedError(f"{run_dir} is in use by another run") from None
    try:
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        if values is not None:
            (run_dir / "config").write_text(format_config(values), encoding="utf-8", newline="\n")
        st = None
        if resume:
            ck = latest_checkpoint(run_dir)
            if ck is None:
                raise FileNotFoundError(f"no checkpoint to resume from in {run_dir / 'checkpoints'}")
            st = _load_state(ck)
            log.info("resuming after stage %s", st.stage)
        return _run(cfg, data, features, run_dir, st)
    finally:
        lock.release()


def _run(cfg: RunConfig, data: InteractionSet, features: FeatureTable,
         run_dir: Path | None, st: _State | None) -> RunArtifacts:
    stages = _stage_names(cfg.T)
    done = stages.index(st.stage) if st is not None else -1
    st = st if st is not None else _State()
    weights = cfg.loss_weights()

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise StageError(name, exc) from exc

    # phase 0: IID/OOD split
    if done < stages.index("split"):
        _, part = stage("split", lambda: make_split(data, features, cfg))
        st.split_assignment = part.assignment
        st.m = np.full(features.dim, 0.5)
        st.sigma = cfg.sigma
        st.stage = "split"
        _checkpoint(run_dir, st)
    split = dataset.split_iid_ood(data, st.split_assignment, cfg.split_ratio, sub_rng(cfg.seed, "split", 1))
    train_set = split.train
    if run_dir is not None:
        dataset.save_split(split, run_dir / "split")
    graph = ItemGraph.from_interactions(train_set, cfg.num_neighbors)
    if st.theta is None:
        st.theta = backbone.init_params(train_set.num_users, train_set.num_items, cfg.k, features.dim,
                                        sub_rng(cfg.seed, "maskgen"))

    # phases 1-2, repeated: environment identification, then mask fitting
    for t in range(cfg.T):
        if st.stopped:
            break
        env_stage, mask_stage = f"envid{t}", f"mask{t}"
        if done < stages.index(env_stage):
            def do_envid():
                psi = maskgen.to_variant(st.m, features.vectors)
                return envid.identify(train_set, psi, cfg.num_envs, cfg.envid_rounds, sub_rng(cfg.seed, "envid", t),
                                      graph=graph, weights=weights, cfg=cfg.train_config(cfg.epochs_him),
                                      k=cfg.k, init_method=cfg.envid_init)
            res = stage(env_stage, do_envid)
            st.partition = res.partition.assignment
            st.history["reassignments"].append(res.reassignments)
            for rnd, n in enumerate(res.reassignments):
                _log_line(st, rnd, env_stage, float(n))
            st.stage = env_stage
            _checkpoint(run_dir, st)
        if done < stages.index(mask_stage):
            def do_mask():
                part = envid.EnvPartition(train_set, cfg.num_envs, st.partition)
                ctx = maskgen.MaskContext(part, features, graph, weights, cfg.neg_ratio, cfg.softmax,
                                          reduction=cfg.mask_reduction)
                state = maskgen.MaskState(st.m, st.sigma, cfg.lam, cfg.step)
                return maskgen.fit_mask(ctx, st.theta, state, cfg.iters_mask, sub_rng(cfg.seed, "maskgen", t + 1),
                                        theta_lr=cfg.theta_lr, fixed_w_erm=cfg.fixed_w_erm,
                                        grad_norm=cfg.grad_norm)
            prev = st.m.copy()
            state, theta, hist = stage(mask_stage, do_mask)
            st.m, st.sigma, st.theta = state.m, state.sigma, theta
            for it, (erm, w) in enumerate(zip(hist.erm, hist.w_erm)):
                _log_line(st, it, mask_stage, erm, w)
            st.history["masks"].append(st.m.tolist())
            st.history["w_erm"].append(float(np.mean(hist.w_erm)) if hist.w_erm else float("nan"))
            st.history["mask_losses"].append([hist.erm[-1], hist.irm[-1]] if hist.erm else [])
            st.history["complementarity"].append(complementarity_ok(st.m, features))
            moved = float(np.max(np.abs(st.m - prev))) if st.m.size else 0.0
            if t > 0 and moved < cfg.mask_tol:
                log.info("mask moved %.2e < %.2e after iteration %d; stopping early", moved, cfg.mask_tol, t)
                st.stopped = True
            st.stage = mask_stage
            _checkpoint(run_dir, st)

    # phase 3: final model on the invariant representations
    if st.final is None:
        def on_epoch(epoch, loss):
            _log_line(st, epoch, "final", loss)
        st.final = stage("final", lambda: train_final(st.m, train_set, features, cfg, graph, on_epoch))
        st.stage = "final"
        _checkpoint(run_dir, st)

    phi = maskgen.to_invariant(st.m, features.vectors)
    metrics = stage("evaluate", lambda: evaluation.evaluate((st.final, phi), split, cfg.K))
    partition = None
    if st.partition is not None:
        partition = envid.EnvPartition(train_set, cfg.num_envs, st.partition)
    if run_dir is not None:
        if partition is not None:
            envid.write_partition(partition, run_dir / "partition.tsv")
        maskgen.write_mask(st.m, features, run_dir / "mask.tsv")
        evaluation.write_metrics(metrics, cfg.K, run_dir / "metrics.tsv")
    h = st.history
    return RunArtifacts(st.final, st.m, split, partition, metrics, [np.array(m) for m in h["masks"]],
                        h["w_erm"], h["reassignments"], h["mask_losses"], h["complementarity"])


def load_run(run_dir) -> tuple[ModelParams, np.ndarray, SplitSpec]:
    """Final model, mask and split of a finished run."""
    run_dir = Path(run_dir)
    ck = run_dir / "checkpoints" / "final.ckpt"
    if not ck.exists():
        raise FileNotFoundError(f"no final checkpoint in {run_dir}; train first")
    st = _load_state(ck)
    split = dataset.load_split(run_dir / "split" / "split.manifest")
    return st.final, st.m, split
