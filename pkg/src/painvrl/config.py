"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, blank lines are ignored. Every key must be
known and may appear once. ``format_config`` writes a file that parses back to the same
values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.lower() in ("none", "") else float(text)


def _opt_str(text: str):
    return None if text.lower() in ("none", "") else text


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    doc: str


# Defaults for the pipeline keys follow the reference experimental setup where one exists.
SCHEMA: dict[str, Key] = {
    # data sources
    "synthetic": Key(_bool, False, "generate the planted corpus instead of reading files"),
    "data_dir": Key(_opt_str, None, "directory with interactions.tsv / features.tsv (synth writes here)"),
    "interactions": Key(_opt_str, None, "interactions file, overrides data_dir"),
    "features": Key(_opt_str, None, "features file, overrides data_dir"),
    "modalities": Key(_opt_str, None, "modality layout 'name:dim,name:dim'; one modality V when unset"),
    "run_dir": Key(_opt_str, None, "run directory for train / evaluate"),
    # synthetic generator
    "num_users": Key(int, 200, "synthetic users"),
    "num_items": Key(int, 300, "synthetic items"),
    "d_inv": Key(int, 4, "invariant feature dims"),
    "d_spu": Key(int, 4, "spurious feature dims"),
    "num_envs_true": Key(int, 2, "generator environments"),
    "flip_strength": Key(float, 1.0, "probability a spurious sign flips per generator environment"),
    "density": Key(float, 0.05, "positive-interaction rate"),
    "inv_scale": Key(float, 1.0, "weight of the invariant affinity"),
    "spu_scale": Key(float, 2.0, "weight of the spurious affinity"),
    "noise": Key(float, 0.0, "std of Gaussian affinity noise"),
    "shared_spurious": Key(_bool, True, "one spurious direction shared by all users"),
    # pipeline
    "seed": Key(int, 0, "root seed; every RNG stream derives from it"),
    "T": Key(int, 3, "outer iterations of identification + mask fitting"),
    "num_envs": Key(int, 10, "environments identified on the training set"),
    "split_ratio": Key(float, 0.1, "IID test share of the larger environment (9:1)"),
    "envid_rounds": Key(int, 10, "max identification rounds"),
    "envid_init": Key(str, "kmeans", "initial partition: kmeans or random"),
    "epochs_him": Key(int, 20, "epochs per environment model"),
    "iters_mask": Key(int, 40, "mask iterations per outer iteration"),
    "epochs_final": Key(int, 500, "final model epochs"),
    "k": Key(int, 64, "embedding size"),
    "eta": Key(float, 1e-4, "weight of the degree-weighted term"),
    "kappa": Key(float, 1e-2, "weight of the item-neighbour term"),
    "num_neighbors": Key(int, 10, "neighbours per item in the co-occurrence graph"),
    "sigma": Key(float, 0.1, "mask noise std"),
    "lam": Key(float, 1.0, "mask L2 weight"),
    "step": Key(float, 0.01, "mask step size"),
    "mask_reduction": Key(str, "sum", "per-environment loss reduction in mask fitting: sum or mean"),
    "grad_norm": Key(str, "none", "rescaling of the two mask gradients before the weight solve: none or l2"),
    "theta_lr": Key(float, 1e-2, "Adam learning rate of the mask model"),
    "softmax": Key(_bool, False, "normalise the two attention weights with a softmax"),
    "fixed_w_erm": Key(_opt_float, None, "fix the ERM weight instead of solving for it (ablations)"),
    "mask_tol": Key(float, 1e-3, "outer early stop when the mask moves less than this (sup norm)"),
    "neg_ratio": Key(int, 1, "negatives per positive"),
    "batch_size": Key(int, 512, "minibatch size"),
    "lr": Key(float, 1e-2, "Adam learning rate of the backbone models"),
    # evaluation
    "K": Key(int, 10, "cutoff for P/R/NDCG"),
}


def defaults() -> dict:
    return {name: key.default for name, key in SCHEMA.items()}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse config text into a dict holding every schema key (unset keys get defaults)."""
    values = defaults()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        name, _, raw = body.partition("=")
        name, raw = name.strip(), raw.strip()
        if name not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {name!r}")
        if name in seen:
            raise ConfigError(f"{source}:{lineno}: key {name!r} given twice")
        seen.add(name)
        try:
            values[name] = SCHEMA[name].parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {name!r}: {exc}") from exc
    return values


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(values: dict) -> str:
    """Resolved config text, schema order, one documented key per line."""
    lines = []
    for name, key in SCHEMA.items():
        lines.append(f"# {key.doc}")
        lines.append(f"{name} = {_fmt(values.get(name, key.default))}")
    return "\n".join(lines) + "\n"


def require(values: dict, *names: str) -> None:
    for name in names:
        if values.get(name) is None:
            raise ConfigError(f"missing required key {name!r}")
