"""Interaction/feature I/O, negative sampling, synthetic corpora and IID/OOD splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


def _pair_keys(users, items, num_items):
    return np.asarray(users, dtype=np.int64) * max(int(num_items), 1) + np.asarray(items, dtype=np.int64)


@dataclass(eq=False)
class InteractionSet:
    """Positive pairs R+ (and optional sampled negatives R-) over a dense id universe.

    ``user_ids``/``item_ids`` map dense index -> raw id when the set came from a file.
    """

    num_users: int
    num_items: int
    pos_users: np.ndarray
    pos_items: np.ndarray
    neg_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    neg_items: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    user_ids: list | None = None
    item_ids: list | None = None

    def __post_init__(self):
        self.pos_users = np.asarray(self.pos_users, dtype=np.int64)
        self.pos_items = np.asarray(self.pos_items, dtype=np.int64)
        self.neg_users = np.asarray(self.neg_users, dtype=np.int64)
        self.neg_items = np.asarray(self.neg_items, dtype=np.int64)
        for arr, bound, what in (
            (self.pos_users, self.num_users, "user"),
            (self.neg_users, self.num_users, "user"),
            (self.pos_items, self.num_items, "item"),
            (self.neg_items, self.num_items, "item"),
        ):
            if arr.size and (arr.min() < 0 or arr.max() >= bound):
                raise DataError(f"{what} id out of range [0, {bound})")
        self.user_degree = np.bincount(self.pos_users, minlength=self.num_users)
        self.item_degree = np.bincount(self.pos_items, minlength=self.num_items)

    @property
    def num_positives(self) -> int:
        return int(self.pos_users.size)

    @property
    def num_negatives(self) -> int:
        return int(self.neg_users.size)

    def positive_keys(self) -> np.ndarray:
        return _pair_keys(self.pos_users, self.pos_items, self.num_items)

    def positive_matrix(self):
        """Binary CSR user x item matrix of the positives."""
        from scipy import sparse

        data = np.ones(self.num_positives, dtype=np.float64)
        mat = sparse.csr_matrix(
            (data, (self.pos_users, self.pos_items)), shape=(self.num_users, self.num_items)
        )
        mat.data[:] = 1.0
        return mat

    def items_by_user(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.num_users)]
        for u, i in zip(self.pos_users.tolist(), self.pos_items.tolist()):
            out[u].add(i)
        return out

    def subset(self, index) -> "InteractionSet":
        """Positives selected by ``index`` (mask or integer array), same universe, no negatives."""
        return InteractionSet(
            self.num_users,
            self.num_items,
            self.pos_users[index],
            self.pos_items[index],
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def with_negatives(self, neg_users, neg_items) -> "InteractionSet":
        return InteractionSet(
            self.num_users,
            self.num_items,
            self.pos_users,
            self.pos_items,
            neg_users,
            neg_items,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def __eq__(self, other):
        if not isinstance(other, InteractionSet):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self.pos_users, other.pos_users)
            and np.array_equal(self.pos_items, other.pos_items)
            and np.array_equal(self.neg_users, other.neg_users)
            and np.array_equal(self.neg_items, other.neg_items)
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
        )


@dataclass(eq=False)
class FeatureTable:
    """Row ``i`` of ``vectors`` is the concatenated multimedia vector of dense item ``i``."""

    vectors: np.ndarray
    modality_offsets: tuple[int, ...] = (0,)
    modality_names: tuple[str, ...] = ("V",)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DataError("feature vectors must form a 2-d table")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("feature table contains non-finite entries")
        offs = tuple(int(o) for o in self.modality_offsets)
        if not offs or offs[0] != 0 or any(b <= a for a, b in zip(offs, offs[1:])) or offs[-1] >= max(self.dim, 1):
            raise DataError(f"bad modality offsets {offs} for dim {self.dim}")
        if len(self.modality_names) != len(offs):
            raise DataError("one modality name per offset required")
        self.modality_offsets = offs
        self.modality_names = tuple(self.modality_names)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def num_items(self) -> int:
        return int(self.vectors.shape[0])

    def modality_of(self, index: int) -> str:
        pos = int(np.searchsorted(self.modality_offsets, index, side="right")) - 1
        return self.modality_names[pos]


@dataclass
class SplitSpec:
    train: InteractionSet
    test_iid: InteractionSet
    test_ood: InteractionSet
    ratio: float


@dataclass
class SyntheticSpec:
    """Planted-signal generator settings.

    Affinity of a pair is ``inv_scale * a_u.f_inv + spu_scale * (c_u * s_ui).f_spu + noise``.
    The generator environment ``e`` of a pair is drawn with probability proportional to
    ``1/(e+1)`` and sets how often the entries of the sign vector ``s_ui`` flip.
    """

    num_users: int = 200
    num_items: int = 300
    d_inv: int = 4
    d_spu: int = 4
    num_envs_true: int = 2
    flip_strength: float = 1.0
    density: float = 0.05
    seed: int = 0
    inv_scale: float = 1.0
    spu_scale: float = 2.0
    noise: float = 0.0
    shared_spurious: bool = True

    def validate(self):
        if self.num_users < 1 or self.num_items < 2:
            raise DataError("need at least 1 user and 2 items")
        if self.d_inv < 1 or self.d_spu < 1:
            raise DataError("d_inv and d_spu must be >= 1")
        if not 0.0 <= self.flip_strength <= 1.0:
            raise DataError("flip_strength must lie in [0, 1]")
        if not 0.0 < self.density < 1.0:
            raise DataError("density must lie in (0, 1)")
        if self.num_envs_true < 1:
            raise DataError("num_envs_true must be >= 1")


def _parse_int(token: str, lineno: int, path) -> int:
    try:
        return int(token)
    except ValueError:
        raise DataError(f"{path}: line {lineno}: expected an integer id, got {token!r}") from None


def load_interactions(path, user_index: dict | None = None, item_index: dict | None = None) -> InteractionSet:
    """Read ``user<TAB>item`` lines into a deduplicated positive set.

    Without index maps, dense ids are assigned in first-appearance order. With maps
    (e.g. from a split manifest) the universe is fixed and unknown ids are an error.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interactions file not found: {path}")
    fixed = user_index is not None and item_index is not None
    uidx: dict[int, int] = dict(user_index) if fixed else {}
    iidx: dict[int, int] = dict(item_index) if fixed else {}
    users, items, seen = [], [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 tab-separated fields, got {len(parts)}")
            ru, ri = _parse_int(parts[0], lineno, path), _parse_int(parts[1], lineno, path)
            if fixed:
                if ru not in uidx or ri not in iidx:
                    raise DataError(f"{path}: line {lineno}: id not in the id map")
            else:
                uidx.setdefault(ru, len(uidx))
                iidx.setdefault(ri, len(iidx))
            pair = (uidx[ru], iidx[ri])
            if pair in seen:
                continue
            seen.add(pair)
            users.append(pair[0])
            items.append(pair[1])
    if not users:
        raise DataError(f"{path}: no interactions")
    return InteractionSet(
        len(uidx),
        len(iidx),
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        user_ids=list(uidx),
        item_ids=list(iidx),
    )


def save_interactions(data: InteractionSet, path, raw_ids: bool = True) -> None:
    uids = data.user_ids if raw_ids and data.user_ids is not None else None
    iids = data.item_ids if raw_ids and data.item_ids is not None else None
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in zip(data.pos_users.tolist(), data.pos_items.tolist()):
            fh.write(f"{uids[u] if uids else u}\t{iids[i] if iids else i}\n")


def load_features(path, item_ids: list | None = None, num_items: int | None = None,
                  modality_dims: dict[str, int] | None = None) -> FeatureTable:
    """Read ``item<TAB>v1,...,vd`` lines.

    ``item_ids`` maps dense index -> raw id (as produced by :func:`load_interactions`);
    without it, raw ids are taken as dense indices ``0..num_items-1``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"features file not found: {path}")
    rows: dict[int, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 tab-separated fields")
            item = _parse_int(parts[0], lineno, path)
            try:
                vec = np.array([float(v) for v in parts[1].split(",")], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: malformed feature vector") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DataError(f"{path}: line {lineno}: expected {dim} values, got {vec.size}")
            if item in rows:
                raise DataError(f"{path}: line {lineno}: duplicate vector for item {item}")
            rows[item] = vec
    if dim is None:
        raise DataError(f"{path}: no feature vectors")
    if item_ids is None:
        n = num_items if num_items is not None else len(rows)
        item_ids = list(range(n))
    missing = [r for r in item_ids if r not in rows]
    if missing:
        raise DataError(f"{path}: no feature vector for item {missing[0]}")
    table = np.stack([rows[r] for r in item_ids])
    if modality_dims:
        names = tuple(modality_dims)
        sizes = [int(modality_dims[n]) for n in names]
        if sum(sizes) != dim:
            raise DataError(f"modality dims sum to {sum(sizes)}, features have {dim}")
        offsets = tuple(int(x) for x in np.cumsum([0] + sizes[:-1]))
        return FeatureTable(table, offsets, names)
    return FeatureTable(table)


def save_features(features: FeatureTable, path, item_ids: list | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(features.vectors):
            rid = item_ids[i] if item_ids is not None else i
            fh.write(f"{rid}\t" + ",".join(repr(float(v)) for v in row) + "\n")


def sample_negatives(data: InteractionSet, ratio: int, rng: np.random.Generator,
                     exclude: InteractionSet | None = None) -> InteractionSet:
    """Uniform negatives, ``ratio`` per positive of ``data``, never colliding with the
    positives of ``exclude`` (defaults to ``data`` itself)."""
    if ratio < 1:
        raise DataError("negative ratio must be >= 1")
    ref = data if exclude is None else exclude
    full = (ref.user_degree >= ref.num_items) & (data.user_degree > 0)
    if np.any(full):
        u = int(np.flatnonzero(full)[0])
        raise DataError(f"user {u} has interacted with every item; no negatives available")
    pos_keys = np.sort(ref.positive_keys())
    users = np.repeat(data.pos_users, ratio)
    items = rng.integers(0, data.num_items, size=users.size)
    while True:
        keys = _pair_keys(users, items, data.num_items)
        loc = np.searchsorted(pos_keys, keys)
        loc[loc >= pos_keys.size] = 0
        bad = pos_keys[loc] == keys
        if not bad.any():
            break
        items[bad] = rng.integers(0, data.num_items, size=int(bad.sum()))
    return data.with_negatives(users, items)


def make_synthetic(spec: SyntheticSpec):
    """Planted corpus: returns ``(InteractionSet, FeatureTable, true_env_assignment)``.

    The environment assignment is aligned with the positives and meant for diagnostics.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.d_inv + spec.d_spu
    feats = rng.standard_normal((spec.num_items, d))
    a = rng.standard_normal((spec.num_users, spec.d_inv))
    if spec.shared_spurious:
        c = np.tile(rng.standard_normal(spec.d_spu), (spec.num_users, 1))
    else:
        c = rng.standard_normal((spec.num_users, spec.d_spu))
    probs = 1.0 / np.arange(1, spec.num_envs_true + 1)
    probs /= probs.sum()
    env = rng.choice(spec.num_envs_true, size=(spec.num_users, spec.num_items), p=probs)
    # in environment e every spurious sign of a pair flips with probability
    # flip_strength * e / (E - 1): environment 0 keeps the planted direction, the last
    # one reverses it, the ones in between carry a weaker net spurious signal
    p_flip = spec.flip_strength * np.arange(spec.num_envs_true) / max(spec.num_envs_true - 1, 1)
    flips = rng.random((spec.num_users, spec.num_items, spec.d_spu)) < p_flip[env][..., None]
    signs = np.where(flips, -1.0, 1.0)

    inv = spec.inv_scale * (a @ feats[:, : spec.d_inv].T)
    f_spu = feats[:, spec.d_inv:]
    spu = spec.spu_scale * np.einsum("ud,id,uid->ui", c, f_spu, signs)
    aff = inv + spu
    if spec.noise > 0:
        aff = aff + spec.noise * rng.standard_normal(aff.shape)
    target = int(round(spec.density * aff.size))
    if target < 1 or np.ptp(aff) == 0:
        raise DataError("density unreachable for this spec")
    thresh = np.partition(aff.ravel(), aff.size - target)[aff.size - target]
    pos = aff >= thresh
    if pos.sum() != target or pos.all():
        raise DataError("density unreachable: affinity ties at the threshold")
    users, items = np.nonzero(pos)
    data = InteractionSet(spec.num_users, spec.num_items, users, items)
    offsets = (0, spec.d_inv)
    table = FeatureTable(feats, offsets, ("inv", "spu"))
    return data, table, env[users, items].astype(np.int64)


def split_iid_ood(data: InteractionSet, assignment: np.ndarray, ratio: float,
                  rng: np.random.Generator) -> SplitSpec:
    """Two-environment protocol: the larger environment is split into train / IID test,
    the smaller one becomes the OOD test set in full. Size ties go to the lower index."""
    assignment = np.asarray(assignment)
    if not 0.0 < ratio < 1.0:
        raise DataError("split ratio must lie in (0, 1)")
    if assignment.shape != (data.num_positives,):
        raise DataError("assignment must align with the positives")
    if assignment.size and (assignment.min() < 0 or assignment.max() > 1):
        raise DataError("split_iid_ood needs exactly two environments")
    sizes = np.bincount(assignment, minlength=2)
    if (sizes == 0).any():
        raise DataError(f"environment {int(np.argmin(sizes))} is empty")
    big = 0 if sizes[0] >= sizes[1] else 1
    idx_big = np.flatnonzero(assignment == big)
    idx_small = np.flatnonzero(assignment != big)
    perm = rng.permutation(idx_big)
    n_iid = int(math.floor(ratio * perm.size + 0.5))
    test_idx = np.sort(perm[:n_iid])
    train_idx = np.sort(perm[n_iid:])
    return SplitSpec(data.subset(train_idx), data.subset(test_idx), data.subset(idx_small), ratio)


def save_split(split: SplitSpec, directory, user_ids: list | None = None, item_ids: list | None = None) -> Path:
    """Write the three interaction files (dense ids), the id maps and a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nu, ni = split.train.num_users, split.train.num_items
    user_ids = user_ids if user_ids is not None else (split.train.user_ids or list(range(nu)))
    item_ids = item_ids if item_ids is not None else (split.train.item_ids or list(range(ni)))
    for name in ("train", "test_iid", "test_ood"):
        save_interactions(getattr(split, name), directory / f"{name}.tsv", raw_ids=False)
    with open(directory / "idmap.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for k, r in enumerate(user_ids):
            fh.write(f"user\t{k}\t{r}\n")
        for k, r in enumerate(item_ids):
            fh.write(f"item\t{k}\t{r}\n")
    manifest = directory / "split.manifest"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("train = train.tsv\ntest_iid = test_iid.tsv\ntest_ood = test_ood.tsv\n")
        fh.write(f"idmap = idmap.tsv\nratio = {split.ratio!r}\n")
    return manifest


def load_split(manifest) -> SplitSpec:
    manifest = Path(manifest)
    entries = {}
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    base = manifest.parent
    users, items = [], []
    for line in (base / entries["idmap"]).read_text(encoding="utf-8").splitlines():
        kind, dense, raw = line.split("\t")
        (users if kind == "user" else items).append(int(raw))
    ident_u = {k: k for k in range(len(users))}
    ident_i = {k: k for k in range(len(items))}
    parts = {}
    for name in ("train", "test_iid", "test_ood"):
        path = base / entries[name]
        if path.stat().st_size == 0:
            parts[name] = InteractionSet(len(users), len(items), [], [], user_ids=users, item_ids=items)
            continue
        s = load_interactions(path, ident_u, ident_i)
        s.user_ids, s.item_ids = users, items
        parts[name] = s
    return SplitSpec(parts["train"], parts["test_iid"], parts["test_ood"], float(entries["ratio"]))
