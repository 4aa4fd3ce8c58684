"""UltraGCN-style scoring model, its three-part loss and analytic gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from .dataset import InteractionSet, sample_negatives
from .numgrad import ParamLayout

log = logging.getLogger(__name__)

ATTN_KEYS = ("A1", "b1", "v1", "c1", "A2", "b2", "v2", "c2")
CORE_KEYS = ("p_t", "t", "p_f", "W")

# eta, kappa defaults from the reference experimental setup
DEFAULT_ETA = 1e-4
DEFAULT_KAPPA = 1e-2


class NonFiniteError(FloatingPointError):
    pass


@dataclass(eq=False)
class ModelParams:
    """Collaborative (``p_t``, ``t``) and content-side (``p_f``, ``W``) parameters plus
    the two attention MLPs used by the mask model."""

    p_t: np.ndarray
    t: np.ndarray
    p_f: np.ndarray
    W: np.ndarray
    attn: dict

    @property
    def k(self) -> int:
        return int(self.p_t.shape[1])

    @property
    def dim(self) -> int:
        return int(self.W.shape[1])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"p_t": self.p_t, "t": self.t, "p_f": self.p_f, "W": self.W}
        for key in ATTN_KEYS:
            out["attn." + key] = self.attn[key]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        attn = {key: np.array(arrays["attn." + key], dtype=np.float64) for key in ATTN_KEYS}
        return cls(*(np.array(arrays[key], dtype=np.float64) for key in CORE_KEYS), attn=attn)

    def layout(self) -> ParamLayout:
        return ParamLayout.of(self.arrays())

    def vector(self) -> np.ndarray:
        return self.layout().flatten(self.arrays())

    def with_vector(self, vec: np.ndarray) -> "ModelParams":
        return ModelParams.from_arrays(self.layout().unflatten(vec))

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def init_params(num_users: int, num_items: int, k: int, d: int, rng: np.random.Generator,
                hidden: int | None = None) -> ModelParams:
    """Every entry uniform in [-0.5/k, 0.5/k]."""
    hidden = 2 * k if hidden is None else hidden
    scale = 0.5 / k

    def draw(*shape):
        return rng.uniform(-scale, scale, size=shape)

    p_t, t, p_f, W = draw(num_users, k), draw(num_items, k), draw(num_users, k), draw(k, d)
    n_in = 3 * k + d
    attn = {}
    for s in ("1", "2"):
        attn["A" + s] = draw(hidden, n_in)
        attn["b" + s] = draw(hidden)
        attn["v" + s] = draw(hidden)
        attn["c" + s] = draw(1)
    return ModelParams(p_t, t, p_f, W, attn)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays().items()}


# ---------------------------------------------------------------- graph terms

def degree_coeff(d_u, d_i):
    """nu_{u,i} = (1/d_u) * sqrt((d_u + 1) / (d_i + 1)); vectorised over arrays."""
    d_u = np.asarray(d_u, dtype=np.float64)
    d_i = np.asarray(d_i, dtype=np.float64)
    if np.any(d_u <= 0):
        raise ValueError("degree_coeff: user degree must be >= 1 (user has no positives)")
    if np.any(d_i < 0):
        raise ValueError("degree_coeff: negative item degree")
    out = np.sqrt((d_u + 1.0) / (d_i + 1.0)) / d_u
    return float(out) if out.ndim == 0 else out


class ItemGraph:
    """Item-item co-occurrence graph with top-K neighbour lists.

    ``G[i, j]`` counts users who interacted with both items (the diagonal holds the
    item degree), ``g`` are its row sums. Degenerate similarity denominators yield a
    score of 0 and bump ``degenerate_count``.
    """

    def __init__(self, G, num_neighbors: int = 10, user_degree=None, item_degree=None):
        G = sparse.csr_matrix(G, dtype=np.float64)
        if G.shape[0] != G.shape[1]:
            raise ValueError("co-occurrence matrix must be square")
        if (abs(G - G.T) > 0).nnz:
            raise ValueError("co-occurrence matrix must be symmetric")
        self.G = G
        self.num_items = G.shape[0]
        self.g = np.asarray(G.sum(axis=1)).ravel()
        self.diag = G.diagonal()
        self.num_neighbors = int(num_neighbors)
        self.degenerate_count = 0
        self.user_degree = user_degree
        self.item_degree = item_degree
        self._build_neighbors()

    @classmethod
    def from_interactions(cls, data: InteractionSet, num_neighbors: int = 10) -> "ItemGraph":
        R = data.positive_matrix()
        G = (R.T @ R).tocsr()
        return cls(G, num_neighbors, data.user_degree.copy(), data.item_degree.copy())

    def _scores(self, rows, cols, vals):
        denom = self.g[rows] - self.diag[rows]
        ok = (denom > 0) & (self.g[cols] > 0)
        out = np.zeros(rows.size)
        out[ok] = vals[ok] / denom[ok] * np.sqrt(self.g[rows[ok]] / self.g[cols[ok]])
        self.degenerate_count += int(np.count_nonzero(~ok))
        return out

    def similarity(self, i: int, j: int) -> float:
        val = self.G[i, j]
        if val == 0:
            return 0.0
        return float(self._scores(np.array([i]), np.array([j]), np.array([val], dtype=np.float64))[0])

    def _build_neighbors(self):
        coo = self.G.tocoo()
        off = coo.row != coo.col
        rows, cols, vals = coo.row[off].astype(np.int64), coo.col[off].astype(np.int64), coo.data[off]
        scores = self._scores(rows, cols, vals) if rows.size else np.zeros(0)
        keep = scores > 0
        rows, cols, scores = rows[keep], cols[keep], scores[keep]
        # rows ascending, then score descending, then neighbour id ascending
        order = np.lexsort((cols, -scores, rows))
        rows, cols, scores = rows[order], cols[order], scores[order]
        starts = np.searchsorted(rows, np.arange(self.num_items))
        rank = np.arange(rows.size) - starts[rows] if rows.size else np.zeros(0, dtype=np.int64)
        top = rank < self.num_neighbors
        rows, cols, scores = rows[top], cols[top], scores[top]
        self.nbr_ptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=self.num_items))]).astype(np.int64)
        self.nbr_idx = cols
        self.nbr_score = scores

    def neighbors(self, i: int):
        s = slice(self.nbr_ptr[i], self.nbr_ptr[i + 1])
        return self.nbr_idx[s], self.nbr_score[s]


# ---------------------------------------------------------------- scoring/loss

def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Batch:
    pos_users: np.ndarray
    pos_items: np.ndarray
    neg_users: np.ndarray
    neg_items: np.ndarray

    @classmethod
    def from_set(cls, data: InteractionSet) -> "Batch":
        return cls(data.pos_users, data.pos_items, data.neg_users, data.neg_items)

    @property
    def size(self) -> int:
        return int(self.pos_users.size + self.neg_users.size)


@dataclass
class PairTerms:
    """Weighted log-sigmoid terms: loss = sum_p weight_p * -log sigma(sign_p * score(u_p, i_p))."""

    users: np.ndarray
    items: np.ndarray
    sign: np.ndarray
    weight: np.ndarray

    @staticmethod
    def concat(parts: list["PairTerms"]) -> "PairTerms":
        return PairTerms(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("users", "items", "sign", "weight")))


def content_rows(content, users, items) -> np.ndarray:
    """Content vectors for pairs: ``content`` is an item table or a ``(users, items) -> rows`` callable."""
    if callable(content):
        rows = content(users, items)
    else:
        rows = np.asarray(content)[items]
    if not np.all(np.isfinite(rows)):
        raise NonFiniteError("non-finite content vector")
    return rows


def pair_scores(users, items, rows, params: ModelParams) -> np.ndarray:
    collab = np.einsum("nk,nk->n", params.p_t[users], params.t[items])
    return collab + np.einsum("nk,nk->n", params.p_f[users], rows @ params.W.T)


def score(u: int, i: int, content, params: ModelParams) -> float:
    """<p_t[u], t[i]> + <p_f[u], W content>."""
    content = np.asarray(content, dtype=np.float64)
    if content.shape != (params.dim,):
        raise ValueError(f"content must have length {params.dim}")
    if not np.all(np.isfinite(content)):
        raise NonFiniteError("non-finite content vector")
    return float(params.p_t[u] @ params.t[i] + params.p_f[u] @ (params.W @ content))


def _bce_terms(pos_scores, neg_scores, pos_w=None, neg_w=None) -> float:
    lp = -log_sigmoid(pos_scores)
    ln = -log_sigmoid(-neg_scores)
    if pos_w is not None:
        lp = lp * pos_w
        ln = ln * neg_w
    return float(lp.sum() + ln.sum())


def _batch_scores(batch: Batch, content, params):
    ps = pair_scores(batch.pos_users, batch.pos_items,
                     content_rows(content, batch.pos_users, batch.pos_items), params)
    ns = pair_scores(batch.neg_users, batch.neg_items,
                     content_rows(content, batch.neg_users, batch.neg_items), params)
    return ps, ns


def loss_O(batch: Batch, content, params: ModelParams) -> float:
    if batch.size == 0:
        raise ValueError("empty batch")
    return _bce_terms(*_batch_scores(batch, content, params))


def loss_U(batch: Batch, content, params: ModelParams, graph: ItemGraph) -> float:
    if batch.size == 0:
        raise ValueError("empty batch")
    ud, idg = graph.user_degree, graph.item_degree
    pw = degree_coeff(ud[batch.pos_users], idg[batch.pos_items])
    nw = degree_coeff(ud[batch.neg_users], idg[batch.neg_items])
    return _bce_terms(*_batch_scores(batch, content, params), np.atleast_1d(pw), np.atleast_1d(nw))


def neighbor_terms(pos_users, pos_items, graph: ItemGraph) -> PairTerms:
    counts = graph.nbr_ptr[pos_items + 1] - graph.nbr_ptr[pos_items]
    users = np.repeat(pos_users, counts)
    starts = np.repeat(graph.nbr_ptr[pos_items], counts)
    offs = np.arange(users.size) - np.repeat(np.cumsum(counts) - counts, counts)
    idx = starts + offs
    return PairTerms(users, graph.nbr_idx[idx], np.ones(users.size), graph.nbr_score[idx])


def loss_I(batch: Batch, graph: ItemGraph, content, params: ModelParams) -> float:
    terms = neighbor_terms(batch.pos_users, batch.pos_items, graph)
    if terms.users.size == 0:
        return 0.0
    s = pair_scores(terms.users, terms.items, content_rows(content, terms.users, terms.items), params)
    return float(np.sum(-terms.weight * log_sigmoid(s)))


@dataclass
class LossWeights:
    eta: float = DEFAULT_ETA
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self):
        if self.eta < 0 or self.kappa < 0:
            raise ValueError("loss weights must be nonnegative")


def total_loss(batch: Batch, graph: ItemGraph, content, params: ModelParams,
               weights: LossWeights = LossWeights()) -> float:
    """L_O + eta * L_U + kappa * L_I."""
    out = loss_O(batch, content, params)
    if weights.eta:
        out += weights.eta * loss_U(batch, content, params, graph)
    if weights.kappa:
        out += weights.kappa * loss_I(batch, graph, content, params)
    return out


def expand_terms(batch: Batch, graph: ItemGraph, weights: LossWeights) -> PairTerms:
    """The total loss as one flat list of weighted log-sigmoid terms."""
    def weight(users, items):
        if not weights.eta or users.size == 0:
            return np.ones(users.size)
        return 1.0 + weights.eta * np.atleast_1d(degree_coeff(graph.user_degree[users], graph.item_degree[items]))

    pw = weight(batch.pos_users, batch.pos_items)
    nw = weight(batch.neg_users, batch.neg_items)
    parts = [
        PairTerms(batch.pos_users, batch.pos_items, np.ones(batch.pos_users.size), pw),
        PairTerms(batch.neg_users, batch.neg_items, -np.ones(batch.neg_users.size), nw),
    ]
    if weights.kappa:
        nb = neighbor_terms(batch.pos_users, batch.pos_items, graph)
        nb.weight = weights.kappa * nb.weight
        parts.append(nb)
    return PairTerms.concat(parts)


def terms_loss_grad(terms: PairTerms, rows: np.ndarray, params: ModelParams):
    """Loss and gradients of a term list.

    Returns ``(loss, grads, d_rows)``: grads for ``p_t, t, p_f, W`` and the gradient of the
    loss with respect to each pair's content row.
    """
    u, i = terms.users, terms.items
    proj = rows @ params.W.T
    s = np.einsum("nk,nk->n", params.p_t[u], params.t[i]) + np.einsum("nk,nk->n", params.p_f[u], proj)
    ys = terms.sign * s
    loss = float(np.sum(terms.weight * -log_sigmoid(ys)))
    ds = -terms.weight * terms.sign * sigmoid(-ys)
    if not (np.isfinite(loss) and np.all(np.isfinite(ds))):
        raise NonFiniteError("non-finite loss or score gradient")
    grads = {
        "p_t": np.zeros_like(params.p_t),
        "t": np.zeros_like(params.t),
        "p_f": np.zeros_like(params.p_f),
    }
    np.add.at(grads["p_t"], u, ds[:, None] * params.t[i])
    np.add.at(grads["t"], i, ds[:, None] * params.p_t[u])
    np.add.at(grads["p_f"], u, ds[:, None] * proj)
    grads["W"] = (ds[:, None] * params.p_f[u]).T @ rows
    d_rows = ds[:, None] * (params.p_f[u] @ params.W)
    return loss, grads, d_rows


def grad_total_loss(batch: Batch, graph: ItemGraph, content, params: ModelParams,
                    weights: LossWeights = LossWeights()) -> dict[str, np.ndarray]:
    """Gradient of :func:`total_loss` for every parameter segment (attention segments are zero)."""
    terms = expand_terms(batch, graph, weights)
    rows = content_rows(content, terms.users, terms.items)
    _, core, _ = terms_loss_grad(terms, rows, params)
    grads = zero_grads(params)
    grads.update(core)
    return grads


# ---------------------------------------------------------------- optimisation

class Adam:
    def __init__(self, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of ``arrays`` for every key present in ``grads``."""
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arrays[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 512
    neg_ratio: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def train(params: ModelParams, data: InteractionSet, content, graph: ItemGraph,
          weights: LossWeights, cfg: TrainConfig, rng: np.random.Generator,
          exclude: InteractionSet | None = None, on_epoch: Callable | None = None) -> ModelParams:
    """Minibatch Adam on the total loss; negatives are resampled every epoch.

    ``content`` is an item table (num_items x d). Returns a new ModelParams.
    """
    params = params.copy()
    arrays = {"p_t": params.p_t, "t": params.t, "p_f": params.p_f, "W": params.W}
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    n = data.num_positives
    for epoch in range(cfg.epochs):
        negs = sample_negatives(data, cfg.neg_ratio, rng, exclude=exclude)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            nidx = (idx[:, None] * cfg.neg_ratio + np.arange(cfg.neg_ratio)).ravel()
            batch = Batch(data.pos_users[idx], data.pos_items[idx], negs.neg_users[nidx], negs.neg_items[nidx])
            terms = expand_terms(batch, graph, weights)
            rows = content_rows(content, terms.users, terms.items)
            loss, grads, _ = terms_loss_grad(terms, rows, params)
            opt.step(arrays, grads)
            epoch_loss += loss
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return params
