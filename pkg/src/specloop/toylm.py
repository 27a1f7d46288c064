"""Target and draft token models.

The target is an order-2 Markov table over a small vocabulary plus a fixed
linear projection of the context that stands in for the target's hidden
states. The drafter is a linear-softmax model over the one-hot context (and,
optionally, the projected hidden features), so every distribution and every
gradient used elsewhere in the package is exact.

Table generation
----------------
The vocabulary is split into ``n_clusters`` contiguous token clusters of
``m = V // n_clusters`` tokens; any remainder tokens are "rare" tokens that
belong to cluster ``t % n_clusters``. A single template over cluster positions
is drawn once:

* ``succ[j]``: ``sparsity`` distinct successor positions for prev1 position j,
* ``weights[i, j]``: a Dirichlet draw over those successors for context (i, j).

Each cluster is a seeded relabeling of the template, so all clusters are
equally hard for the drafter while exercising disjoint conditional rows. The
row for context ``(a, b)`` puts ``1 - noise_mass`` on the successors of ``b``
inside ``b``'s cluster and spreads ``noise_mass`` over the full vocabulary with
an independent flat-Dirichlet draw per context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError, UsageError

SNAPSHOT_MAGIC = b"SPECLOOP-SNAPSHOT"


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_token(tok, vocab_size: int) -> int:
    if isinstance(tok, (bool, np.bool_)) or not isinstance(tok, (int, np.integer)):
        raise UsageError(f"token must be an integer, got {tok!r}")
    if not 0 <= tok < vocab_size:
        raise UsageError(f"token {tok} out of range for vocabulary of size {vocab_size}")
    return int(tok)


@dataclass(frozen=True, eq=False)
class TargetModel:
    """Fixed verifier: next-token table ``cond_table[prev2, prev1]`` and hidden projection."""

    vocab_size: int
    cond_table: np.ndarray
    hidden_proj: np.ndarray
    seed: int
    clusters: tuple[tuple[int, ...], ...] = ()
    argmax_table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        V = self.vocab_size
        table = np.asarray(self.cond_table, dtype=np.float64)
        if table.shape != (V, V, V):
            raise UsageError(f"cond_table must have shape {(V, V, V)}, got {table.shape}")
        proj = np.asarray(self.hidden_proj, dtype=np.float64)
        if proj.ndim != 2 or proj.shape[1] != 2 * V:
            raise UsageError(f"hidden_proj must have shape (d_h, {2 * V}), got {proj.shape}")
        table = table.copy()
        proj = proj.copy()
        table.setflags(write=False)
        proj.setflags(write=False)
        object.__setattr__(self, "cond_table", table)
        object.__setattr__(self, "hidden_proj", proj)
        # np.argmax returns the first maximum, i.e. lowest-index tie-break.
        am = table.argmax(axis=-1)
        am.setflags(write=False)
        object.__setattr__(self, "argmax_table", am)

    @property
    def hidden_dim(self) -> int:
        return self.hidden_proj.shape[0]

    def cluster_of(self, token: int) -> int:
        for c, toks in enumerate(self.clusters):
            if token in toks:
                return c
        raise UsageError(f"token {token} does not belong to a core cluster")

    def greedy_next(self, prev2: int, prev1: int) -> int:
        return int(self.argmax_table[prev2, prev1])


def make_target(
    vocab_size: int = 64,
    hidden_dim: int = 16,
    sparsity: int = 4,
    n_clusters: int = 5,
    seed: int = 0,
    noise_mass: float = 0.1,
    concentration: float = 1.0,
) -> TargetModel:
    """Generate the seeded target table described in the module docstring."""
    V = vocab_size
    if V < 2 or n_clusters < 1 or V // n_clusters < 2:
        raise UsageError(f"need at least 2 tokens per cluster (V={V}, n_clusters={n_clusters})")
    m = V // n_clusters
    if not 1 <= sparsity <= m:
        raise UsageError(f"sparsity must be in [1, {m}], got {sparsity}")
    if not 0.0 <= noise_mass < 1.0:
        raise UsageError(f"noise_mass must be in [0, 1), got {noise_mass}")
    if concentration <= 0:
        raise UsageError("concentration must be positive")

    rng = np.random.default_rng(seed)
    succ = np.stack([rng.choice(m, size=sparsity, replace=False) for _ in range(m)])
    weights = rng.dirichlet(np.full(sparsity, concentration), size=(m, m))
    perms = np.stack([rng.permutation(m) for _ in range(n_clusters)])
    noise = rng.dirichlet(np.ones(V), size=(V, V))
    hidden_proj = rng.normal(0.0, 1.0 / np.sqrt(2.0), size=(hidden_dim, 2 * V))

    tokens = np.arange(V)
    cluster = np.where(tokens < n_clusters * m, tokens // m, tokens % n_clusters)
    # position of each token inside its cluster's template coordinates
    pos = tokens % m
    core = tokens < n_clusters * m
    for c in range(n_clusters):
        inv = np.argsort(perms[c])
        members = np.arange(c * m, (c + 1) * m)
        pos[members] = inv[members - c * m]
    # token_of[c, p] = token at template position p in cluster c
    token_of = np.stack([c * m + perms[c] for c in range(n_clusters)])

    table = noise_mass * noise
    for a in range(V):
        i = pos[a]
        for b in range(V):
            j = pos[b]
            table[a, b, token_of[cluster[b], succ[j]]] += (1.0 - noise_mass) * weights[i, j]
    table /= table.sum(axis=-1, keepdims=True)

    clusters = tuple(tuple(int(t) for t in tokens[(cluster == c) & core]) for c in range(n_clusters))
    return TargetModel(vocab_size=V, cond_table=table, hidden_proj=hidden_proj, seed=seed, clusters=clusters)


def target_next_dist(model: TargetModel, prev2: int, prev1: int) -> np.ndarray:
    a = _check_token(prev2, model.vocab_size)
    b = _check_token(prev1, model.vocab_size)
    return model.cond_table[a, b]


def target_hidden(model: TargetModel, prev2: int, prev1: int) -> np.ndarray:
    """Hidden features: ``hidden_proj @ concat(onehot(prev2), onehot(prev1))``."""
    V = model.vocab_size
    a = _check_token(prev2, V)
    b = _check_token(prev1, V)
    return model.hidden_proj[:, a] + model.hidden_proj[:, V + b]


@dataclass(frozen=True, eq=False)
class DraftParams:
    """Immutable drafter snapshot. ``weight`` has shape (V, F), F = 2V (+ d_h)."""

    weight: np.ndarray
    use_hidden: bool = False
    version: int = 0

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] < 2 * w.shape[0]:
            raise UsageError(f"weight must have shape (V, 2V[+d_h]), got {w.shape}")
        if not self.use_hidden and w.shape[1] != 2 * w.shape[0]:
            raise UsageError("weight has hidden columns but use_hidden is False")
        if self.use_hidden and w.shape[1] == 2 * w.shape[0]:
            raise UsageError("use_hidden requires at least one hidden column")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def n_features(self) -> int:
        return self.weight.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.n_features - 2 * self.vocab_size


def init_draft(
    vocab_size: int = 64,
    hidden_dim: int = 16,
    use_hidden: bool = False,
    init_scale: float = 0.0,
    seed: int = 0,
) -> DraftParams:
    F = 2 * vocab_size + (hidden_dim if use_hidden else 0)
    if init_scale == 0.0:
        w = np.zeros((vocab_size, F))
    else:
        w = np.random.default_rng(seed).normal(0.0, init_scale, size=(vocab_size, F))
    return DraftParams(weight=w, use_hidden=use_hidden, version=0)


def draft_features(params: DraftParams, prev2: int, prev1: int, hidden=None) -> np.ndarray:
    V = params.vocab_size
    x = np.zeros(params.n_features)
    x[_check_token(prev2, V)] = 1.0
    x[V + _check_token(prev1, V)] += 1.0
    if params.use_hidden:
        x[2 * V:] = _check_hidden(params, hidden)
    return x


def _check_hidden(params: DraftParams, hidden) -> np.ndarray:
    if hidden is None:
        raise UsageError("drafter conditions on hidden features but none were given")
    h = np.asarray(hidden, dtype=np.float64)
    if h.shape != (params.hidden_dim,):
        raise UsageError(f"hidden features must have shape ({params.hidden_dim},), got {h.shape}")
    return h


def draft_logits(params: DraftParams, prev2: int, prev1: int, hidden=None) -> np.ndarray:
    V = params.vocab_size
    a = _check_token(prev2, V)
    b = _check_token(prev1, V)
    w = params.weight
    z = w[:, a] + w[:, V + b]
    if params.use_hidden:
        z = z + w[:, 2 * V:] @ _check_hidden(params, hidden)
    return z


def draft_forward(params: DraftParams, prev2: int, prev1: int, hidden=None):
    """Return ``(logits, probs)`` for the next token."""
    z = draft_logits(params, prev2, prev1, hidden)
    return z, softmax(z)


def ranked_tokens(probs: np.ndarray) -> np.ndarray:
    """Token ids by descending probability; ties go to the lower index."""
    return np.argsort(-np.asarray(probs), kind="stable")


def draft_topk(params: DraftParams, context, hidden, k: int) -> list[tuple[int, float]]:
    if not 1 <= k <= params.vocab_size:
        raise UsageError(f"k must be in [1, {params.vocab_size}], got {k}")
    _, probs = draft_forward(params, context[0], context[1], hidden)
    order = ranked_tokens(probs)[:k]
    return [(int(t), float(probs[t])) for t in order]


# -- snapshot serialization -------------------------------------------------


def encode_snapshot(params: DraftParams) -> bytes:
    """Header line (JSON) followed by the row-major float64 little-endian weights."""
    header = {
        "V": params.vocab_size,
        "F": params.n_features,
        "d_h": params.hidden_dim,
        "use_hidden": params.use_hidden,
        "version": params.version,
    }
    body = np.ascontiguousarray(params.weight, dtype="<f8").tobytes()
    return SNAPSHOT_MAGIC + b"\n" + json.dumps(header, sort_keys=True).encode() + b"\n" + body


def decode_snapshot(blob: bytes) -> DraftParams:
    try:
        magic, header_line, body = blob.split(b"\n", 2)
    except ValueError as exc:
        raise SchemaError("truncated snapshot") from exc
    if magic != SNAPSHOT_MAGIC:
        raise SchemaError("not a specloop snapshot")
    header = json.loads(header_line)
    V, F = header["V"], header["F"]
    if len(body) != V * F * 8:
        raise SchemaError(f"snapshot body has {len(body)} bytes, expected {V * F * 8}")
    if F != 2 * V + header["d_h"]:
        raise SchemaError("inconsistent snapshot header")
    w = np.frombuffer(body, dtype="<f8").reshape(V, F).astype(np.float64)
    return DraftParams(weight=w, use_hidden=bool(header["use_hidden"]), version=int(header["version"]))


def save_snapshot(params: DraftParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_snapshot(params))


def load_snapshot(path) -> DraftParams:
    with open(path, "rb") as fh:
        return decode_snapshot(fh.read())
