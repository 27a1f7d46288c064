"""Shared builders for trace records and finite-difference checks."""

import numpy as np

from specloop.engine import propose_tree, verify_tree
from specloop.toylm import init_draft
from specloop.traces import make_record


def make_records(target, n=8, gamma=3, branching=2, seed=0, compress_topk=0, with_hidden=False, version=0,
                 params=None):
    rng = np.random.default_rng(seed)
    params = params or init_draft(target.vocab_size, target.hidden_dim, with_hidden, 1.0, seed=seed)
    from specloop.engine import DraftLookup
    lookup = DraftLookup(params, target)
    out = []
    for i in range(n):
        ctx = (int(rng.integers(target.vocab_size)), int(rng.integers(target.vocab_size)))
        tree = propose_tree(lookup, ctx, gamma, branching)
        res = verify_tree(target, tree)
        out.append(make_record(i, 0, tree, res, version, compress_topk, target=target, with_hidden=with_hidden))
    return out


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
