"""Draft-tree proposal, tree attention masks, and greedy verification.

Positions in a verified tree are indexed root-first: position 0 is the last
committed token (the root, whose context is ``tree.context``) and position
``k + 1`` is tree node ``k``. Every per-position array produced here and in the
trace records follows that layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructureError, UsageError
from .toylm import DraftParams, TargetModel, draft_forward, ranked_tokens, target_hidden

ROOT = -1


@dataclass(frozen=True)
class TreeNode:
    token: int
    parent: int
    depth: int
    draft_prob: float


@dataclass(frozen=True)
class DraftTree:
    nodes: tuple[TreeNode, ...]
    context: tuple[int, int]
    gamma: int
    branching: int

    def validate(self, max_nodes: int | None = None) -> None:
        validate_structure([(n.token, n.parent, n.depth) for n in self.nodes], max_nodes)

    def position_contexts(self) -> list[tuple[int, int]]:
        return position_contexts(self.context, [(n.token, n.parent) for n in self.nodes])


def validate_structure(nodes, max_nodes: int | None = None) -> None:
    """Check topological order and depth consistency of ``(token, parent, depth)`` triples."""
    if max_nodes is not None and len(nodes) > max_nodes:
        raise StructureError(f"tree has {len(nodes)} nodes, limit is {max_nodes}")
    depths = []
    for k, (_, parent, depth) in enumerate(nodes):
        if parent != ROOT and not 0 <= parent < k:
            raise StructureError(f"node {k} has parent {parent}; parents must precede children")
        expected = 1 if parent == ROOT else depths[parent] + 1
        if depth != expected:
            raise StructureError(f"node {k} has depth {depth}, expected {expected}")
        depths.append(depth)


def position_contexts(context, nodes) -> list[tuple[int, int]]:
    """Order-2 context at every position, derived from ancestors only."""
    ctxs = [(int(context[0]), int(context[1]))]
    for token, parent in nodes:
        ctxs.append((ctxs[parent + 1][1], int(token)))
    return ctxs


# -- drafters ------------------------------------------------------------------


class DraftLookup:
    """Memoized view of one pinned drafter snapshot.

    Hidden features are recomputed from every proposed path's last two tokens,
    so the drafter's output at a context is a pure function of the snapshot.
    """

    def __init__(self, params: DraftParams, target: TargetModel | None = None):
        if params.use_hidden and target is None:
            raise UsageError("a hidden-conditioned drafter needs the target's hidden projection")
        self.params = params
        self.target = target
        self.version = params.version
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _ranked(self, prev2: int, prev1: int):
        key = (prev2, prev1)
        hit = self._cache.get(key)
        if hit is None:
            hidden = target_hidden(self.target, prev2, prev1) if self.params.use_hidden else None
            _, probs = draft_forward(self.params, prev2, prev1, hidden)
            hit = (ranked_tokens(probs), probs)
            self._cache[key] = hit
        return hit

    def topk(self, prev2: int, prev1: int, k: int) -> list[tuple[int, float]]:
        order, probs = self._ranked(prev2, prev1)
        return [(int(t), float(probs[t])) for t in order[:k]]


class AgreementDrafter:
    """Synthetic drafter whose first choice equals the target argmax with probability ``alpha``.

    Each proposal is an independent draw, which realizes the i.i.d. acceptance
    assumption behind the expected-acceptance-length formula.
    """

    def __init__(self, target: TargetModel, alpha: float, rng: np.random.Generator):
        if not 0.0 <= alpha <= 1.0:
            raise UsageError(f"alpha must be in [0, 1], got {alpha}")
        self.target = target
        self.alpha = alpha
        self.rng = rng
        self.version = 0

    def topk(self, prev2: int, prev1: int, k: int) -> list[tuple[int, float]]:
        V = self.target.vocab_size
        best = self.target.greedy_next(prev2, prev1)
        others = [t for t in range(V) if t != best]
        if self.rng.random() < self.alpha:
            first = best
        else:
            first = others[int(self.rng.integers(len(others)))]
        rest = [t for t in range(V) if t != first][: k - 1]
        return [(first, 1.0)] + [(t, 0.0) for t in rest]


def as_drafter(drafter, target: TargetModel | None = None):
    if isinstance(drafter, DraftParams):
        return DraftLookup(drafter, target)
    return drafter


# -- proposal -----------------------------------------------------------------


def propose_tree(drafter, context, gamma: int, branching: int, max_nodes: int | None = None,
                 target: TargetModel | None = None) -> DraftTree:
    """Breadth-limited expansion: at each depth, frontier nodes are expanded in
    descending path probability, each adding its top-``branching`` children,
    until depth ``gamma`` or ``max_nodes`` is reached."""
    if gamma < 1 or branching < 1:
        raise UsageError("gamma and branching must be >= 1")
    if max_nodes is None:
        max_nodes = gamma * branching
    if max_nodes < gamma:
        raise UsageError(f"max_nodes ({max_nodes}) must be >= gamma ({gamma})")
    lookup = as_drafter(drafter, target)
    ctx = (int(context[0]), int(context[1]))

    nodes: list[TreeNode] = []
    frontier = [(ROOT, ctx, 1.0)]
    for depth in range(1, gamma + 1):
        # stable sort keeps lower node index first among equal path probabilities
        frontier.sort(key=lambda f: -f[2])
        grown = []
        for parent, pctx, path_p in frontier:
            for tok, p in lookup.topk(pctx[0], pctx[1], branching):
                if len(nodes) >= max_nodes:
                    break
                nodes.append(TreeNode(tok, parent, depth, p))
                grown.append((len(nodes) - 1, (pctx[1], tok), path_p * p))
            if len(nodes) >= max_nodes:
                break
        frontier = grown
        if not grown or len(nodes) >= max_nodes:
            break
    return DraftTree(nodes=tuple(nodes), context=ctx, gamma=gamma, branching=branching)


# -- tree attention -------------------------------------------------------------


def build_tree_mask(tree, prefix_len: int) -> np.ndarray:
    """Boolean attention mask over ``prefix_len`` committed positions followed by the tree nodes.

    Prefix rows are causal among themselves; a node row sees the whole prefix,
    its ancestors, and itself.
    """
    if prefix_len < 0:
        raise UsageError("prefix_len must be non-negative")
    triples = _triples(tree)
    validate_structure(triples)
    n = prefix_len + len(triples)
    mask = np.zeros((n, n), dtype=bool)
    mask[:prefix_len, :prefix_len] = np.tril(np.ones((prefix_len, prefix_len), dtype=bool))
    for k, (_, parent, _) in enumerate(triples):
        row = prefix_len + k
        if parent == ROOT:
            mask[row, :prefix_len] = True
        else:
            mask[row] = mask[prefix_len + parent]
        mask[row, row] = True
    return mask


def _triples(tree):
    if isinstance(tree, DraftTree):
        return [(n.token, n.parent, n.depth) for n in tree.nodes]
    return [tuple(t) for t in tree]


# -- verification -------------------------------------------------------------------


@dataclass(frozen=True)
class VerifyResult:
    target_dists: tuple[np.ndarray, ...]  # per position, root first
    accepted_path: tuple[int, ...]
    bonus_token: int
    rejected_nodes: tuple[int, ...]

    @property
    def accept_len(self) -> int:
        return len(self.accepted_path) + 1

    def emitted_tokens(self, tree: DraftTree) -> list[int]:
        return [tree.nodes[k].token for k in self.accepted_path] + [self.bonus_token]


def verify_tree(target: TargetModel, tree: DraftTree) -> VerifyResult:
    """Greedy verification: a child is accepted iff its token is the target
    argmax at its parent's position."""
    ctxs = tree.position_contexts()
    table = target.cond_table
    argmax = target.argmax_table
    dists = tuple(table[a, b] for a, b in ctxs)

    children: dict[int, list[int]] = {}
    for k, node in enumerate(tree.nodes):
        children.setdefault(node.parent, []).append(k)

    path = []
    current = ROOT
    while True:
        a, b = ctxs[current + 1]
        want = int(argmax[a, b])
        nxt = next((k for k in children.get(current, ()) if tree.nodes[k].token == want), None)
        if nxt is None:
            bonus = want
            break
        path.append(nxt)
        current = nxt
    on_path = set(path)
    rejected = tuple(k for k in range(len(tree.nodes)) if k not in on_path)
    return VerifyResult(target_dists=dists, accepted_path=tuple(path), bonus_token=bonus,
                        rejected_nodes=rejected)


def greedy_decode(target: TargetModel, prompt, max_output: int) -> list[int]:
    if len(prompt) < 2:
        raise UsageError("prompt needs at least two tokens")
    a, b = int(prompt[-2]), int(prompt[-1])
    out = []
    for _ in range(max_output):
        a, b = b, target.greedy_next(a, b)
        out.append(b)
    return out


@dataclass(frozen=True)
class DecodeStep:
    tree: DraftTree
    result: VerifyResult


def speculative_decode(target: TargetModel, drafter, prompt, max_output: int, gamma: int,
                       branching: int = 1, max_nodes: int | None = None):
    """Propose-and-verify until ``max_output`` tokens are committed.

    Returns ``(tokens, steps)`` where ``steps`` holds each verification's tree
    and result.
    """
    if len(prompt) < 2:
        raise UsageError("prompt needs at least two tokens")
    if max_output < 1:
        raise UsageError("max_output must be >= 1")
    lookup = as_drafter(drafter, target)
    ctx = (int(prompt[-2]), int(prompt[-1]))
    out: list[int] = []
    steps: list[DecodeStep] = []
    while len(out) < max_output:
        tree = propose_tree(lookup, ctx, gamma, branching, max_nodes)
        res = verify_tree(target, tree)
        emitted = res.emitted_tokens(tree)
        out.extend(emitted)
        steps.append(DecodeStep(tree, res))
        tail = [ctx[0], ctx[1]] + emitted
        ctx = (tail[-2], tail[-1])
    return out[:max_output], steps
