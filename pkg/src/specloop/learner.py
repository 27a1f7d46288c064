"""Drafter losses, closed-form gradients, and the AdamW tree train step.

Each trace record contributes ``len(tree) + 1`` training positions (root
first). The root position and the accepted nodes feed the acceptance term;
rejected nodes feed the discard term. The per-position context is the last two
tokens of that position's root-to-node path, which is exactly what the tree
attention mask exposes to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, SchemaError, UsageError
from .toylm import DraftParams, decode_snapshot, encode_snapshot, log_softmax, softmax
from .traces import SCHEMA_VERSION, TraceRecord, decompress

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    direction: str = "rkl"
    ntp_enabled: bool = False
    discard_enabled: bool = False
    lambda_discard: float = 1.0
    discard_topk: int = 10

    def __post_init__(self):
        if self.direction not in ("fkl", "rkl"):
            raise UsageError(f"direction must be 'fkl' or 'rkl', got {self.direction!r}")
        if self.lambda_discard < 0:
            raise UsageError("lambda_discard must be >= 0")
        if self.discard_topk < 0:
            raise UsageError("discard_topk must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 400
    clip_norm: float = 0.5
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: DraftParams) -> "OptimizerState":
        return cls(m=np.zeros_like(params.weight), v=np.zeros_like(params.weight), step=0)


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps`` updates, then constant."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    return cfg.base_lr


# -- single-position losses ---------------------------------------------------------


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    live = p > 0
    if np.any(q[live] <= 0):
        return math.inf
    return float(np.sum(p[live] * (np.log(p[live]) - np.log(q[live]))))


def accepted_loss_grad(target_dist, draft_logits, direction: str = "fkl"):
    """KL loss between target and ``softmax(draft_logits)`` and its gradient w.r.t. the logits.

    fkl: KL(p || q), grad q - p.  rkl: KL(q || p), grad q * ((log q - log p) - loss).
    """
    p = np.asarray(target_dist, dtype=np.float64)
    logq = log_softmax(draft_logits)
    q = np.exp(logq)
    if direction == "fkl":
        live = p > 0
        loss = float(np.sum(p[live] * (np.log(p[live]) - logq[live])))
        return loss, q - p
    if direction == "rkl":
        diff = logq - np.log(np.maximum(p, PROB_FLOOR))
        loss = float(np.sum(q * diff))
        return loss, q * (diff - loss)
    raise UsageError(f"unknown direction {direction!r}")


def topk_support(target_dist, topk: int) -> np.ndarray:
    """Indices of the ``topk`` most probable target tokens (argmax first); all tokens if topk is 0 or >= V."""
    p = np.asarray(target_dist)
    if topk == 0 or topk >= p.shape[0]:
        return np.arange(p.shape[0])
    return np.argsort(-p, kind="stable")[:topk]


def discard_loss_grad(target_dist, draft_logits, topk: int):
    """Forward KL between target and drafter, both renormalized on the target's top-k support."""
    p = np.asarray(target_dist, dtype=np.float64)
    z = np.asarray(draft_logits, dtype=np.float64)
    if topk < 0 or topk > p.shape[0]:
        raise UsageError(f"topk must be in [0, {p.shape[0]}]")
    support = topk_support(p, topk)
    p_s = p[support] / p[support].sum()
    loss, g_s = accepted_loss_grad(p_s, z[support], "fkl")
    grad = np.zeros_like(z)
    grad[support] = g_s
    return loss, grad


def ntp_loss_grad(realized_token: int, draft_logits):
    z = np.asarray(draft_logits, dtype=np.float64)
    if not 0 <= realized_token < z.shape[0]:
        raise UsageError("realized token out of range")
    logq = log_softmax(z)
    grad = np.exp(logq)
    grad[realized_token] -= 1.0
    return float(-logq[realized_token]), grad


# -- batched tree step ------------------------------------------------------------------


@dataclass
class PositionBatch:
    """All training positions of a batch of records, flattened."""

    prev2: np.ndarray
    prev1: np.ndarray
    hidden: np.ndarray | None
    target: np.ndarray  # (N, V)
    accepted: np.ndarray  # bool (N,), root + accepted nodes
    discard: np.ndarray  # bool (N,), rejected nodes
    realized: np.ndarray  # (N,) emitted token at accepted positions, -1 elsewhere


def gather_positions(batch: list[TraceRecord], use_hidden: bool) -> PositionBatch:
    prev2, prev1, targets, acc, disc, realized, hidden = [], [], [], [], [], [], []
    for rec in batch:
        if rec.schema_version != SCHEMA_VERSION:
            raise SchemaError(f"unknown trace schema version {rec.schema_version}")
        if use_hidden and rec.hidden_features is None:
            raise SchemaError("drafter conditions on hidden features but the record carries none")
        tree = rec.tree
        ctxs = [tuple(rec.context)]
        for tok, parent, _ in tree:
            ctxs.append((ctxs[parent + 1][1], tok))
        path = rec.accepted_path()
        emitted = [tree[k][0] for k in path] + [rec.bonus_token]
        real = [-1] * (len(tree) + 1)
        real[0] = emitted[0]
        for i, k in enumerate(path):
            real[k + 1] = emitted[i + 1]
        for pos, (a, b) in enumerate(ctxs):
            prev2.append(a)
            prev1.append(b)
            targets.append(decompress(rec.target_payload[pos]))
            is_acc = pos == 0 or rec.accepted_flags[pos - 1]
            acc.append(is_acc)
            disc.append(not is_acc)
            realized.append(real[pos])
        if use_hidden:
            hidden.extend(rec.hidden_features)
    return PositionBatch(
        prev2=np.asarray(prev2, dtype=np.int64),
        prev1=np.asarray(prev1, dtype=np.int64),
        hidden=np.asarray(hidden, dtype=np.float64) if use_hidden else None,
        target=np.asarray(targets, dtype=np.float64),
        accepted=np.asarray(acc, dtype=bool),
        discard=np.asarray(disc, dtype=bool),
        realized=np.asarray(realized, dtype=np.int64),
    )


def design_matrix(pos: PositionBatch, params: DraftParams) -> np.ndarray:
    V = params.vocab_size
    N = pos.prev2.shape[0]
    X = np.zeros((N, params.n_features))
    rows = np.arange(N)
    X[rows, pos.prev2] = 1.0
    X[rows, V + pos.prev1] += 1.0
    if params.use_hidden:
        X[:, 2 * V:] = pos.hidden
    return X


def batch_losses(logits: np.ndarray, pos: PositionBatch, cfg: LossConfig):
    """Loss terms and the gradient of the total w.r.t. every position's logits."""
    N, V = logits.shape
    G = np.zeros_like(logits)
    logq = log_softmax(logits)
    q = np.exp(logq)
    P = pos.target

    acc = pos.accepted
    n_acc = int(acc.sum())
    loss_accept = 0.0
    loss_ntp = 0.0
    if n_acc:
        qa, pa, lqa = q[acc], P[acc], logq[acc]
        if cfg.direction == "fkl":
            with np.errstate(divide="ignore"):
                lp = np.where(pa > 0, np.log(np.where(pa > 0, pa, 1.0)), 0.0)
            per = np.sum(np.where(pa > 0, pa * (lp - lqa), 0.0), axis=1)
            ga = qa - pa
        else:
            diff = lqa - np.log(np.maximum(pa, PROB_FLOOR))
            per = np.sum(qa * diff, axis=1)
            ga = qa * (diff - per[:, None])
        loss_accept = float(per.mean())
        G[acc] += ga / n_acc
        if cfg.ntp_enabled:
            tok = pos.realized[acc]
            rows = np.arange(n_acc)
            loss_ntp = float(-lqa[rows, tok].mean())
            gn = qa.copy()
            gn[rows, tok] -= 1.0
            G[acc] += gn / n_acc

    disc = pos.discard
    n_disc = int(disc.sum())
    loss_discard = 0.0
    if cfg.discard_enabled and cfg.lambda_discard != 0.0 and n_disc:
        zd, pd = logits[disc], P[disc]
        if cfg.discard_topk == 0 or cfg.discard_topk >= V:
            keep = np.ones_like(pd, dtype=bool)
        else:
            top = np.argsort(-pd, axis=1, kind="stable")[:, :cfg.discard_topk]
            keep = np.zeros_like(pd, dtype=bool)
            np.put_along_axis(keep, top, True, axis=1)
        zr = np.where(keep, zd, -np.inf)
        lq = log_softmax(zr)
        qr = np.where(keep, np.exp(lq), 0.0)
        pr = np.where(keep, pd, 0.0)
        pr = pr / pr.sum(axis=1, keepdims=True)
        live = pr > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            per = np.sum(np.where(live, pr * (np.log(np.where(live, pr, 1.0)) - np.where(live, lq, 0.0)), 0.0),
                         axis=1)
        loss_discard = float(per.mean())
        G[disc] += cfg.lambda_discard * (qr - pr) / n_disc

    total = loss_accept + cfg.lambda_discard * loss_discard + loss_ntp
    terms = {"loss_total": total, "loss_accept": loss_accept, "loss_discard": loss_discard,
             "loss_ntp": loss_ntp, "n_accept": n_acc, "n_discard": n_disc}
    return terms, G


def clip_by_global_norm(grad: np.ndarray, max_norm: float):
    norm = float(np.sqrt(np.sum(grad * grad)))
    if max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def loss_and_grad(params: DraftParams, batch: list[TraceRecord], cfg: LossConfig):
    pos = gather_positions(batch, params.use_hidden)
    X = design_matrix(pos, params)
    logits = X @ params.weight.T
    terms, G = batch_losses(logits, pos, cfg)
    return terms, G.T @ X


def tree_train_step(params: DraftParams, opt_state: OptimizerState, batch: list[TraceRecord],
                    loss_cfg: LossConfig, opt_cfg: OptimizerConfig):
    """One AdamW update over a batch of whole verification trees.

    Returns ``(new_params, new_opt_state, metrics)``; inputs are not modified.
    """
    if not batch:
        raise UsageError("batch must be non-empty")
    terms, grad = loss_and_grad(params, batch, loss_cfg)
    grad, norm = clip_by_global_norm(grad, opt_cfg.clip_norm)

    step = opt_state.step + 1
    lr = lr_at(step, opt_cfg)
    b1, b2 = opt_cfg.beta1, opt_cfg.beta2
    m = b1 * opt_state.m + (1.0 - b1) * grad
    v = b2 * opt_state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    w = params.weight
    if opt_cfg.weight_decay:
        w = w - lr * opt_cfg.weight_decay * w
    w = w - lr * m_hat / (np.sqrt(v_hat) + opt_cfg.eps)
    if not np.all(np.isfinite(w)):
        raise IntegrityError(f"non-finite drafter weights after step {step}")

    new_params = DraftParams(weight=w, use_hidden=params.use_hidden, version=params.version + 1)
    metrics = dict(terms, grad_norm=norm, lr=lr, version=new_params.version, step=step)
    return new_params, OptimizerState(m=m, v=v, step=step), metrics


def snapshot(params: DraftParams) -> bytes:
    if not np.all(np.isfinite(params.weight)):
        raise IntegrityError("refusing to snapshot non-finite drafter weights")
    return encode_snapshot(params)


def restore(blob: bytes) -> DraftParams:
    return decode_snapshot(blob)


@dataclass
class Learner:
    """Owns the working drafter copy and its optimizer state."""

    params: DraftParams
    loss_cfg: LossConfig
    opt_cfg: OptimizerConfig
    opt_state: OptimizerState = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.opt_state is None:
            self.opt_state = OptimizerState.zeros_like(self.params)

    @property
    def version(self) -> int:
        return self.params.version

    def train(self, batch: list[TraceRecord]) -> dict:
        self.params, self.opt_state, metrics = tree_train_step(
            self.params, self.opt_state, batch, self.loss_cfg, self.opt_cfg)
        self.log.append(metrics)
        return metrics
