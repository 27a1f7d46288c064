"""Verification traces, target-logit compression, and the bounded trace buffer."""

from __future__ import annotations

import enum
import json
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .engine import ROOT, DraftTree, VerifyResult, validate_structure
from .errors import IntegrityError, SchemaError, StructureError, UsageError

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class CompressedDist:
    """Top-K slice of a target distribution plus the mass it leaves out.

    ``draft_vocab`` (if set) is the token subset the distribution was projected
    onto; decompression spreads ``residual`` uniformly over the tokens of that
    subset (or of the whole vocabulary) that are not stored explicitly.
    """

    indices: np.ndarray
    probs: np.ndarray
    residual: float
    vocab_size: int
    draft_vocab: tuple[int, ...] | None = None

    def to_json(self) -> dict:
        out = {"indices": [int(i) for i in self.indices], "probs": [float(p) for p in self.probs],
               "residual": float(self.residual)}
        if self.draft_vocab is not None:
            out["draft_vocab"] = list(self.draft_vocab)
        return out

    @classmethod
    def from_json(cls, obj: dict, vocab_size: int) -> "CompressedDist":
        dv = obj.get("draft_vocab")
        return cls(indices=np.asarray(obj["indices"], dtype=np.int64),
                   probs=np.asarray(obj["probs"], dtype=np.float64),
                   residual=float(obj["residual"]), vocab_size=vocab_size,
                   draft_vocab=None if dv is None else tuple(dv))


def compress_logits(dense, K: int, draft_vocab=None):
    """Keep the top-``K`` entries of ``dense`` (optionally projected onto ``draft_vocab``).

    Returns the (projected) dense vector itself when ``K`` covers the whole support.
    """
    if K < 1:
        raise UsageError("K must be >= 1")
    p = np.asarray(dense, dtype=np.float64)
    V = p.shape[0]
    if draft_vocab is not None:
        sub = np.asarray(sorted(set(int(t) for t in draft_vocab)), dtype=np.int64)
        if sub.size == 0 or sub[0] < 0 or sub[-1] >= V:
            raise UsageError("draft_vocab must be a non-empty subset of the vocabulary")
        projected = np.zeros(V)
        mass = p[sub].sum()
        if mass <= 0:
            raise UsageError("distribution has no mass on the draft vocabulary")
        projected[sub] = p[sub] / mass
        p, support = projected, sub
    else:
        support = None
    n_support = V if support is None else support.size
    if K >= n_support:
        return p.copy()
    if support is None:
        order = np.argsort(-p, kind="stable")[:K]
    else:
        order = support[np.argsort(-p[support], kind="stable")][:K]
    kept = p[order]
    order.flags.writeable = False
    kept.flags.writeable = False
    residual = max(0.0, 1.0 - float(kept.sum()))
    return CompressedDist(indices=order, probs=kept, residual=residual, vocab_size=V,
                          draft_vocab=None if support is None else tuple(int(t) for t in support))


def decompress(payload) -> np.ndarray:
    if not isinstance(payload, CompressedDist):
        return np.asarray(payload, dtype=np.float64)
    V = payload.vocab_size
    n_universe = V if payload.draft_vocab is None else len(payload.draft_vocab)
    n_rest = n_universe - payload.indices.size
    fill = payload.residual / n_rest if n_rest else 0.0
    if payload.draft_vocab is None:
        out = np.full(V, fill)
    else:
        out = np.zeros(V)
        out[list(payload.draft_vocab)] = fill
    out[payload.indices] = payload.probs
    return out


def payload_mass(payload) -> float:
    if isinstance(payload, CompressedDist):
        return float(payload.probs.sum()) + payload.residual
    return float(np.sum(payload))


@dataclass(eq=False)
class TraceRecord:
    """One verification step as shipped from serving to training.

    ``target_payload`` and ``hidden_features`` are position-indexed: entry 0 is
    the root position, entry ``k + 1`` is tree node ``k``.
    """

    request_id: int
    step_index: int
    context: tuple[int, int]
    tree: list[tuple[int, int, int]]
    accepted_flags: list[bool]
    bonus_token: int
    target_payload: list
    hidden_features: list | None
    drafter_version: int
    schema_version: int = SCHEMA_VERSION

    # -- validation ----------------------------------------------------

    def validate(self, vocab_size: int | None = None) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise SchemaError(f"unknown trace schema version {self.schema_version}")
        try:
            validate_structure(self.tree)
        except StructureError as exc:
            raise SchemaError(f"record {self.request_id}/{self.step_index}: {exc}") from exc
        n = len(self.tree)
        if len(self.accepted_flags) != n:
            raise SchemaError("accepted_flags length does not match tree")
        if len(self.target_payload) != n + 1:
            raise SchemaError("target_payload must have one entry per position (root + nodes)")
        if self.hidden_features is not None and len(self.hidden_features) != n + 1:
            raise SchemaError("hidden_features must have one entry per position (root + nodes)")
        # accepted nodes must form a single root path
        expected_parent = ROOT
        for k in self.accepted_path():
            if self.tree[k][1] != expected_parent:
                raise SchemaError("accepted_flags do not trace a single root path")
            expected_parent = k
        for payload in self.target_payload:
            if abs(payload_mass(payload) - 1.0) > 1e-6:
                raise SchemaError("target payload does not sum to 1")
        if vocab_size is not None:
            toks = [t for t, _, _ in self.tree] + list(self.context) + [self.bonus_token]
            if any(not 0 <= t < vocab_size for t in toks):
                raise SchemaError("token out of range")

    def accepted_path(self) -> list[int]:
        return [k for k, f in enumerate(self.accepted_flags) if f]

    def rejected_nodes(self) -> list[int]:
        return [k for k, f in enumerate(self.accepted_flags) if not f]

    # -- JSON ------------------------------------------------------------

    def to_json(self) -> dict:
        def enc(p):
            return p.to_json() if isinstance(p, CompressedDist) else [float(x) for x in p]

        return {
            "request_id": self.request_id,
            "step_index": self.step_index,
            "context": list(self.context),
            "tree": [{"token": t, "parent": p, "depth": d} for t, p, d in self.tree],
            "accepted_flags": list(self.accepted_flags),
            "bonus_token": self.bonus_token,
            "target_payload": [enc(p) for p in self.target_payload],
            "hidden_features": None if self.hidden_features is None
            else [[float(x) for x in h] for h in self.hidden_features],
            "drafter_version": self.drafter_version,
            "schema_version": self.schema_version,
        }

    @classmethod
    def from_json(cls, obj: dict, vocab_size: int) -> "TraceRecord":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unknown trace schema version {obj.get('schema_version')!r}")

        def dec(p):
            if isinstance(p, dict):
                return CompressedDist.from_json(p, vocab_size)
            return np.asarray(p, dtype=np.float64)

        hf = obj["hidden_features"]
        rec = cls(
            request_id=int(obj["request_id"]),
            step_index=int(obj["step_index"]),
            context=tuple(obj["context"]),
            tree=[(n["token"], n["parent"], n["depth"]) for n in obj["tree"]],
            accepted_flags=[bool(f) for f in obj["accepted_flags"]],
            bonus_token=int(obj["bonus_token"]),
            target_payload=[dec(p) for p in obj["target_payload"]],
            hidden_features=None if hf is None else [np.asarray(h, dtype=np.float64) for h in hf],
            drafter_version=int(obj["drafter_version"]),
            schema_version=int(obj["schema_version"]),
        )
        rec.validate(vocab_size)
        return rec


def make_record(request_id: int, step_index: int, tree: DraftTree, result: VerifyResult,
                drafter_version: int, compress_topk: int = 0, draft_vocab=None,
                target=None, with_hidden: bool = False, payload_cache: dict | None = None) -> TraceRecord:
    """Package a verification step. ``compress_topk == 0`` ships dense target rows.

    ``payload_cache`` memoizes compressed rows by position context; it is only
    valid while the target model stays fixed.
    """
    flags = [False] * len(tree.nodes)
    for k in result.accepted_path:
        flags[k] = True
    if compress_topk and payload_cache is not None:
        payload = []
        for ctx, d in zip(tree.position_contexts(), result.target_dists):
            hit = payload_cache.get(ctx)
            if hit is None:
                hit = payload_cache[ctx] = compress_logits(d, compress_topk, draft_vocab)
            payload.append(hit)
    elif compress_topk:
        payload = [compress_logits(d, compress_topk, draft_vocab) for d in result.target_dists]
    else:
        payload = list(result.target_dists)
    hidden = None
    if with_hidden:
        V = target.vocab_size
        proj = target.hidden_proj
        hidden = [proj[:, a] + proj[:, V + b] for a, b in tree.position_contexts()]
    return TraceRecord(
        request_id=request_id,
        step_index=step_index,
        context=tree.context,
        tree=[(n.token, n.parent, n.depth) for n in tree.nodes],
        accepted_flags=flags,
        bonus_token=result.bonus_token,
        target_payload=payload,
        hidden_features=hidden,
        drafter_version=drafter_version,
    )


def staleness(record: TraceRecord, learner_version: int) -> int:
    lag = learner_version - record.drafter_version
    if lag < 0:
        raise IntegrityError(
            f"record from drafter version {record.drafter_version} is newer than learner version {learner_version}")
    return lag


def write_jsonl(records, fh) -> None:
    for rec in records:
        fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_jsonl(fh, vocab_size: int) -> list[TraceRecord]:
    return [TraceRecord.from_json(json.loads(line), vocab_size) for line in fh if line.strip()]


# -- buffer -----------------------------------------------------------------------


class AppendStatus(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED_OLDEST = "dropped_oldest"


class TraceBuffer:
    """Bounded FIFO between serving producers and the single learner consumer.

    Overflow evicts the oldest record. ``fetch_batch`` hands out exactly
    ``micro_batch`` records or nothing.
    """

    def __init__(self, capacity: int = 4096, vocab_size: int | None = None, validate: bool = True):
        if capacity < 1:
            raise UsageError("capacity must be >= 1")
        self.capacity = capacity
        self.vocab_size = vocab_size
        self.validate = validate
        self._items: deque = deque()
        self._cond = threading.Condition()
        self.appended = 0
        self.dropped = 0
        self.fetched = 0
        self.closed = False

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    def append(self, record: TraceRecord, arrival: float = 0.0) -> AppendStatus:
        if self.validate:
            record.validate(self.vocab_size)
        with self._cond:
            status = AppendStatus.ACCEPTED
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
                status = AppendStatus.DROPPED_OLDEST
            self._items.append((arrival, record))
            self.appended += 1
            self._cond.notify_all()
            return status

    def fetch_batch(self, micro_batch: int) -> list[TraceRecord] | None:
        """Oldest ``micro_batch`` records, removed from the buffer; ``None`` if not enough are buffered."""
        if micro_batch < 1:
            raise UsageError("micro_batch must be >= 1")
        with self._cond:
            return self._take(micro_batch)

    def _take(self, micro_batch):
        if len(self._items) < micro_batch:
            return None
        batch = [self._items.popleft()[1] for _ in range(micro_batch)]
        self.fetched += micro_batch
        return batch

    def wait_batch(self, micro_batch: int, timeout: float | None = None) -> list[TraceRecord] | None:
        """Blocking variant of :meth:`fetch_batch` for a consumer thread; returns ``None`` on timeout or close."""
        with self._cond:
            self._cond.wait_for(lambda: self.closed or len(self._items) >= micro_batch, timeout)
            return self._take(micro_batch)

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def arrivals(self) -> list[float]:
        with self._cond:
            return [a for a, _ in self._items]

    def snapshot_records(self) -> list[TraceRecord]:
        with self._cond:
            return [r for _, r in self._items]

    def counters(self) -> dict:
        with self._cond:
            return {"appended": self.appended, "dropped": self.dropped, "fetched": self.fetched,
                    "size": len(self._items)}

    def check_counters(self) -> None:
        c = self.counters()
        if c["appended"] != c["fetched"] + c["size"] + c["dropped"]:
            raise IntegrityError(f"buffer counters inconsistent: {c}")

    def producer(self, rank: int) -> "ProducerHandle":
        return ProducerHandle(self, rank)


class ProducerHandle:
    """Per-server append handle; several handles may feed one buffer concurrently."""

    def __init__(self, buffer: TraceBuffer, rank: int):
        self.buffer = buffer
        self.rank = rank
        self.sent = 0

    def append(self, record: TraceRecord, arrival: float = 0.0) -> AppendStatus:
        status = self.buffer.append(record, arrival)
        self.sent += 1
        return status
