"""Synthetic multi-domain request streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .toylm import TargetModel


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    start_contexts: tuple[tuple[int, int], ...]
    prompt_tokens: tuple[int, ...]
    prompt_len: tuple[int, int] = (4, 16)
    max_output: tuple[int, int] = (16, 48)
    request_count: int = 4000
    seed: int = 0

    def __post_init__(self):
        if not self.start_contexts:
            raise UsageError(f"domain {self.domain_id} has no start contexts")
        if self.request_count < 1:
            raise UsageError("request_count must be >= 1")
        lo, hi = self.prompt_len
        if lo < 2 or hi < lo:
            raise UsageError("prompt_len must satisfy 2 <= lo <= hi")
        lo, hi = self.max_output
        if lo < 1 or hi < lo:
            raise UsageError("max_output must satisfy 1 <= lo <= hi")


@dataclass(frozen=True)
class Request:
    request_id: int
    domain_id: int
    prompt: tuple[int, ...]
    max_output: int


def cluster_domains(target: TargetModel, domain_ids=None, request_count: int = 4000,
                    prompt_len=(4, 16), max_output=(16, 48), seed: int = 0) -> list[DomainSpec]:
    """One domain per token cluster; a domain's start contexts are all pairs inside its cluster."""
    ids = range(len(target.clusters)) if domain_ids is None else domain_ids
    specs = []
    for d in ids:
        if not 0 <= d < len(target.clusters):
            raise UsageError(f"no token cluster for domain {d}")
        toks = target.clusters[d]
        ctxs = tuple((a, b) for a in toks for b in toks)
        specs.append(DomainSpec(domain_id=d, start_contexts=ctxs, prompt_tokens=toks,
                                prompt_len=tuple(prompt_len), max_output=tuple(max_output),
                                request_count=request_count, seed=seed))
    return specs


def make_stream(domains: list[DomainSpec], mode: str = "mixed", seed: int = 0) -> list[Request]:
    """Ordered: domains back to back in the given order. Mixed: a seeded uniform shuffle of the same requests.

    Request contents come from each domain's own seed, so ``seed`` only
    changes the interleaving.
    """
    if not domains:
        raise UsageError("need at least one domain")
    if mode not in ("ordered", "mixed"):
        raise UsageError(f"mode must be 'ordered' or 'mixed', got {mode!r}")
    drafts = []
    for spec in domains:
        rng = np.random.default_rng([spec.seed, spec.domain_id])
        for _ in range(spec.request_count):
            a, b = spec.start_contexts[int(rng.integers(len(spec.start_contexts)))]
            n = int(rng.integers(spec.prompt_len[0], spec.prompt_len[1] + 1))
            lead = rng.choice(spec.prompt_tokens, size=n - 2)
            out = int(rng.integers(spec.max_output[0], spec.max_output[1] + 1))
            drafts.append((spec.domain_id, tuple(int(t) for t in lead) + (a, b), out))
    if mode == "mixed":
        order = np.random.default_rng(seed).permutation(len(drafts))
        drafts = [drafts[i] for i in order]
    return [Request(request_id=i, domain_id=d, prompt=p, max_output=o) for i, (d, p, o) in enumerate(drafts)]


def domain_boundaries(domains: list[DomainSpec]) -> list[int]:
    """Request indices where a new domain starts in an ordered stream."""
    out, total = [], 0
    for spec in domains[:-1]:
        total += spec.request_count
        out.append(total)
    return out
