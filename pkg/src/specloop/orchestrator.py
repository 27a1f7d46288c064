"""The serve-train loop: serving, learning, lazy hot-swap, and the simulated clock.

Deterministic mode interleaves serving and learning on one thread: after each
request the learner consumes every full micro-batch in the buffer, charging
its compute to a separate learner clock. Threaded mode runs serving workers and
the learner as real threads sharing the trace buffer.

A scheduled sync fires after every ``interval_requests`` completed requests.
With ``sync.blocking`` the sync cost lands on the serving clock after the
request boundary, so it shows up in the latency of the request that arrives
next.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from . import config as cfgmod
from .engine import DraftLookup, greedy_decode, speculative_decode
from .errors import IntegrityError, UsageError
from .learner import Learner, LossConfig, OptimizerConfig
from .toylm import DraftParams, TargetModel, init_draft, load_snapshot, make_target
from .traces import TraceBuffer, make_record, staleness
from .traffic import Request, cluster_domains, make_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostModel:
    a_t: float = 1.0
    b_t: float = 0.05
    a_d: float = 0.05
    b_d: float = 0.01
    sync_cost: float = 40.0

    def __post_init__(self):
        if min(self.a_t, self.b_t, self.a_d, self.b_d, self.sync_cost) < 0:
            raise UsageError("cost coefficients must be non-negative")

    def target_step(self, B: int) -> float:
        return self.a_t + self.b_t * B

    def draft_step(self, B: int) -> float:
        return self.a_d + self.b_d * B

    def cost_ratio(self, B: int) -> float:
        return self.draft_step(B) / self.target_step(B)


@dataclass(frozen=True)
class SyncPolicy:
    interval_requests: int = 100
    enabled: bool = True
    blocking: bool = True

    def __post_init__(self):
        if self.interval_requests < 1:
            raise UsageError("interval_requests must be >= 1")

    def due(self, completed: int) -> bool:
        return self.enabled and completed > 0 and completed % self.interval_requests == 0


class SimClock:
    """Monotone simulated time; every advance is recorded for accounting checks."""

    def __init__(self):
        self.now = 0.0
        self.charges: list[float] = []

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise IntegrityError(f"negative clock charge {dt}")
        self.charges.append(dt)
        self.now += dt
        return self.now

    def charged_total(self) -> float:
        return math.fsum(self.charges)


@dataclass(frozen=True)
class MetricsRow:
    request_id: int
    domain_id: int
    drafter_version_used: int
    tokens_in: int
    tokens_out: int
    accept_len_mean: float
    verify_steps: int
    sim_start: float
    sim_end: float
    throughput: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ServingState:
    snapshot: DraftParams
    lookup: DraftLookup
    installs: int = 0
    stale_pushes: int = 0

    @property
    def version(self) -> int:
        return self.snapshot.version


def serving_state(snapshot: DraftParams, target: TargetModel) -> ServingState:
    return ServingState(snapshot=snapshot, lookup=DraftLookup(snapshot, target))


def hot_swap(state: ServingState, snapshot: DraftParams, target: TargetModel,
             clock: SimClock | None = None, sync_cost: float = 0.0) -> ServingState:
    """Install ``snapshot`` for subsequent requests.

    Re-pushing the serving version is a no-op; older snapshots are ignored
    with a warning and counted in ``stale_pushes``.

    The transfer cost is charged whether or not the snapshot turns out to be newer.
    """
    if clock is not None and sync_cost:
        clock.advance(sync_cost)
    if snapshot.version == state.version:
        return state
    if snapshot.version < state.version:
        log.warning("ignoring stale drafter snapshot v%d (serving v%d)", snapshot.version, state.version)
        return ServingState(state.snapshot, state.lookup, state.installs, state.stale_pushes + 1)
    return ServingState(snapshot, DraftLookup(snapshot, target), state.installs + 1, state.stale_pushes)


def moving_average(series, window: int) -> list[float]:
    """Trailing mean over the last ``min(window, i + 1)`` points."""
    if window < 1:
        raise UsageError("window must be >= 1")
    vals = [float(x) for x in series]
    return [math.fsum(vals[max(0, i - window + 1): i + 1]) / min(window, i + 1) for i in range(len(vals))]


# -- experiment plumbing ------------------------------------------------------------


@dataclass
class ExperimentResult:
    metrics: list[MetricsRow]
    learner_log: list[dict]
    summary: dict
    final_params: DraftParams
    outputs: dict[int, list[int]] = field(default_factory=dict)
    snapshots: dict[int, DraftParams] = field(default_factory=dict)
    traces: list = field(default_factory=list)


def build_target(cfg) -> TargetModel:
    m = cfg.model
    return _target_cache(m.vocab_size, m.hidden_dim, m.sparsity, m.n_clusters, m.seed, m.noise_mass,
                         m.concentration)


_TARGETS: dict = {}


def _target_cache(*key) -> TargetModel:
    if key not in _TARGETS:
        V, d_h, s, n, seed, noise, conc = key
        _TARGETS[key] = make_target(vocab_size=V, hidden_dim=d_h, sparsity=s, n_clusters=n, seed=seed,
                                    noise_mass=noise, concentration=conc)
    return _TARGETS[key]


def build_stream(cfg, target: TargetModel) -> list[Request]:
    t = cfg.traffic
    domains = cluster_domains(target, t.domains, t.requests_per_domain, t.prompt_len, t.max_output,
                              seed=cfg.seed)
    return make_stream(domains, t.mode, seed=cfg.seed)


def cost_model(cfg) -> CostModel:
    c = cfg.cost
    return CostModel(a_t=c.a_t, b_t=c.b_t, a_d=c.a_d, b_d=c.b_d, sync_cost=c.sync_cost)


def resolve_initial_drafter(cfg, target: TargetModel) -> DraftParams:
    d = cfg.drafter
    V, d_h = cfg.model.vocab_size, cfg.model.hidden_dim
    if d.init == "scratch":
        return init_draft(V, d_h, d.use_hidden, d.init_scale, seed=cfg.seed + 1)
    if d.checkpoint:
        params = load_snapshot(d.checkpoint)
    else:
        params = pretrain(cfg)
    if params.vocab_size != V or params.use_hidden != d.use_hidden:
        raise UsageError("checkpoint does not match the configured drafter shape")
    return params


_PRETRAINED: dict[str, DraftParams] = {}


def pretrain_config(cfg):
    """Derived config for the offline pretraining run that stands in for an offline-trained drafter."""
    p = cfg.drafter.pretrain
    over = {
        "drafter.init": "scratch",
        "drafter.checkpoint": None,
        "learner.enabled": True,
        "sync.enabled": True,
        "sync.interval_requests": 1,
        "cost.sync_cost": 0.0,
        "mode": "deterministic",
        "output.dump_traces": False,
        "variants": {},
        "sweep": None,
    }
    if p.stream == "heldout":
        over["seed"] = p.seed
    if p.domains is not None:
        over["traffic.domains"] = p.domains
    if p.requests_per_domain is not None:
        over["traffic.requests_per_domain"] = p.requests_per_domain
    if p.mode is not None:
        over["traffic.mode"] = p.mode
    return cfgmod.with_overrides(cfg, over)


def pretrain(cfg) -> DraftParams:
    """Run the online loop offline (sync after every request) for ``epochs`` passes; memoized per config."""
    pcfg = pretrain_config(cfg)
    key = pcfg.model_dump_json() + f"|epochs={cfg.drafter.pretrain.epochs}"
    if key not in _PRETRAINED:
        res = run_experiment(pcfg, epochs=cfg.drafter.pretrain.epochs)
        _PRETRAINED[key] = res.final_params
    return _PRETRAINED[key]


def run_experiment(cfg, epochs: int = 1, keep_outputs: bool = False, keep_snapshots: bool = False,
                   stream: list[Request] | None = None) -> ExperimentResult:
    target = build_target(cfg)
    if stream is None:
        stream = build_stream(cfg, target)
    if epochs > 1:
        stream = [r for _ in range(epochs) for r in stream]
    initial = resolve_initial_drafter(cfg, target)
    if cfg.mode == "threaded":
        return _run_threaded(cfg, target, stream, initial, keep_outputs, keep_snapshots)
    return _run_deterministic(cfg, target, stream, initial, keep_outputs, keep_snapshots)


class _Loop:
    """Per-run state shared by both execution modes."""

    def __init__(self, cfg, target, initial, keep_outputs, keep_snapshots):
        self.cfg = cfg
        self.target = target
        self.cost = cost_model(cfg)
        self.B = cfg.cost.batch_size
        self.sync = SyncPolicy(cfg.sync.interval_requests, cfg.sync.enabled, cfg.sync.blocking)
        self.buffer = TraceBuffer(cfg.buffer.capacity, cfg.model.vocab_size, validate=False)
        lc, oc = cfg.loss, cfg.optimizer
        self.learner = Learner(
            initial,
            LossConfig(lc.direction, lc.ntp_enabled, lc.discard_enabled, lc.lambda_discard, lc.discard_topk),
            OptimizerConfig(oc.base_lr, oc.warmup_steps, oc.clip_norm, oc.weight_decay, oc.beta1, oc.beta2,
                            oc.eps),
        )
        self.learner_clock = SimClock()
        self.state = serving_state(initial, target)
        self.sync_events = 0
        self.sync_time = 0.0
        self.staleness_sum = 0
        self.staleness_n = 0
        self.keep_outputs = keep_outputs
        self.keep_snapshots = keep_snapshots
        self.outputs: dict[int, list[int]] = {}
        self.snapshots: dict[int, DraftParams] = {initial.version: initial} if keep_snapshots else {}
        self.traces: list = []
        self.payload_cache: dict = {}

    def serve(self, req: Request, lookup: DraftLookup, clock: SimClock, arrival: float, producer=None):
        """Decode one request on the pinned drafter, charge its time, and emit traces."""
        cfg = self.cfg
        sp = cfg.speculation
        tokens_in = len(req.prompt)
        if sp.enabled:
            out, steps = speculative_decode(self.target, lookup, req.prompt, req.max_output, sp.gamma,
                                            sp.branching, sp.max_nodes)
            n_steps = len(steps)
            proposed = sum(len(s.tree.nodes) for s in steps)
            clock.advance(n_steps * self.cost.target_step(self.B))
            clock.advance(proposed * self.cost.draft_step(self.B))
            accept_mean = math.fsum(s.result.accept_len for s in steps) / n_steps
            if cfg.learner.enabled:
                sink = producer or self.buffer
                with_hidden = cfg.drafter.use_hidden
                for k, s in enumerate(steps):
                    rec = make_record(req.request_id, k, s.tree, s.result, lookup.version,
                                      cfg.buffer.compress_topk, cfg.buffer.draft_vocab, self.target,
                                      with_hidden, self.payload_cache)
                    sink.append(rec, arrival=clock.now)
                    if cfg.output.dump_traces:
                        self.traces.append(rec)
        else:
            out = greedy_decode(self.target, req.prompt, req.max_output)
            n_steps = len(out)
            clock.advance(n_steps * self.cost.target_step(self.B))
            accept_mean = 1.0
        end = clock.now
        if self.keep_outputs:
            self.outputs[req.request_id] = out
        return MetricsRow(
            request_id=req.request_id,
            domain_id=req.domain_id,
            drafter_version_used=lookup.version,
            tokens_in=tokens_in,
            tokens_out=len(out),
            accept_len_mean=accept_mean,
            verify_steps=n_steps,
            sim_start=arrival,
            sim_end=end,
            throughput=(tokens_in + len(out)) / (end - arrival),
        )

    def train_batch(self, batch) -> None:
        v = self.learner.version
        for rec in batch:
            self.staleness_sum += staleness(rec, v)
            self.staleness_n += 1
        self.learner.train(batch)
        self.learner_clock.advance(self.cfg.learner.train_step_cost)

    def do_sync(self, clock: SimClock) -> None:
        snap = self.learner.params
        sync_clock = clock if self.sync.blocking else None
        self.state = hot_swap(self.state, snap, self.target, sync_clock, self.cost.sync_cost)
        if not self.sync.blocking:
            self.learner_clock.advance(self.cost.sync_cost)
        self.sync_events += 1
        self.sync_time += self.cost.sync_cost
        if self.keep_snapshots:
            self.snapshots[self.state.version] = self.state.snapshot

    def learner_rows(self) -> list[dict]:
        keys = ("step", "loss_total", "loss_accept", "loss_discard", "loss_ntp", "grad_norm", "lr", "version")
        return [{k: m[k] for k in keys} for m in self.learner.log]

    def summarize(self, rows: list[MetricsRow], clock_total: float) -> dict:
        window = self.cfg.metrics.window
        ma = moving_average([r.accept_len_mean for r in rows], window)
        return {
            "name": self.cfg.name,
            "requests": len(rows),
            "final_moving_avg_accept_len": ma[-1] if ma else 0.0,
            "mean_accept_len": math.fsum(r.accept_len_mean for r in rows) / len(rows) if rows else 0.0,
            "mean_throughput": math.fsum(r.throughput for r in rows) / len(rows) if rows else 0.0,
            "total_sim_time": clock_total,
            "syncs": self.sync_events,
            "installs": self.state.installs,
            "stale_pushes": self.state.stale_pushes,
            "total_sync_time": self.sync_time,
            "sync_interval": self.sync.interval_requests if self.sync.enabled else None,
            "drops": self.buffer.dropped,
            "mean_staleness": self.staleness_sum / self.staleness_n if self.staleness_n else 0.0,
            "learner_steps": len(self.learner.log),
            "learner_sim_time": self.learner_clock.now,
            "final_version": self.learner.version,
        }

    def result(self, rows, clock_total) -> ExperimentResult:
        return ExperimentResult(metrics=rows, learner_log=self.learner_rows(),
                                summary=self.summarize(rows, clock_total), final_params=self.learner.params,
                                outputs=self.outputs, snapshots=self.snapshots, traces=self.traces)


def _run_deterministic(cfg, target, stream, initial, keep_outputs, keep_snapshots) -> ExperimentResult:
    loop = _Loop(cfg, target, initial, keep_outputs, keep_snapshots)
    clock = SimClock()
    mb = cfg.learner.micro_batch
    rows = []
    arrival = 0.0
    for n, req in enumerate(stream, start=1):
        row = loop.serve(req, loop.state.lookup, clock, arrival)
        rows.append(row)
        arrival = clock.now
        if cfg.learner.enabled:
            while (batch := loop.buffer.fetch_batch(mb)) is not None:
                loop.train_batch(batch)
        if loop.sync.due(n):
            loop.do_sync(clock)
    if abs(clock.charged_total() - clock.now) > 1e-9 * max(1.0, clock.now):
        raise IntegrityError("simulated clock does not match the sum of its charges")
    loop.buffer.check_counters()
    return loop.result(rows, clock.now)


def _run_threaded(cfg, target, stream, initial, keep_outputs, keep_snapshots) -> ExperimentResult:
    loop = _Loop(cfg, target, initial, keep_outputs, keep_snapshots)
    mb = cfg.learner.micro_batch
    lock = threading.Lock()
    queue = iter(stream)
    completed = [0]
    rows: list[MetricsRow] = []
    errors: list[BaseException] = []
    published = [loop.learner.params]
    workers = cfg.threaded.serving_workers
    clocks = [SimClock() for _ in range(workers)]

    def learner_main():
        try:
            while True:
                batch = loop.buffer.wait_batch(mb, timeout=0.05)
                if batch is None:
                    if loop.buffer.closed and len(loop.buffer) < mb:
                        return
                    continue
                loop.train_batch(batch)
                published[0] = loop.learner.params
        except BaseException as exc:  # surfaced in the driver thread
            errors.append(exc)

    def serve_main(rank: int):
        clock = clocks[rank]
        producer = loop.buffer.producer(rank)
        arrival = 0.0
        try:
            while True:
                with lock:
                    req = next(queue, None)
                    if req is None:
                        return
                    pinned = loop.state.lookup
                row = loop.serve(req, pinned, clock, arrival, producer if cfg.learner.enabled else None)
                arrival = clock.now
                with lock:
                    rows.append(row)
                    completed[0] += 1
                    if loop.sync.due(completed[0]):
                        # hot_swap reads the learner's latest published snapshot reference
                        snap = published[0]
                        loop.state = hot_swap(loop.state, snap, target,
                                              clock if loop.sync.blocking else None, loop.cost.sync_cost)
                        loop.sync_events += 1
                        loop.sync_time += loop.cost.sync_cost
                        if keep_snapshots:
                            loop.snapshots[loop.state.version] = loop.state.snapshot
        except BaseException as exc:
            errors.append(exc)

    learner_thread = threading.Thread(target=learner_main, name="learner", daemon=True)
    if cfg.learner.enabled:
        learner_thread.start()
    serving = [threading.Thread(target=serve_main, args=(r,), name=f"serve-{r}") for r in range(workers)]
    for t in serving:
        t.start()
    for t in serving:
        t.join()
    loop.buffer.close()
    if cfg.learner.enabled:
        learner_thread.join()
    if errors:
        raise errors[0]
    rows.sort(key=lambda r: r.request_id)
    loop.buffer.check_counters()
    return loop.result(rows, max(c.now for c in clocks))
