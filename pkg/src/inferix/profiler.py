"""Span-scoped profiler with custom metrics, inline hooks, and a bounded
ring buffer.

Recording goes through per-thread collectors so the fast path never locks.
The hot path (guard enter/exit: two monotonic clock reads and one ring-buffer
store) is implemented in the compiled _fastspan extension; a pure-Python
collector with identical behavior is the fallback when the extension is not
built, at the cost of a higher per-span overhead.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

from .errors import ConfigError

try:
    from ._fastspan import Collector as _FastCollector
except ImportError:  # pragma: no cover - build without compiler
    _FastCollector = None

_now = time.perf_counter_ns


class _NoopSpan:
    __slots__ = ()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NOOP = _NoopSpan()


class _PySpan:
    __slots__ = ("_col", "name", "start", "parent")

    def __init__(self, col):
        self._col = col
        self.name = ""
        self.start = 0
        self.parent = None

    def __enter__(self):
        col = self._col
        if col.start_hooks:
            col._run_hooks(col.start_hooks, self.name, None)
        col.stack.append(self.name)
        self.start = _now()
        return self

    def __exit__(self, *exc):
        end = _now()
        col = self._col
        stack = col.stack
        stack.pop()
        parent = stack[-1] if stack else None
        buf = col.buffer
        if len(buf) < col.capacity:
            buf.append((self.name, self.start, end, parent))
        else:
            buf[col.n % col.capacity] = (self.name, self.start, end, parent)
        col.n += 1
        col.pool.append(self)
        if col.end_hooks:
            col._run_hooks(col.end_hooks, self.name, end - self.start)
        return False


class _PyCollector:
    """Fallback recorder, API-compatible with _fastspan.Collector."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.buffer = []
        self.n = 0
        self.stack = []
        self.pool = []
        self.start_hooks = {}
        self.end_hooks = {}
        self.hook_error_cb = None

    def scoped(self, name):
        pool = self.pool
        span = pool.pop() if pool else _PySpan(self)
        span.name = name
        return span

    def current_name(self):
        return self.stack[-1] if self.stack else None

    def dropped(self):
        return max(0, self.n - self.capacity)

    def records(self):
        if self.n <= self.capacity:
            return list(self.buffer)
        split = self.n % self.capacity
        return self.buffer[split:] + self.buffer[:split]

    def _run_hooks(self, hooks, name, duration_ns):
        for cb in list(hooks.values()):
            try:
                cb(name, duration_ns)
            except Exception:
                if self.hook_error_cb is not None:
                    self.hook_error_cb()


@dataclass
class SpanAggregate:
    name: str
    count: int
    total_ns: int
    mean_ns: float
    p50_ns: int
    p95_ns: int
    max_ns: int


@dataclass
class MetricAggregate:
    name: str
    count: int
    total: float
    mean: float
    min: float
    max: float


@dataclass
class ProfileReport:
    spans: dict[str, SpanAggregate]
    metrics: dict[str, MetricAggregate]
    wall_time_ns: int
    dropped_spans: int
    hook_failures: int
    raw_spans: list | None = None  # only in "full" format

    FORMAT_VERSION = 1

    def to_text(self) -> str:
        lines = [f"# inferix-profile v{self.FORMAT_VERSION}"]
        lines.append(f"# wall_time_ns\t{self.wall_time_ns}")
        lines.append(f"# dropped_spans\t{self.dropped_spans}")
        lines.append(f"# hook_failures\t{self.hook_failures}")
        for agg in sorted(self.spans.values(), key=lambda a: a.name):
            lines.append(
                f"{agg.name}\t{agg.count}\t{agg.total_ns}\t{agg.mean_ns:.1f}"
                f"\t{agg.p50_ns}\t{agg.p95_ns}\t{agg.max_ns}"
            )
        for m in sorted(self.metrics.values(), key=lambda m: m.name):
            lines.append(
                f"metric:{m.name}\t{m.count}\t{m.total:.6g}\t{m.mean:.6g}"
                f"\t{m.min:.6g}\t{m.max:.6g}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "version": self.FORMAT_VERSION,
            "wall_time_ns": self.wall_time_ns,
            "dropped_spans": self.dropped_spans,
            "hook_failures": self.hook_failures,
            "spans": {k: vars(v) for k, v in self.spans.items()},
            "metrics": {k: vars(v) for k, v in self.metrics.items()},
        }


def _nearest_rank(sorted_vals, pct: float):
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_vals)))
    return sorted_vals[rank - 1]


class Profiler:
    """Create enabled or disabled; disabled scoped() is a constant-cost no-op.

    capacity is the per-thread ring-buffer size (drop-oldest beyond it).
    """

    def __init__(self, enabled: bool = True, capacity: int = 1 << 20,
                 force_python: bool = False):
        self.enabled = enabled
        self.capacity = capacity
        self._force_python = force_python
        self._start_hooks: dict = {}
        self._end_hooks: dict = {}
        self._next_hook_id = 0
        self.hook_failures = 0
        self._metrics: list = []  # (name, value, span_name)
        self._collectors: list = []
        self._lock = threading.Lock()
        self._tls = threading.local()
        self._created = _now()

    @property
    def using_fast_path(self) -> bool:
        return _FastCollector is not None and not self._force_python

    def _make_collector(self):
        cls = _FastCollector if self.using_fast_path else _PyCollector
        col = cls(self.capacity)
        col.start_hooks = self._start_hooks
        col.end_hooks = self._end_hooks
        col.hook_error_cb = self._count_hook_failure
        with self._lock:
            self._collectors.append(col)
        self._tls.col = col
        return col

    def _count_hook_failure(self):
        self.hook_failures += 1

    def scoped(self, name: str):
        if not self.enabled:
            return _NOOP
        tls = self._tls
        try:
            col = tls.col
        except AttributeError:
            col = self._make_collector()
        return col.scoped(name)

    def profiled(self, name: str | None = None):
        """Decorator form of scoped()."""

        def deco(fn):
            span_name = name or fn.__qualname__

            def wrapper(*args, **kwargs):
                with self.scoped(span_name):
                    return fn(*args, **kwargs)

            wrapper.__name__ = fn.__name__
            return wrapper

        return deco

    def record_metric(self, name: str, value: float):
        if not self.enabled:
            return
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"non-finite metric value for {name!r}")
        try:
            span_name = self._tls.col.current_name()
        except AttributeError:
            span_name = None
        with self._lock:
            self._metrics.append((name, value, span_name))

    def register_hook(self, point: str, callback) -> int:
        if point not in ("span-start", "span-end"):
            raise ConfigError(f"unknown hook point {point!r}")
        with self._lock:
            hook_id = self._next_hook_id
            self._next_hook_id += 1
            target = self._start_hooks if point == "span-start" else self._end_hooks
            target[hook_id] = callback
        return hook_id

    def unregister_hook(self, hook_id: int):
        with self._lock:
            self._start_hooks.pop(hook_id, None)
            self._end_hooks.pop(hook_id, None)

    def spans(self):
        """Raw (name, start_ns, end_ns, parent_name) tuples recorded so far."""
        with self._lock:
            cols = list(self._collectors)
        out = []
        for col in cols:
            out.extend(col.records())
        return out

    def report(self, format: str = "summary") -> ProfileReport:
        if format not in ("summary", "full"):
            raise ConfigError(f"unknown report format {format!r}")
        records = self.spans()
        with self._lock:
            metrics = list(self._metrics)
            dropped = sum(col.dropped() for col in self._collectors)
            failures = self.hook_failures
        per_name: dict[str, list[int]] = {}
        for name, start, end, _parent in records:
            per_name.setdefault(name, []).append(end - start)
        spans = {}
        for name, durs in per_name.items():
            durs.sort()
            total = sum(durs)
            spans[name] = SpanAggregate(
                name=name,
                count=len(durs),
                total_ns=total,
                mean_ns=total / len(durs),
                p50_ns=_nearest_rank(durs, 50),
                p95_ns=_nearest_rank(durs, 95),
                max_ns=durs[-1],
            )
        per_metric: dict[str, list[float]] = {}
        for name, value, span_name in metrics:
            key = f"{span_name}/{name}" if span_name else name
            per_metric.setdefault(key, []).append(value)
        maggs = {}
        for name, vals in per_metric.items():
            maggs[name] = MetricAggregate(
                name=name,
                count=len(vals),
                total=sum(vals),
                mean=sum(vals) / len(vals),
                min=min(vals),
                max=max(vals),
            )
        return ProfileReport(
            spans=spans,
            metrics=maggs,
            wall_time_ns=_now() - self._created,
            dropped_spans=dropped,
            hook_failures=failures,
            raw_spans=records if format == "full" else None,
        )


# -- overhead measurement ----------------------------------------------------


def calibrated_workload(target_unit_us: float = 10.0, total_ms: float = 250.0):
    """Deterministic workload: one span per compute unit of >= target_unit_us.

    Returns workload(profiler) suitable for measure_overhead. Calibration
    sizes the unit so it takes about target_unit_us on this machine.
    """
    import numpy as np

    a = np.random.default_rng(0).standard_normal((24, 24)).astype(np.float32)

    def unit(reps):
        x = a
        for _ in range(reps):
            x = a @ a
        return x

    reps = 1
    while True:
        best = None
        for _ in range(5):  # floor over chunks so cold-start doesn't inflate
            t0 = _now()
            for _ in range(200):
                unit(reps)
            chunk = (_now() - t0) / 200 / 1000.0
            best = chunk if best is None else min(best, chunk)
        per_unit_us = best
        if per_unit_us >= target_unit_us or reps > 4096:
            break
        reps *= 2
    n_units = max(1, int(total_ms * 1000.0 / per_unit_us))

    def workload(prof: Profiler):
        scoped = prof.scoped
        for _ in range(n_units):
            with scoped("unit"):
                unit(reps)

    workload.n_units = n_units
    workload.unit_us = per_unit_us
    return workload


def measure_overhead(profiler: Profiler, workload, repeats: int = 5) -> float:
    """best-of-N instrumented time over best-of-N with profiling disabled.

    The baseline runs the same instrumented workload with a disabled
    profiler, i.e. the comparison is "profiling on" vs "profiling off" with
    instrumentation compiled in, which is how the <5% bound is defined.
    """
    baseline_prof = Profiler(enabled=False)

    def timed(prof):
        t0 = _now()
        workload(prof)
        return _now() - t0

    # Interleave baseline and instrumented runs so machine-level drift
    # (frequency scaling, neighbors) cancels instead of biasing one side.
    workload(baseline_prof)
    workload(profiler)
    base_times, instr_times = [], []
    for i in range(repeats):
        order = (baseline_prof, profiler) if i % 2 == 0 else (profiler, baseline_prof)
        for prof in order:
            (base_times if prof is baseline_prof else instr_times).append(timed(prof))
    base = min(base_times)
    if base < 100_000_000:
        raise ConfigError(
            f"workload too short for a stable ratio ({base / 1e6:.1f} ms < 100 ms)"
        )
    return min(instr_times) / base
