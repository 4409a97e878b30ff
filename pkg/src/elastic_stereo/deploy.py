"""Latency profiling of extracted subnets and budgeted selection.

Workflow: profile a set of configs once (possibly on the target device),
persist the records as JSON lines, then pick the most accurate subnet that
fits a latency budget without any retraining.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .arch_space import ELASTIC_DIMS, ArchConfig, estimate_cost, sample_uniform, validate
from .trainer import as_dataset, evaluate

DEFAULT_WARMUP = 3
DEFAULT_REPEATS = 20


@dataclass
class ProfileRecord:
    config: ArchConfig
    latency_ms: float
    epe: float
    macs: int
    latency_cv: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"config": self.config.to_dict(), "latency_ms": self.latency_ms,
                           "epe": self.epe, "macs": self.macs,
                           "latency_cv": self.latency_cv}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ProfileRecord":
        d = json.loads(line)
        return cls(ArchConfig.from_dict(d["config"]), float(d["latency_ms"]), float(d["epe"]),
                   int(d["macs"]), float(d.get("latency_cv", 0.0)))


def save_records(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def load_records(path) -> list:
    lines = Path(path).read_text().splitlines()
    return [ProfileRecord.from_json(l) for l in lines if l.strip()]


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------

@torch.no_grad()
def time_forward(model, input_hw, warmup: int = DEFAULT_WARMUP,
                 repeats: int = DEFAULT_REPEATS, seed: int = 0) -> tuple[float, float]:
    """Median wall-clock latency (ms) of one forward pass and its coefficient
    of variation."""
    if repeats < 1 or warmup < 0:
        raise ValueError("need repeats >= 1 and warmup >= 0")
    g = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    left = torch.rand(1, 3, *input_hw, generator=g, dtype=dtype)
    right = torch.rand(1, 3, *input_hw, generator=g, dtype=dtype)
    model.eval()
    for _ in range(warmup):
        model.predict(left, right)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(left, right)
        times.append((time.perf_counter() - t0) * 1e3)
    mean = statistics.fmean(times)
    cv = statistics.pstdev(times) / mean if mean > 0 else 0.0
    return statistics.median(times), cv


def profile(store, configs, val_set, input_hw, warmup: int = DEFAULT_WARMUP,
            repeats: int = DEFAULT_REPEATS) -> list:
    """Extract, time and evaluate each config; records come back in input order."""
    configs = list(configs)
    if not configs:
        return []
    data = as_dataset(val_set)
    out = []
    for config in configs:
        sub = store.extract(config)
        latency, cv = time_forward(sub, input_hw, warmup, repeats)
        err = float(np.mean(evaluate(sub, data)))
        macs = estimate_cost(config, store.space, input_hw).macs
        out.append(ProfileRecord(config, latency, err, macs, cv))
    return out


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def dominates(a: ProfileRecord, b: ProfileRecord) -> bool:
    """``a`` is no worse in both coordinates and strictly better in one."""
    return (a.latency_ms <= b.latency_ms and a.epe <= b.epe
            and (a.latency_ms < b.latency_ms or a.epe < b.epe))


def pareto(records) -> list:
    """Non-dominated subset sorted by latency ascending (so EPE descending).

    Records with identical configs are collapsed to their first occurrence.
    """
    seen, unique = set(), []
    for r in records:
        key = r.config.to_json()
        if key not in seen:
            seen.add(key)
            unique.append(r)
    order = sorted(range(len(unique)), key=lambda i: (unique[i].latency_ms, unique[i].epe, i))
    front, best_epe = [], math.inf
    for i in order:
        r = unique[i]
        if r.epe < best_epe:
            front.append(r)
            best_epe = r.epe
        elif r.epe == best_epe and front and front[-1].latency_ms == r.latency_ms:
            front.append(r)  # identical point, different config
    return front


def select(records, latency_budget_ms: float) -> ProfileRecord | None:
    """Most accurate record within the budget; ties go to lower latency, then
    lower MACs. None when nothing fits."""
    if not latency_budget_ms > 0:
        raise ValueError("latency budget must be positive")
    feasible = [r for r in records if r.latency_ms <= latency_budget_ms]
    if not feasible:
        return None
    return min(feasible, key=lambda r: (r.epe, r.latency_ms, r.macs))


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def mutate(config: ArchConfig, space, rng: np.random.Generator,
           dims=ELASTIC_DIMS) -> ArchConfig:
    """Change one elastic dimension of ``config`` to a different value."""
    dims = list(dims)
    unit_depths = list(config.unit_depths)
    kernels = [list(k) for k in config.layer_kernels]
    widths = [list(w) for w in config.layer_widths]
    scale, refine = config.scale, config.refine_depth

    def other(choices, current):
        opts = [c for c in choices if c != current]
        return int(opts[rng.integers(len(opts))]) if opts else current

    dim = dims[rng.integers(len(dims))]
    if dim in ("kernel", "width"):
        u = int(rng.integers(len(unit_depths)))
        i = int(rng.integers(unit_depths[u]))
        if dim == "kernel":
            kernels[u][i] = other(space.kernel_choices, kernels[u][i])
        else:
            widths[u][i] = other(space.width_choices, widths[u][i])
    elif dim == "depth":
        u = int(rng.integers(len(unit_depths)))
        d = other(space.depth_choices, unit_depths[u])
        while len(kernels[u]) < d:
            kernels[u].append(int(rng.choice(space.kernel_choices)))
            widths[u].append(int(rng.choice(space.width_choices)))
        kernels[u], widths[u] = kernels[u][:d], widths[u][:d]
        unit_depths[u] = d
    elif dim == "scale":
        scale = other(space.scale_choices, scale)
    elif dim == "refine":
        refine = other(space.refine_choices, refine)
    else:
        raise ValueError(f"unknown dimension {dim!r}")
    return ArchConfig(unit_depths, kernels, widths, scale, refine)


def reductions(config: ArchConfig, space) -> list:
    """All configs one step smaller than ``config`` in a single dimension.

    Units beyond the active scale count are skipped, since shrinking them
    would not change the extracted network."""
    base = config.to_dict()
    out = []

    def variant(**changes):
        d = json.loads(json.dumps(base))
        d.update(changes)
        out.append(ArchConfig.from_dict(d))

    for u, depth in enumerate(config.unit_depths[:config.scale]):
        smaller = [c for c in space.depth_choices if c < depth]
        if smaller:
            nd = max(smaller)
            depths = list(config.unit_depths)
            depths[u] = nd
            kern = [list(k) for k in config.layer_kernels]
            wid = [list(w) for w in config.layer_widths]
            kern[u], wid[u] = kern[u][:nd], wid[u][:nd]
            variant(unit_depths=depths, layer_kernels=kern, layer_widths=wid)
        for i in range(depth):
            for key, choices in (("layer_kernels", space.kernel_choices),
                                 ("layer_widths", space.width_choices)):
                vals = [list(v) for v in base[key]]
                smaller = [c for c in choices if c < vals[u][i]]
                if smaller:
                    vals[u][i] = max(smaller)
                    variant(**{key: vals})
    for key, choices in (("scale", space.scale_choices), ("refine_depth", space.refine_choices)):
        smaller = [c for c in choices if c < base[key]]
        if smaller:
            variant(**{key: max(smaller)})
    return out


@dataclass
class SearchResult:
    best: ProfileRecord | None
    history: list = field(default_factory=list)   # incumbent EPE after each iteration
    evaluated: int = 0


class _Evaluator:
    """Caches EPE and cost per config; latency only when the proxy needs it."""

    def __init__(self, store, val_set, input_hw, proxy, warmup, repeats):
        self.store = store
        self.data = as_dataset(val_set)
        self.input_hw = input_hw
        self.proxy = proxy
        self.warmup, self.repeats = warmup, repeats
        self._cost: dict = {}
        self._epe: dict = {}
        self._latency: dict = {}

    def macs(self, config) -> int:
        key = config.to_json()
        if key not in self._cost:
            self._cost[key] = estimate_cost(config, self.store.space, self.input_hw).macs
        return self._cost[key]

    def latency(self, config) -> float:
        key = config.to_json()
        if key not in self._latency:
            self._latency[key] = time_forward(self.store.extract(config), self.input_hw,
                                              self.warmup, self.repeats)
        return self._latency[key][0]

    def cost(self, config) -> float:
        return self.macs(config) if self.proxy == "macs" else self.latency(config)

    def epe(self, config) -> float:
        key = config.to_json()
        if key not in self._epe:
            self._epe[key] = float(np.mean(evaluate(self.store, self.data, config)))
        return self._epe[key]

    def record(self, config) -> ProfileRecord:
        lat, cv = (self._latency.get(config.to_json()) or (math.nan, math.nan))
        return ProfileRecord(config, lat, self.epe(config), self.macs(config), cv)


def _project(config, ev: _Evaluator, budget: float):
    """Shrink greedily (largest MAC saving first) until the budget holds."""
    while ev.cost(config) > budget:
        options = reductions(config, ev.store.space)
        if not options:
            return None
        config = min(options, key=ev.macs)
    return config


def search_configs(store, val_set, budget: float, budget_proxy: str = "macs",
                   iterations: int = 50, seed: int = 0, input_hw=None,
                   patience: int = 10, warmup: int = DEFAULT_WARMUP,
                   repeats: int = DEFAULT_REPEATS) -> SearchResult:
    """Random-restart hill-climb over the search space.

    Iteration 1 evaluates a uniform sample (shrunk into the budget if needed);
    each further iteration mutates one elastic dimension of the current point
    and moves there if the mutant fits the budget and has lower EPE. After
    ``patience`` rejected mutations in a row the climb restarts from a fresh
    sample. The returned incumbent is the best point seen, so its EPE never
    increases across iterations.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if budget_proxy not in ("macs", "latency"):
        raise ValueError(f"budget_proxy must be 'macs' or 'latency', got {budget_proxy!r}")
    data = as_dataset(val_set)
    input_hw = data.image_hw if input_hw is None else tuple(input_hw)
    ev = _Evaluator(store, data, input_hw, budget_proxy, warmup, repeats)
    rng = np.random.default_rng(seed)

    def start():
        return _project(sample_uniform(store.space, rng), ev, budget)

    current = start()
    result = SearchResult(None)
    if current is None:
        result.history.append(math.inf)
        return result
    best = current
    result.history.append(ev.epe(best))
    rejected = 0
    for _ in range(iterations - 1):
        if rejected >= patience:
            fresh = start()
            if fresh is not None:
                current = fresh
            rejected = 0
        else:
            cand = mutate(current, store.space, rng)
            validate(cand, store.space)
            if ev.cost(cand) <= budget and ev.epe(cand) < ev.epe(current):
                current, rejected = cand, 0
            else:
                rejected += 1
        if ev.epe(current) < ev.epe(best):
            best = current
        result.history.append(ev.epe(best))
    result.best = ev.record(best)
    result.evaluated = len(ev._epe)
    return result
