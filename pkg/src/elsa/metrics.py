"""Parameter/MAC accounting, latency benching, and report tables.

MAC and parameter counts are the gated quantities; wall-clock latency is
reported for orientation but never asserted against a threshold.
"""

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractError


def count_params(model):
    """Exact total and nonzero parameter counts over frozen + adapter tensors."""
    total = 0
    nonzero = 0
    for tensors in (model.frozen_tensors(), model.adapter_tensors()):
        for t in tensors.values():
            total += t.data.size
            nonzero += int(np.count_nonzero(t.data))
    return {"total": total, "nonzero": nonzero}


def relative_score(candidate, baseline):
    """candidate / baseline as a percentage."""
    if baseline == 0:
        raise ContractError("relative score needs a nonzero baseline")
    return 100.0 * candidate / baseline


def bench_latency(fn, repeats=9):
    """Median wall-clock seconds of fn() after two warmups, single-threaded."""
    if repeats < 5:
        raise ContractError(f"bench_latency needs at least 5 repeats, got {repeats}")
    with threadpool_limits(limits=1):
        fn()
        fn()
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
    return float(np.median(times))


def bench_model(model, tokens, active=None, repeats=9):
    return bench_latency(lambda: model.forward(tokens, active), repeats)


@dataclass(frozen=True)
class EfficiencyReport:
    name: str
    total_params: int
    nonzero_params: int
    macs: int
    latency: float = None
    relative: float = None  # percent vs a named baseline
    baseline: str = None

    def __post_init__(self):
        if self.nonzero_params > self.total_params:
            raise ContractError("nonzero parameter count exceeds total")
        if self.latency is not None and self.latency <= 0:
            raise ContractError("latency must be positive when present")

    def to_dict(self):
        return {"name": self.name, "total_params": self.total_params,
                "nonzero_params": self.nonzero_params, "macs": self.macs,
                "latency": self.latency, "relative": self.relative,
                "baseline": self.baseline}


_COLUMNS = ("name", "total_params", "nonzero_params", "macs", "latency", "relative")


def _cell(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def markdown_table(reports):
    header = "| " + " | ".join(_COLUMNS) + " |"
    rule = "|" + "|".join("---" for _ in _COLUMNS) + "|"
    lines = [header, rule]
    for r in reports:
        d = r.to_dict()
        lines.append("| " + " | ".join(_cell(d[c]) for c in _COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def csv_table(reports):
    lines = [",".join(_COLUMNS)]
    for r in reports:
        d = r.to_dict()
        lines.append(",".join(_cell(d[c]) for c in _COLUMNS))
    return "\n".join(lines) + "\n"
