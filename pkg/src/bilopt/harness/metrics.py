"""ROUGE-L at token level and across-seed aggregation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(reference: Sequence, candidate: Sequence) -> float:
    """LCS F-measure; precision is 0 for an empty candidate."""
    if len(reference) == 0:
        raise ValueError("rouge_l: empty reference")
    lcs = lcs_length(reference, candidate)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def t_halfwidth(values: Sequence[float], confidence: float = 0.95) -> float:
    """Half-width of the two-sided t interval for the mean."""
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    if n < 2:
        return 0.0
    sd = x.std(ddof=1)
    if sd == 0:
        return 0.0
    return float(stats.t.ppf(0.5 + confidence / 2, n - 1) * sd / np.sqrt(n))


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    split: str
    per_type: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        """Mean over task types of the per-type means."""
        if not self.per_type:
            return 0.0
        return float(np.mean([self.per_type[t] for t in sorted(self.per_type)]))

    def lines(self) -> list[dict]:
        return [
            {
                "run_id": self.run_id,
                "seed": self.seed,
                "split": self.split,
                "task_type": t,
                "rouge_l": round(self.per_type[t], 12),
                "n_instances": self.counts.get(t, 0),
            }
            for t in sorted(self.per_type)
        ]


def per_type_means(scores: Iterable[tuple[str, float]]) -> tuple[dict[str, float], dict[str, int]]:
    buckets: dict[str, list[float]] = defaultdict(list)
    for task_type, s in scores:
        buckets[task_type].append(s)
    return {t: float(np.mean(v)) for t, v in buckets.items()}, {t: len(v) for t, v in buckets.items()}


@dataclass
class SeedSummary:
    """Across-seed mean and t half-width, per type and for the average."""

    arm: str
    per_type: dict[str, tuple[float, float]]
    average: tuple[float, float]
    per_seed_average: list[float]


def summarize(arm: str, records: Sequence[MetricsRecord]) -> SeedSummary:
    types = sorted({t for r in records for t in r.per_type})
    per_type = {}
    for t in types:
        vals = [r.per_type[t] for r in records if t in r.per_type]
        per_type[t] = (float(np.mean(vals)), t_halfwidth(vals))
    avgs = [r.aggregate for r in records]
    return SeedSummary(arm, per_type, (float(np.mean(avgs)), t_halfwidth(avgs)), avgs)


def format_table(summaries: Sequence[SeedSummary], scale: float = 100.0) -> str:
    """Rows are task types plus ``Average``; columns are arms."""
    types = sorted({t for s in summaries for t in s.per_type})
    width = max([len(t) for t in types] + [len("Average")]) + 2
    cols = [max(len(s.arm), 15) + 2 for s in summaries]
    head = "".ljust(width) + "".join(s.arm.rjust(c) for s, c in zip(summaries, cols))
    out = [head, "-" * len(head)]

    def cell(mh):
        return f"{scale * mh[0]:.2f} ± {scale * mh[1]:.2f}"

    for t in types:
        out.append(t.ljust(width) + "".join(cell(s.per_type.get(t, (0.0, 0.0))).rjust(c) for s, c in zip(summaries, cols)))
    out.append("-" * len(head))
    out.append("Average".ljust(width) + "".join(cell(s.average).rjust(c) for s, c in zip(summaries, cols)))
    return "\n".join(out)
