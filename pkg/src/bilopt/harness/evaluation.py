"""Zero-shot and one-shot evaluation of a trained model."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..model import ModelParams, greedy_decode_batch
from ..tasks import Task, format_instance
from .metrics import MetricsRecord, per_type_means, rouge_l

EVAL_MODES = ("zero-shot-definition", "one-shot-exemplar")


def pick_exemplars(tasks: Sequence[Task], seed: int) -> dict[str, int]:
    """Index of the instance each task shows as its one-shot exemplar."""
    rng = np.random.default_rng(seed)
    return {t.id: int(rng.integers(len(t.instances))) for t in tasks}


def decode_tasks(
    params: ModelParams,
    tasks: Sequence[Task],
    mode: str,
    exemplar_index: dict[str, int] | None = None,
    max_len: int = 8,
    instances: str = "instances",
) -> list[tuple[Task, list[int], list[int]]]:
    """Greedy predictions as ``(task, reference, prediction)`` triples."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if mode == "one-shot-exemplar" and exemplar_index is None:
        raise ValueError("one-shot evaluation needs exemplar indices")
    V = params.arrays()[0]
    rows, seg, refs, owners = [], [], [], []
    n = 0
    for task in tasks:
        pool = getattr(task, instances)
        if mode == "zero-shot-definition":
            instr = list(task.definition)
            skip = None
        else:
            skip = exemplar_index[task.id]
            instr = format_instance(task.instances[skip])
        for i, inst in enumerate(pool):
            if instances == "instances" and i == skip:
                continue
            toks = instr + list(inst.x)
            rows.append(V[toks])
            seg.append(np.full(len(toks), n))
            refs.append(list(inst.y))
            owners.append(task)
            n += 1
    if n == 0:
        return []
    preds = greedy_decode_batch(np.concatenate(rows), np.concatenate(seg), n, params, max_len)
    return list(zip(owners, refs, preds))


def evaluate(
    params: ModelParams,
    tasks: Sequence[Task],
    mode: str,
    exemplar_index: dict[str, int] | None = None,
    max_len: int = 8,
    run_id: str = "eval",
    seed: int = 0,
    split: str = "test",
    instances: str = "instances",
) -> MetricsRecord:
    """ROUGE-L per task type (mean over instances), then averaged over types."""
    triples = decode_tasks(params, tasks, mode, exemplar_index, max_len, instances)
    per_type, counts = per_type_means((t.task_type, rouge_l(ref, pred)) for t, ref, pred in triples)
    return MetricsRecord(run_id, seed, split, per_type, counts)
