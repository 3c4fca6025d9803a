"""Inner and outer losses of instruction optimization on a task suite.

:class:`InstructionProblem` turns a split of tasks, a training-instruction
source and (optionally) a learnable instruction parameterization into the two
callables the bilevel engine needs:

* ``inner_loss(theta, phi, batch)``: mean NLL on meta-train instances with the
  training instruction prepended.
* ``outer_loss(theta, batch)``: mean NLL on meta-test instances with their
  manual instruction (definition, or a fixed exemplar in one-shot runs).

Batches are lists of :class:`Item` drawn from a caller-owned generator so a
run can be replayed batch for batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import instructions as ins
from . import vocab
from .autodiff import Tensor
from .model import ModelParams, StepLayout, packed_nll
from .tasks import Task, TaskInstance, format_instance

TRAIN_MODES = (
    "definition",
    "blank",
    "exemplar_task",
    "exemplar_instance",
    "distractors",
    "learned",
    "learned+definition",
)
OUTER_MODES = ("definition", "exemplar_task")
LEARNED_KINDS = ("embedder_dp", "embedder_ic", "extractor_dp", "extractor_ic")


@dataclass
class Item:
    task: Task
    inst: TaskInstance
    exemplar: tuple[int, ...] | None = None


@dataclass
class PoolSet:
    """Padded candidate pools, one per task, sharing ``(N, l_z)``."""

    tokens: dict[str, np.ndarray]
    exemplar_mask: dict[str, np.ndarray] | None = None

    @property
    def size(self) -> int:
        return next(iter(self.tokens.values())).shape[0]

    def stack(self, task_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.tokens[t] for t in task_ids])


def pad_pools(pools: dict[str, list[list[int]]], exemplar_mask=None) -> PoolSet:
    sizes = {len(p) for p in pools.values()}
    if len(sizes) != 1:
        raise ValueError(f"all pools must have the same size, got {sorted(sizes)}")
    lz = max(len(c) for p in pools.values() for c in p)
    tokens = {}
    for tid, p in pools.items():
        arr = np.full((len(p), lz), vocab.BLANK, dtype=np.int64)
        for i, c in enumerate(p):
            arr[i, : len(c)] = c
        tokens[tid] = arr
    return PoolSet(tokens, exemplar_mask)


def target_of(inst: TaskInstance) -> list[int]:
    return list(inst.y) + [vocab.EOS]


@dataclass
class InstructionProblem:
    meta_train: list[Task]
    meta_test: list[Task]
    train_mode: str = "definition"
    learned_kind: str | None = None
    phi_template: object = None
    outer_mode: str = "definition"
    exemplars: dict[str, list[int]] = field(default_factory=dict)
    distractors: dict[str, list[int]] = field(default_factory=dict)
    pools: PoolSet | None = None
    batch_size: int = 16
    outer_batch_size: int = 16
    expectation: bool = False

    def __post_init__(self):
        if self.train_mode not in TRAIN_MODES:
            raise ValueError(f"unknown training instruction mode {self.train_mode!r}")
        if self.outer_mode not in OUTER_MODES:
            raise ValueError(f"unknown outer instruction mode {self.outer_mode!r}")
        if self.train_mode.startswith("learned"):
            if self.learned_kind not in LEARNED_KINDS or self.phi_template is None:
                raise ValueError("learned modes need a parameterization and its parameters")
            if self.learned_kind.startswith("extractor") and self.pools is None:
                raise ValueError("extractor parameterizations need candidate pools")
        if not self.meta_train:
            raise ValueError("meta-train split is empty")

    @property
    def learned(self) -> bool:
        return self.train_mode.startswith("learned")

    # ------------------------------------------------------------ batches

    def _sample(self, tasks: Sequence[Task], n: int, rng: np.random.Generator, with_random_exemplar: bool) -> list[Item]:
        items = []
        for _ in range(n):
            task = tasks[int(rng.integers(len(tasks)))]
            i = int(rng.integers(len(task.instances)))
            ex = None
            if with_random_exemplar:
                choices = len(task.instances) - 1
                j = int(rng.integers(choices)) if choices > 0 else 0
                j = j + 1 if choices > 0 and j >= i else j
                ex = tuple(format_instance(task.instances[j]))
            items.append(Item(task, task.instances[i], ex))
        return items

    def sample_inner_batch(self, rng: np.random.Generator) -> list[Item]:
        return self._sample(self.meta_train, self.batch_size, rng, self.train_mode == "exemplar_instance")

    def sample_outer_batch(self, rng: np.random.Generator) -> list[Item]:
        if not self.meta_test:
            raise ValueError("meta-test split is empty")
        return self._sample(self.meta_test, self.outer_batch_size, rng, False)

    # ------------------------------------------------------------ losses

    def _manual_tokens(self, item: Item, mode: str) -> list[int]:
        if mode == "definition":
            return list(item.task.definition)
        if mode == "blank":
            return [vocab.BLANK]
        if mode == "exemplar_task":
            return list(self.exemplars[item.task.id])
        if mode == "exemplar_instance":
            return list(item.exemplar)
        if mode == "distractors":
            return list(item.task.definition) + list(self.distractors[item.task.id])
        raise ValueError(mode)

    def learned_blocks(self, model: ModelParams, phi, items: Sequence[Item]) -> Tensor:
        """``(B, rows, d)`` learned instruction blocks for a batch."""
        ids = [it.task.id for it in items]
        kind = self.learned_kind
        if kind == "embedder_dp":
            return ins.embedder_dp_batch(ids, phi)
        if kind == "embedder_ic":
            return ins.embedder_ic_batch([format_instance(it.inst) for it in items], phi)
        probs = self.extractor_probs(phi, items)
        return ins.extract_instruction(probs, self.pools.stack(ids), model, expectation=self.expectation)

    def extractor_probs(self, phi, items: Sequence[Item]) -> Tensor:
        ids = [it.task.id for it in items]
        if self.learned_kind == "extractor_dp":
            return ins.extractor_dp_batch(ids, phi)
        queries = [format_instance(it.inst) for it in items]
        return ins.extractor_ic_batch(queries, self.pools.stack(ids), phi)

    def _loss(self, model: ModelParams, items: Sequence[Item], manual_mode: str | None, phi=None) -> Tensor:
        n = len(items)
        parts, segs = [], []
        if phi is not None:
            blocks = self.learned_blocks(model, phi, items)
            rows_per = blocks.shape[1]
            parts.append(ad.reshape(blocks, (n * rows_per, blocks.shape[2])))
            segs.append(np.repeat(np.arange(n), rows_per))
        if manual_mode is not None:
            toks = [self._manual_tokens(it, manual_mode) for it in items]
            parts.append(ad.gather(model.token_emb, np.concatenate([np.asarray(t, dtype=np.int64) for t in toks])))
            segs.append(np.concatenate([np.full(len(t), i) for i, t in enumerate(toks)]))
        xs = [np.asarray(it.inst.x, dtype=np.int64) for it in items]
        parts.append(ad.gather(model.token_emb, np.concatenate(xs)))
        segs.append(np.concatenate([np.full(len(x), i) for i, x in enumerate(xs)]))
        rows = ad.concat(parts, axis=0)
        seg = np.concatenate(segs).astype(np.int64)
        targets = [target_of(it.inst) for it in items]
        return packed_nll(rows, seg, n, targets, model, StepLayout.build(targets))

    def inner_loss(self, theta: Sequence, phi: Sequence | None, batch: Sequence[Item]) -> Tensor:
        model = ModelParams.from_list(theta)
        if self.learned:
            phi_p = self.phi_template.with_arrays(list(phi))
            manual = "definition" if self.train_mode == "learned+definition" else None
            return self._loss(model, batch, manual, phi_p)
        return self._loss(model, batch, self.train_mode)

    def outer_loss(self, theta: Sequence, batch: Sequence[Item]) -> Tensor:
        if not batch:
            raise ValueError("outer loss needs a nonempty meta-test batch")
        return self._loss(ModelParams.from_list(theta), batch, self.outer_mode)

    # ------------------------------------------------------------ diagnostics

    def selection_pct(self, theta: Sequence[np.ndarray], phi: Sequence[np.ndarray]) -> float | None:
        """Share of meta-train instances whose selected candidate is an exemplar."""
        if not (self.learned and self.learned_kind.startswith("extractor")):
            return None
        if self.pools is None or self.pools.exemplar_mask is None:
            return None
        phi_p = self.phi_template.with_arrays(list(phi))
        hits = total = 0
        with ad.no_record():
            for task in self.meta_train:
                items = [Item(task, inst) for inst in task.instances]
                chosen = ins.selected_index(self.extractor_probs(phi_p, items))
                mask = self.pools.exemplar_mask[task.id]
                hits += int(mask[chosen].sum())
                total += len(items)
        return 100.0 * hits / total
