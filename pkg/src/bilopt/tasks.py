"""Synthetic cross-task benchmark.

Eight task families over a small content alphabet.  Each task has a manual
instruction (its definition): the family token, an output-format token and
the family parameters, all as token ids.  The format token says whether the
output is a content sequence, a single content token, or a yes/no label.  Instances are ``(x, y)`` token
sequences; an instance used as an exemplar is formatted as
``[Input:] x [Output:] y``.

Token layout: reserved ids (see :mod:`bilopt.vocab`), one token per family,
three format tokens, ``max_len`` digit tokens, then the content alphabet.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import vocab

FAMILIES = (
    "copy",
    "reverse",
    "rotate",
    "substitution",
    "select_kth",
    "majority",
    "presence",
    "parity",
)
SEQUENCE_FAMILIES = frozenset({"copy", "reverse", "rotate", "substitution"})
LABEL_FAMILIES = frozenset({"majority", "presence", "parity"})


class SuiteError(ValueError):
    pass


@dataclass(frozen=True)
class TaskInstance:
    x: tuple[int, ...]
    y: tuple[int, ...]

    def __post_init__(self):
        if not self.x or not self.y:
            raise SuiteError("instance input and output must be nonempty")


@dataclass
class Task:
    id: str
    task_type: str
    definition: list[int]
    params: dict
    instances: list[TaskInstance]
    valid: list[TaskInstance] = field(default_factory=list)


@dataclass
class TokenLayout:
    """Where each token group lives in the vocabulary."""

    n_content: int
    max_len: int

    @property
    def family_base(self) -> int:
        return vocab.N_RESERVED

    @property
    def seq_kind(self) -> int:
        return self.family_base + len(FAMILIES)

    @property
    def one_kind(self) -> int:
        return self.seq_kind + 1

    @property
    def label_kind(self) -> int:
        return self.one_kind + 1

    @property
    def digit_base(self) -> int:
        return self.label_kind + 1

    @property
    def content_base(self) -> int:
        return self.digit_base + self.max_len

    @property
    def vocab_size(self) -> int:
        return self.content_base + self.n_content

    def family_token(self, family: str) -> int:
        return self.family_base + FAMILIES.index(family)

    def digit(self, k: int) -> int:
        return self.digit_base + k

    @property
    def content(self) -> list[int]:
        return list(range(self.content_base, self.content_base + self.n_content))


@dataclass
class TaskSuite:
    tasks: list[Task]
    layout: TokenLayout
    seed: int

    @property
    def vocab_size(self) -> int:
        return self.layout.vocab_size

    @property
    def types(self) -> list[str]:
        seen = []
        for t in self.tasks:
            if t.task_type not in seen:
                seen.append(t.task_type)
        return seen

    def by_type(self, task_type: str) -> list[Task]:
        return [t for t in self.tasks if t.task_type == task_type]


# ----------------------------------------------------------------- family rules


def apply_rule(family: str, params: dict, x: Sequence[int], layout: TokenLayout) -> tuple[int, ...]:
    """The input-output rule of ``family``."""
    x = tuple(x)
    if family == "copy":
        return x
    if family == "reverse":
        return x[::-1]
    if family == "rotate":
        r = params["r"] % len(x)
        return x[r:] + x[:r]
    if family == "substitution":
        table = dict(zip(layout.content, params["perm"]))
        return tuple(table[t] for t in x)
    if family == "select_kth":
        return (x[params["k"]],)
    if family == "majority":
        return (vocab.YES if 2 * x.count(params["token"]) > len(x) else vocab.NO,)
    if family == "presence":
        return (vocab.YES if params["token"] in x else vocab.NO,)
    if family == "parity":
        return (vocab.YES if len(x) % 2 == 0 else vocab.NO,)
    raise SuiteError(f"unknown family {family!r}")


def make_definition(family: str, params: dict, layout: TokenLayout) -> list[int]:
    """Manual instruction: family token, output-format token, parameter tokens."""
    if family in SEQUENCE_FAMILIES:
        kind = layout.seq_kind
    elif family in LABEL_FAMILIES:
        kind = layout.label_kind
    else:
        kind = layout.one_kind
    out = [layout.family_token(family), kind]
    if family == "rotate":
        out.append(layout.digit(params["r"]))
    elif family == "select_kth":
        out.append(layout.digit(params["k"]))
    elif family == "substitution":
        out.extend(params["perm"])
    elif family in ("presence", "majority"):
        out.append(params["token"])
    return out


def _family_params(family: str, index: int, rng: np.random.Generator, layout: TokenLayout, min_len: int, max_len: int) -> dict:
    if family == "rotate":
        return {"r": 1 + index % (max_len - 1)}
    if family == "select_kth":
        return {"k": index % min_len}
    if family == "substitution":
        return {"perm": [int(t) for t in rng.permutation(layout.content)]}
    if family in ("presence", "majority"):
        content = layout.content
        return {"token": int(content[(index * 3 + int(rng.integers(len(content)))) % len(content)])}
    return {}


def _check_family(family: str, n_content: int, min_len: int, max_len: int) -> None:
    if family not in FAMILIES:
        raise SuiteError(f"unknown family {family!r}; catalog is {', '.join(FAMILIES)}")
    need = {"presence": 2, "substitution": 2, "majority": 2}.get(family, 1)
    if n_content < need:
        raise SuiteError(f"vocabulary too small for family {family!r}: {n_content} content tokens")
    if family == "rotate" and min_len < 2:
        raise SuiteError("rotate needs inputs of length >= 2")
    if family == "parity" and max_len < min_len + 1:
        raise SuiteError("parity needs at least two distinct input lengths")


def _sample_input(family: str, params: dict, rng: np.random.Generator, layout: TokenLayout, min_len: int, max_len: int) -> tuple[int, ...]:
    content = np.array(layout.content)
    n = int(rng.integers(min_len, max_len + 1))
    if family == "presence":
        want = bool(rng.integers(2))
        others = content[content != params["token"]]
        x = list(rng.choice(others, size=n))
        if want:
            x[int(rng.integers(n))] = params["token"]
        return tuple(int(t) for t in x)
    if family == "majority":
        # Balanced labels: a strict majority of the marked token, or at most half.
        half = n // 2
        count = int(rng.integers(half + 1, n + 1)) if rng.integers(2) else int(rng.integers(0, half + 1))
        others = content[content != params["token"]]
        x = list(rng.choice(others, size=n))
        for i in rng.choice(n, size=count, replace=False):
            x[int(i)] = params["token"]
        return tuple(int(t) for t in x)
    return tuple(int(t) for t in rng.choice(content, size=n))


def generate_task_suite(
    seed: int,
    families: Sequence[str] = FAMILIES,
    tasks_per_family: int = 2,
    instances_per_task: int = 64,
    n_content: int = 8,
    min_len: int = 2,
    max_len: int = 5,
) -> TaskSuite:
    """Deterministic synthetic suite; no input repeats within a task."""
    if min_len < 1 or max_len < min_len:
        raise SuiteError(f"bad length range [{min_len}, {max_len}]")
    for fam in families:
        _check_family(fam, n_content, min_len, max_len)
    capacity = sum(n_content**n for n in range(min_len, max_len + 1))
    if instances_per_task > capacity // 2:
        raise SuiteError(
            f"vocabulary too small: {instances_per_task} distinct inputs requested, {capacity} possible"
        )
    layout = TokenLayout(n_content=n_content, max_len=max_len)
    rng = np.random.default_rng(seed)
    tasks = []
    for fam in families:
        for i in range(tasks_per_family):
            params = _family_params(fam, i, rng, layout, min_len, max_len)
            seen: set = set()
            instances = []
            while len(instances) < instances_per_task:
                x = _sample_input(fam, params, rng, layout, min_len, max_len)
                if x in seen:
                    continue
                seen.add(x)
                instances.append(TaskInstance(x, apply_rule(fam, params, x, layout)))
            tasks.append(
                Task(
                    id=f"{fam}-{i}",
                    task_type=fam,
                    definition=make_definition(fam, params, layout),
                    params=params,
                    instances=instances,
                )
            )
    return TaskSuite(tasks=tasks, layout=layout, seed=seed)


# ----------------------------------------------------------------- formatting


def format_instance(inst: TaskInstance) -> list[int]:
    return [vocab.INPUT, *inst.x, vocab.OUTPUT, *inst.y]


def parse_formatted(z: Sequence[int]) -> TaskInstance:
    z = list(z)
    if z.count(vocab.INPUT) != 1 or z.count(vocab.OUTPUT) != 1 or z[0] != vocab.INPUT:
        raise SuiteError("formatted instance must contain one input and one output marker")
    cut = z.index(vocab.OUTPUT)
    return TaskInstance(tuple(z[1:cut]), tuple(z[cut + 1 :]))


# ----------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    """How to partition task types.

    Either give explicit ``meta_train_types``/``meta_test_types`` or a count
    ``n_meta_test`` (the remaining non-test types become meta-train, or the
    first ``n_meta_train`` of them after shuffling).
    """

    test_types: list[str]
    n_meta_test: int = 2
    n_meta_train: int | None = None
    valid_per_task: int = 10
    meta_train_types: list[str] | None = None
    meta_test_types: list[str] | None = None


@dataclass
class Splits:
    meta_train: list[Task]
    meta_test: list[Task]
    test: list[Task]

    @property
    def meta_train_types(self) -> list[str]:
        return _types(self.meta_train)

    @property
    def meta_test_types(self) -> list[str]:
        return _types(self.meta_test)

    @property
    def test_types(self) -> list[str]:
        return _types(self.test)

    @property
    def train(self) -> list[Task]:
        return self.meta_train + self.meta_test


def _types(tasks: Sequence[Task]) -> list[str]:
    out = []
    for t in tasks:
        if t.task_type not in out:
            out.append(t.task_type)
    return out


def check_disjoint(*groups: Sequence[str]) -> None:
    seen: dict[str, int] = {}
    for i, g in enumerate(groups):
        for t in g:
            if t in seen and seen[t] != i:
                raise SuiteError(f"task type {t!r} requested in two splits")
            seen[t] = i


def make_splits(tasks: Sequence[Task], spec: SplitSpec, seed: int) -> Splits:
    """Assign task types to meta-train / meta-test / test, disjoint by type.

    Every non-test task holds out ``spec.valid_per_task`` instances as its
    validation set.
    """
    all_types = _types(tasks)
    for t in spec.test_types:
        if t not in all_types:
            raise SuiteError(f"unknown test type {t!r}")
    pool = [t for t in all_types if t not in spec.test_types]
    if spec.meta_test_types is not None or spec.meta_train_types is not None:
        mt = list(spec.meta_test_types or [])
        mtr = list(spec.meta_train_types) if spec.meta_train_types is not None else [
            t for t in pool if t not in mt
        ]
        check_disjoint(spec.test_types, mtr, mt)
        for t in mt + mtr:
            if t not in pool:
                raise SuiteError(f"unknown or test-only type {t!r}")
    else:
        mt, mtr = None, None
    n_test = len(mt) if mt is not None else spec.n_meta_test
    if n_test < 1:
        raise SuiteError("meta-test split needs at least one task type (outer loss undefined)")
    if mt is None:
        if n_test >= len(pool):
            raise SuiteError(f"cannot place {n_test} meta-test types among {len(pool)} training types")
        order = np.random.default_rng(seed).permutation(len(pool))
        shuffled = [pool[i] for i in order]
        mt = shuffled[:n_test]
        rest = shuffled[n_test:]
        mtr = rest if spec.n_meta_train is None else rest[: spec.n_meta_train]
        mt = [t for t in pool if t in mt]
        mtr = [t for t in pool if t in mtr]
    if not mtr:
        raise SuiteError("meta-train split is empty")
    check_disjoint(spec.test_types, mtr, mt)

    def hold_out(task: Task) -> Task:
        n = spec.valid_per_task
        if n >= len(task.instances):
            raise SuiteError(f"task {task.id} has too few instances to hold out {n}")
        return replace(task, instances=task.instances[: len(task.instances) - n], valid=task.instances[len(task.instances) - n :])

    return Splits(
        meta_train=[hold_out(t) for t in tasks if t.task_type in mtr],
        meta_test=[hold_out(t) for t in tasks if t.task_type in mt],
        test=[replace(t) for t in tasks if t.task_type in spec.test_types],
    )


def candidate_splits(tasks: Sequence[Task], spec: SplitSpec, seed: int, count: int = 16) -> list[Splits]:
    """``count`` random meta-train/meta-test splits drawn from one seed."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    return [make_splits(tasks, spec, int(s)) for s in seeds]


def select_best_split(candidates: Sequence[Splits], score: Callable[[Splits], float]) -> int:
    """Index of the highest-scoring candidate (lowest index on ties)."""
    scores = [float(score(c)) for c in candidates]
    return int(np.argmax(scores))


# ----------------------------------------------------------------- candidate pools


@dataclass
class CandidatePool:
    task_id: str
    candidates: list[list[int]]

    def __post_init__(self):
        if not self.candidates:
            raise SuiteError("candidate pool must be nonempty")

    @property
    def size(self) -> int:
        return len(self.candidates)

    def padded(self, length: int | None = None) -> np.ndarray:
        """Candidates right-padded with the blank token (or truncated) to ``length``."""
        length = length or max(len(c) for c in self.candidates)
        out = np.full((self.size, length), vocab.BLANK, dtype=np.int64)
        for i, c in enumerate(self.candidates):
            c = c[:length]
            out[i, : len(c)] = c
        return out


def sample_candidates(task: Task, n: int, seed: int) -> CandidatePool:
    """``n`` formatted training instances of ``task`` (with replacement if short)."""
    if not task.instances:
        raise SuiteError(f"task {task.id} has no training instances")
    rng = np.random.default_rng(seed)
    replace_ = n > len(task.instances)
    idx = rng.choice(len(task.instances), size=n, replace=replace_)
    return CandidatePool(task.id, [format_instance(task.instances[i]) for i in idx])


# ----------------------------------------------------------------- k-means


def definition_embeddings(tasks: Sequence[Task], token_emb: np.ndarray) -> np.ndarray:
    return np.stack([np.asarray(token_emb)[t.definition].mean(axis=0) for t in tasks])


def kmeans(points: np.ndarray, k: int, seed: int, max_rounds: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.  Returns a label per point."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise SuiteError(f"k={k} out of range for {n} points")
    if k == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - points[centers][None]) ** 2).sum(-1), axis=1)
        if d2.sum() == 0:
            remaining = [i for i in range(n) if i not in centers]
            centers.append(remaining[0])
            continue
        centers.append(int(rng.choice(n, p=d2 / d2.sum())))
    c = points[centers].copy()
    labels = np.full(n, -1)
    for _ in range(max_rounds):
        dist = ((points[:, None, :] - c[None]) ** 2).sum(-1)
        new = np.argmin(dist, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = points[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return labels


def split_kmeans(tasks: Sequence[Task], k: int, token_emb: np.ndarray, seed: int) -> list[list[str]]:
    """Group tasks by k-means over mean-pooled definition embeddings.

    Returns ``k`` lists of task ids (a group may be empty only if Lloyd's
    iteration empties it).
    """
    if k < 2:
        raise SuiteError("k must be >= 2")
    if k > len(tasks):
        raise SuiteError(f"k={k} exceeds the number of tasks ({len(tasks)})")
    labels = kmeans(definition_embeddings(tasks, token_emb), k, seed)
    return [[t.id for t, lab in zip(tasks, labels) if lab == j] for j in range(k)]


def types_of(tasks: Sequence[Task], ids: Sequence[str]) -> list[str]:
    wanted = set(ids)
    return _types([t for t in tasks if t.id in wanted])


# ----------------------------------------------------------------- fixtures


def export_suite(suite: TaskSuite, path) -> None:
    """One JSON record per line.

    The first line is a header ``{"suite": 1, "seed", "n_content", "max_len"}``;
    each following line is a task ``{"id", "type", "definition", "params",
    "instances": [[x, y], ...], "valid": [[x, y], ...]}`` with token-id lists.
    """
    lines = [
        json.dumps(
            {"suite": 1, "seed": suite.seed, "n_content": suite.layout.n_content, "max_len": suite.layout.max_len},
            sort_keys=True,
        )
    ]
    for t in suite.tasks:
        lines.append(
            json.dumps(
                {
                    "id": t.id,
                    "type": t.task_type,
                    "definition": list(t.definition),
                    "params": t.params,
                    "instances": [[list(i.x), list(i.y)] for i in t.instances],
                    "valid": [[list(i.x), list(i.y)] for i in t.valid],
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def import_suite(path) -> TaskSuite:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows or rows[0].get("suite") != 1:
        raise SuiteError(f"{path}: missing suite header")
    head = rows[0]
    layout = TokenLayout(n_content=head["n_content"], max_len=head["max_len"])
    tasks = [
        Task(
            id=r["id"],
            task_type=r["type"],
            definition=list(r["definition"]),
            params=r["params"],
            instances=[TaskInstance(tuple(x), tuple(y)) for x, y in r["instances"]],
            valid=[TaskInstance(tuple(x), tuple(y)) for x, y in r.get("valid", [])],
        )
        for r in rows[1:]
    ]
    return TaskSuite(tasks=tasks, layout=layout, seed=head["seed"])
