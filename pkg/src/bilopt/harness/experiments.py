"""Experiment drivers: proof of concept, main comparison, sweeps, embeddings.

Every driver is a pure function of a :class:`~bilopt.harness.config.RunConfig`
and a seed list, and writes only under its output directory, one
subdirectory per run id.  Output files contain no timestamps, so repeating a
run with the same configuration reproduces them byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import instructions as ins
from .. import tasks as T
from .. import vocab
from ..bilevel import (
    BilevelResult,
    BilevelState,
    TraceRecord,
    bilevel_train,
    instruction_tuning_train,
)
from ..model import ModelParams, save_checkpoint
from ..objectives import InstructionProblem, PoolSet, pad_pools
from .config import ConfigError, RunConfig
from .evaluation import evaluate, pick_exemplars
from .metrics import MetricsRecord, format_table, summarize

log = logging.getLogger(__name__)

ZERO_SHOT_ARMS = (
    "definition",
    "definition+distractors",
    "embedder_dp",
    "embedder_ic",
    "definition+embedder_dp",
    "definition+embedder_ic",
)
ONE_SHOT_ARMS = ("exemplar_task", "exemplar_instance", "extractor_dp", "extractor_ic")
ARMS = ZERO_SHOT_ARMS + ONE_SHOT_ARMS
DEFINITION_ARMS = ("definition", "definition+distractors", "definition+embedder_dp", "definition+embedder_ic")
SWEEP_AXES = ("length", "meta_test_count", "split_method")


# ----------------------------------------------------------------- seeding


def _streams(seed: int) -> dict[str, np.random.Generator]:
    """Named, independent generators for one run seed."""
    names = ("model", "phi", "exemplar", "distractor", "pool", "kmeans")
    children = np.random.SeedSequence([seed, 7919]).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# ----------------------------------------------------------------- builders


def build_suite(cfg: RunConfig) -> T.TaskSuite:
    s = cfg.suite
    return T.generate_task_suite(
        s.seed,
        families=tuple(s.families),
        tasks_per_family=s.tasks_per_family,
        instances_per_task=s.instances_per_task,
        n_content=s.n_content,
        min_len=s.min_len,
        max_len=s.max_len,
    )


def split_spec(cfg: RunConfig, meta_test_types=None) -> T.SplitSpec:
    return T.SplitSpec(
        test_types=list(cfg.split.test_types),
        n_meta_test=cfg.split.n_meta_test,
        valid_per_task=cfg.split.valid_per_task,
        meta_test_types=meta_test_types,
    )


def build_splits(suite: T.TaskSuite, cfg: RunConfig, seed: int) -> T.Splits:
    return T.make_splits(suite.tasks, split_spec(cfg), seed)


def init_model(cfg: RunConfig, vocab_size: int, seed: int) -> ModelParams:
    return ModelParams.init(vocab_size, cfg.model.dim, _streams(seed)["model"], cfg.model.init_scale)


def task_exemplars(tasks: Sequence[T.Task], seed: int) -> dict[str, list[int]]:
    """One randomly chosen formatted training instance per task."""
    rng = _streams(seed)["exemplar"]
    return {t.id: T.format_instance(t.instances[int(rng.integers(len(t.instances)))]) for t in tasks}


def task_distractors(tasks: Sequence[T.Task], length: int, layout: T.TokenLayout, seed: int) -> dict[str, list[int]]:
    """A distractor marker followed by ``length`` random content tokens, per task."""
    rng = _streams(seed)["distractor"]
    content = np.asarray(layout.content)
    return {t.id: [vocab.DISTRACT] + [int(c) for c in rng.choice(content, size=length)] for t in tasks}


def exemplar_blank_pools(tasks: Sequence[T.Task], exemplars: dict[str, list[int]]) -> PoolSet:
    """``{exemplar, blank}`` per task, in alternating order.

    Alternating the order makes the zero-logit argmax (lowest index on ties)
    pick the exemplar for exactly half of the tasks at initialization.
    """
    pools, mask = {}, {}
    for j, t in enumerate(tasks):
        cands = [list(exemplars[t.id]), [vocab.BLANK]]
        m = np.array([True, False])
        if j % 2:
            cands, m = cands[::-1], m[::-1]
        pools[t.id], mask[t.id] = cands, m
    return pad_pools(pools, mask)


def random_pools(tasks: Sequence[T.Task], size: int, seed: int) -> PoolSet:
    rng = _streams(seed)["pool"]
    pools = {t.id: T.sample_candidates(t, size, int(rng.integers(2**31 - 1))).candidates for t in tasks}
    return pad_pools(pools)


def init_phi(kind: str, cfg: RunConfig, tasks: Sequence[T.Task], vocab_size: int, seed: int, pool_size: int):
    rng = _streams(seed)["phi"]
    ids = [t.id for t in tasks]
    if kind == "embedder_dp":
        return ins.EmbedderDPParams.init(ids, cfg.instruction.length, cfg.model.dim, rng)
    if kind == "embedder_ic":
        return ins.EmbedderICParams.init(vocab_size, cfg.instruction.length, cfg.model.dim, cfg.model.latent, rng)
    if kind == "extractor_dp":
        return ins.ExtractorDPParams.init(ids, pool_size)
    if kind == "extractor_ic":
        return ins.ExtractorICParams.init(vocab_size, cfg.model.latent, rng)
    raise ConfigError(f"unknown parameterization {kind!r}")


# ----------------------------------------------------------------- outputs


def write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def write_trace(path: Path, trace: Sequence[TraceRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(r.to_json() + "\n" for r in trace))


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _round(x: float | None, digits: int = 10):
    return None if x is None else round(float(x), digits)


# ----------------------------------------------------------------- training arms


@dataclass
class ArmResult:
    arm: str
    seed: int
    model: ModelParams
    phi: object = None
    bilevel: BilevelResult | None = None
    eval_mode: str = "zero-shot-definition"
    extras: dict = field(default_factory=dict)


def _bilevel(
    cfg: RunConfig,
    splits: T.Splits,
    model: ModelParams,
    kind: str,
    train_mode: str,
    outer_mode: str,
    seed: int,
    vocab_size: int,
    pools: PoolSet | None = None,
    exemplars: dict | None = None,
    on_step=None,
    phi=None,
) -> tuple[BilevelResult, object]:
    if phi is None:
        size = pools.size if pools is not None else cfg.instruction.pool_size
        phi = init_phi(kind, cfg, splits.meta_train, vocab_size, seed, size)
    problem = InstructionProblem(
        splits.meta_train,
        splits.meta_test,
        train_mode,
        kind,
        phi,
        outer_mode=outer_mode,
        exemplars=exemplars or {},
        pools=pools,
        batch_size=cfg.bilevel.batch_size,
        outer_batch_size=cfg.bilevel.outer_batch_size,
        expectation=cfg.instruction.expectation,
    )
    hc = cfg.hypergrad_config(seed, kind)
    state = BilevelState(model.arrays(), phi.arrays(), seed=seed)
    result = bilevel_train(
        problem,
        state,
        hc,
        cfg.bilevel.n_outer,
        patience=cfg.bilevel.patience or None,
        on_step=on_step,
    )
    return result, phi.with_arrays(result.phi)


def train_arm(arm: str, cfg: RunConfig, suite: T.TaskSuite, splits: T.Splits, seed: int, on_step=None) -> ArmResult:
    """Train one comparison arm from a fresh model."""
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}; choose from {', '.join(ARMS)}")
    v = suite.vocab_size
    model = init_model(cfg, v, seed)
    tr = cfg.train
    if arm in ("definition", "definition+distractors", "exemplar_task", "exemplar_instance"):
        mode = {"definition": "definition", "definition+distractors": "distractors"}.get(arm, arm)
        theta, _ = instruction_tuning_train(
            model.arrays(),
            splits.train,
            mode,
            tr.epochs,
            tr.lr,
            tr.optimizer,
            tr.batch_size,
            seed,
            exemplars=task_exemplars(splits.train, seed),
            distractors=task_distractors(splits.train, cfg.instruction.length, suite.layout, seed),
        )
        eval_mode = "one-shot-exemplar" if arm.startswith("exemplar") else "zero-shot-definition"
        return ArmResult(arm, seed, ModelParams.from_list(theta), eval_mode=eval_mode)
    if arm.startswith("extractor"):
        pools = random_pools(splits.meta_train, cfg.instruction.pool_size, seed)
        res, phi = _bilevel(cfg, splits, model, arm, "learned", "exemplar_task", seed, v, pools=pools,
                            exemplars=task_exemplars(splits.train, seed), on_step=on_step)
        return ArmResult(arm, seed, ModelParams.from_list(res.theta), phi, res, "one-shot-exemplar")
    kind = arm.split("+")[-1]
    train_mode = "learned+definition" if arm.startswith("definition+") else "learned"
    res, phi = _bilevel(cfg, splits, model, kind, train_mode, "definition", seed, v, on_step=on_step)
    return ArmResult(arm, seed, ModelParams.from_list(res.theta), phi, res)


def evaluate_arm(result: ArmResult, splits: T.Splits, cfg: RunConfig, split: str = "test") -> MetricsRecord:
    tasks = splits.test if split == "test" else splits.train
    instances = "instances" if split == "test" else "valid"
    exemplars = pick_exemplars(tasks, cfg.eval.exemplar_seed)
    return evaluate(
        result.model,
        tasks,
        result.eval_mode,
        exemplars,
        max_len=cfg.eval.max_len,
        run_id=f"{result.arm}-s{result.seed}",
        seed=result.seed,
        split=split,
        instances=instances,
    )


def _save_run(out: Path, result: ArmResult, record: MetricsRecord) -> None:
    run_dir = out / record.run_id
    write_jsonl(run_dir / "metrics.jsonl", record.lines())
    if result.bilevel is not None:
        write_trace(run_dir / "trace.jsonl", result.bilevel.trace)
    named = result.model.named()
    if result.phi is not None:
        named.update(ins.named(result.phi))
    save_checkpoint(run_dir / "checkpoint.bin", named)


# ----------------------------------------------------------------- proof of concept


@dataclass
class PocResult:
    traces: dict[str, dict[int, list[TraceRecord]]]
    curves: dict[str, dict[int, list[dict]]]
    baselines: dict[str, dict[int, float]]
    final_selection: dict[str, dict[int, float]]
    summary: dict


def run_proof_of_concept(cfg: RunConfig, out: Path | None = None, kinds: Sequence[str] | None = None) -> PocResult:
    """Extractors choosing between a task exemplar and a blank instruction.

    For every seed this trains each extractor kind by bilevel optimization on
    ``{exemplar, blank}`` pools and records the per-step selection percentage
    with a one-shot test ROUGE-L curve.  The always-exemplar and always-blank
    baselines are instruction-tuned on all training tasks.
    """
    kinds = list(kinds or [a for a in cfg.run.arms if a.startswith("extractor")] or ["extractor_dp", "extractor_ic"])
    suite = build_suite(cfg)
    traces: dict = {k: {} for k in kinds}
    curves: dict = {k: {} for k in kinds}
    final: dict = {k: {} for k in kinds}
    baselines: dict = {"always_exemplar": {}, "always_blank": {}}
    for seed in cfg.run.seeds:
        splits = build_splits(suite, cfg, seed)
        exemplars = task_exemplars(splits.train, seed)
        test_ex = pick_exemplars(splits.test, cfg.eval.exemplar_seed)
        pools = exemplar_blank_pools(splits.meta_train, exemplars)

        def one_shot(theta) -> float:
            return evaluate(ModelParams.from_list(theta), splits.test, "one-shot-exemplar", test_ex,
                            max_len=cfg.eval.max_len).aggregate

        for kind in kinds:
            curve: list[dict] = []

            def record(rec, theta, phi, curve=curve):
                every = cfg.run.eval_every
                if every and (rec.step % every == 0 or rec.step == cfg.bilevel.n_outer - 1):
                    curve.append({"step": rec.step, "rouge_l": _round(one_shot(theta))})

            model = init_model(cfg, suite.vocab_size, seed)
            res, phi = _bilevel(cfg, splits, model, kind, "learned", "exemplar_task", seed, suite.vocab_size,
                                pools=pools, exemplars=exemplars, on_step=record)
            traces[kind][seed] = res.trace
            curves[kind][seed] = curve
            final[kind][seed] = res.trace[-1].selection_pct
            if out is not None:
                write_trace(out / f"{kind}-s{seed}" / "trace.jsonl", res.trace)
                write_jsonl(out / f"{kind}-s{seed}" / "curve.jsonl", curve)
        for name, mode in (("always_exemplar", "exemplar_task"), ("always_blank", "blank")):
            model = init_model(cfg, suite.vocab_size, seed)
            theta, _ = instruction_tuning_train(
                model.arrays(), splits.train, mode, cfg.train.epochs, cfg.train.lr, cfg.train.optimizer,
                cfg.train.batch_size, seed, exemplars=exemplars,
            )
            rec = evaluate(ModelParams.from_list(theta), splits.test, "one-shot-exemplar", test_ex,
                           max_len=cfg.eval.max_len, run_id=f"{name}-s{seed}", seed=seed)
            baselines[name][seed] = rec.aggregate
            if out is not None:
                write_jsonl(out / f"{name}-s{seed}" / "metrics.jsonl", rec.lines())
    summary = {
        "seeds": list(cfg.run.seeds),
        "final_selection_pct": {k: {str(s): _round(v) for s, v in final[k].items()} for k in kinds},
        "initial_selection_pct": {k: {str(s): _round(traces[k][s][0].selection_pct) for s in traces[k]} for k in kinds},
        "one_shot_baselines": {n: {str(s): _round(v) for s, v in b.items()} for n, b in baselines.items()},
        "final_one_shot": {k: {str(s): (c[-1]["rouge_l"] if c else None) for s, c in curves[k].items()} for k in kinds},
    }
    if out is not None:
        write_json(out / "summary.json", summary)
    return PocResult(traces, curves, baselines, final, summary)


def selection_trace(result: PocResult, kind: str, seed: int) -> list[float]:
    """Per-outer-step exemplar-selection percentages of one run."""
    return [r.selection_pct for r in result.traces[kind][seed]]


# ----------------------------------------------------------------- main comparison


@dataclass
class ComparisonResult:
    records: dict[str, list[MetricsRecord]]
    table: str
    summaries: dict


def run_main_comparison(cfg: RunConfig, out: Path | None = None, arms: Sequence[str] | None = None) -> ComparisonResult:
    """Train and evaluate each arm over the seed list.

    Zero-shot arms are scored with the task definition as the testing
    instruction, one-shot arms with a fixed task exemplar.  The table reports
    the across-seed mean with a t-based 95% half-width per test type plus the
    average row.
    """
    arms = list(arms or cfg.run.arms or ARMS)
    suite = build_suite(cfg)
    records: dict[str, list[MetricsRecord]] = {a: [] for a in arms}
    for seed in cfg.run.seeds:
        splits = build_splits(suite, cfg, seed)
        for arm in arms:
            log.info("arm %s seed %d", arm, seed)
            result = train_arm(arm, cfg, suite, splits, seed)
            rec = evaluate_arm(result, splits, cfg)
            records[arm].append(rec)
            if out is not None:
                _save_run(out, result, rec)
    summaries = [summarize(a, records[a]) for a in arms]
    table = format_table(summaries)
    summary = {
        s.arm: {
            "mean": _round(s.average[0]),
            "halfwidth": _round(s.average[1]),
            "per_seed": [_round(x) for x in s.per_seed_average],
            "per_type": {t: [_round(m), _round(h)] for t, (m, h) in s.per_type.items()},
        }
        for s in summaries
    }
    if out is not None:
        write_jsonl(out / "metrics.jsonl", [line for a in arms for r in records[a] for line in r.lines()])
        (out / "table.txt").write_text(table)
        write_json(out / "summary.json", summary)
    return ComparisonResult(records, table, summary)


# ----------------------------------------------------------------- sweeps


def kmeans_split_candidates(suite: T.TaskSuite, cfg: RunConfig, token_emb: np.ndarray, seed: int) -> list[T.Splits]:
    """Meta-test candidates from clustering the non-test tasks' definitions.

    Each nonempty cluster proposes the task types it contains as the
    meta-test set; clusters covering every non-test type are skipped and
    duplicates collapse to one candidate.
    """
    pool = [t for t in suite.tasks if t.task_type not in cfg.split.test_types]
    n_types = len({t.task_type for t in pool})
    k = max(2, min(cfg.split.candidates, len(pool)))
    groups = T.split_kmeans(pool, k, token_emb, seed)
    seen, out = set(), []
    for g in groups:
        types = tuple(T.types_of(pool, g))
        if not types or len(types) >= n_types or types in seen:
            continue
        seen.add(types)
        out.append(T.make_splits(suite.tasks, split_spec(cfg, list(types)), seed))
    if not out:
        raise ConfigError("k-means produced no usable meta-test group")
    return out


def _best_split_score(candidates: Sequence[T.Splits], arm: str, cfg: RunConfig, suite: T.TaskSuite, seed: int):
    results = []

    def score(sp: T.Splits) -> float:
        res = train_arm(arm, cfg, suite, sp, seed)
        results.append(res)
        return evaluate_arm(res, sp, cfg, split="valid").aggregate

    best = T.select_best_split(candidates, score)
    return best, evaluate_arm(results[best], candidates[best], cfg)


def run_sweeps(cfg: RunConfig, axis: str | None = None, out: Path | None = None, values=None) -> list[dict]:
    """One full run per sweep point and seed; returns the curve data.

    ``length`` varies the learned instruction length (default 1, 2, 4, 8),
    ``meta_test_count`` the number of meta-test types (1 up to all-but-one
    non-test type), and ``split_method`` compares the best-on-validation
    random split against the best k-means split.
    """
    axis = axis or cfg.run.sweep_axis
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    arm = (cfg.run.arms or ["definition+embedder_dp"])[0]
    suite = build_suite(cfg)
    points: list[dict] = []
    if axis == "length":
        values = list(values or cfg.run.sweep_values or [1, 2, 4, 8])
    elif axis == "meta_test_count":
        n_pool = len([t for t in suite.types if t not in cfg.split.test_types])
        values = list(values or cfg.run.sweep_values or range(1, n_pool))
    else:
        values = ["random", "kmeans"]
    for value in values:
        run_cfg = cfg.copy()
        if axis == "length":
            run_cfg.instruction.length = int(value)
        elif axis == "meta_test_count":
            run_cfg.split.n_meta_test = int(value)
        records = []
        for seed in cfg.run.seeds:
            if axis == "split_method":
                if value == "random":
                    cands = T.candidate_splits(suite.tasks, split_spec(run_cfg), seed, run_cfg.split.candidates)
                else:
                    emb = init_model(run_cfg, suite.vocab_size, seed).token_emb
                    cands = kmeans_split_candidates(suite, run_cfg, emb, seed)
                best, rec = _best_split_score(cands, arm, run_cfg, suite, seed)
            else:
                splits = build_splits(suite, run_cfg, seed)
                rec = evaluate_arm(train_arm(arm, run_cfg, suite, splits, seed), splits, run_cfg)
            records.append(rec)
        s = summarize(f"{axis}={value}", records)
        points.append(
            {"axis": axis, "value": value, "arm": arm, "mean": _round(s.average[0]),
             "halfwidth": _round(s.average[1]), "per_seed": [_round(x) for x in s.per_seed_average]}
        )
    if out is not None:
        write_jsonl(out / f"sweep-{axis}.jsonl", points)
    return points


# ----------------------------------------------------------------- embeddings


def instruction_rows(task: T.Task, model: ModelParams, mode: str, phi=None) -> np.ndarray:
    """The ``(rows, d)`` instruction block a task sees during training."""
    V = model.arrays()[0]
    definition = V[list(task.definition)]
    if mode == "definition":
        return definition
    if mode != "learned+definition":
        raise ConfigError(f"embedding mode must be definition or learned+definition, got {mode!r}")
    if phi is None:
        raise ConfigError("learned+definition embeddings need instruction parameters")
    if isinstance(phi, ins.EmbedderDPParams):
        learned = ins.embedder_dp_instruction(task.id, phi).data
    elif isinstance(phi, ins.EmbedderICParams):
        learned = np.mean([ins.embedder_ic_instruction(T.format_instance(i), phi).data for i in task.instances], axis=0)
    else:
        raise ConfigError("learned+definition embeddings need an embedder parameterization")
    return np.concatenate([learned, definition], axis=0)


def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projection onto the top two principal components and their variances.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    X = np.asarray(points, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    _, svals, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = np.zeros((2, X.shape[1]))
    k = min(2, vt.shape[0])
    comps[:k] = vt[:k]
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = Xc @ comps.T
    var = np.zeros(2)
    var[:k] = svals[:k] ** 2 / max(len(X) - 1, 1)
    return proj, var


def export_embeddings(tasks: Sequence[T.Task], model: ModelParams, mode: str, phi=None, path: Path | None = None) -> list[dict]:
    """Mean-pooled instruction embedding and 2-D projection per task."""
    if not tasks:
        raise ConfigError("no tasks to embed")
    pooled = np.stack([instruction_rows(t, model, mode, phi).mean(axis=0) for t in tasks])
    proj, _ = pca_2d(pooled)
    rows = [
        {"task_id": t.id, "task_type": t.task_type, "embedding": [float(x) for x in e], "pc1": float(p[0]), "pc2": float(p[1])}
        for t, e, p in zip(tasks, pooled, proj)
    ]
    if path is not None:
        write_jsonl(Path(path), rows)
    return rows
