"""``bilopt`` command-line runner.

Each subcommand reads an optional config file, applies ``--override``
assignments in order, validates, and writes its outputs under ``--out``
(falling back to ``run.out``, then ``$BILOPT_OUT``, then ``./bilopt_out``).
The resolved configuration is saved next to the outputs as ``config.txt``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
failures while running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .. import instructions as ins
from .. import tasks as T
from ..model import load_checkpoint, params_from_named
from . import experiments as X
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .evaluation import evaluate, pick_exemplars
from .metrics import format_table, summarize

log = logging.getLogger("bilopt")

COMMANDS = ("gen-suite", "train-baseline", "train-bilevel", "poc", "compare", "sweep", "eval", "export-emb")
BASELINE_ARMS = ("definition", "definition+distractors", "exemplar_task", "exemplar_instance")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file of 'section.key = value' lines")
    common.add_argument("--seed", type=int, help="run this single seed instead of run.seeds")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--override", metavar="KEY=VALUE", action="append", default=[],
                        help="set one config key; may be repeated")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="bilopt", description="Bilevel instruction optimization experiments.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)
    sub.add_parser("gen-suite", parents=[common], help="write the synthetic task suite and its splits")
    tb = sub.add_parser("train-baseline", parents=[common], help="instruction-tune with a manual training instruction")
    tb.add_argument("--arm", choices=BASELINE_ARMS, help="training instruction (default: definition)")
    tl = sub.add_parser("train-bilevel", parents=[common], help="bilevel training of a learned instruction")
    tl.add_argument("--arm", choices=[a for a in X.ARMS if a not in BASELINE_ARMS],
                    help="learned arm (default: from instruction.kind and instruction.mode)")
    sub.add_parser("poc", parents=[common], help="exemplar-versus-blank selection experiment")
    cp = sub.add_parser("compare", parents=[common], help="train and score every comparison arm")
    cp.add_argument("--arms", help="comma-separated subset of arms")
    sw = sub.add_parser("sweep", parents=[common], help="vary one setting and record the score curve")
    sw.add_argument("--axis", choices=X.SWEEP_AXES, help="setting to vary (default: run.sweep_axis)")
    ev = sub.add_parser("eval", parents=[common], help="score a saved checkpoint on the test split")
    ev.add_argument("--checkpoint", required=True, metavar="PATH")
    ev.add_argument("--split", choices=("test", "valid"), default="test")
    ee = sub.add_parser("export-emb", parents=[common], help="export instruction embeddings and their 2-D projection")
    ee.add_argument("--checkpoint", metavar="PATH", help="trained model (default: a freshly initialized one)")
    ee.add_argument("--mode", choices=("definition", "learned+definition"), default="definition")
    return p


def _config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, args.override)
    else:
        cfg = apply_overrides(RunConfig(), args.override).validate()
    if args.seed is not None:
        cfg.run.seeds = [args.seed]
    return cfg


def _bilevel_arm(cfg: RunConfig, arm: str | None) -> str:
    if arm:
        return arm
    kind = cfg.instruction.kind
    if kind.startswith("extractor") or cfg.instruction.mode != "learned+definition":
        return kind
    return f"definition+{kind}"


def _train_arms(cfg: RunConfig, out: Path, arm: str) -> str:
    suite = X.build_suite(cfg)
    records = []
    for seed in cfg.run.seeds:
        splits = X.build_splits(suite, cfg, seed)
        log.info("training %s, seed %d", arm, seed)
        result = X.train_arm(arm, cfg, suite, splits, seed)
        rec = X.evaluate_arm(result, splits, cfg)
        X._save_run(out, result, rec)
        records.append(rec)
    return format_table([summarize(arm, records)])


def _load_model(path: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    named = load_checkpoint(p)
    return params_from_named(named), named


def _phi_from_named(named: dict, cfg: RunConfig, splits: T.Splits):
    for kind, cls in (("embedder_dp", ins.EmbedderDPParams), ("embedder_ic", ins.EmbedderICParams)):
        prefix = f"phi.{kind}."
        if any(k.startswith(prefix) for k in named):
            if kind == "embedder_dp":
                index = {t.id: i for i, t in enumerate(splits.meta_train)}
                return cls(named[prefix + "weights"], index)
            return cls(named[prefix + "token_emb"], named[prefix + "conversion"])
    raise ConfigError("learned+definition export needs a checkpoint with embedder parameters")


def _run(args, cfg: RunConfig, out: Path) -> str:
    cmd = args.command
    if cmd == "gen-suite":
        suite = X.build_suite(cfg)
        T.export_suite(suite, out / "suite.jsonl")
        rows = []
        for seed in cfg.run.seeds:
            sp = X.build_splits(suite, cfg, seed)
            rows.append({"seed": seed, "meta_train": sp.meta_train_types, "meta_test": sp.meta_test_types,
                         "test": sp.test_types})
        X.write_jsonl(out / "splits.jsonl", rows)
        return f"{len(suite.tasks)} tasks of {len(suite.types)} types, vocabulary {suite.vocab_size}"
    if cmd == "train-baseline":
        return _train_arms(cfg, out, args.arm or "definition")
    if cmd == "train-bilevel":
        return _train_arms(cfg, out, _bilevel_arm(cfg, args.arm))
    if cmd == "poc":
        res = X.run_proof_of_concept(cfg, out)
        lines = []
        for kind, per_seed in res.summary["final_selection_pct"].items():
            lines.append(f"{kind}: final exemplar selection % by seed {per_seed}")
        for name, per_seed in res.summary["one_shot_baselines"].items():
            lines.append(f"{name}: one-shot ROUGE-L by seed {per_seed}")
        return "\n".join(lines)
    if cmd == "compare":
        arms = [a.strip() for a in args.arms.split(",") if a.strip()] if args.arms else None
        for a in arms or []:
            if a not in X.ARMS:
                raise ConfigError(f"unknown arm {a!r}; choose from {', '.join(X.ARMS)}")
        return X.run_main_comparison(cfg, out, arms).table
    if cmd == "sweep":
        points = X.run_sweeps(cfg, args.axis, out)
        return "\n".join(f"{p['axis']}={p['value']}: {p['mean']:.4f} +- {p['halfwidth']:.4f}" for p in points)
    suite = X.build_suite(cfg)
    seed = cfg.run.seeds[0]
    splits = X.build_splits(suite, cfg, seed)
    if cmd == "eval":
        model, _ = _load_model(args.checkpoint)
        tasks = splits.test if args.split == "test" else splits.train
        rec = evaluate(model, tasks, cfg.eval.mode, pick_exemplars(tasks, cfg.eval.exemplar_seed),
                       max_len=cfg.eval.max_len, run_id=f"eval-s{seed}", seed=seed, split=args.split,
                       instances="instances" if args.split == "test" else "valid")
        X.write_jsonl(out / "metrics.jsonl", rec.lines())
        return format_table([summarize("checkpoint", [rec])])
    # export-emb
    phi = None
    if args.checkpoint:
        model, named = _load_model(args.checkpoint)
        if args.mode == "learned+definition":
            phi = _phi_from_named(named, cfg, splits)
    else:
        if args.mode == "learned+definition":
            raise ConfigError("learned+definition export needs --checkpoint")
        model = X.init_model(cfg, suite.vocab_size, seed)
    tasks = splits.meta_train if phi is not None else suite.tasks
    rows = X.export_embeddings(tasks, model, args.mode, phi, out / "embeddings.jsonl")
    return f"{len(rows)} task embeddings written"


def main(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run one subcommand and return the exit status."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        out = cfg.output_dir(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        print(_run(args, cfg, out))
    except ConfigError as exc:
        print(f"bilopt: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"bilopt: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
