"""Command-line entry point: ``clsr <subcommand> [options]``.

Errors are reported as one JSON line on stderr,
``{"error": <kind>, "exit": <status>, "message": <text>}``, with a distinct
exit status per kind (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .data import PrepConfig, build_pair_dataset, iter_raw, read_pairs, read_situations, write_pairs, write_raw, write_situations
from .errors import CheckpointError, ClsrError, ConfigError, EmptyDatasetError, InputError, NumericError, ShapeError, StateError
from .evaluation import compare, derive_tasks, format_class_table, format_table, read_tasks_file, write_reports, write_tasks_file
from .experiment import BASELINE, Scale, fit_model, reproduce
from .nn import load_checkpoint, fingerprint
from .retrieval import CosineRetriever, EmbeddingIndex, L2Retriever, build_index, query_top_k, search
from .synth import generate_labeled, generate_unlabeled
from .trainer import PRESETS, TrainConfig

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "input": 4,
    "checkpoint": 5,
    "numeric": 6,
    "empty_dataset": 7,
    "state": 8,
}


@dataclass
class RunConfig:
    """Settings shared by all subcommands, loadable from a JSON ``--config`` file."""

    seed: int = 42
    prep: PrepConfig = field(default_factory=PrepConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ks: tuple[int, ...] = (1, 3, 5)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"seed", "prep", "train", "ks"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls()
        if "seed" in d:
            cfg.seed = int(d["seed"])
        if "prep" in d:
            cfg.prep = PrepConfig.from_dict(d["prep"])
        if "train" in d:
            cfg.train = TrainConfig.from_dict(d["train"])
        if "ks" in d:
            cfg.ks = tuple(int(k) for k in d["ks"])
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(payload)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input: {p}")
    return p


# --- subcommands ------------------------------------------------------------


def cmd_gen(args, run: RunConfig, out: Path) -> None:
    raws = generate_unlabeled(args.n_series, segments=args.segments, missing_rate=args.missing_rate, seed=run.seed)
    write_raw(out / "unlabeled.jsonl", raws)
    labeled = generate_labeled(members_per_class=args.members, distractors=args.distractors, seed=run.seed)
    write_situations(out / "labeled.jsonl", labeled.situations)
    write_tasks_file(out / "tasks.json", labeled.classes, labeled.distractors)
    print(f"wrote {len(raws)} raw series and {len(labeled.situations)} labeled situations to {out}")


def cmd_prepare(args, run: RunConfig, out: Path) -> None:
    prep = replace(run.prep, rng_seed=run.seed)
    if args.augment is not None:
        prep = replace(prep, augmentations=frozenset(args.augment))
    limit = None if args.limit is None else args.limit + args.n_val
    pairs, manifest = build_pair_dataset(iter_raw(_require(args.raw)), prep, limit=limit)
    if args.n_val >= len(pairs):
        raise InputError(f"only {len(pairs)} pairs prepared; cannot hold out {args.n_val} for validation")
    cut = len(pairs) - args.n_val
    write_pairs(out / "pairs.jsonl", pairs[:cut])
    manifest = dict(manifest, n_train=cut, n_val=args.n_val, pairs_sha256=_sha256(out / "pairs.jsonl"))
    if args.n_val:
        write_pairs(out / "val_pairs.jsonl", pairs[cut:])
        manifest["val_pairs_sha256"] = _sha256(out / "val_pairs.jsonl")
    _write_json(out / "manifest.json", manifest)
    print(f"manifest sha256 {_sha256(out / 'manifest.json')}: {cut} train / {args.n_val} val pairs")


def _train_config(args, run: RunConfig) -> TrainConfig:
    cfg = PRESETS[args.preset] if args.preset else run.train
    over = {"seed": run.seed}
    if args.max_epochs is not None:
        over["max_epochs"] = args.max_epochs
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    return replace(cfg, **over).validate()


def cmd_train(args, run: RunConfig, out: Path) -> None:
    cfg = _train_config(args, run)
    pairs_path = _require(args.pairs)
    manifest_path = pairs_path.with_name("manifest.json")
    if manifest_path.exists():
        prepared = frozenset(json.loads(manifest_path.read_text())["config"]["augmentations"])
        if prepared != cfg.augmentations:
            raise ConfigError(
                f"config {cfg.name} expects augmentations {sorted(cfg.augmentations)} "
                f"but {pairs_path} was prepared with {sorted(prepared)}"
            )
    pairs = read_pairs(pairs_path)
    val = read_pairs(_require(args.val_pairs))
    model, report = fit_model(cfg, pairs, val, checkpoint_path=out / "model.ckpt")
    report.checkpoint_path = "model.ckpt"
    report.write(out / "train_report.json", out / "loss.csv")
    print(
        f"{cfg.name}: {len(report.train_loss)} epochs ({report.stop_reason}), best epoch {report.best_epoch}, "
        f"checkpoint {out / 'model.ckpt'}"
    )


def cmd_embed(args, run: RunConfig, out: Path) -> None:
    model = load_checkpoint(_require(args.checkpoint))
    situations = read_situations(_require(args.situations))
    index = build_index(situations, model)
    index.save(out / "index.bin")
    print(f"indexed {len(situations)} situations into {out / 'index.bin'}")


def cmd_query(args, run: RunConfig, out: Path) -> None:
    index = EmbeddingIndex.load(_require(args.index))
    if args.id is not None:
        pos = index.position(args.id)
        if pos is None:
            raise InputError(f"id {args.id!r} is not in the index")
        result = search(index, index.matrix[pos], args.k, exclude_id=args.id)
    else:
        if args.checkpoint is None:
            raise InputError("--query-file needs --checkpoint to embed the query")
        model = load_checkpoint(_require(args.checkpoint))
        if fingerprint(model) != index.checkpoint_fingerprint:
            raise CheckpointError("checkpoint does not match the one used to build the index")
        queries = read_situations(_require(args.query_file))
        if len(queries) != 1:
            raise InputError(f"query file must hold exactly one situation, found {len(queries)}")
        result = query_top_k(queries[0], index, model, args.k)
    result.write_csv(out / "query.csv")
    for rank, (id_, score) in enumerate(zip(result.ids, result.scores), start=1):
        print(f"{rank}\t{id_}\t{score:.6f}")
    if result.truncated:
        print(f"note: index holds only {len(result)} candidates", file=sys.stderr)


def cmd_eval(args, run: RunConfig, out: Path) -> None:
    situations = read_situations(_require(args.labeled))
    classes, _ = read_tasks_file(_require(args.tasks))
    tasks = derive_tasks(classes)
    retrievers = {BASELINE: L2Retriever(situations)}
    for ckpt in args.checkpoint:
        model = load_checkpoint(_require(ckpt))
        retrievers[Path(ckpt).stem if len(args.checkpoint) > 1 else "clsr"] = CosineRetriever(situations, model)
    reports = compare(tasks, retrievers, run.ks)
    write_reports(reports, out)
    print(format_table(reports, run.ks))
    print()
    print(format_class_table(reports))


def cmd_reproduce(args, run: RunConfig, out: Path) -> None:
    scale = Scale(n_train=args.n_train, n_val=args.n_val, max_epochs=args.max_epochs, batch_size=args.batch_size)
    for name in args.configs or ():
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    reproduce(out, seed=run.seed, scale=scale, configs=args.configs, log=lambda m: print(m, flush=True))
    print((out / "table.txt").read_text(), end="")


# --- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report("usage", message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config with optional seed/prep/train/ks sections")
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--out", default=".", help="output directory (created if missing)")

    p = _Parser(prog="clsr", description="Contrastive similarity search for network telemetry.")
    p.add_argument("--version", action="version", version=f"clsr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", parents=[common], help="generate synthetic corpora and the tasks file")
    s.add_argument("--n-series", type=int, default=24_000)
    s.add_argument("--segments", type=int, default=1)
    s.add_argument("--missing-rate", type=float, default=0.08)
    s.add_argument("--members", type=int, default=8)
    s.add_argument("--distractors", type=int, default=48)

    s = sub.add_parser("prepare", parents=[common], help="build the pair dataset and manifest")
    s.add_argument("--raw", required=True, help="raw series JSONL")
    s.add_argument("--augment", nargs="*", choices=["cyclic_shift", "vertical_shift", "scale"])
    s.add_argument("--limit", type=int, help="training pairs to keep")
    s.add_argument("--n-val", type=int, default=2_000, help="pairs held out for validation")

    s = sub.add_parser("train", parents=[common], help="train an encoder")
    s.add_argument("--pairs", required=True)
    s.add_argument("--val-pairs", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--batch-size", type=int)

    s = sub.add_parser("embed", parents=[common], help="embed situations into an index file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--situations", required=True)

    s = sub.add_parser("query", parents=[common], help="top-k similar situations")
    s.add_argument("--index", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--id", help="query by an id already in the index")
    g.add_argument("--query-file", help="JSONL file holding one query situation")
    s.add_argument("--checkpoint", help="needed with --query-file")
    s.add_argument("--k", type=int, default=5)

    s = sub.add_parser("eval", parents=[common], help="MAP / Precision@k against the L2 baseline")
    s.add_argument("--labeled", required=True)
    s.add_argument("--tasks", required=True)
    s.add_argument("--checkpoint", nargs="+", required=True)

    s = sub.add_parser("reproduce", parents=[common], help="all presets plus baseline, end to end")
    s.add_argument("--n-train", type=int, default=20_000)
    s.add_argument("--n-val", type=int, default=2_000)
    s.add_argument("--max-epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--configs", nargs="+", help="subset of presets (default: all eight)")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "embed": cmd_embed,
    "query": cmd_query,
    "eval": cmd_eval,
    "reproduce": cmd_reproduce,
}


def _report(kind: str, message: str):
    code = EXIT_CODES[kind]
    print(json.dumps({"error": kind, "exit": code, "message": str(message)}), file=sys.stderr)
    raise SystemExit(code)


def _classify(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, EmptyDatasetError):
        return "empty_dataset"
    if isinstance(exc, (StateError, ShapeError)):
        return "state"
    if isinstance(exc, (InputError, FileNotFoundError, json.JSONDecodeError, KeyError)):
        return "input"
    return "internal"


def _thread_limit():
    raw = os.environ.get("CLSR_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CLSR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CLSR_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    if argv is not None:
        argv = [str(a) for a in argv]
    args = build_parser().parse_args(argv)
    try:
        run = RunConfig.load(_require(args.config)) if args.config else RunConfig()
        if args.seed is not None:
            run.seed = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            COMMANDS[args.command](args, run, out)
    except (ClsrError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        _report(_classify(e), e.args[0] if isinstance(e, KeyError) and e.args else e)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
