"""End-to-end synthetic experiment: corpus, training per config, evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import PrepConfig, SituationPair, build_pair_dataset, pairs_to_arrays, write_situations
from .evaluation import EvalReport, compare, derive_tasks, format_class_table, format_table, write_reports, write_tasks_file
from .nn import Architecture, Encoder
from .retrieval import CosineRetriever, L2Retriever, build_index
from .synth import LabeledSet, generate_labeled, iter_unlabeled
from .trainer import PRESETS, TrainConfig, TrainReport, train

BASELINE = "l2-baseline"


@dataclass
class Scale:
    """Corpus and training budget.  Defaults are the desk-scale run."""

    n_train: int = 20_000
    n_val: int = 2_000
    max_epochs: int = 10
    members_per_class: int = 8
    distractors: int = 48
    batch_size: int | None = None  # None keeps the config's own value


def corpus_pairs(n_train: int, n_val: int, prep: PrepConfig, seed: int) -> tuple[list[SituationPair], list[SituationPair], dict]:
    """Prepare the first ``n_train + n_val`` surviving pairs of the unlabeled stream."""
    pairs, manifest = build_pair_dataset(iter_unlabeled(seed=seed), prep, limit=n_train + n_val)
    manifest = dict(manifest, n_train=n_train, n_val=n_val)
    return pairs[:n_train], pairs[n_train:], manifest


def fit_model(
    cfg: TrainConfig,
    train_pairs,
    val_pairs,
    arch: Architecture = Architecture(),
    checkpoint_path=None,
) -> tuple[Encoder, TrainReport]:
    first, second = pairs_to_arrays(train_pairs)
    model = Encoder(arch, seed=cfg.seed)
    model.fit_normalization(np.concatenate([first, second]))
    report = train((first, second), pairs_to_arrays(val_pairs), cfg, model, checkpoint_path=checkpoint_path)
    return model, report


def _quiet(_msg: str) -> None:
    pass


def reproduce(
    out,
    seed: int = 42,
    scale: Scale | None = None,
    configs: Sequence[str] | None = None,
    log: Callable[[str], None] = _quiet,
) -> dict[str, EvalReport]:
    """Train every requested preset, evaluate it and the L2 baseline, write reports.

    Layout under ``out``: one sub-directory per config holding ``model.ckpt``,
    ``index.bin``, ``train_report.json`` and ``loss.csv``; shared
    ``labeled.jsonl``, ``tasks.json``, ``corpus_manifest.json``; and the
    comparison tables ``metrics.csv``, ``per_class.csv``, ``reports.json``,
    ``table.txt``.  Nothing time-dependent is written, so reruns are
    byte-identical.
    """
    scale = scale or Scale()
    names = list(configs) if configs else list(PRESETS)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    labeled: LabeledSet = generate_labeled(
        members_per_class=scale.members_per_class, distractors=scale.distractors, seed=seed
    )
    write_situations(out / "labeled.jsonl", labeled.situations)
    write_tasks_file(out / "tasks.json", labeled.classes, labeled.distractors)
    tasks = derive_tasks(labeled.classes)

    corpora: dict[frozenset, tuple] = {}
    manifests = {}
    retrievers = {BASELINE: L2Retriever(labeled.situations)}
    for name in names:
        cfg = replace(PRESETS[name], seed=seed, max_epochs=scale.max_epochs)
        if scale.batch_size is not None:
            cfg = replace(cfg, batch_size=scale.batch_size)
        cfg.validate()
        aug = cfg.augmentations
        if aug not in corpora:
            prep = PrepConfig(augmentations=aug, rng_seed=seed)
            corpora[aug] = corpus_pairs(scale.n_train, scale.n_val, prep, seed)
            manifests["+".join(sorted(aug)) or "none"] = corpora[aug][2]
        tr, va, _ = corpora[aug]

        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        model, report = fit_model(cfg, tr, va, checkpoint_path=run_dir / "model.ckpt")
        report.checkpoint_path = f"{name}/model.ckpt"
        report.write(run_dir / "train_report.json", run_dir / "loss.csv")
        index = build_index(labeled.situations, model)
        index.save(run_dir / "index.bin")
        retrievers[name] = CosineRetriever(labeled.situations, model, index)
        log(
            f"{name}: {len(report.train_loss)} epochs, best {report.best_epoch}, "
            f"val loss {report.val_loss[report.best_epoch - 1]:.4f}, {time.perf_counter() - t0:.1f}s"
        )

    with open(out / "corpus_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifests, fh, indent=2, sort_keys=True)
        fh.write("\n")
    reports = compare(tasks, retrievers)
    write_reports(reports, out)
    (out / "table.txt").write_text(format_table(reports) + "\n\n" + format_class_table(reports) + "\n", encoding="utf-8")
    return reports
