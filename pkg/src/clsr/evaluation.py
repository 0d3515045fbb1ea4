"""Retrieval tasks, MAP / Precision@k and retriever comparison reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .errors import ConfigError, InputError


class Retriever(Protocol):
    ids: Sequence[str]

    def rank(self, query_id: str, k: int) -> list[str]: ...


@dataclass(frozen=True)
class RetrievalTask:
    query_id: str
    relevant_ids: frozenset
    class_label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "relevant_ids", frozenset(self.relevant_ids))
        if not self.relevant_ids:
            raise InputError(f"task {self.query_id!r} has no relevant ids")
        if self.query_id in self.relevant_ids:
            raise InputError(f"task {self.query_id!r} lists its own query as relevant")


def derive_tasks(labeled: Mapping[str, Sequence[str]]) -> list[RetrievalTask]:
    """Leave-one-out tasks: every class member queries for the rest of its class."""
    tasks = []
    for label, members in labeled.items():
        if len(members) < 2:
            raise ConfigError(f"class {label!r} needs at least two members")
        for q in members:
            tasks.append(RetrievalTask(q, frozenset(m for m in members if m != q), label))
    return tasks


def average_precision(task: RetrievalTask, ranked: Sequence[str], k: int | None = None) -> float:
    if len(set(ranked)) != len(ranked):
        raise InputError("ranking contains duplicate ids")
    top = ranked if k is None else ranked[:k]
    hits = 0
    total = 0.0
    for r, id_ in enumerate(top, start=1):
        if id_ in task.relevant_ids:
            hits += 1
            total += hits / r
    return total / len(task.relevant_ids)


def precision_at(task: RetrievalTask, ranked: Sequence[str], k: int) -> float:
    return sum(1 for id_ in ranked[:k] if id_ in task.relevant_ids) / k


def attainable_ap(task: RetrievalTask, k: int) -> float:
    """Best AP(k) any ranking can reach for ``task``."""
    return min(k, len(task.relevant_ids)) / len(task.relevant_ids)


def _check_ids(tasks: Sequence[RetrievalTask], retriever: Retriever) -> None:
    known = set(retriever.ids)
    for t in tasks:
        for id_ in (t.query_id, *sorted(t.relevant_ids)):
            if id_ not in known:
                raise InputError(f"id {id_!r} is not in the evaluation database")


def _rankings(tasks, retriever, k):
    _check_ids(tasks, retriever)
    return [retriever.rank(t.query_id, k) for t in tasks]


def map_at_k(tasks: Sequence[RetrievalTask], retriever: Retriever, k: int) -> float:
    rankings = _rankings(tasks, retriever, k)
    return sum(average_precision(t, r, k) for t, r in zip(tasks, rankings)) / len(tasks)


def precision_at_k(tasks: Sequence[RetrievalTask], retriever: Retriever, k: int) -> float:
    rankings = _rankings(tasks, retriever, k)
    return sum(precision_at(t, r, k) for t, r in zip(tasks, rankings)) / len(tasks)


@dataclass
class EvalReport:
    retriever: str
    map: float
    precision_at: dict[int, float]
    map_at: dict[int, float]
    attainable_map_at: dict[int, float]
    per_class_map: dict[str, float]
    per_task: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "retriever": self.retriever,
            "map": self.map,
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "map_at": {str(k): v for k, v in self.map_at.items()},
            "attainable_map_at": {str(k): v for k, v in self.attainable_map_at.items()},
            "per_class_map": self.per_class_map,
            "per_task": self.per_task,
        }


def evaluate(name: str, tasks: Sequence[RetrievalTask], retriever: Retriever, ks=(1, 3, 5)) -> EvalReport:
    """Score one retriever; MAP without a k is taken over the full ranking."""
    if not tasks:
        raise InputError("no tasks to evaluate")
    _check_ids(tasks, retriever)
    full = len(retriever.ids)
    rankings = [retriever.rank(t.query_id, full) for t in tasks]
    ks = sorted(ks)
    aps = [average_precision(t, r) for t, r in zip(tasks, rankings)]
    per_task = []
    for t, r, ap in zip(tasks, rankings, aps):
        row = {"query_id": t.query_id, "class": t.class_label, "ap": ap}
        for k in ks:
            row[f"p@{k}"] = precision_at(t, r, k)
        per_task.append(row)

    per_class: dict[str, list[float]] = {}
    for t, ap in zip(tasks, aps):
        per_class.setdefault(t.class_label, []).append(ap)

    n = len(tasks)
    return EvalReport(
        retriever=name,
        map=sum(aps) / n,
        precision_at={k: sum(precision_at(t, r, k) for t, r in zip(tasks, rankings)) / n for k in ks},
        map_at={k: sum(average_precision(t, r, k) for t, r in zip(tasks, rankings)) / n for k in ks},
        attainable_map_at={k: sum(attainable_ap(t, k) for t in tasks) / n for k in ks},
        per_class_map={c: sum(v) / len(v) for c, v in per_class.items()},
        per_task=per_task,
    )


def compare(tasks: Sequence[RetrievalTask], retrievers: Mapping[str, Retriever], ks=(1, 3, 5)) -> dict[str, EvalReport]:
    return {name: evaluate(name, tasks, r, ks) for name, r in retrievers.items()}


def write_reports(reports: Mapping[str, EvalReport], out_dir, prefix: str = "") -> dict[str, Path]:
    """Write the metric table, per-class table and a JSON dump."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = out_dir / f"{prefix}metrics.csv"
    classes = out_dir / f"{prefix}per_class.csv"
    dump = out_dir / f"{prefix}reports.json"
    with open(metrics, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["retriever", "metric", "k", "value", "attainable_max"])
        for name, rep in reports.items():
            w.writerow([name, "map", "all", f"{rep.map:.6f}", "1.000000"])
            for k in sorted(rep.map_at):
                w.writerow([name, "map", k, f"{rep.map_at[k]:.6f}", f"{rep.attainable_map_at[k]:.6f}"])
            for k in sorted(rep.precision_at):
                w.writerow([name, "precision", k, f"{rep.precision_at[k]:.6f}", "1.000000"])
    with open(classes, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["retriever", "class", "map"])
        for name, rep in reports.items():
            for label in sorted(rep.per_class_map):
                w.writerow([name, label, f"{rep.per_class_map[label]:.6f}"])
    with open(dump, "w", encoding="utf-8") as fh:
        json.dump({n: r.to_dict() for n, r in reports.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"metrics": metrics, "per_class": classes, "json": dump}


def format_table(reports: Mapping[str, EvalReport], ks=(1, 3, 5)) -> str:
    ks = sorted(ks)
    header = f"{'Retriever':<26}{'MAP':>8}" + "".join(f"{'@' + str(k):>8}" for k in ks)
    lines = [header, "-" * len(header)]
    for name, rep in reports.items():
        lines.append(
            f"{name:<26}{rep.map:>8.3f}" + "".join(f"{rep.precision_at[k]:>8.3f}" for k in ks)
        )
    return "\n".join(lines)


def format_class_table(reports: Mapping[str, EvalReport]) -> str:
    labels = sorted({c for r in reports.values() for c in r.per_class_map})
    header = f"{'Retriever':<26}" + "".join(f"{c:>17}" for c in labels)
    lines = [header, "-" * len(header)]
    for name, rep in reports.items():
        lines.append(f"{name:<26}" + "".join(f"{rep.per_class_map.get(c, float('nan')):>17.3f}" for c in labels))
    return "\n".join(lines)


def write_tasks_file(path, labeled: Mapping[str, Sequence[str]], distractors: Sequence[str]) -> None:
    payload = {"classes": {k: list(v) for k, v in labeled.items()}, "distractors": list(distractors)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_tasks_file(path) -> tuple[dict[str, list[str]], list[str]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return payload["classes"], payload.get("distractors", [])
