"""Macro-averaged metrics, confusion matrices, and result reporting.

Per-class precision/recall default to 0 when their denominator is zero,
and the macro average runs over a scheme's full label set, so classes the
model never predicts still drag the mean down. All values are on a 0-100
scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union


def _check_labels(gold: Sequence[str], pred: Sequence[str],
                  labels: Sequence[str]) -> None:
    if len(gold) == 0:
        raise ValueError("cannot score an empty label sequence")
    if len(gold) != len(pred):
        raise ValueError(f"gold/pred length mismatch: {len(gold)} vs {len(pred)}")
    allowed = set(labels)
    for value in (*gold, *pred):
        if value not in allowed:
            raise ValueError(f"label {value!r} outside the scheme's label set")


def per_class_prf(gold: Sequence[str], pred: Sequence[str],
                  labels: Sequence[str]) -> dict[str, tuple[float, float, float]]:
    _check_labels(gold, pred, labels)
    out = {}
    for c in labels:
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        n_pred = sum(1 for p in pred if p == c)
        n_gold = sum(1 for g in gold if g == c)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gold if n_gold else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[c] = (100 * precision, 100 * recall, 100 * f1)
    return out


def macro_prf(gold: Sequence[str], pred: Sequence[str],
              labels: Sequence[str]) -> tuple[float, float, float]:
    """Unweighted mean of per-class precision/recall/F1 over ``labels``."""
    per_class = per_class_prf(gold, pred, labels)
    n = len(labels)
    return (sum(v[0] for v in per_class.values()) / n,
            sum(v[1] for v in per_class.values()) / n,
            sum(v[2] for v in per_class.values()) / n)


def accuracy(gold: Sequence[str], pred: Sequence[str]) -> float:
    if len(gold) == 0:
        raise ValueError("cannot score an empty label sequence")
    if len(gold) != len(pred):
        raise ValueError(f"gold/pred length mismatch: {len(gold)} vs {len(pred)}")
    return 100 * sum(g == p for g, p in zip(gold, pred)) / len(gold)


def confusion_matrix(gold: Sequence[str], pred: Sequence[str],
                     labels: Sequence[str]) -> list[list[int]]:
    """Counts with rows = gold and columns = predicted, in label-set order."""
    _check_labels(gold, pred, labels)
    index = {c: i for i, c in enumerate(labels)}
    matrix = [[0] * len(labels) for _ in labels]
    for g, p in zip(gold, pred):
        matrix[index[g]][index[p]] += 1
    return matrix


def gain_percent(f_new: float, f_base: float) -> str:
    """Relative F1 gain, formatted like the bracketed table percentages."""
    return f"{100 * (f_new - f_base) / f_base:+.2f}%"


@dataclass
class RunMetrics:
    seed: int
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    per_class: dict[str, tuple[float, float, float]]
    confusion: list[list[int]]

    @classmethod
    def from_predictions(cls, seed: int, gold: Sequence[str], pred: Sequence[str],
                         labels: Sequence[str]) -> "RunMetrics":
        p, r, f = macro_prf(gold, pred, labels)
        return cls(seed, p, r, f, accuracy(gold, pred),
                   per_class_prf(gold, pred, labels),
                   confusion_matrix(gold, pred, labels))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class": {c: list(v) for c, v in self.per_class.items()},
            "confusion": self.confusion,
        }

    @classmethod
    def from_json(cls, row: dict) -> "RunMetrics":
        return cls(row["seed"], row["macro_precision"], row["macro_recall"],
                   row["macro_f1"], row["accuracy"],
                   {c: tuple(v) for c, v in row["per_class"].items()},
                   [list(r) for r in row["confusion"]])


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _std(values: Sequence[float]) -> float:
    mu = _mean(values)
    return math.sqrt(sum((v - mu) ** 2 for v in values) / len(values))


@dataclass
class EvalReport:
    """Aggregate over the repeated runs of one (model, scheme) experiment."""

    model: str
    scheme: str
    labels: list[str]
    runs: list[RunMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_f1_std: float
    accuracy: float

    @classmethod
    def from_runs(cls, model: str, scheme: str, labels: Sequence[str],
                  runs: Sequence[RunMetrics]) -> "EvalReport":
        if not runs:
            raise ValueError("a report needs at least one run")
        return cls(
            model=model,
            scheme=scheme,
            labels=list(labels),
            runs=list(runs),
            macro_precision=_mean([r.macro_precision for r in runs]),
            macro_recall=_mean([r.macro_recall for r in runs]),
            macro_f1=_mean([r.macro_f1 for r in runs]),
            macro_f1_std=_std([r.macro_f1 for r in runs]),
            accuracy=_mean([r.accuracy for r in runs]),
        )

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    @property
    def confusion_matrix(self) -> list[list[int]]:
        """Representative confusion counts (first run)."""
        return self.runs[0].confusion

    def per_class_mean(self) -> dict[str, tuple[float, float, float]]:
        out = {}
        for c in self.labels:
            triples = [r.per_class[c] for r in self.runs]
            out[c] = tuple(_mean([t[i] for t in triples]) for i in range(3))
        return out

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "scheme": self.scheme,
            "labels": self.labels,
            "n_runs": self.n_runs,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "macro_f1_std": self.macro_f1_std,
            "accuracy": self.accuracy,
            "per_class_mean": {c: list(v) for c, v in self.per_class_mean().items()},
            "runs": [r.to_json() for r in self.runs],
            "zero_denominator_convention": "precision/recall fall back to 0",
        }

    @classmethod
    def from_json(cls, row: dict) -> "EvalReport":
        runs = [RunMetrics.from_json(r) for r in row["runs"]]
        report = cls.from_runs(row["model"], row["scheme"], row["labels"], runs)
        return report


def _scheme_sort_key(scheme: str) -> tuple:
    return (-int(scheme[0]) if scheme[:1].isdigit() else 0, scheme)


def render_results_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text grid: one row per model, P/R/F columns per scheme.

    Models named ``base+X`` get a gain line relating their F to ``base``'s
    F under the same scheme.
    """
    schemes = sorted({r.scheme for r in reports}, key=_scheme_sort_key)
    models = list(dict.fromkeys(r.model for r in reports))
    by_key = {(r.model, r.scheme): r for r in reports}

    width = max([len(m) for m in models] + [5])
    header = "Model".ljust(width) + "".join(
        f" | {s:^23}" for s in schemes)
    sub = " " * width + "".join(f" | {'P':>7}{'R':>8}{'F':>8}" for _ in schemes)
    lines = [header, sub, "-" * len(sub)]
    for model in models:
        cells = []
        gains = []
        for s in schemes:
            report = by_key.get((model, s))
            if report is None:
                cells.append(f" | {'-':>7}{'-':>8}{'-':>8}")
                gains.append(" | " + " " * 23)
                continue
            cells.append(f" | {report.macro_precision:7.2f}{report.macro_recall:8.2f}"
                         f"{report.macro_f1:8.2f}")
            base = by_key.get((model.split("+")[0], s)) if "+" in model else None
            if base is not None:
                gains.append(f" | {gain_percent(report.macro_f1, base.macro_f1):>23}")
            else:
                gains.append(" | " + " " * 23)
        lines.append(model.ljust(width) + "".join(cells))
        if any(g.strip(" |") for g in gains):
            lines.append(" " * width + "".join(gains))
    return "\n".join(lines) + "\n"


def render_confusion_csv(report: EvalReport) -> str:
    lines = ["gold\\pred," + ",".join(report.labels)]
    for label, row in zip(report.labels, report.confusion_matrix):
        lines.append(label + "," + ",".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def render_confusion_heatmap(report: EvalReport, path: Union[str, Path]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matrix = report.confusion_matrix
    fig, ax = plt.subplots(figsize=(1.2 * len(report.labels) + 2,
                                    1.0 * len(report.labels) + 1.5))
    image = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(report.labels)), report.labels, rotation=45, ha="right")
    ax.set_yticks(range(len(report.labels)), report.labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    ax.set_title(f"{report.model} / {report.scheme}")
    peak = max(max(row) for row in matrix) or 1
    for i, row in enumerate(matrix):
        for j, value in enumerate(row):
            ax.text(j, i, str(value), ha="center", va="center",
                    color="white" if value > peak / 2 else "black")
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(reports: Sequence[EvalReport], out_dir: Union[str, Path],
                heatmaps: bool = True) -> None:
    """Write machine-readable JSON plus table/matrix renderings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = [r.to_json() for r in reports]
    (out / "results.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "results.txt").write_text(render_results_table(reports), encoding="utf-8")
    for report in reports:
        stem = f"confusion_{report.model.replace('+', '_')}_{report.scheme}"
        (out / f"{stem}.csv").write_text(render_confusion_csv(report), encoding="utf-8")
        if heatmaps:
            render_confusion_heatmap(report, out / f"{stem}.png")
