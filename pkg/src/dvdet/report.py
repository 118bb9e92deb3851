"""Evaluation reports: JSON, a plain-text table and matplotlib figures."""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from dvdet.model import Metrics, metrics_from_confusion

# Small, print-friendly defaults; fonts fixed so output does not depend on the host.
RC = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "svg.hashsalt": "dvdet",
}


def golden_size(width: float = 5.0) -> tuple[float, float]:
    return width, width * (np.sqrt(5.0) - 1.0) / 2.0


def pyplot():
    """Import pyplot on the Agg backend; deferred so non-plotting commands start fast."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


@contextmanager
def style() -> Iterator[None]:
    import matplotlib

    with matplotlib.rc_context(RC):
        yield


def save(fig, path: str | Path) -> Path:
    """Write ``fig`` without volatile metadata so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    pyplot().close(fig)
    return path


def pooled_metrics(folds: Sequence[Metrics]) -> Metrics:
    """Metrics of the summed confusion matrices; loss is the support-weighted mean."""
    if not folds:
        raise ValueError("no fold metrics to pool")
    C = np.sum([np.asarray(m.confusion) for m in folds], axis=0)
    losses = [(m.loss, m.n) for m in folds if m.loss is not None]
    loss_value = sum(l * n for l, n in losses) / sum(n for _, n in losses) if losses else None
    return metrics_from_confusion(C, folds[0].classes, loss_value)


def _pct(x: float | None) -> str:
    return "-" if x is None else f"{100.0 * x:.2f}"


def format_table(rows: Mapping[str, Metrics]) -> str:
    """Per-class Acc/Recall for each vulnerability class plus existence Acc.

    Class 0 is the safe class when present and gets no column of its own.
    """
    if not rows:
        return ""
    classes = next(iter(rows.values())).classes
    vuln = [c for c in classes if c != "safe"]
    head1 = ["Setting"] + [c for c in vuln for _ in (0, 1)] + ["Existence"]
    head2 = [""] + ["Acc", "Recall"] * len(vuln) + ["Acc"]
    body = []
    for name, m in rows.items():
        idx = {c: i for i, c in enumerate(m.classes)}
        cells = [name]
        for c in vuln:
            cells += [_pct(m.class_accuracy[idx[c]]), _pct(m.recall[idx[c]])]
        cells.append(_pct(m.existence_accuracy if m.existence_accuracy is not None else m.accuracy))
        body.append(cells)
    table = [head1, head2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(head1))]
    lines = []
    for r in table:
        lines.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))))
    lines.insert(2, "-" * len(lines[0]))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def plot_history(histories: Sequence[Sequence[Mapping[str, Any]]], path: str | Path) -> Path:
    """Training loss and validation accuracy per epoch, one line per fold."""
    plt = pyplot()
    with style():
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=golden_size(7.0))
        for f, hist in enumerate(histories):
            epochs = [h["epoch"] for h in hist]
            ax_loss.plot(epochs, [h["train_loss"] for h in hist], lw=1.2, label=f"fold {f}")
            val = [(h["epoch"], h["val"]["accuracy"]) for h in hist if h.get("val")]
            if val:
                ax_acc.plot(*zip(*val), lw=1.2, label=f"fold {f}")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("validation accuracy")
        ax_acc.set_ylim(-0.02, 1.02)
        for ax in (ax_loss, ax_acc):
            if ax.lines:
                ax.legend(frameon=False)
        fig.tight_layout()
        return save(fig, path)


def plot_confusion(metrics: Metrics, path: str | Path, title: str = "") -> Path:
    C = np.asarray(metrics.confusion)
    plt = pyplot()
    with style():
        fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(C), 1.0 + 0.8 * len(C)))
        ax.imshow(C, cmap="Blues", vmin=0, vmax=max(1, int(C.max())))
        ax.set_xticks(range(len(C)), metrics.classes)
        ax.set_yticks(range(len(C)), metrics.classes)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        half = C.max() / 2.0
        for i in range(len(C)):
            for j in range(len(C)):
                ax.text(j, i, str(C[i, j]), ha="center", va="center", color="white" if C[i, j] > half else "black")
        fig.tight_layout()
        return save(fig, path)


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, newline-terminated."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(
    out_dir: str | Path,
    rows: Mapping[str, Metrics],
    extra: Mapping[str, Any] | None = None,
    histories: Sequence[Sequence[Mapping[str, Any]]] | None = None,
    confusion_of: str | None = None,
) -> dict[str, Path]:
    """Write report.json, report.txt and figures; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"rows": {k: m.to_dict() for k, m in rows.items()}}
    if extra:
        payload.update(extra)
    written = {"json": out / "report.json", "text": out / "report.txt"}
    written["json"].write_text(dumps(payload), encoding="utf-8")
    written["text"].write_text(format_table(rows), encoding="utf-8")
    if histories:
        written["history_fig"] = plot_history(histories, out / "training_curve.png")
    if rows:
        key = confusion_of if confusion_of in rows else next(iter(rows))
        written["confusion_fig"] = plot_confusion(rows[key], out / "confusion.png", key)
    return written
