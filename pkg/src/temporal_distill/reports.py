"""Accuracy-vs-label-fraction figures with CSV sidecars."""
from __future__ import annotations

import csv
import re
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .downstream import EvalReport, read_reports  # noqa: E402

CSV_FIELDS = ("label", "init_name", "fraction", "top1_accuracy", "n_train_used", "seed")
MODE_TITLES = {"linear_probe": "Linear probing", "fine_tune": "Fine-tuning"}


def fmt(value: float) -> str:
    """Six significant digits, the precision used in every CSV sidecar."""
    return f"{value:.6g}"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_") or "dataset"


def group_reports(reports: Sequence[EvalReport]) -> dict[tuple[str, str], list[EvalReport]]:
    groups: dict[tuple[str, str], list[EvalReport]] = defaultdict(list)
    for r in reports:
        groups[(r.dataset_name, r.mode)].append(r)
    return dict(groups)


def emit_plots(report_paths: Sequence[str | Path], out: str | Path) -> list[Path]:
    """One SVG (x: label fraction, y: top-1, one curve per report label) and one CSV per (dataset, mode).

    Returns the written paths, figures and CSVs interleaved.
    """
    reports = [r for p in report_paths for r in read_reports(p)]
    if not reports:
        raise ValueError("no evaluation reports to plot")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    written = []
    for (dataset, mode), group in sorted(group_reports(reports).items()):
        grids = {r.label: r.fractions for r in group}
        if len({tuple(g) for g in grids.values()}) > 1:
            listing = "; ".join(f"{label}: {grid}" for label, grid in grids.items())
            raise ValueError(f"fraction grids differ for {dataset}/{mode}: {listing}")

        stem = f"{_slug(dataset)}_{mode}"
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for r in group:
            ax.plot(r.fractions, [rec.top1_accuracy for rec in r.records], marker="o", label=r.label)
        ax.set_xscale("log")
        ax.set_xlabel("label fraction")
        ax.set_ylabel("top-1 accuracy")
        ax.set_ylim(0, 1)
        ax.set_title(f"{MODE_TITLES.get(mode, mode)}: {dataset}")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        svg = out / f"{stem}.svg"
        fig.savefig(svg, format="svg")
        plt.close(fig)

        sidecar = out / f"{stem}.csv"
        with sidecar.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in group:
                for rec in r.records:
                    w.writerow([r.label, r.init_name, fmt(rec.fraction), fmt(rec.top1_accuracy),
                                rec.n_train_used, rec.seed])
        written += [svg, sidecar]
    return written
