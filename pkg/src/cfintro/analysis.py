"""Reports over engine output: attribute rankings, bias tables, montages and
run summaries."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pgm
from .engine import MinimalChangeResult, NoFlipError, Trajectory

ATTRIBUTE_THRESHOLD = 0.5


# -- attribute rankings -------------------------------------------------------

@dataclass(frozen=True)
class RankedChange:
    name: str
    delta: float
    magnitude: float


@dataclass
class AttributeDeltaRanking:
    entries: list[RankedChange]
    k: int = 5

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def deltas(self) -> list[float]:
        return [e.delta for e in self.entries]

    def to_list(self) -> list[dict]:
        return [{"attribute": e.name, "delta": e.delta} for e in self.entries]


def rank_attribute_changes(initial, final, names: Sequence[str], k: int = 5
                           ) -> AttributeDeltaRanking:
    """Attributes sorted by ``|final - initial|``, largest first, ties by index."""
    a = np.asarray(initial, dtype=np.float64).ravel()
    b = np.asarray(final, dtype=np.float64).ravel()
    if not (len(a) == len(b) == len(names)):
        raise ValueError(f"length mismatch: {len(a)} initial, {len(b)} final, {len(names)} names")
    if k < 1:
        raise ValueError("k must be at least 1")
    d = b - a
    order = sorted(range(len(d)), key=lambda i: (-abs(d[i]), i))
    entries = [RankedChange(names[i], float(d[i]), float(abs(d[i]))) for i in order[:k]]
    return AttributeDeltaRanking(entries, k)


# -- bias report ---------------------------------------------------------------

@dataclass
class BiasReport:
    """Per-class frequency of each attribute after thresholding at ``threshold``."""

    classes: list[str]
    attributes: list[str]
    counts: dict[str, int]
    present: dict[str, dict[str, int]]
    threshold: float = ATTRIBUTE_THRESHOLD

    def fraction(self, cls: str, attribute: str) -> float:
        n = self.counts[cls]
        return self.present[cls][attribute] / n if n else 0.0

    def rows(self) -> list[dict]:
        return [{"class": c, "attribute": a, "fraction": self.fraction(c, a),
                 "count": self.present[c][a]}
                for c in self.classes for a in self.attributes]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["class", "attribute", "fraction", "count"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({**r, "fraction": f"{r['fraction']:.6f}"})
        return buf.getvalue()

    def to_jsonl(self) -> str:
        head = {"threshold": self.threshold, "counts": self.counts}
        return "\n".join(json.dumps(r) for r in [head, *self.rows()]) + "\n"


def bias_report(attributes, labels, attribute_names: Sequence[str],
                class_names: Sequence[str] | None = None,
                threshold: float = ATTRIBUTE_THRESHOLD) -> BiasReport:
    """Count, per class, how often each attribute is at or above ``threshold``.

    Only classes that occur in ``labels`` get rows.
    """
    if attributes is None:
        raise ValueError("dataset carries no attribute annotations")
    attrs = np.asarray(attributes, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if attrs.ndim != 2 or attrs.shape[0] != len(labels):
        raise ValueError(f"attributes {attrs.shape} do not match {len(labels)} labels")
    if attrs.shape[1] != len(attribute_names):
        raise ValueError("attribute name count does not match attribute columns")

    def name(c: int) -> str:
        return class_names[c] if class_names is not None else str(c)

    classes, counts, present = [], {}, {}
    for c in np.unique(labels):
        rows = attrs[labels == c] >= threshold
        key = name(int(c))
        classes.append(key)
        counts[key] = int(len(rows))
        present[key] = {a: int(rows[:, j].sum()) for j, a in enumerate(attribute_names)}
    return BiasReport(classes, list(attribute_names), counts, present, threshold)


def bias_report_from_manifest(directory: str | os.PathLike,
                              class_names: Sequence[str] | None = None,
                              threshold: float = ATTRIBUTE_THRESHOLD) -> BiasReport:
    """Rebuild the report from an exported manifest alone."""
    from .datasets import read_manifest

    rows = read_manifest(directory)
    if not rows or "attributes" not in rows[0]:
        raise ValueError(f"{directory}: manifest carries no attribute annotations")
    names = list(rows[0]["attributes"])
    attrs = np.array([[r["attributes"][a] for a in names] for r in rows])
    labels = np.array([r["label"] for r in rows])
    return bias_report(attrs, labels, names, class_names, threshold)


# -- montages ------------------------------------------------------------------

def montage_frames(n_steps: int, stride: int) -> list[int]:
    if n_steps < 1:
        raise ValueError("empty trajectory")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    frames = list(range(0, n_steps, stride))
    if frames[-1] != n_steps - 1:
        frames.append(n_steps - 1)
    return frames


def _as_2d(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.reshape(1, -1) if image.ndim == 1 else image


def trajectory_montage(trajectory: Trajectory, stride: int) -> np.ndarray:
    """Every ``stride``-th frame plus the final one, in a row, 1-px black gaps."""
    frames = montage_frames(len(trajectory.steps), stride)
    panels = [_as_2d(trajectory.steps[i].image) for i in frames]
    h = panels[0].shape[0]
    gap = np.zeros((h, 1))
    row = [panels[0]]
    for p in panels[1:]:
        row += [gap, p]
    return np.hstack(row)


def export_trajectory_montage(trajectory: Trajectory, stride: int,
                              path: str | os.PathLike) -> Path:
    path = Path(path)
    pgm.write_pgm(path, np.clip(trajectory_montage(trajectory, stride), 0.0, 1.0))
    return path


# -- run summaries ---------------------------------------------------------------

SUMMARY_KEYS = {"kind", "outcome", "steps", "probs", "delta", "lambda", "mode", "target_class"}
OPTIONAL_KEYS = {"ranking", "sweep", "iterations", "query"}


def summarize_run(run, initial=None, attribute_names: Sequence[str] | None = None,
                  k: int = 5) -> dict:
    """One flat record describing a trajectory, a bisection result, or a failed
    bisection (:class:`NoFlipError`).

    Keys always present: kind, outcome, steps, probs, delta, lambda, mode,
    target_class. Bisection records add ``sweep`` and ``iterations``; pass the
    starting attributes and their names to add the change ranking.
    """
    if isinstance(run, NoFlipError):
        return {"kind": "minimal", "outcome": "no_flip", "steps": 0, "probs": None,
                "delta": None, "lambda": None, "mode": "criticism", "target_class": None,
                "sweep": run.sweep, "iterations": 0}
    extra = {}
    kind = "trajectory"
    if isinstance(run, MinimalChangeResult):
        extra = {"sweep": run.sweep, "iterations": run.iterations}
        kind = "minimal"
        run = run.trajectory
    final = run.final
    rec = {"kind": kind, "outcome": run.outcome, "steps": len(run.steps),
           "probs": final.probs.tolist(), "delta": final.dist_term, "lambda": run.lam,
           "mode": run.mode, "target_class": run.target_class, **extra}
    if attribute_names is not None and initial is not None:
        rec["ranking"] = rank_attribute_changes(initial, final.variables,
                                                attribute_names, k).to_list()
    return rec


def format_summary(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def parse_summary(text: str) -> dict:
    """Parse and check a record written by :func:`format_summary`."""
    record = json.loads(text)
    keys = set(record)
    missing = SUMMARY_KEYS - keys
    unknown = keys - SUMMARY_KEYS - OPTIONAL_KEYS
    if missing or unknown:
        raise ValueError(f"bad summary record: missing {sorted(missing)}, unknown {sorted(unknown)}")
    if record["kind"] not in ("trajectory", "minimal"):
        raise ValueError(f"unknown summary kind {record['kind']!r}")
    return record
