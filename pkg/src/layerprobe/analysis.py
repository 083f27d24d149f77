"""Corpus statistics over deviation records.

A layer counts as compromised by an adversarial example when its D_a falls
strictly below the median D_g of that layer at the same strength.
"""
from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError
from .explain import DeviationRecord

Key = tuple[str, float]


@dataclass
class Marks:
    seed_id: int
    strength: float
    compromised: dict[str, bool]

    @property
    def count(self) -> int:
        return sum(self.compromised.values())


@dataclass
class Histogram:
    strength: float
    bins: list[int]  # bins[k] = examples with exactly k compromised layers

    @property
    def ultimate(self) -> int:
        return self.bins[-1]

    @property
    def zero(self) -> int:
        return self.bins[0]


@dataclass
class CoverageCurve:
    mode: str
    strength: float
    points: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class VulnerabilityReport:
    layers: list[str]
    strengths: list[float]
    thresholds: dict[Key, float]
    probabilities: dict[Key, float]
    control_probabilities: dict[Key, float]
    mean_adv: dict[Key, float]
    mean_noise: dict[Key, float]
    histograms: dict[float, Histogram]
    ranking: list[str]
    corpus_size: int

    def to_dict(self) -> dict:
        def table(d):
            return {f"{s:g}": {layer: d[(layer, s)] for layer in self.layers} for s in self.strengths}

        return {
            "layers": self.layers,
            "strengths": self.strengths,
            "corpus_size": self.corpus_size,
            "thresholds": table(self.thresholds),
            "compromise_probability": table(self.probabilities),
            "control_compromise_probability": table(self.control_probabilities),
            "mean_d_adv": table(self.mean_adv),
            "mean_d_noise": table(self.mean_noise),
            "histogram": {
                f"{s:g}": {"bins": h.bins, "ultimate": h.ultimate, "zero": h.zero}
                for s, h in self.histograms.items()
            },
            "ranking": self.ranking,
        }


def _groups(records: Iterable[DeviationRecord], attr: str) -> dict[Key, list[float]]:
    out: dict[Key, list[float]] = defaultdict(list)
    for rec in records:
        for layer, value in getattr(rec, attr).items():
            out[(layer, rec.strength)].append(value)
    return out


def compute_thresholds(
    records: Sequence[DeviationRecord],
    layers: Sequence[str] | None = None,
    strengths: Sequence[float] | None = None,
) -> dict[Key, float]:
    """Median D_g per (layer, strength); even counts average the middle pair."""
    groups = _groups(records, "d_noise")
    if layers is not None or strengths is not None:
        want_layers = layers if layers is not None else sorted({k[0] for k in groups})
        want_strengths = strengths if strengths is not None else sorted({k[1] for k in groups})
        for layer in want_layers:
            for s in want_strengths:
                if not groups.get((layer, float(s))):
                    raise DataError(f"no D_g values for layer {layer!r} at strength {s:g}")
    if not groups:
        raise DataError("no deviation records to threshold")
    return {key: float(statistics.median(vals)) for key, vals in groups.items()}


def mark_compromised(record: DeviationRecord, thresholds: dict[Key, float], use_noise: bool = False) -> Marks:
    """Per-layer ``D < threshold``; ``use_noise`` marks D_g instead (the median control)."""
    values = record.d_noise if use_noise else record.d_adv
    out = {}
    for layer, value in values.items():
        key = (layer, record.strength)
        if key not in thresholds:
            raise DataError(f"no threshold for layer {layer!r} at strength {record.strength:g}")
        out[layer] = value < thresholds[key]
    return Marks(record.seed_id, record.strength, out)


def compromise_probability(marks: Sequence[Marks]) -> dict[Key, float]:
    if not marks:
        raise DataError("compromise probability needs a non-empty corpus")
    hits: dict[Key, int] = defaultdict(int)
    seen: dict[Key, int] = defaultdict(int)
    for m in marks:
        for layer, flag in m.compromised.items():
            seen[(layer, m.strength)] += 1
            hits[(layer, m.strength)] += bool(flag)
    return {key: hits[key] / seen[key] for key in seen}


def compromised_count_histogram(marks: Sequence[Marks], strength: float, num_layers: int) -> Histogram:
    selected = [m for m in marks if m.strength == strength]
    if not selected:
        raise DataError(f"no marked examples at strength {strength:g}")
    bins = [0] * (num_layers + 1)
    for m in selected:
        bins[m.count] += 1
    return Histogram(float(strength), bins)


def rank_vulnerable_layers(
    probabilities: dict[Key, float],
    mean_adv: dict[Key, float],
    layers: Sequence[str],
    strength: float = 1.0,
) -> list[str]:
    """Most vulnerable first: probability desc, then mean D_a asc, then depth."""
    depth = {layer: i for i, layer in enumerate(layers)}
    return sorted(
        layers,
        key=lambda layer: (-probabilities[(layer, strength)], mean_adv[(layer, strength)], depth[layer]),
    )


def _means(groups: dict[Key, list[float]]) -> dict[Key, float]:
    # fsum is exact, so the result does not depend on record order
    return {k: math.fsum(v) / len(v) for k, v in groups.items()}


def build_report(records: Sequence[DeviationRecord], layers: Sequence[str], rank_strength: float = 1.0) -> VulnerabilityReport:
    """Full statistics for records of successful adversarial examples."""
    if not records:
        raise DataError("no deviation records (no successful adversarial examples?)")
    strengths = sorted({r.strength for r in records})
    thresholds = compute_thresholds(records, layers, strengths)
    marks = [mark_compromised(r, thresholds) for r in records]
    control = [mark_compromised(r, thresholds, use_noise=True) for r in records]
    probabilities = compromise_probability(marks)
    mean_adv = _means(_groups(records, "d_adv"))
    mean_noise = _means(_groups(records, "d_noise"))
    rank_at = rank_strength if rank_strength in strengths else strengths[len(strengths) // 2]
    return VulnerabilityReport(
        layers=list(layers),
        strengths=strengths,
        thresholds=thresholds,
        probabilities=probabilities,
        control_probabilities=compromise_probability(control),
        mean_adv=mean_adv,
        mean_noise=mean_noise,
        histograms={s: compromised_count_histogram(marks, s, len(layers)) for s in strengths},
        ranking=rank_vulnerable_layers(probabilities, mean_adv, layers, rank_at),
        corpus_size=len({r.seed_id for r in records}),
    )


def build_coverage_curves(runs: Iterable[tuple[str, float, Sequence[float]]]) -> list[CoverageCurve]:
    """One curve per (mode, strength) run; a decreasing ratio is a tracking bug."""
    curves = []
    for mode, strength, ratios in runs:
        ratios = list(ratios)
        for i in range(1, len(ratios)):
            if ratios[i] < ratios[i - 1]:
                raise DataError(f"{mode} coverage decreases at iteration {i}: {ratios[i - 1]} -> {ratios[i]}")
        curves.append(CoverageCurve(mode, float(strength), list(enumerate(ratios))))
    return curves


def mean_curve(traces: Sequence[Sequence[float]]) -> list[float]:
    """Pointwise mean of traces, each held at its final value once it ends."""
    traces = [list(t) for t in traces if len(t)]
    if not traces:
        return []
    n = max(len(t) for t in traces)
    return [sum(t[min(i, len(t) - 1)] for t in traces) / len(traces) for i in range(n)]
