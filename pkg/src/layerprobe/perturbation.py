"""Coverage-guided adversarial perturbations, matched Gaussian noise, amplification.

The attack maximises

    sum(top-K rival logits) - logit[c] + coverage_weight * sum(selected neuron activations)

by projected gradient ascent on the input, where ``c`` is the seed's class and
neurons are conv channels (spatial mean of the post-ReLU map).
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, PreconditionError, TargetIndexError
from .model import ActivationCapture, Model
from .tensor import Tape, Tensor

DEFAULT_RATIOS = (0.25, 0.5, 1.0, 2.0, 4.0)
STRATEGIES = ("near-threshold", "rare", "random")


@dataclass(frozen=True)
class AttackConfig:
    delta: float = 0.1
    coverage_weight: float = 1.0
    top_k: int = 1
    neurons: int = 10
    step_size: float | None = None  # None -> delta / 10
    max_iterations: int = 50
    threshold: float = 0.25
    strategy: str = "near-threshold"
    norm: str = "linf"
    ratios: tuple[float, ...] = DEFAULT_RATIOS

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be positive, got {self.delta}")
        if self.top_k < 1 or self.neurons < 0 or self.max_iterations < 1:
            raise ConfigurationError("top_k >= 1, neurons >= 0 and max_iterations >= 1 required")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigurationError(f"step_size must be positive, got {self.step_size}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown neuron selection strategy {self.strategy!r}")
        if self.norm not in ("linf", "l2"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if not self.ratios or any(not r > 0 for r in self.ratios):
            raise ConfigurationError("amplification ratios must be positive")
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.delta / 10

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdversarialExample:
    seed_id: int
    perturbation: np.ndarray  # N_a at strength 1
    original_label: int
    adversarial_label: int
    success: bool
    iterations: int
    strength: float = 1.0
    coverage_trace: list[float] = field(default_factory=list)
    config_hash: str = ""


@dataclass(frozen=True)
class NoiseStats:
    mean: float
    std: float
    shape: tuple[int, ...]


@dataclass
class InputTriple:
    seed: np.ndarray
    adversarial: np.ndarray
    noisy: np.ndarray


# --------------------------------------------------------------------------- coverage


class CoverageState:
    """Fired flags over a fixed neuron universe, plus per-neuron firing tallies."""

    def __init__(self, total: int, threshold: float = 0.25):
        if total < 0:
            raise ConfigurationError("neuron count must be non-negative")
        self.total = total
        self.threshold = float(threshold)
        self.fired = np.zeros(total, dtype=bool)
        self.fire_counts = np.zeros(total, dtype=np.int64)

    @property
    def ratio(self) -> float:
        return float(self.fired.sum()) / self.total if self.total else 0.0

    def copy(self) -> "CoverageState":
        out = CoverageState(self.total, self.threshold)
        out.fired = self.fired.copy()
        out.fire_counts = self.fire_counts.copy()
        return out

    def merge(self, other: "CoverageState") -> "CoverageState":
        """Order-independent combination: OR of fired flags, sum of tallies."""
        if other.total != self.total:
            raise DimensionError(f"cannot merge coverage over {other.total} and {self.total} neurons")
        out = self.copy()
        out.fired |= other.fired
        out.fire_counts += other.fire_counts
        return out


def scaled_activations(capture: ActivationCapture) -> np.ndarray:
    """Per-layer min-max scaling of neuron activations; a flat layer scales to 0."""
    acts = np.asarray(capture.neurons, dtype=np.float64)
    out = np.zeros_like(acts)
    slices = capture.layer_slices or {"": slice(0, len(acts))}
    for sl in slices.values():
        seg = acts[sl]
        if seg.size == 0:
            continue
        lo, hi = seg.min(), seg.max()
        if hi > lo:
            out[sl] = (seg - lo) / (hi - lo)
    return out


def update_coverage(coverage: CoverageState, capture: ActivationCapture) -> CoverageState:
    """Mark neurons whose scaled activation exceeds the threshold; returns ``coverage``."""
    n = len(capture.neurons)
    if n > coverage.total:
        raise TargetIndexError(f"capture has neuron ids up to {n - 1}, universe has {coverage.total}")
    firing = scaled_activations(capture) > coverage.threshold
    coverage.fired[:n] |= firing
    coverage.fire_counts[:n] += firing
    return coverage


def select_neurons(
    capture: ActivationCapture,
    strategy: str,
    m: int,
    rng: np.random.Generator | int | None = None,
    threshold: float = 0.25,
    coverage: CoverageState | None = None,
) -> list[int]:
    """Pick ``m`` distinct neuron ids to push upward.

    * ``near-threshold``: scaled activation closest below ``threshold`` first
    * ``rare``: lowest historical firing count first (needs ``coverage``)
    * ``random``: uniform without replacement
    """
    total = len(capture.neurons)
    if m > total:
        raise ConfigurationError(f"cannot select {m} neurons out of {total}")
    if m <= 0:
        return []
    ids = np.arange(total)
    if strategy == "near-threshold":
        a = scaled_activations(capture)
        below = a < threshold
        order = np.lexsort((ids, np.abs(threshold - a), ~below))
    elif strategy == "rare":
        counts = coverage.fire_counts[:total] if coverage is not None else np.zeros(total, np.int64)
        order = np.lexsort((ids, counts))
    elif strategy == "random":
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        order = gen.choice(total, size=m, replace=False)
    else:
        raise ConfigurationError(f"unknown neuron selection strategy {strategy!r}")
    return [int(i) for i in order[:m]]


# --------------------------------------------------------------------------- attack


def _project(p: np.ndarray, delta: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.clip(p, -delta, delta)
    n = float(np.sqrt((p.astype(np.float64) ** 2).sum()))
    return p * np.float32(delta / n) if n > delta else p


def _direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g).astype(np.float32)
    n = float(np.sqrt((g.astype(np.float64) ** 2).sum()))
    return (g / n).astype(np.float32) if n > 0 else np.zeros_like(g, dtype=np.float32)


class _Probe:
    """One forward pass on a single image with the input watched."""

    def __init__(self, model: Model, image: np.ndarray):
        self.model = model
        self.x = Tensor(image[None])
        self.tape = Tape()
        with self.tape:
            self.tape.watch(self.x)
            self.result = model.forward(self.x)
        self.logits = self.result.logits.data[0]
        maps = {n: t.data[0] for n, t in self.result.feature_maps.items()}
        self.capture = ActivationCapture(
            feature_maps=maps,
            neurons=model.neuron_activations(maps),
            layer_slices=dict(model.neuron_slices),
        )

    @property
    def label(self) -> int:
        return int(self.logits.argmax())

    def objective_gradient(self, target: int, k: int, neuron_ids: Sequence[int], weight: float) -> np.ndarray:
        rivals = [int(i) for i in np.argsort(-self.logits, kind="stable") if i != target][:k]
        logits = self.result.logits
        with self.tape:
            obj = T.add(T.total(T.select(logits, (0, np.array(rivals)))), T.scale(T.select(logits, (0, target)), -1.0))
            if neuron_ids and weight:
                for name, sl in self.model.neuron_slices.items():
                    chans = [i - sl.start for i in neuron_ids if sl.start <= i < sl.stop]
                    if chans:
                        means = T.spatial_mean(self.result.feature_maps[name])
                        obj = T.add(obj, T.scale(T.total(T.select(means, (0, np.array(chans)))), weight))
        (g,) = self.tape.gradient(obj, [self.x])
        return g[0]


def generate_adversarial(
    model: Model,
    seed_image,
    true_label: int,
    config: AttackConfig,
    coverage: CoverageState | None = None,
    seed_id: int = 0,
    rng: np.random.Generator | int | None = None,
) -> AdversarialExample:
    """Projected gradient ascent until the label flips or the budget runs out.

    After every step the perturbation is projected onto the ``delta`` ball; the
    model sees ``clip(seed + p, 0, 1)``. The stored perturbation is the
    unclipped ``p``.
    ``coverage`` (fresh if omitted) is updated in place on every evaluation.
    """
    s = np.asarray(seed_image.data if isinstance(seed_image, Tensor) else seed_image, dtype=np.float32)
    if coverage is None:
        coverage = CoverageState(model.num_neurons, config.threshold)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    probe = _Probe(model, s)
    if probe.label != true_label:
        raise PreconditionError(f"seed {seed_id} is classified as {probe.label}, not {true_label}")
    update_coverage(coverage, probe.capture)
    trace = [coverage.ratio]
    p = np.zeros_like(s)
    label, it = probe.label, 0
    for it in range(1, config.max_iterations + 1):
        ids = select_neurons(probe.capture, config.strategy, min(config.neurons, model.num_neurons), gen,
                             config.threshold, coverage)
        g = probe.objective_gradient(true_label, config.top_k, ids, config.coverage_weight)
        p = _project(p + np.float32(config.step) * _direction(g, config.norm), config.delta, config.norm)
        probe = _Probe(model, np.clip(s + p, 0.0, 1.0))
        update_coverage(coverage, probe.capture)
        trace.append(coverage.ratio)
        label = probe.label
        if label != true_label:
            break
    return AdversarialExample(
        seed_id=seed_id,
        perturbation=p.astype(np.float32),
        original_label=int(true_label),
        adversarial_label=label,
        success=label != true_label,
        iterations=it,
        coverage_trace=trace,
        config_hash=config.digest(),
    )


def random_coverage_run(
    model: Model,
    seed_image,
    config: AttackConfig,
    iterations: int,
    rng: np.random.Generator | int | None = None,
    coverage: CoverageState | None = None,
) -> list[float]:
    """Coverage trace of an unguided walk: random-sign steps under the same budget."""
    s = np.asarray(seed_image, dtype=np.float32)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if coverage is None:
        coverage = CoverageState(model.num_neurons, config.threshold)
    update_coverage(coverage, _Probe(model, s).capture)
    trace = [coverage.ratio]
    p = np.zeros_like(s)
    for _ in range(iterations):
        g = gen.standard_normal(s.shape).astype(np.float32)
        p = _project(p + np.float32(config.step) * _direction(g, config.norm), config.delta, config.norm)
        update_coverage(coverage, _Probe(model, np.clip(s + p, 0.0, 1.0)).capture)
        trace.append(coverage.ratio)
    return trace


# --------------------------------------------------------------------------- noise


def noise_stats(n_a) -> NoiseStats:
    arr = np.asarray(n_a, dtype=np.float64)
    if arr.size == 0:
        raise PreconditionError("perturbation is empty")
    return NoiseStats(float(arr.mean()), float(arr.std()), tuple(arr.shape))


def match_gaussian_noise(n_a, seed: int | Sequence[int] = 0) -> np.ndarray:
    """I.i.d. normal noise with the mean, population std and shape of ``n_a``."""
    stats = noise_stats(n_a)
    rng = np.random.default_rng(seed)
    if stats.std == 0:
        return np.full(stats.shape, stats.mean, dtype=np.float32)
    return rng.normal(stats.mean, stats.std, size=stats.shape).astype(np.float32)


def amplify(noise, ratio: float) -> np.ndarray:
    if not ratio > 0:
        raise PreconditionError(f"amplification ratio must be positive, got {ratio}")
    arr = np.asarray(noise, dtype=np.float32)
    return arr if ratio == 1 else arr * np.float32(ratio)


def compose_inputs(seed, n_a, n_g, ratio: float = 1.0) -> InputTriple:
    s = np.asarray(seed, dtype=np.float32)
    a = np.asarray(n_a, dtype=np.float32)
    g = np.asarray(n_g, dtype=np.float32)
    if not s.shape == a.shape == g.shape:
        raise DimensionError(f"shapes differ: seed {s.shape}, N_a {a.shape}, N_g {g.shape}")
    return InputTriple(
        seed=s,
        adversarial=np.clip(s + amplify(a, ratio), 0.0, 1.0),
        noisy=np.clip(s + amplify(g, ratio), 0.0, 1.0),
    )


# --------------------------------------------------------------------------- corpus I/O


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    shape = tuple(obj["shape"])
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise DimensionError(f"payload has {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float32)


def example_to_record(ex: AdversarialExample, **extra) -> dict:
    rec = {
        "seed_id": ex.seed_id,
        "perturbation": encode_array(ex.perturbation),
        "original_label": ex.original_label,
        "adversarial_label": ex.adversarial_label,
        "success": ex.success,
        "iterations": ex.iterations,
        "coverage_trace": ex.coverage_trace,
        "config_hash": ex.config_hash,
    }
    rec.update(extra)
    return rec


def example_from_record(rec: dict) -> AdversarialExample:
    return AdversarialExample(
        seed_id=int(rec["seed_id"]),
        perturbation=decode_array(rec["perturbation"]),
        original_label=int(rec["original_label"]),
        adversarial_label=int(rec["adversarial_label"]),
        success=bool(rec["success"]),
        iterations=int(rec["iterations"]),
        coverage_trace=list(rec.get("coverage_trace", [])),
        config_hash=rec.get("config_hash", ""),
    )
