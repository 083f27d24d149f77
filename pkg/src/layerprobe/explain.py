"""Per-layer Grad-CAM heatmaps and cosine-similarity deviations between them."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError
from .model import ActivationCapture, Model, predict_with_capture
from .perturbation import InputTriple


@dataclass
class Heatmap:
    layer: str
    grid: np.ndarray  # resized to the model input, values in [0, 1]
    native: np.ndarray  # normalized map at the layer's own resolution

    @property
    def native_dims(self) -> tuple[int, int]:
        return self.native.shape

    @property
    def resized_dims(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass
class DeviationRecord:
    seed_id: int
    strength: float
    d_adv: dict[str, float] = field(default_factory=dict)
    d_noise: dict[str, float] = field(default_factory=dict)


def resize_bilinear(grid, dims: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-d grid."""
    src = np.asarray(grid, dtype=np.float64)
    if src.ndim != 2 or min(src.shape) < 1:
        raise DimensionError(f"need a non-empty 2-d grid, got shape {src.shape}")
    h, w = int(dims[0]), int(dims[1])
    if h < 1 or w < 1:
        raise DimensionError(f"target dims must be positive, got {dims}")
    if (h, w) == src.shape:
        return src.copy()

    def coords(n_out, n_in):
        pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, src.shape[0])
    x0, x1, fx = coords(w, src.shape[1])
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy[:, None]) + bottom * fy[:, None]
    # clamp rounding drift to the source range
    return np.clip(out, src.min(), src.max())


def heatmap_from_maps(layer: str, feature_map: np.ndarray, gradient: np.ndarray, dims: tuple[int, int]) -> Heatmap:
    """Grad-CAM: relu(sum_k mean(grad_k) * A_k), min-max normalized, then resized."""
    if feature_map.shape != gradient.shape or feature_map.ndim != 3:
        raise DimensionError(f"{layer}: feature map {feature_map.shape} vs gradient {gradient.shape}")
    weights = gradient.astype(np.float64).mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, feature_map.astype(np.float64), axes=1), 0.0)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        native = (raw - lo) / (hi - lo)
    else:
        native = np.ones_like(raw) if hi > 0 else np.zeros_like(raw)
    grid = resize_bilinear(native, dims)
    peak = grid.max()
    if peak > 0:
        # off-grid peaks can be lost by interpolation; keep max == 1
        grid = grid / peak
    return Heatmap(layer, grid, native)


def _input_dims(model: Model) -> tuple[int, int]:
    return tuple(model.spec.input_shape[1:])


def heatmaps_from_capture(model: Model, capture: ActivationCapture, layers=None) -> dict[str, Heatmap]:
    names = model.conv_layers if layers is None else layers
    return {
        n: heatmap_from_maps(n, capture.feature_maps[n], capture.gradients[n], _input_dims(model)) for n in names
    }


def grad_cam(model: Model, image, target_class: int, layer: str) -> Heatmap:
    if layer not in model.conv_layers:
        raise ConfigurationError(f"{layer!r} is not a conv layer of this model")
    _, cap = predict_with_capture(model, image, capture=True, target_class=target_class)
    return heatmaps_from_capture(model, cap, [layer])[layer]


def grad_cams(model: Model, image, target_class: int) -> dict[str, Heatmap]:
    """Heatmaps for every conv layer from a single forward/backward pass."""
    _, cap = predict_with_capture(model, image, capture=True, target_class=target_class)
    return heatmaps_from_capture(model, cap)


def cosine_similarity(h1, h2) -> float:
    """Cosine of the angle between flattened heatmaps.

    Both all-zero gives 1, exactly one all-zero gives 0.
    """
    a = np.asarray(h1.grid if isinstance(h1, Heatmap) else h1, dtype=np.float64)
    b = np.asarray(h2.grid if isinstance(h2, Heatmap) else h2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"heatmap dims differ: {a.shape} vs {b.shape}")
    a, b = a.reshape(-1), b.reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def layer_deviations(
    model: Model,
    triple: InputTriple,
    strength: float,
    seed_id: int = 0,
    target_class: int | None = None,
    seed_maps: dict[str, Heatmap] | None = None,
) -> DeviationRecord:
    """D_a and D_g for every conv layer, all heatmaps anchored on the seed's class.

    ``seed_maps`` lets callers reuse the seed heatmaps across strengths.
    """
    if target_class is None:
        target_class = model.classify(triple.seed)
    base = seed_maps if seed_maps is not None else grad_cams(model, triple.seed, target_class)
    adv = grad_cams(model, triple.adversarial, target_class)
    noisy = grad_cams(model, triple.noisy, target_class)
    rec = DeviationRecord(seed_id=seed_id, strength=float(strength))
    for name in model.conv_layers:
        rec.d_adv[name] = cosine_similarity(base[name], adv[name])
        rec.d_noise[name] = cosine_similarity(base[name], noisy[name])
    return rec


def to_pgm(grid, comment: str = "") -> bytes:
    """8-bit binary PGM (P5) of a [0, 1] grid."""
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"PGM needs a 2-d grid, got shape {arr.shape}")
    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    head = "P5\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    head += f"{arr.shape[1]} {arr.shape[0]}\n255\n"
    return head.encode("ascii") + pixels.tobytes()


def write_pgm(path, grid, comment: str = "") -> None:
    Path(path).write_bytes(to_pgm(grid, comment))
