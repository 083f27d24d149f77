import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from layerprobe.model import LayerSpec, ModelSpec

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist10k"


def toy_spec(size=8, channels=(3, 4), num_classes=3):
    """Two 3x3 convs (same padding), one pool, one dense head."""
    layers = []
    for n, c in enumerate(channels, start=1):
        layers.append(LayerSpec("conv", f"block1_conv{n}", out_channels=c, kernel=3, padding=1))
        layers.append(LayerSpec("relu", f"block1_relu{n}"))
    layers += [LayerSpec("maxpool", "block1_pool"), LayerSpec("flatten", "flatten"),
               LayerSpec("dense", "logits", units=num_classes)]
    return ModelSpec((1, size, size), num_classes, tuple(layers))


def write_idx(path, arr, gz=False):
    arr = np.asarray(arr)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int32): 0x0C, np.dtype(np.float32): 0x0D}
    code = codes[arr.dtype]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = head + arr.astype(arr.dtype.newbyteorder(">")).tobytes()
    Path(path).write_bytes(gzip.compress(payload, mtime=0) if gz else payload)
    return Path(path)


def mnist_config(out_dir, **overrides):
    """Small but real run: narrow vgg-mini on a slice of the bundled digits."""
    cfg = {
        "dataset": {
            "format": "idx",
            "train": {"images": str(MNIST / "train-images-idx3-ubyte.gz"),
                      "labels": str(MNIST / "train-labels-idx1-ubyte.gz")},
            "test": {"images": str(MNIST / "t10k-images-idx3-ubyte.gz"),
                     "labels": str(MNIST / "t10k-labels-idx1-ubyte.gz")},
            "train_limit": 1000,
        },
        "model": {"arch": "vgg-mini", "widths": [4, 8, 8, 8], "dense_units": 32},
        "training": {"epochs": 2, "batch_size": 32, "learning_rate": 0.1},
        "attack": {"max_iterations": 20},
        "corpus": {"seeds_per_class": 2},
        "report": {"gallery_seeds": 2},
        "seeds": {"train": 1, "attack": 2, "noise": 3},
        "output_dir": str(out_dir),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def dump_config(path, cfg):
    Path(path).write_text(json.dumps(cfg, indent=2))
    return Path(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_test():
    from layerprobe.data import load_idx
    return load_idx(MNIST / "t10k-images-idx3-ubyte.gz", MNIST / "t10k-labels-idx1-ubyte.gz", 10, "test")


@pytest.fixture(scope="session")
def small_model():
    """Narrow vgg-mini trained briefly on a slice of the digits (about ten seconds)."""
    from layerprobe.data import load_idx
    from layerprobe.model import build_model, train, vgg_mini_spec
    tr = load_idx(MNIST / "train-images-idx3-ubyte.gz", MNIST / "train-labels-idx1-ubyte.gz", 10)
    model = build_model(vgg_mini_spec(widths=(4, 8, 8, 8), dense_units=32), seed=0)
    model, _ = train(model, tr.images[:2000], tr.labels[:2000], epochs=3, batch_size=32, learning_rate=0.1)
    return model


# ----------------------------------------------------------------- acceptance lines

ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number, line):
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
