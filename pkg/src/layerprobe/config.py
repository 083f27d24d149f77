"""Run configuration: a single JSON document validated against a schema."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .errors import ValidationError
from .model import ModelSpec, vgg_mini_spec
from .perturbation import STRATEGIES, AttackConfig

_SPLIT_SCHEMA = {
    "type": "object",
    "properties": {
        "images": {"type": "string"},
        "labels": {"type": "string"},
        "dir": {"type": "string"},
    },
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["dataset"],
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "required": ["format", "train", "test"],
            "additionalProperties": False,
            "properties": {
                "format": {"enum": ["idx", "png-dir"]},
                "train": _SPLIT_SCHEMA,
                "test": _SPLIT_SCHEMA,
                "num_classes": {"type": "integer", "minimum": 2},
                "train_limit": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "arch": {"enum": ["vgg-mini", "custom"]},
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "dense_units": {"type": "integer", "minimum": 1},
                "spec": {"type": "object"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "minimum": 0},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "coverage_weight": {"type": "number"},
                "top_k": {"type": "integer", "minimum": 1},
                "neurons": {"type": "integer", "minimum": 0},
                "step_size": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "max_iterations": {"type": "integer", "minimum": 1},
                "threshold": {"type": "number"},
                "strategy": {"enum": list(STRATEGIES)},
                "norm": {"enum": ["linf", "l2"]},
                "ratios": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
            },
        },
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"seeds_per_class": {"type": "integer", "minimum": 1}},
        },
        "report": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"gallery_seeds": {"type": "integer", "minimum": 0}},
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("train", "attack", "noise")},
        },
        "output_dir": {"type": "string"},
    },
}

DEFAULTS: dict[str, Any] = {
    "model": {"arch": "vgg-mini"},
    "training": {"epochs": 5, "batch_size": 32, "learning_rate": 0.05},
    "attack": {},
    "corpus": {"seeds_per_class": 5},
    "report": {"gallery_seeds": 3},
    "seeds": {"train": 0, "attack": 0, "noise": 0},
    "output_dir": "layerprobe-out",
}


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunConfig:
    raw: dict[str, Any]
    base_dir: Path

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base_dir=".", seed: int | None = None, out: str | None = None) -> "RunConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ValidationError(f"config invalid at {where}: {exc.message}") from exc
        raw = copy.deepcopy(DEFAULTS)
        for key, value in doc.items():
            if isinstance(value, dict) and key in raw and isinstance(raw[key], dict):
                raw[key].update(value)
            else:
                raw[key] = copy.deepcopy(value)
        raw["dataset"].setdefault("num_classes", 10)
        raw["dataset"].setdefault("train_limit", None)
        raw["attack"] = AttackConfig(**raw["attack"]).to_dict()
        if seed is not None:
            raw["seeds"] = {k: int(seed) for k in ("train", "attack", "noise")}
        if out is not None:
            raw["output_dir"] = str(out)
        cfg = cls(raw, Path(base_dir))
        cfg.model_spec()  # fail early on a bad architecture
        return cfg

    @classmethod
    def load(cls, path, seed: int | None = None, out: str | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except ValueError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(doc, path.parent, seed=seed, out=out)

    # ---------------------------------------------------------------- accessors

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    @property
    def seeds(self) -> dict[str, int]:
        return self.raw["seeds"]

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(**self.raw["attack"])

    @property
    def num_classes(self) -> int:
        return self.raw["dataset"]["num_classes"]

    def dataset_paths(self, split: str) -> list[Path]:
        ds = self.raw["dataset"]
        entry = ds[split]
        if ds["format"] == "idx":
            if set(entry) != {"images", "labels"}:
                raise ValidationError(f"dataset.{split}: IDX format needs 'images' and 'labels'")
            return [self.resolve(entry["images"]), self.resolve(entry["labels"])]
        if set(entry) != {"dir"}:
            raise ValidationError(f"dataset.{split}: png-dir format needs 'dir'")
        return [self.resolve(entry["dir"])]

    def check_paths(self, *splits: str) -> None:
        for split in splits:
            for p in self.dataset_paths(split):
                if not p.exists():
                    raise ValidationError(f"dataset.{split}: {p} does not exist")

    def model_spec(self, input_shape=(1, 28, 28)) -> ModelSpec:
        m = self.raw["model"]
        if m.get("arch", "vgg-mini") == "custom":
            if "spec" not in m:
                raise ValidationError("model.arch 'custom' needs model.spec")
            try:
                return ModelSpec.from_dict(m["spec"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"model.spec malformed: {exc}") from exc
        kwargs = {}
        if "widths" in m:
            kwargs["widths"] = tuple(m["widths"])
        if "dense_units" in m:
            kwargs["dense_units"] = m["dense_units"]
        return vgg_mini_spec(tuple(input_shape), self.num_classes, **kwargs)

    # ---------------------------------------------------------------- hashes

    @property
    def config_hash(self) -> str:
        return _digest(self.raw | {"output_dir": None})

    @property
    def train_hash(self) -> str:
        r = self.raw
        return _digest({"dataset": r["dataset"], "model": r["model"], "training": r["training"],
                        "seed": r["seeds"]["train"]})

    @property
    def attack_hash(self) -> str:
        attack = {k: v for k, v in self.raw["attack"].items() if k != "ratios"}
        return _digest({"train": self.train_hash, "attack": attack, "corpus": self.raw["corpus"],
                        "seed": self.raw["seeds"]["attack"]})

    @property
    def analysis_hash(self) -> str:
        return _digest({"attack": self.attack_hash, "ratios": self.raw["attack"]["ratios"],
                        "seed": self.raw["seeds"]["noise"]})

