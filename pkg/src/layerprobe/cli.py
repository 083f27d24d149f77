"""``layerprobe train|attack|analyze|report`` command line."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .analysis import build_coverage_curves, build_report, mean_curve
from .config import RunConfig
from .data import DatasetHandle, load_idx, load_png_dir
from .errors import DataError, LayerProbeError, ValidationError
from .explain import DeviationRecord, grad_cams, layer_deviations, to_pgm
from .model import Model, build_model, capture_neurons, train
from .perturbation import (
    CoverageState,
    compose_inputs,
    encode_array,
    example_from_record,
    example_to_record,
    generate_adversarial,
    match_gaussian_noise,
    random_coverage_run,
    update_coverage,
)

logger = logging.getLogger("layerprobe")

CHECKPOINT = "checkpoint.lpck"
TRAIN_REPORT = "train_report.json"
CORPUS = "corpus.jsonl"
COVERAGE = "coverage.csv"
ATTACK_SUMMARY = "attack_summary.json"
DEVIATIONS = "deviations.csv"
SUMMARY = "summary.json"


# --------------------------------------------------------------------------- output discipline


class Outputs:
    """Collects output files in memory and publishes them atomically on success.

    Each file is written to a temporary sibling and renamed into place only
    after the command has produced every output, so a failure leaves nothing.
    """

    def __init__(self, out_dir: Path, command: str, config_hash: str):
        self.out_dir = out_dir
        self.command = command
        self.config_hash = config_hash
        self.files: dict[str, bytes] = {}

    def add(self, name: str, payload: bytes | str) -> None:
        self.files[name] = payload.encode() if isinstance(payload, str) else payload

    def add_json(self, name: str, obj) -> None:
        self.add(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def add_csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        self.add(name, buf.getvalue())

    def commit(self) -> None:
        manifest = {
            "command": self.command,
            "config_hash": self.config_hash,
            "files": {n: hashlib.sha256(b).hexdigest() for n, b in sorted(self.files.items())},
        }
        self.add_json(f"manifest-{self.command}.json", manifest)
        temps = []
        try:
            for name, payload in self.files.items():
                final = self.out_dir / name
                final.parent.mkdir(parents=True, exist_ok=True)
                tmp = final.with_name(f".{final.name}.tmp{os.getpid()}")
                tmp.write_bytes(payload)
                temps.append((tmp, final))
            for tmp, final in temps:
                os.replace(tmp, final)
        except BaseException:
            for tmp, _ in temps:
                tmp.unlink(missing_ok=True)
            raise


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------- loading


def load_split(cfg: RunConfig, split: str) -> DatasetHandle:
    paths = cfg.dataset_paths(split)
    n = cfg.num_classes
    if cfg.raw["dataset"]["format"] == "idx":
        ds = load_idx(paths[0], paths[1], n, split)
    else:
        ds = load_png_dir(paths[0], n, split)
    if split == "train" and cfg.raw["dataset"]["train_limit"]:
        k = cfg.raw["dataset"]["train_limit"]
        ds = DatasetHandle(ds.images[:k], ds.labels[:k], ds.num_classes, split)
    return ds


def load_model(cfg: RunConfig) -> Model:
    path = cfg.output_dir / CHECKPOINT
    if not path.is_file():
        raise ValidationError(f"{path} not found; run 'layerprobe train' first")
    model = ckpt.load_checkpoint(path)
    found = model.metadata.get("train_hash")
    if found != cfg.train_hash:
        raise ValidationError(f"checkpoint was trained under config {found}, current config is {cfg.train_hash}")
    return model


def load_corpus(cfg: RunConfig) -> list[dict]:
    path = cfg.output_dir / CORPUS
    if not path.is_file():
        raise ValidationError(f"{path} not found; run 'layerprobe attack' first")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
        if rec.get("config_hash") != cfg.attack_hash:
            raise ValidationError(
                f"{path}:{lineno}: corpus produced under config {rec.get('config_hash')}, "
                f"current config is {cfg.attack_hash}"
            )
        records.append(rec)
    if not records:
        raise DataError(f"{path}: corpus is empty")
    return records


# --------------------------------------------------------------------------- workers

_WORKER: dict = {}


def _init_worker(model_bytes: bytes, payload: dict) -> None:
    _WORKER["model"] = ckpt.from_bytes(model_bytes)
    _WORKER.update(payload)


def _run_pool(fn, items, jobs: int, model: Model, payload: dict) -> list:
    if jobs <= 1 or len(items) <= 1:
        _init_worker(ckpt.to_bytes(model), payload)
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(ckpt.to_bytes(model), payload)) as pool:
        return list(pool.map(fn, items))


def _attack_one(item) -> dict:
    seed_id, image, label = item
    model, config, base = _WORKER["model"], _WORKER["attack"], _WORKER["seed"]
    ex = generate_adversarial(model, image, label, config, seed_id=seed_id, rng=np.random.default_rng([base, seed_id]))
    ex.config_hash = _WORKER["hash"]
    random_trace = random_coverage_run(model, image, config, ex.iterations,
                                       rng=np.random.default_rng([base, seed_id, 1]))
    return example_to_record(ex, true_label=int(label), random_coverage_trace=random_trace)


def _analyze_one(item) -> list[DeviationRecord]:
    seed_id, image, n_a = item
    model, ratios, base = _WORKER["model"], _WORKER["ratios"], _WORKER["seed"]
    target = model.classify(image)
    n_g = match_gaussian_noise(n_a, seed=[base, seed_id])
    seed_maps = grad_cams(model, image, target)
    out = []
    for r in ratios:
        triple = compose_inputs(image, n_a, n_g, r)
        out.append(layer_deviations(model, triple, r, seed_id=seed_id, target_class=target, seed_maps=seed_maps))
    return out


# --------------------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, jobs: int = 1) -> Outputs:
    cfg.check_paths("train", "test")
    tr = load_split(cfg, "train")
    te = load_split(cfg, "test")
    spec = cfg.model_spec(tr.images.shape[1:])
    t = cfg.raw["training"]
    model = build_model(spec, cfg.seeds["train"])
    model, report = train(model, tr.images, tr.labels, t["epochs"], t["batch_size"], t["learning_rate"],
                          cfg.seeds["train"], test=(te.images, te.labels))
    model.metadata.update(train_hash=cfg.train_hash, config_hash=cfg.config_hash, seeds=dict(cfg.seeds))
    out = Outputs(cfg.output_dir, "train", cfg.config_hash)
    out.add(CHECKPOINT, ckpt.to_bytes(model))
    out.add_json(TRAIN_REPORT, {
        "config_hash": cfg.config_hash,
        "train_hash": cfg.train_hash,
        "seeds": cfg.seeds,
        "parameter_count": model.parameter_count,
        "train_size": len(tr),
        "test_size": len(te),
        **report.to_dict(),
    })
    logger.info("test accuracy %.4f", report.test_accuracy)
    return out


def select_seeds(model: Model, test: DatasetHandle, per_class: int, seed: int) -> list[int]:
    """Up to ``per_class`` correctly classified test indices per class, in shuffled order."""
    order = np.random.default_rng(seed).permutation(len(test))
    pred = model.logits(test.images[order]).argmax(axis=1)
    chosen: dict[int, list[int]] = {c: [] for c in range(test.num_classes)}
    for idx, p in zip(order, pred):
        label = int(test.labels[idx])
        if p == label and len(chosen[label]) < per_class:
            chosen[label].append(int(idx))
    return sorted(i for ids in chosen.values() for i in ids)


def cmd_attack(cfg: RunConfig, jobs: int = 1) -> Outputs:
    cfg.check_paths("test")
    model = load_model(cfg)
    te = load_split(cfg, "test")
    attack = cfg.attack
    seeds = select_seeds(model, te, cfg.raw["corpus"]["seeds_per_class"], cfg.seeds["attack"])
    if not seeds:
        raise DataError("no correctly classified seeds available")
    items = [(i, te.images[i], int(te.labels[i])) for i in seeds]
    payload = {"attack": attack, "seed": cfg.seeds["attack"], "hash": cfg.attack_hash}
    records = sorted(_run_pool(_attack_one, items, jobs, model, payload), key=lambda r: r["seed_id"])

    # amplified-perturbation campaign: cumulative coverage over seeds, per strength
    campaign = {r: CoverageState(model.num_neurons, attack.threshold) for r in attack.ratios}
    amplified = {r: [] for r in attack.ratios}
    for rec in records:
        s = te.images[rec["seed_id"]]
        n_a = example_from_record(rec).perturbation
        for r in attack.ratios:
            x = np.clip(s + np.float32(r) * n_a, 0.0, 1.0)
            update_coverage(campaign[r], capture_neurons(model, x))
            amplified[r].append(campaign[r].ratio)

    runs = [("adversarial", 1.0, mean_curve([r["coverage_trace"] for r in records])),
            ("random", 1.0, mean_curve([r["random_coverage_trace"] for r in records]))]
    runs += [("amplified", r, amplified[r]) for r in attack.ratios]
    curves = build_coverage_curves(runs)

    successes = sum(r["success"] for r in records)
    out = Outputs(cfg.output_dir, "attack", cfg.config_hash)
    out.add(CORPUS, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    out.add_csv(COVERAGE, ["mode", "strength", "step", "coverage"],
                [(c.mode, _fmt(c.strength), i, _fmt(v)) for c in curves for i, v in c.points])
    out.add_json(ATTACK_SUMMARY, {
        "config_hash": cfg.config_hash,
        "attack_hash": cfg.attack_hash,
        "seeds": cfg.seeds,
        "attack": attack.to_dict(),
        "attempted": len(records),
        "successful": successes,
        "yield_rate": successes / len(records),
        "mean_final_coverage": {
            "adversarial": float(np.mean([r["coverage_trace"][-1] for r in records])),
            "random": float(np.mean([r["random_coverage_trace"][-1] for r in records])),
        },
    })
    logger.info("attack yield %d/%d", successes, len(records))
    return out


def analyze_records(model: Model, test: DatasetHandle, records: list[dict], ratios, noise_seed: int,
                    jobs: int = 1) -> list[DeviationRecord]:
    items = []
    for rec in records:
        if rec["success"]:
            ex = example_from_record(rec)
            items.append((ex.seed_id, test.images[ex.seed_id], ex.perturbation))
    if not items:
        raise DataError("corpus has no successful adversarial examples")
    nested = _run_pool(_analyze_one, items, jobs, model, {"ratios": list(ratios), "seed": noise_seed})
    return [r for group in nested for r in group]


def cmd_analyze(cfg: RunConfig, jobs: int = 1) -> Outputs:
    cfg.check_paths("test")
    model = load_model(cfg)
    records = load_corpus(cfg)
    te = load_split(cfg, "test")
    ratios = cfg.attack.ratios
    devs = analyze_records(model, te, records, ratios, cfg.seeds["noise"], jobs)
    report = build_report(devs, model.conv_layers)
    marks = {(r.seed_id, r.strength, layer): r.d_adv[layer] < report.thresholds[(layer, r.strength)]
             for r in devs for layer in model.conv_layers}
    rows = [
        (r.seed_id, _fmt(r.strength), layer, _fmt(r.d_adv[layer]), _fmt(r.d_noise[layer]),
         int(marks[(r.seed_id, r.strength, layer)]))
        for r in devs for layer in model.conv_layers
    ]
    successes = sum(r["success"] for r in records)
    summary = {
        "config_hash": cfg.config_hash,
        "analysis_hash": cfg.analysis_hash,
        "seeds": cfg.seeds,
        "attempted": len(records),
        "successful": successes,
        "yield_rate": successes / len(records),
        **report.to_dict(),
    }
    out = Outputs(cfg.output_dir, "analyze", cfg.config_hash)
    out.add_csv(DEVIATIONS, ["seed_id", "strength", "layer", "D_a", "D_g", "compromised"], rows)
    out.add_json(SUMMARY, summary)
    return out


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: RunConfig, jobs: int = 1) -> Outputs:
    needed = [cfg.output_dir / n for n in (SUMMARY, DEVIATIONS, COVERAGE, CORPUS, CHECKPOINT)]
    for p in needed:
        if not p.is_file():
            raise ValidationError(f"{p} not found; run 'layerprobe analyze' first")
    summary = json.loads((cfg.output_dir / SUMMARY).read_text())
    if summary.get("analysis_hash") != cfg.analysis_hash:
        raise ValidationError("analysis outputs were produced under a different config")
    layers = summary["layers"]
    strengths = [f"{s:g}" for s in summary["strengths"]]
    out = Outputs(cfg.output_dir, "report", cfg.config_hash)

    cov = _read_csv(cfg.output_dir / COVERAGE)
    out.add_csv("figures/fig2_coverage.csv", ["mode", "strength", "step", "coverage"],
                [(r["mode"], r["strength"], r["step"], r["coverage"]) for r in cov])
    out.add_csv("figures/fig4_mean_similarity.csv", ["strength", "layer", "mean_D_a", "mean_D_g"],
                [(s, layer, _fmt(summary["mean_d_adv"][s][layer]), _fmt(summary["mean_d_noise"][s][layer]))
                 for s in strengths for layer in layers])
    out.add_csv("figures/fig6_compromise_probability.csv", ["strength", "layer", "probability"],
                [(s, layer, _fmt(summary["compromise_probability"][s][layer])) for s in strengths for layer in layers])
    out.add_csv("figures/fig7_compromised_layers.csv", ["strength", "compromised_layers", "examples"],
                [(s, k, n) for s in strengths for k, n in enumerate(summary["histogram"][s]["bins"])])

    # gallery: seeds whose adversarial heatmaps drift most at strength 1
    devs = _read_csv(cfg.output_dir / DEVIATIONS)
    ref = "1" if "1" in strengths else strengths[len(strengths) // 2]
    per_seed: dict[int, list[float]] = {}
    for row in devs:
        if f"{float(row['strength']):g}" == ref:
            per_seed.setdefault(int(row["seed_id"]), []).append(float(row["D_a"]))
    ranked = sorted(per_seed, key=lambda sid: (sum(per_seed[sid]) / len(per_seed[sid]), sid))
    chosen = ranked[: cfg.raw["report"]["gallery_seeds"]]
    grids = []
    if chosen:
        cfg.check_paths("test")
        model = load_model(cfg)
        te = load_split(cfg, "test")
        corpus = {r["seed_id"]: r for r in load_corpus(cfg)}
        for sid in chosen:
            s = te.images[sid]
            n_a = example_from_record(corpus[sid]).perturbation
            n_g = match_gaussian_noise(n_a, seed=[cfg.seeds["noise"], sid])
            triple = compose_inputs(s, n_a, n_g, float(ref))
            target = model.classify(s)
            for kind in ("seed", "adversarial", "noisy"):
                maps = grad_cams(model, getattr(triple, kind), target)
                for layer in layers:
                    comment = f"config_hash {cfg.config_hash}\nseed {sid} layer {layer} input {kind} strength {ref}"
                    out.add(f"gallery/seed{sid}_{layer}_{kind}.pgm", to_pgm(maps[layer].grid, comment))
                    grids.append({"config_hash": cfg.config_hash, "seed_id": sid, "layer": layer, "input": kind,
                                  "strength": float(ref), "native_dims": list(maps[layer].native_dims),
                                  "grid": encode_array(maps[layer].grid)})
        out.add("gallery/heatmaps.jsonl", "".join(json.dumps(g, sort_keys=True) + "\n" for g in grids))

    top = summary["ranking"][:2]
    lines = [
        f"config hash: {cfg.config_hash}",
        f"seeds attacked: {summary['attempted']}, successful: {summary['successful']} "
        f"(yield {summary['yield_rate']:.3f})",
        f"most vulnerable layers: {top[0]}, {top[1]}" if len(top) == 2 else f"most vulnerable layers: {', '.join(top)}",
        "",
        "compromise probability by strength (mean over layers):",
    ]
    for s in strengths:
        probs = summary["compromise_probability"][s]
        lines.append(f"  {s:>5}: {sum(probs.values()) / len(probs):.3f}")
    lines.append("")
    lines.append("layer ranking: " + ", ".join(summary["ranking"]))
    out.add("summary.txt", "\n".join(lines) + "\n")
    return out


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "analyze": cmd_analyze, "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerprobe", description="Layer-wise Grad-CAM deviation under adversarial vs Gaussian noise.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--jobs", type=int, help="worker processes (default: $LAYERPROBE_JOBS or 1)")
    p.add_argument("--seed", type=int, help="override the train, attack and noise seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        jobs = args.jobs if args.jobs is not None else int(os.environ.get("LAYERPROBE_JOBS", "1"))
        if jobs < 1:
            raise ValidationError(f"--jobs must be positive, got {jobs}")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out)
        COMMANDS[args.command](cfg, jobs).commit()
    except LayerProbeError as exc:
        print(f"layerprobe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"layerprobe: invalid value: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
