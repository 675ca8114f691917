"""Config-driven experiment pipeline: dataset ingestion, training or
checkpoint reuse, the attack-grid evaluation with per-cell report files and
a summary table, the three ablation sweeps, and sign-map rendering.

All report files are byte-identical across reruns with the same config and
seed; timestamps and wall times go to .meta.json sidecars only.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, CwParams, NormConstraint, INF
from .autodiff import Tensor
from .data import Dataset, generate_desk_data, load_dataset
from .errors import ConfigError
from .gcm import GcmConfig, GcmPlacement, cascade
from .metrics import adversarial_accuracy, evaluate, write_report
from .models import (Model, TrainConfig, build_model, grad_wrt_input, load_checkpoint,
                     predict, prepare_inputs, save_checkpoint, train)
from .signmap import render_sign_map

log = logging.getLogger(__name__)

_TOP_KEYS = {"dataset", "model", "train", "checkpoint", "gcm", "placement",
             "attacks", "eval", "sweep", "signmap", "seed"}

EPS_8_255 = 8.0 / 255.0
SWEEP_EPS_RANGE = (0.0, 1e-3)      # grid must lie in (0, 1e-3]
SWEEP_W_RANGE = (1e10, 1e20)       # grid must lie in [1e10, 1e20]


def parse_attack(spec: dict) -> AttackConfig:
    spec = dict(spec)
    family = spec.pop("family", None)
    norm_spec = spec.pop("norm", None)
    if family is None or norm_spec is None:
        raise ConfigError(f"attack needs 'family' and 'norm', got {spec}")
    p = norm_spec.get("p")
    p = INF if p in ("inf", "Inf", "INF") else float(p)
    norm = NormConstraint(p=p, eps=float(norm_spec.get("eps", 0.0)))
    kwargs = {
        "target": spec.pop("target", None),
        "steps": int(spec.pop("steps", 10)),
    }
    if "step_size" in spec:
        kwargs["step_size"] = float(spec.pop("step_size"))
    if "cw" in spec:
        kwargs["cw"] = CwParams(**spec.pop("cw"))
    if spec:
        raise ConfigError(f"unknown attack keys: {sorted(spec)}")
    return AttackConfig(family=family, norm=norm, **kwargs)


@dataclass
class ExperimentConfig:
    dataset: dict
    model: dict
    train: TrainConfig
    attacks: list
    gcm: GcmConfig | None
    placement: GcmPlacement
    checkpoint: str | None
    eval_opts: dict
    sweep: dict
    signmap: dict
    seed: int

    @staticmethod
    def from_json(payload: dict, seed_override: int | None = None) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(payload) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = int(seed_override if seed_override is not None else payload.get("seed", 0))

        dataset = payload.get("dataset")
        if not dataset or "dir" not in dataset:
            raise ConfigError("config needs dataset.dir")
        dataset = {"format": "idx", "num_classes": 10, **dataset}

        train_spec = dict(payload.get("train", {}))
        train_spec.setdefault("seed", seed)
        gcm_spec = payload.get("gcm")
        return ExperimentConfig(
            dataset=dataset,
            model=payload.get("model", {"arch": "smallcnn"}),
            train=TrainConfig(**train_spec),
            attacks=[parse_attack(a) for a in payload.get("attacks", [])],
            gcm=None if gcm_spec is None else GcmConfig(w=float(gcm_spec.get("w", 1e20)),
                                                        eps=float(gcm_spec.get("eps", 1e-8))),
            placement=GcmPlacement.parse(payload.get("placement", "front")),
            checkpoint=payload.get("checkpoint"),
            eval_opts=dict(payload.get("eval", {})),
            sweep=dict(payload.get("sweep", {})),
            signmap=dict(payload.get("signmap", {})),
            seed=seed,
        )

    @staticmethod
    def from_file(path, seed_override: int | None = None) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return ExperimentConfig.from_json(payload, seed_override)


# ---------------------------------------------------------------------------
# pipeline stages


def load_experiment_data(cfg: ExperimentConfig):
    d = cfg.dataset
    train_prefix = os.path.join(d["dir"], "train")
    test_prefix = os.path.join(d["dir"], "test")
    synth = d.get("synthesize")
    if synth and not os.path.exists(f"{train_prefix}-images-idx3-ubyte"):
        log.info("synthesizing desk dataset in %s", d["dir"])
        generate_desk_data(d["dir"], n_train=int(synth.get("n_train", 20000)),
                           n_test=int(synth.get("n_test", 10000)),
                           seed=int(synth.get("seed", cfg.seed)))
    try:
        train_ds = load_dataset(train_prefix, d["format"], num_classes=d["num_classes"])
        test_ds = load_dataset(test_prefix, d["format"], num_classes=d["num_classes"])
    except FileNotFoundError as e:
        raise ConfigError(f"dataset file missing: {e.filename}") from e
    return train_ds, test_ds


def ensure_model(cfg: ExperimentConfig, train_ds: Dataset, out_dir) -> Model:
    """Load the configured checkpoint if present, else train and save one."""
    path = cfg.checkpoint or os.path.join(out_dir, "model.gcmb")
    if os.path.exists(path):
        log.info("loading checkpoint %s", path)
        return load_checkpoint(path)
    model = build_model(cfg.model, seed=cfg.seed)
    train(model, train_ds, cfg.train)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_checkpoint(model, path)
    log.info("trained model saved to %s", path)
    return model


def clean_accuracy(model: Model, dataset: Dataset, batch_size: int = 512) -> float:
    images = prepare_inputs(model, dataset.images)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = Tensor(np.ascontiguousarray(images[start:start + batch_size]))
        correct += int((predict(model, x) == dataset.labels[start:start + len(x.data)]).sum())
    return correct / len(dataset)


def _slug(attack: AttackConfig) -> str:
    return attack.describe().replace(":", "-").replace(".", "p")


def _fmt(value) -> str:
    return "  n/a " if value is None else f"{value:.4f}"


def summary_text(summary: dict) -> str:
    """Aligned table: rows are model variants (vanilla above, concealed
    below), first column clean ACC, one AR column per attack."""
    attacks = summary["attacks"]
    name_w = max(24, *(len(r["name"]) + 2 for r in summary["rows"])) if summary["rows"] else 24
    header = "model".ljust(name_w) + "ACC".rjust(8)
    for a in attacks:
        header += a.rjust(max(10, len(a) + 2))
    lines = [header, "-" * len(header)]
    for row in summary["rows"]:
        line = row["name"].ljust(name_w) + _fmt(row["acc_clean"]).rjust(8)
        for a in attacks:
            line += _fmt(row["ar"].get(a)).rjust(max(10, len(a) + 2))
        lines.append(line)
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, out_dir, variants=None) -> dict:
    """Train (or load) the model, evaluate every attack for the requested
    variants, write one report file per cell plus summary.json/summary.txt,
    and return the summary."""
    os.makedirs(out_dir, exist_ok=True)
    train_ds, test_ds = load_experiment_data(cfg)
    model = ensure_model(cfg, train_ds, out_dir)

    if variants is None:
        variants = ("vanilla", "gcm") if cfg.gcm is not None else ("vanilla",)
    if "gcm" in variants and cfg.gcm is None:
        raise ConfigError("gcm variant requested but the config has no gcm block")

    eval_kwargs = {
        "batch_size": int(cfg.eval_opts.get("batch_size", 256)),
        "max_samples": cfg.eval_opts.get("max_samples"),
        "per_class_cap": cfg.eval_opts.get("per_class_cap"),
    }

    arch_name = cfg.model.get("arch", "model")
    rows = []
    for variant in variants:
        gcm_cfg = cfg.gcm if variant == "gcm" else None
        name = f"{arch_name} ({'GCM ' + cfg.placement.describe() if gcm_cfg else 'vanilla'})"
        row = {"name": name, "variant": variant, "acc_clean": None, "ar": {}}
        for attack in cfg.attacks:
            report = evaluate(model, test_ds, attack, gcm_cfg=gcm_cfg,
                              placement=cfg.placement, **eval_kwargs)
            write_report(report, os.path.join(out_dir, f"report_{_slug(attack)}_{variant}.json"))
            row["acc_clean"] = report.acc_clean
            row["ar"][_slug(attack)] = report.ar
        if row["acc_clean"] is None:
            eval_model = model if gcm_cfg is None else cascade(model, gcm_cfg, cfg.placement)
            subset = test_ds if eval_kwargs["max_samples"] is None else test_ds.subset(
                np.arange(min(len(test_ds), eval_kwargs["max_samples"])))
            row["acc_clean"] = clean_accuracy(eval_model, subset)
        rows.append(row)

    summary = {"attacks": [_slug(a) for a in cfg.attacks], "rows": rows}
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary_text(summary))
    return summary


# ---------------------------------------------------------------------------
# ablation sweeps


def _sweep_attack(cfg: ExperimentConfig) -> AttackConfig:
    spec = cfg.sweep.get("attack")
    if spec:
        return parse_attack(spec)
    return AttackConfig("pgd", NormConstraint(INF, EPS_8_255), steps=10)


def validate_sweep_grid(kind: str, grid, model: Model | None = None) -> list:
    """Reject bad grids before any evaluation runs."""
    if not grid:
        raise ConfigError("sweep grid is empty")
    if kind == "eps":
        vals = [float(v) for v in grid]
        for v in vals:
            if not (SWEEP_EPS_RANGE[0] < v <= SWEEP_EPS_RANGE[1]):
                raise ConfigError(f"eps grid value {v} outside (0, {SWEEP_EPS_RANGE[1]}]")
        return vals
    if kind == "w":
        vals = [float(v) for v in grid]
        for v in vals:
            if not (SWEEP_W_RANGE[0] <= v <= SWEEP_W_RANGE[1]):
                raise ConfigError(f"w grid value {v} outside [{SWEEP_W_RANGE[0]}, {SWEEP_W_RANGE[1]}]")
        return vals
    if kind == "position":
        placements = [GcmPlacement.parse(str(v)) for v in grid]
        if model is not None:
            names = set(model.block_names())
            for pl in placements:
                if pl.kind == "after_block" and pl.block not in names:
                    raise ConfigError(f"position grid names unknown block {pl.block!r}")
        return placements
    raise ConfigError(f"unknown sweep kind {kind!r}; expected eps | w | position")


def ablation_sweep(cfg: ExperimentConfig, out_dir, kind: str | None = None) -> dict:
    """One evaluation per grid point. The eps and w sweeps report AR of the
    concealed model as the magnitude/frequency move; the position sweep
    reports accuracy under attack for each placement."""
    os.makedirs(out_dir, exist_ok=True)
    kind = kind or cfg.sweep.get("kind")
    if kind is None:
        raise ConfigError("sweep needs a kind (eps | w | position)")
    base = cfg.gcm or GcmConfig()
    grid = cfg.sweep.get("grid")
    if grid is None:
        grid = {
            "eps": [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
            "w": [1e10, 1e12, 1e14, 1e16, 1e18, 1e20],
            "position": ["front", "block:block1", "block:block2", "block:block3", "all"],
        }[kind]

    train_ds, test_ds = load_experiment_data(cfg)
    model = ensure_model(cfg, train_ds, out_dir)
    values = validate_sweep_grid(kind, grid, model=model)
    attack = _sweep_attack(cfg)
    eval_kwargs = {
        "batch_size": int(cfg.eval_opts.get("batch_size", 256)),
        "max_samples": cfg.eval_opts.get("max_samples"),
        "per_class_cap": cfg.eval_opts.get("per_class_cap"),
    }

    cells = []
    for value in values:
        if kind == "eps":
            report = evaluate(model, test_ds, attack, gcm_cfg=GcmConfig(w=base.w, eps=value),
                              placement=cfg.placement, **eval_kwargs)
            cells.append({"value": value, "metric": "ar", "result": report.ar})
        elif kind == "w":
            report = evaluate(model, test_ds, attack, gcm_cfg=GcmConfig(w=value, eps=base.eps),
                              placement=cfg.placement, **eval_kwargs)
            cells.append({"value": value, "metric": "ar", "result": report.ar})
        else:
            report = evaluate(model, test_ds, attack, gcm_cfg=base, placement=value,
                              **eval_kwargs)
            cells.append({"value": value.describe(), "metric": "adv_accuracy",
                          "result": adversarial_accuracy(report.records)})

    table = {"kind": kind, "attack": attack.to_json(),
             "gcm_base": {"w": base.w, "eps": base.eps}, "cells": cells}
    with open(os.path.join(out_dir, f"sweep_{kind}.json"), "w", encoding="utf-8") as f:
        json.dump(table, f, sort_keys=True, indent=1)
        f.write("\n")
    width = max(12, *(len(str(c["value"])) + 2 for c in cells))
    header = "".join(str(c["value"]).rjust(width) for c in cells)
    values_line = "".join(_fmt(c["result"]).rjust(width) for c in cells)
    with open(os.path.join(out_dir, f"sweep_{kind}.txt"), "w", encoding="utf-8") as f:
        f.write(f"sweep {kind} [{cells[0]['metric']}] under {attack.describe()}\n")
        f.write(header + "\n" + values_line + "\n")
    return table


# ---------------------------------------------------------------------------
# sign maps


def render_experiment_signmaps(cfg: ExperimentConfig, out_dir) -> list:
    """Input-gradient sign maps for the first k test images, vanilla and
    concealed side by side."""
    os.makedirs(out_dir, exist_ok=True)
    train_ds, test_ds = load_experiment_data(cfg)
    model = ensure_model(cfg, train_ds, out_dir)
    concealed = cascade(model, cfg.gcm or GcmConfig(), cfg.placement)

    count = int(cfg.signmap.get("count", 8))
    count = min(count, len(test_ds))
    image_shape = test_ds.images.shape[1:]
    written = []
    for i in range(count):
        x = Tensor(prepare_inputs(model, test_ds.images[i:i + 1]))
        y = test_ds.labels[i:i + 1]
        for tag, m in (("vanilla", model), ("gcm", concealed)):
            g = grad_wrt_input(m, x, y).data.reshape(image_shape)
            written += render_sign_map(g, os.path.join(out_dir, f"signmap_{i:03d}_{tag}.pgm"))
    return written
