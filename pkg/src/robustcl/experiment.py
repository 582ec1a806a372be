"""Orchestration: build datasets and models from a config, train scenario
cells with on-disk caching, and run evaluation sweeps."""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import data, evaluation, models, training
from .config import ConfigError, ExperimentConfig
from .data import Dataset
from .models import ModelBundle
from .training import ScenarioSpec


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    source = cfg.get("dataset", "source")
    seed = cfg.getint("experiment", "seed")
    if source == "synthetic":
        return data.gen_synthetic(cfg.get("dataset", "kind"),
                                  cfg.getint("dataset", "n"),
                                  cfg.getint("dataset", "dim"),
                                  cfg.getint("dataset", "classes"),
                                  seed=seed,
                                  separation=cfg.getfloat("dataset", "separation"))
    if source == "synthetic_images":
        return data.gen_bar_images(cfg.getint("dataset", "n"),
                                   size=cfg.getint("dataset", "size"),
                                   n_classes=cfg.getint("dataset", "classes"),
                                   seed=seed,
                                   contrast=cfg.getfloat("dataset", "contrast"),
                                   noise_sigma=cfg.getfloat("dataset", "noise_sigma"),
                                   shortcut_amp=cfg.getfloat("dataset", "shortcut_amp"))
    if source == "idx":
        return data.load_idx(cfg.get("dataset", "images_path"),
                             cfg.get("dataset", "labels_path"))
    if source == "csv":
        return data.load_csv(cfg.get("dataset", "csv_path"))
    raise ConfigError(f"unknown dataset source {source!r}")


def build_splits(cfg: ExperimentConfig, dataset: Dataset):
    """Returns (D_p, D_f, test); a zero D_f fraction means D_f = D_p."""
    fracs = cfg.getlist("dataset", "split", float)
    seed = cfg.getint("experiment", "seed")
    if fracs[1] == 0.0:
        d_p, test = data.split(dataset, (fracs[0], fracs[2]), seed)
        return d_p, d_p, test
    return data.split(dataset, tuple(fracs), seed)


def cell_key(cfg: ExperimentConfig, scenario: str, scheme: str, seed: int,
             dataset: Dataset, train_epsilon: float | None = None) -> str:
    """Hash identifying one trained model: config + cell + data fingerprint."""
    h = hashlib.sha256()
    relevant = {s: cfg.sections[s] for s in
                ("dataset", "model", "loss", "scenario", "attack_train", "augment")}
    h.update(json.dumps(relevant, sort_keys=True).encode())
    h.update(f"{scenario}|{scheme}|{seed}|{train_epsilon}|{dataset.fingerprint()}".encode())
    return h.hexdigest()[:16]


def train_cell(cfg: ExperimentConfig, d_p: Dataset, d_f: Dataset,
               scenario: str, scheme: str, seed: int,
               cache_dir=None, train_epsilon: float | None = None):
    """Train one (scenario, scheme, seed) cell, reusing a cached checkpoint
    with the same cell hash when available. Returns (model, manifest)."""
    key = cell_key(cfg, scenario, scheme, seed, d_p, train_epsilon)
    ckpt = manifest_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        ckpt = os.path.join(cache_dir, f"{key}.ckpt")
        manifest_path = os.path.join(cache_dir, f"{key}.manifest.json")
        if os.path.exists(ckpt) and os.path.exists(manifest_path):
            with open(manifest_path) as f:
                manifest = json.load(f)
            return models.load_checkpoint(ckpt), manifest
    is_image = d_p.is_image
    spec = cfg.scenario_spec(scenario=scenario, scheme=scheme, seed=seed,
                             is_image=is_image, train_epsilon=train_epsilon)
    enc_cfg = cfg.encoder_config(d_p.input_shape if is_image else (d_p.inputs.shape[1],))
    model = models.init_model(enc_cfg, d_p.n_classes, cfg.getint("model", "head_dim"), seed)
    record = training.run_scenario(model, d_p, d_f, spec)
    manifest = dict(record.manifest)
    manifest["cell_key"] = key
    manifest["config_hash"] = cfg.hash()
    if ckpt is not None:
        models.save_checkpoint(model, ckpt)
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        curve_path = os.path.join(cache_dir, f"{key}.loss.csv")
        training.write_loss_csv(record, curve_path)
    return model, manifest


def _sweep_cell(args):
    cfg_sections, scenario, scheme, seed, cache_dir = args
    cfg = ExperimentConfig(cfg_sections)
    dataset = build_dataset(cfg)
    d_p, d_f, test = build_splits(cfg, dataset)
    t0 = time.time()
    try:
        model, manifest = train_cell(cfg, d_p, d_f, scenario, scheme, seed, cache_dir)
        attacks_list = cfg.eval_attacks(scheme, is_image=dataset.is_image)
        report = evaluation.evaluate(model, test, attacks_list,
                                     scenario=scenario, scheme=scheme,
                                     model_id=f"{scenario}/{scheme}/s{seed}")
        runtime = manifest.get("runtime_s", time.time() - t0)
        return evaluation.results_rows(report, seed, runtime), None
    except Exception as exc:  # sweep continues; failure recorded per cell
        return [], f"{scenario}/{scheme}/s{seed}: {exc}"


def scenario_sweep(cfg: ExperimentConfig, cache_dir=None, workers: int = 1):
    """Train + evaluate every (scenario, scheme, seed) grid cell.

    Returns (rows for results.csv, list of per-cell error strings)."""
    scenarios = cfg.getlist("sweep", "scenarios")
    schemes = cfg.getlist("sweep", "schemes")
    seeds = cfg.getlist("sweep", "seeds", int)
    if not scenarios or not schemes or not seeds:
        raise ConfigError("sweep grid is empty")
    cells = [(cfg.sections, sc, sch, seed, cache_dir)
             for sc in scenarios for sch in schemes for seed in seeds]
    rows, errors = [], []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell_rows, err in pool.map(_sweep_cell, cells):
                rows.extend(cell_rows)
                if err:
                    errors.append(err)
    else:
        for cell in cells:
            cell_rows, err = _sweep_cell(cell)
            rows.extend(cell_rows)
            if err:
                errors.append(err)
    return rows, errors
