"""Seeded end-to-end experiments: data, partition, virtual data, round loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, data, engine, nn, virtual
from .config import ExperimentConfig
from .errors import ConfigError, VhlError
from .vhl import VhlConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ("seed", "round", "strategy", "mode", "accuracy", "train_loss",
                  "client_drift", "calibration_penalty", "lr")

# spawn-key tags for the per-seed pipeline stages
_DATA, _SPLIT, _PART, _VIRT = 10, 11, 12, 13


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_line(seed, mode, strategy, m: engine.RoundMetrics) -> str:
    row = (seed, m.round, strategy, mode, m.accuracy, m.train_loss, m.client_drift, m.calibration_penalty, m.lr)
    return ",".join(_fmt(v) for v in row) + "\n"


def auto_geometry(dim: int) -> tuple[int, int, int]:
    """(base_side, up_factor, channels) with (base_side*up_factor)^2*channels == dim,
    preferring larger upsampling and a base grid of at least 2x2."""
    for factor in (4, 2, 1):
        for channels in (3, 1, 2, 4):
            if dim % channels:
                continue
            side = math.isqrt(dim // channels)
            if side * side * channels == dim and side % factor == 0 and side // factor >= 2:
                return side // factor, factor, channels
    raise ConfigError(f"cannot lay out a {dim}-dim input as a square noise image; set virtual.base_side etc.",
                      "virtual.base_side")


@dataclass
class Scenario:
    """Everything a seed's round loop needs, built deterministically from (config, seed)."""

    spec: nn.MlpSpec
    train: data.LabeledDataset
    test: data.LabeledDataset
    shards: list
    virtual: object
    vhl: VhlConfig
    local: engine.LocalConfig
    init: nn.ModelParams


def _stage(seed, tag):
    return np.random.SeedSequence(int(seed), spawn_key=(tag,))


def load_datasets(cfg: ExperimentConfig, seed):
    ds = cfg.dataset
    if ds.source == "idx":
        def read(path):
            with open(path, "rb") as fh:
                return fh.read()
        train = data.dataset_from_idx(read(ds.train_images), read(ds.train_labels), ds.classes)
        test = data.dataset_from_idx(read(ds.test_images), read(ds.test_labels), ds.classes)
        return train, test
    full = data.make_synthetic_mixture(ds.classes, ds.dim, ds.per_class + ds.test_per_class,
                                       ds.center_spread, ds.noise_sigma, _stage(seed, _DATA))
    return data.train_test_split(full, ds.test_per_class, _stage(seed, _SPLIT))


def build_virtual(cfg: ExperimentConfig, spec: nn.MlpSpec, input_dim: int, seed):
    v = cfg.virtual
    classes = v.classes or cfg.dataset.classes
    vseed = _stage(seed, _VIRT)
    if cfg.vhl.mode == "vfa":
        layer = spec.resolve_layer(cfg.vhl.calibration_layer)
        return virtual.generate_vfa_features(classes, spec.layer_widths[layer + 1], v.per_class,
                                             v.mean_separation, v.sigma, vseed)
    if v.base_side and v.up_factor and v.channels:
        geometry = (v.base_side, v.up_factor, v.channels)
    else:
        geometry = auto_geometry(input_dim)
    vspec = virtual.VirtualSpec(classes, v.per_class, *geometry, mean_separation=v.mean_separation,
                                sigma=v.sigma, seed=vseed)
    if vspec.dim != input_dim:
        raise ConfigError(f"virtual samples have dim {vspec.dim}, model input is {input_dim}", "virtual.base_side")
    return virtual.generate_noise_dataset(vspec)


def build_scenario(cfg: ExperimentConfig, seed) -> Scenario:
    train, test = load_datasets(cfg, seed)
    p = cfg.partition
    pspec = data.PartitionSpec(p.scheme, p.clients, p.alpha, p.samples_per_client, p.dominant_count,
                               p.tail_count_low, p.tail_count_high, seed=_stage(seed, _PART))
    shards = data.partition(train, pspec)
    mode = cfg.vhl.mode
    uses_virtual_head = mode in ("full", "naive")
    v_classes = (cfg.virtual.classes or cfg.dataset.classes) if uses_virtual_head else 0
    spec = nn.MlpSpec([train.dim, *cfg.model.hidden], train.class_count, v_classes, cfg.model.activation)
    vdata = build_virtual(cfg, spec, train.dim, seed) if mode != "off" else None
    vhl_cfg = VhlConfig(cfg.vhl.lam, cfg.vhl.calibration_layer, cfg.virtual_batch_size() if mode != "off" else 0,
                        mode, cfg.vhl.detach_virtual, cfg.vhl.ce_weighting, cfg.vhl.temperature)
    f = cfg.fl
    local = engine.LocalConfig(f.epochs, f.base_lr, f.momentum, f.weight_decay, f.lr_decay, f.batch_size,
                               f.fedprox_mu, vhl_cfg)
    init = nn.init_params(spec, engine.init_rng(seed))
    return Scenario(spec, train, test, shards, vdata, vhl_cfg, local, init)


@dataclass
class SeedResult:
    seed: int
    metrics: list = field(default_factory=list)
    final_params: object = None

    @property
    def best_accuracy(self) -> float:
        return max((m.accuracy for m in self.metrics), default=float("nan"))

    def rounds_to(self, target) -> int | None:
        for m in self.metrics:
            if m.accuracy >= target:
                return m.round
        return None


def run_seed(cfg: ExperimentConfig, seed, sink=None, rounds=None, on_round=None, workers=None) -> SeedResult:
    sc = build_scenario(cfg, seed)
    state = engine.ServerState(0, sc.init.copy(), cfg.fl.strategy, int(seed), len(sc.shards))
    result = SeedResult(int(seed))
    total = cfg.fl.rounds if rounds is None else rounds
    per_round = cfg.clients_per_round()
    nworkers = cfg.fl.workers if workers is None else workers
    for r in range(total):
        try:
            state, m = engine.run_round(sc.spec, state, sc.shards, sc.local, per_round, sc.test, sc.virtual, nworkers)
        except VhlError as exc:
            _with_context(exc, seed, r)
            exc.partial = result
            raise
        result.metrics.append(m)
        if sink is not None:
            sink.write(metrics_line(seed, cfg.vhl.mode, cfg.fl.strategy, m))
        if on_round is not None:
            on_round(sc, state, m)
    result.final_params = state.params
    return result


def _with_context(exc, seed, r):
    exc.args = (f"seed {seed}, round {r}: {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
    exc.seed, exc.round = seed, r


def baseline_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, fl=replace(cfg.fl, strategy="fedavg"), vhl=replace(cfg.vhl, mode="off"))


def is_baseline(cfg: ExperimentConfig) -> bool:
    return cfg.fl.strategy == "fedavg" and cfg.vhl.mode == "off"


def dump_features(cfg: ExperimentConfig, sc: Scenario, params, path, layer):
    """Client-tagged natural training features plus virtual samples."""
    rows_x, labels, clients, flags = [], [], [], []
    for shard in sc.shards:
        rows_x.append(shard.features)
        labels.append(shard.labels)
        clients.append(np.full(shard.n_samples, shard.owner))
        flags.append(np.zeros(shard.n_samples, dtype=bool))
    if sc.virtual is not None and sc.vhl.mode != "vfa":
        rows_x.append(sc.virtual.features)
        labels.append(sc.virtual.labels)
        clients.append(np.full(len(sc.virtual), -1))
        flags.append(np.ones(len(sc.virtual), dtype=bool))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        return analysis.export_features(sc.spec, params, np.vstack(rows_x), np.concatenate(labels), layer, fh,
                                        np.concatenate(clients), np.concatenate(flags))


def run_experiment(cfg: ExperimentConfig, metrics_path=None, workers=None, base_dir=None) -> dict:
    """Run every seed, write the metrics CSV and return a summary dict.

    Rows are flushed after every round so a failing seed leaves the rows
    completed so far on disk.
    """
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    out_path = Path(metrics_path) if metrics_path is not None else base / cfg.output.metrics
    out_path.parent.mkdir(parents=True, exist_ok=True)
    feature_rounds = set(cfg.output.feature_rounds)
    summary = {"strategy": cfg.fl.strategy, "mode": cfg.vhl.mode, "seeds": []}
    with open(out_path, "w", newline="") as sink:
        sink.write(",".join(METRICS_HEADER) + "\n")
        for seed in cfg.seeds:
            hook = None
            if feature_rounds and cfg.output.features_dir:
                fdir = base / cfg.output.features_dir

                def hook(sc, state, m, seed=seed, fdir=fdir):
                    if m.round in feature_rounds:
                        dump_features(cfg, sc, state.params,
                                      fdir / f"features_seed{seed}_round{m.round}.csv", cfg.output.feature_layer)
            try:
                res = run_seed(cfg, seed, sink, on_round=hook, workers=workers)
            finally:
                sink.flush()
            target = cfg.fl.target_accuracy
            if target is None and cfg.fl.target_from_baseline and res.metrics:
                if is_baseline(cfg):
                    target = res.best_accuracy
                else:
                    target = run_seed(baseline_config(cfg), seed, workers=workers).best_accuracy
            entry = {"seed": int(seed), "best_accuracy": res.best_accuracy if res.metrics else None,
                     "target_accuracy": target,
                     "rounds_to_target": res.rounds_to(target) if target is not None else None}
            summary["seeds"].append(entry)
            log.info("seed %s: best accuracy %s, rounds to target %s", seed, entry["best_accuracy"],
                     entry["rounds_to_target"])
    bests = [s["best_accuracy"] for s in summary["seeds"] if s["best_accuracy"] is not None]
    summary["mean_best_accuracy"] = float(np.mean(bests)) if bests else None
    if cfg.output.summary:
        with open(base / cfg.output.summary, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def export_at_round(cfg: ExperimentConfig, round_count: int, layer: int, out_path, seed=None) -> int:
    """Train the first (or given) seed for ``round_count`` rounds and dump features."""
    seed = cfg.seeds[0] if seed is None else seed
    res = run_seed(cfg, seed, rounds=round_count)
    sc = build_scenario(cfg, seed)
    params = res.final_params if res.final_params is not None else sc.init
    return dump_features(cfg, sc, params, out_path, layer)

