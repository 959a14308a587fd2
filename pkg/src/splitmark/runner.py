"""Experiment orchestration: config in, artifacts on disk out.

A run directory holds metrics.csv (one row per round, fixed column
order, 9 significant digits), manifest.json (config echo plus results,
keys sorted, no timestamps so reruns are byte-identical), the watermark
key file when embedding is on, and the final model checkpoint. Attack
and calibration results are embedded in the manifest.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .attacks import (
    adaptive_remove,
    estimate_subspace,
    finetune,
    prune,
    quantize,
)
from .config import Config
from .data import Dataset, make_blobs, partition, split_per_class
from .detect import build_reference
from .linalg import RngStream, StreamLabel
from .nn import SplitModel, accuracy, forward_full, forward_segment, save_model
from .protocol import RunResult, run_experiment
from .watermark import (
    WatermarkKey,
    calibrate_threshold,
    keygen,
    save_key,
    verify,
)

__all__ = [
    "METRIC_COLUMNS",
    "build_data",
    "build_shards",
    "execute_run",
    "execute_calibration",
    "run_attacks",
]

METRIC_COLUMNS = (
    "round",
    "main_loss",
    "g_main_norm",
    "train_acc",
    "test_acc",
    "wm_loss",
    "g_wm_norm",
    "cos_main_wm",
    "wsr_probe",
    "outliers",
)


def build_data(cfg: Config) -> tuple[Dataset, Dataset]:
    """Synthesize the run's train/test datasets from the config."""
    rng = RngStream(cfg["run.seed"], StreamLabel.DATA, (0,))
    full = make_blobs(
        rng,
        cfg["data.train_per_class"] + cfg["data.test_per_class"],
        cfg["data.classes"],
        cfg["data.input_dim"],
        cfg["data.spread"],
        cfg["data.radius"],
    )
    return split_per_class(full, cfg["data.test_per_class"])


def build_shards(cfg: Config, train: Dataset) -> list[Dataset]:
    idx = partition(train, cfg.partition_spec())
    return [train.subset(i) for i in idx]


def _fmt_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "%.9g" % value
    return str(value)


def write_metrics_csv(res: RunResult, path: str) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for m in res.metrics:
        row = (
            m.round_idx,
            m.main_loss,
            m.g_main_norm,
            m.train_acc,
            m.test_acc,
            m.wm_loss,
            m.g_wm_norm,
            m.cos_main_wm,
            m.wsr_probe,
            m.outliers,
        )
        lines.append(",".join(_fmt_cell(c) for c in row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _json_ready(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def write_manifest(cfg: Config, results: dict, path: str) -> None:
    doc = {
        "config": {k: _json_ready(v) for k, v in cfg.values.items()},
        "results": results,
    }
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _surrogate_acc(bottom, head, test: Dataset) -> float:
    a, _ = forward_segment(bottom, test.inputs)
    logits, _ = forward_segment(head, a)
    return accuracy(logits, test.labels)


def run_attacks(
    cfg: Config,
    res: RunResult,
    key: WatermarkKey | None,
    shards: list[Dataset],
    test: Dataset,
) -> list[dict]:
    """Apply the configured attack list to the trained model.

    Each entry reports the attack name and parameters plus pre/post test
    accuracy and (when a key exists) pre/post WSR measured on a probe
    stream shared between the pre and post checks, so the drop is a
    paired comparison.
    """
    seed = cfg["run.seed"]
    shard = shards[0]
    model = res.model
    pre_acc = accuracy(forward_full(model, test.inputs), test.labels)

    def wsr_of(bottom) -> float | None:
        if key is None:
            return None
        probe = RngStream(seed, StreamLabel.VERIFICATION, (3,))
        return verify(
            bottom, key, probe, n_samples=cfg["verify.probes"], tau=cfg["verify.tau"]
        ).wsr

    pre_wsr = wsr_of(model.bottom)
    out: list[dict] = []

    for kind in cfg["attack.kinds"]:
        if kind == "finetune":
            rng = RngStream(seed, StreamLabel.ATTACK, (1,))
            nb, head = finetune(
                model.bottom,
                shard,
                cfg["attack.finetune_steps"],
                cfg["attack.finetune_lr"],
                rng,
                batch_size=cfg["attack.batch_size"],
                momentum=cfg["attack.momentum"],
            )
            out.append(
                {
                    "name": "finetune",
                    "steps": cfg["attack.finetune_steps"],
                    "lr": cfg["attack.finetune_lr"],
                    "pre_acc": pre_acc,
                    "post_acc": _surrogate_acc(nb, head, test),
                    "pre_wsr": pre_wsr,
                    "post_wsr": wsr_of(nb),
                }
            )
        elif kind == "prune":
            for ratio in cfg["attack.prune_ratios"]:
                nb = prune(model.bottom, ratio)
                attacked = SplitModel(nb, model.middle, model.head)
                out.append(
                    {
                        "name": "prune",
                        "ratio": ratio,
                        "pre_acc": pre_acc,
                        "post_acc": accuracy(
                            forward_full(attacked, test.inputs), test.labels
                        ),
                        "pre_wsr": pre_wsr,
                        "post_wsr": wsr_of(nb),
                    }
                )
        elif kind == "quantize":
            for scheme in cfg["attack.quant_schemes"]:
                nb = quantize(model.bottom, scheme)
                attacked = SplitModel(nb, model.middle, model.head)
                out.append(
                    {
                        "name": "quantize",
                        "scheme": scheme,
                        "pre_acc": pre_acc,
                        "post_acc": accuracy(
                            forward_full(attacked, test.inputs), test.labels
                        ),
                        "pre_wsr": pre_wsr,
                        "post_wsr": wsr_of(nb),
                    }
                )
        elif kind == "adaptive":
            atk = cfg.adaptive_attack()
            early = np.vstack(
                [res.grad_rounds[t] for t in range(*atk.rounds_early)]
            )
            cap = cfg["attack.early_rows"]
            if cap:
                early = early[:cap]
            late = np.vstack([res.grad_rounds[t] for t in range(*atk.rounds_late)])
            est = estimate_subspace(early, late, atk.n_main, atk.k_prime)
            rng = RngStream(seed, StreamLabel.ATTACK, (2,))
            nb, head = adaptive_remove(model.bottom, shard, est, atk, rng)
            out.append(
                {
                    "name": "adaptive",
                    "n_main": atk.n_main,
                    "k_prime": atk.k_prime,
                    "gamma": atk.gamma,
                    "ft_steps": atk.ft_steps,
                    "ft_lr": atk.ft_lr,
                    "early_rows": int(len(early)),
                    "pre_acc": pre_acc,
                    "post_acc": _surrogate_acc(nb, head, test),
                    "pre_wsr": pre_wsr,
                    "post_wsr": wsr_of(nb),
                }
            )
        else:
            raise ValueError(f"unknown attack kind {kind!r}")
    return out


def execute_run(cfg: Config, out_dir: str | None = None) -> dict:
    """Train per the config and write all artifacts; returns the results
    dict that was embedded in the manifest."""
    out = out_dir or cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    seed = cfg["run.seed"]

    train, test = build_data(cfg)
    shards = build_shards(cfg, train)
    spec = cfg.split_spec()

    key = None
    embed = cfg.embed()
    if embed is not None:
        key = keygen(
            RngStream(seed, StreamLabel.WATERMARK_KEY), spec.split_dim, cfg["embed.bits"]
        )

    detector = None
    if cfg["detector.enabled"]:
        detector = build_reference(
            shards[0],
            cfg["detector.fraction"],
            spec,
            RngStream(seed, StreamLabel.MODEL_INIT, (5,)),
            opt=cfg.optimizer(),
            epochs=cfg["run.local_epochs"],
            batch_size=cfg["run.batch_size"],
            k_nn=cfg["detector.k_nn"],
            quantile=cfg["detector.quantile"],
        )

    res = run_experiment(
        spec,
        cfg.protocol(),
        shards,
        test,
        seed,
        key=key,
        embed=embed,
        noise=cfg.noise(),
        detector=detector,
    )

    results: dict = {
        "rounds": cfg["run.rounds"],
        "final_train_acc": res.metrics[-1].train_acc if res.metrics else None,
        "final_test_acc": res.metrics[-1].test_acc if res.metrics else None,
    }
    if key is not None:
        report = verify(
            res.model.bottom,
            key,
            RngStream(seed, StreamLabel.VERIFICATION, (2,)),
            n_samples=cfg["verify.probes"],
            tau=cfg["verify.tau"],
        )
        results["wsr"] = report.wsr
        results["wsr_passed"] = report.passed
        results["tau"] = report.threshold
        save_key(key, os.path.join(out, "key.txt"))
    if detector is not None:
        results["detector"] = {
            "counts": list(detector.counts),
            "mean": float(np.mean(detector.counts)) if detector.counts else None,
        }
    if cfg["attack.kinds"]:
        results["attacks"] = run_attacks(cfg, res, key, shards, test)

    save_model(res.model, os.path.join(out, "model.ckpt"))
    write_metrics_csv(res, os.path.join(out, "metrics.csv"))
    write_manifest(cfg, results, os.path.join(out, "manifest.json"))
    return results


def execute_calibration(cfg: Config, out_dir: str | None = None) -> dict:
    """Train clean models on consecutive seeds and fit the null threshold.

    Embedding is forced off for the training runs; the number of models
    and keys comes from the calibrate.* keys. Writes calibration.json.
    """
    out = out_dir or cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    base_seed = cfg["run.seed"]
    spec = cfg.split_spec()

    bottoms = []
    for i in range(cfg["calibrate.models"]):
        clean_values = dict(cfg.values)
        clean_values["run.seed"] = base_seed + i
        clean_values["embed.enabled"] = False
        clean_values["noise.enabled"] = False
        clean = Config(clean_values)
        train, test = build_data(clean)
        shards = build_shards(clean, train)
        res = run_experiment(
            spec, clean.protocol(), shards, test, base_seed + i
        )
        bottoms.append(res.model.bottom)

    calib = calibrate_threshold(
        bottoms,
        cfg["embed.bits"],
        RngStream(base_seed, StreamLabel.WATERMARK_KEY, (1,)),
        RngStream(base_seed, StreamLabel.VERIFICATION, (4,)),
        n_keys=cfg["calibrate.keys"],
        n_samples=cfg["verify.probes"],
    )
    doc = {
        "n_models": cfg["calibrate.models"],
        "n_keys": cfg["calibrate.keys"],
        "null_mean": calib.mean,
        "null_std": calib.std,
        "tau_5sigma": calib.tau_5sigma,
        "degenerate": calib.degenerate,
    }
    path = os.path.join(out, "calibration.json")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc
