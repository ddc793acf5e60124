"""JSON-driven experiment runner: generate -> split -> train -> eval -> table.

The config names every seed explicitly so a rerun reproduces the table
bit-for-bit.  Each (split, mode) cell trains once per seed and the summary
reports the per-metric median over seeds, mirroring a grid of split settings
by training modes.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baskets import MiningSchedule
from .datasim import (
    BasketSet,
    LabeledData,
    SplitSpec,
    gen_synthetic,
    geometric_probs,
    overlap_probs,
    save_baskets,
    split_dataset,
)
from .losses import Classifier, LossConfig
from .metrics import (
    build_pairs,
    build_retrieval,
    cmc_topk,
    mean_ap,
    tar_at_far,
    verification_accuracy,
)
from .training import (
    ModelParams,
    OptimizerConfig,
    TrainConfig,
    TrainMode,
    _forward_batch,
    save_model,
    train,
)


class StageError(RuntimeError):
    """An experiment stage failed; the message names the stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def parse_probs(text: str, parts: int) -> tuple[float, ...]:
    """Parse a probability spec: CSV numbers, 'geometric', or 'overlap:R'."""
    text = text.strip()
    if text == "geometric":
        return geometric_probs(parts)
    if text.startswith("overlap:"):
        if parts != 2:
            raise ValueError("overlap:R probabilities require exactly 2 parts")
        return overlap_probs(float(text.split(":", 1)[1]))
    probs = tuple(float(v) for v in text.split(","))
    if len(probs) != parts:
        raise ValueError(f"expected {parts} probabilities, got {len(probs)}")
    return probs


@dataclass(frozen=True)
class GenSpec:
    num_classes: int
    samples_per_class: int
    dim: int
    spread: float
    seed: int

    def generate(self) -> LabeledData:
        return gen_synthetic(self.num_classes, self.samples_per_class,
                             self.dim, self.spread, self.seed)


@dataclass(frozen=True)
class SplitSetting:
    name: str
    parts: int
    probs: tuple[float, ...]
    seed: int

    def spec(self) -> SplitSpec:
        return SplitSpec(self.parts, self.probs, self.seed)


@dataclass(frozen=True)
class EvalSpec:
    protocol: str = "pairs"
    genuine_pairs: int = 2000
    impostor_pairs: int = 2000
    fars: tuple[float, ...] = (0.01,)
    queries_per_class: int = 2
    seed: int = 99
    score: str = "cosine"


@dataclass
class ExperimentConfig:
    out_dir: str
    train_set: GenSpec
    eval_set: GenSpec
    splits: list[SplitSetting]
    modes: list[TrainMode]
    loss: LossConfig
    sched_tau: int
    sched_drop_every: int
    optimizer: OptimizerConfig
    epochs: int
    batch_size: int
    hidden_dims: tuple[int, ...]
    embed_dim: int
    shards: int
    train_seeds: tuple[int, ...]
    eval_spec: EvalSpec

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        def gen(d):
            return GenSpec(d["num_classes"], d["samples_per_class"], d["dim"],
                           d["spread"], d["seed"])

        splits = [
            SplitSetting(s["name"], s["parts"],
                         parse_probs(str(s["probs"]), s["parts"]), s["seed"])
            for s in raw["splits"]
        ]
        loss = LossConfig(
            raw["loss"]["method"],
            raw["loss"].get("scale_s", 1.0),
            raw["loss"].get("margin_m", 0.0),
            raw["loss"].get("use_bias", False),
        )
        tr = raw["train"]
        ev = raw.get("eval", {})
        return cls(
            out_dir=raw.get("out_dir", "experiment_out"),
            train_set=gen(raw["train_set"]),
            eval_set=gen(raw["eval_set"]),
            splits=splits,
            modes=[TrainMode(m) for m in raw["modes"]],
            loss=loss,
            sched_tau=tr.get("tau", 2),
            sched_drop_every=tr.get("drop_every", 2),
            optimizer=OptimizerConfig(
                tr.get("lr0", 0.1), tr.get("momentum", 0.9),
                tr.get("weight_decay", 5e-4),
                tuple(tr.get("lr_drop_epochs", (5, 10, 15))),
            ),
            epochs=tr.get("epochs", 20),
            batch_size=tr.get("batch_size", 64),
            hidden_dims=tuple(tr.get("hidden_dims", (64,))),
            embed_dim=tr.get("embed_dim", 16),
            shards=tr.get("shards", 1),
            train_seeds=tuple(tr.get("seeds", (1,))),
            eval_spec=EvalSpec(
                ev.get("protocol", "pairs"),
                ev.get("genuine_pairs", 2000),
                ev.get("impostor_pairs", 2000),
                tuple(ev.get("far", (0.01,))),
                ev.get("queries_per_class", 2),
                ev.get("seed", 99),
                ev.get("score", "cosine"),
            ),
        )


def embed_dataset(params: ModelParams, data: LabeledData) -> np.ndarray:
    emb, _ = _forward_batch(params, data.features.astype(np.float64))
    return emb


def evaluate_model(params: ModelParams, eval_data: LabeledData,
                   spec: EvalSpec) -> dict[str, float]:
    """Metric columns for one trained backbone on the held-out classes."""
    emb = embed_dataset(params, eval_data)
    out: dict[str, float] = {}
    if spec.protocol in ("pairs", "both"):
        pairs = build_pairs(emb, eval_data.labels, spec.genuine_pairs,
                            spec.impostor_pairs, spec.seed)
        out["accuracy"] = verification_accuracy(pairs, spec.score)
        for far in spec.fars:
            out[f"tar@far={far:g}"] = tar_at_far(pairs, far, spec.score).tar
    if spec.protocol in ("retrieval", "both"):
        rs = build_retrieval(emb, eval_data.labels, spec.queries_per_class,
                             spec.seed)
        out["top1"] = cmc_topk(rs, 1, spec.score)
        out["top5"] = cmc_topk(rs, 5, spec.score)
        out["mAP"] = mean_ap(rs, spec.score)
    if not out:
        raise ValueError(f"unknown eval protocol {spec.protocol!r}")
    return out


def _train_one(config: ExperimentConfig, baskets: BasketSet, mode: TrainMode,
               seed: int):
    sched = MiningSchedule.uniform(config.sched_tau, baskets.num_baskets,
                                   config.sched_drop_every, config.epochs)
    tc = TrainConfig(
        loss=config.loss, mode=mode, sched=sched, optimizer=config.optimizer,
        batch_size=config.batch_size, epochs=config.epochs, seed=seed,
        shards=config.shards if mode is TrainMode.PARALLEL_BBS else 1,
        hidden_dims=config.hidden_dims, embed_dim=config.embed_dim,
    )
    return train(tc, baskets)


def write_log_csv(path, log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "r", "mean_loss", "wall_ms"])
        for row in log:
            writer.writerow([row.epoch, f"{row.lr:.10g}", f"{row.ratio:.10g}",
                             f"{row.mean_loss:.12g}", f"{row.wall_ms:.3f}"])


def run_experiment(config: ExperimentConfig, out_dir=None,
                   echo=print) -> list[dict]:
    """Run the full grid and return one summary row per (split, mode).

    Everything lands under ``out_dir``: datasets, models, per-epoch logs,
    per-seed metrics, and the median summary as CSV plus markdown.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    for sub in ("data", "models", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    try:
        train_data = config.train_set.generate()
        eval_data = config.eval_set.generate()
    except Exception as exc:
        raise StageError("generate", exc) from exc

    split_sets: dict[str, BasketSet] = {}
    try:
        for setting in config.splits:
            baskets = split_dataset(train_data, setting.spec())
            split_sets[setting.name] = baskets
            save_baskets(out / "data" / f"{setting.name}.bbs", baskets)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("split", exc) from exc

    rows: list[dict] = []
    per_seed_rows: list[dict] = []
    for setting in config.splits:
        baskets = split_sets[setting.name]
        for mode in config.modes:
            per_seed: list[dict[str, float]] = []
            for seed in config.train_seeds:
                t0 = time.perf_counter()
                try:
                    result = _train_one(config, baskets, mode, seed)
                except Exception as exc:
                    raise StageError("train", exc) from exc
                tag = f"{setting.name}_{mode.value}_seed{seed}"
                save_model(out / "models" / f"{tag}.bbsm", result.params,
                           result.classifier)
                write_log_csv(out / "logs" / f"{tag}.csv", result.log)
                try:
                    metrics = evaluate_model(result.params, eval_data,
                                             config.eval_spec)
                except Exception as exc:
                    raise StageError("eval", exc) from exc
                per_seed.append(metrics)
                per_seed_rows.append({
                    "split": setting.name, "mode": mode.value, "seed": seed,
                    **metrics,
                })
                echo(f"[{tag}] "
                     + " ".join(f"{k}={v:.4f}" for k, v in metrics.items())
                     + f" ({time.perf_counter() - t0:.1f}s)")
            medians = {
                k: float(np.median([m[k] for m in per_seed]))
                for k in per_seed[0]
            }
            rows.append({"split": setting.name, "mode": mode.value, **medians})

    try:
        _write_summary(out, rows, per_seed_rows)
    except Exception as exc:
        raise StageError("summary", exc) from exc
    return rows


def _write_summary(out: Path, rows: list[dict], per_seed: list[dict]) -> None:
    def dump(path, data):
        if not data:
            return
        keys = list(data[0])
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for row in data:
                writer.writerow({
                    k: (f"{v:.6f}" if isinstance(v, float) else v)
                    for k, v in row.items()
                })

    dump(out / "summary.csv", rows)
    dump(out / "per_seed.csv", per_seed)
    if rows:
        keys = list(rows[0])
        lines = ["| " + " | ".join(keys) + " |",
                 "|" + "|".join("---" for _ in keys) + "|"]
        for row in rows:
            lines.append("| " + " | ".join(
                f"{row[k]:.4f}" if isinstance(row[k], float) else str(row[k])
                for k in keys) + " |")
        (out / "summary.md").write_text("\n".join(lines) + "\n")
