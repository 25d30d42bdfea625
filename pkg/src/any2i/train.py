"""Training loop (staged resolutions, AdamW, condition dropout), held-out
evaluation through the sampler + oracle, and metrics persistence."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import LatentCodec, nearest_resize
from .dataset import family_counts
from .flow import (GuidanceConfig, EDIT_IMAGE_SCALE, euler_sample,
                   sample_training_instance, training_loss)
from .model import ModelConfig, VelocityModel
from .optim import AdamW, collect_grads, zero_grads
from .oracle import oracle_score
from .sequence import TaskRecord
from .tensor import FlopCounter, count_flops, scale


@dataclass
class StageConfig:
    resolution: int      # latent cells per side
    steps: int
    batch_size: int
    lr: float


@dataclass
class TrainConfig:
    stages: list[StageConfig]
    seed: int = 0
    mask_mode: str = "hybrid"
    weighted_loss: bool = True
    p_drop_text: float = 0.1
    p_drop_images: float = 0.1
    weight_decay: float = 0.01
    warmup_steps: int = 50
    eval_every: int = 0
    eval_records: int = 32
    eval_sample_steps: int = 20

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if not self.stages:
            raise ValueError("training needs at least one stage")
        for s in self.stages:
            if s.resolution % 2:
                raise ValueError(f"stage resolution {s.resolution} not divisible by the patch size")
            if s.lr <= 0:
                raise ValueError(f"stage lr must be positive, got {s.lr}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunMetrics:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    stages: list[int] = field(default_factory=list)
    evals: list[tuple[int, dict]] = field(default_factory=list)
    wall_clock: float = 0.0
    flops: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "stage", "loss"])
            for step, stage, loss in zip(self.steps, self.stages, self.losses):
                writer.writerow([step, stage, f"{loss:.6f}"])


def split_holdout(records: list[TaskRecord], frac: float = 0.1,
                  seed: int = 0) -> tuple[list[TaskRecord], list[TaskRecord]]:
    """Deterministic train/held-out partition by seeded permutation."""
    order = np.random.default_rng(seed).permutation(len(records))
    n_held = int(round(frac * len(records)))
    held_idx = set(order[:n_held].tolist())
    train = [r for i, r in enumerate(records) if i not in held_idx]
    held = [r for i, r in enumerate(records) if i in held_idx]
    return train, held


def rescale_record(record: TaskRecord, latent_size: int, codec: LatentCodec) -> TaskRecord:
    """Bring a record to a stage resolution by nearest-neighbor resize in
    pixel space (decode, resize, encode)."""
    side = 2 * latent_size

    def _rescale(lat: np.ndarray) -> np.ndarray:
        img = np.clip(codec.decode(lat), 0.0, 1.0)
        return codec.encode(nearest_resize(img, side, side))

    return TaskRecord(record.instruction, [_rescale(x) for x in record.input_images],
                      _rescale(record.target), record.task_tag)


def _stage_records(records: list[TaskRecord], resolution: int, codec: LatentCodec,
                   latent_channels: int) -> list[TaskRecord]:
    out = []
    for rec in records:
        c, h, w = rec.target.shape
        if c != latent_channels:
            raise ValueError(f"dataset latent channels {c} do not match model ({latent_channels})")
        if (h, w) == (resolution, resolution):
            out.append(rec)
        else:
            out.append(rescale_record(rec, latent_size=resolution, codec=codec))
    return out


def train_model(config: TrainConfig, records: list[TaskRecord], codec: LatentCodec,
                model: VelocityModel | None = None, model_config: ModelConfig | None = None,
                eval_set: list[TaskRecord] | None = None,
                log=None) -> tuple[VelocityModel, RunMetrics]:
    """Run all stages over `records`; returns the trained model and metrics.

    Aborts with the step number on a non-finite loss.  `eval_set`, when
    given with eval_every > 0, is scored periodically through the sampler.
    """
    if not records:
        raise ValueError("no training records")
    if model is None:
        mc = model_config or ModelConfig(mask_mode=config.mask_mode)
        model = VelocityModel(mc, seed=config.seed, codec_seed=codec.seed)
    rng = np.random.default_rng(config.seed + 0x5EED)
    optimizer = AdamW(lr=config.stages[0].lr, weight_decay=config.weight_decay)
    metrics = RunMetrics()
    counter = FlopCounter()
    start = time.perf_counter()
    global_step = 0

    with count_flops(counter):
        for stage_idx, stage in enumerate(config.stages):
            stage_recs = _stage_records(records, stage.resolution, codec, model.config.latent_channels)
            for _ in range(stage.steps):
                warm = min(1.0, (global_step + 1) / max(1, config.warmup_steps))
                optimizer.lr = stage.lr * warm
                batch_idx = rng.integers(0, len(stage_recs), size=stage.batch_size)
                zero_grads(model.params)
                batch_loss = 0.0
                for bi in batch_idx:
                    rec = stage_recs[int(bi)]
                    fs = sample_training_instance(rec, rng, config.p_drop_text, config.p_drop_images)
                    w = fs.w if config.weighted_loss else np.ones_like(fs.w)
                    v_pred = model.predict_velocity(rec, fs.x_t, fs.t, fs.drop_text, fs.drop_images)
                    loss = training_loss(v_pred, fs.v_star, w)
                    batch_loss += loss.item()
                    scale(loss, 1.0 / stage.batch_size).backward()
                batch_loss /= stage.batch_size
                if not np.isfinite(batch_loss):
                    raise RuntimeError(f"training aborted: non-finite loss at step {global_step}")
                optimizer.step(model.params, collect_grads(model.params))
                metrics.steps.append(global_step)
                metrics.stages.append(stage_idx)
                metrics.losses.append(batch_loss)
                global_step += 1
                if log and global_step % 100 == 0:
                    log(f"step {global_step} stage {stage_idx} loss {batch_loss:.4f}")
                if (config.eval_every and eval_set
                        and global_step % config.eval_every == 0):
                    gcfg = GuidanceConfig(steps=config.eval_sample_steps)
                    scores = evaluate(model, eval_set[:config.eval_records], codec, gcfg,
                                      seed=config.seed)
                    metrics.evals.append((global_step, scores))
                    if log:
                        log(f"step {global_step} eval {format_eval(scores)}")

    metrics.wall_clock = time.perf_counter() - start
    metrics.flops = counter.total
    return model, metrics


def guidance_for_record(record: TaskRecord, base: GuidanceConfig,
                        auto_edit_scale: bool = True) -> GuidanceConfig:
    """Editing-tagged records get the higher image guidance scale unless
    the caller overrode it."""
    if auto_edit_scale and record.task_tag in ("edit", "fewshot"):
        return GuidanceConfig(base.text_scale, EDIT_IMAGE_SCALE, base.steps)
    return base


def evaluate(model: VelocityModel, records: list[TaskRecord], codec: LatentCodec,
             gcfg: GuidanceConfig, seed: int = 0, use_cache: bool = True,
             auto_edit_scale: bool = True, use_targets: bool = False) -> dict:
    """Sample every record and aggregate oracle metrics per task family.

    `use_targets` bypasses the model and scores the ground-truth targets
    (oracle sanity mode)."""
    if not records:
        raise ValueError("evaluation split is empty")
    sums: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for i, rec in enumerate(records):
        if use_targets:
            gen = rec.target
        else:
            rng = np.random.default_rng(seed * 1_000_003 + i)
            gen = euler_sample(model, rec, guidance_for_record(rec, gcfg, auto_edit_scale),
                               rng, use_cache=use_cache)
        scores = oracle_score(rec, gen, codec)
        fam = sums.setdefault(rec.task_tag, {})
        for k, v in scores.items():
            fam[k] = fam.get(k, 0.0) + v
        counts[rec.task_tag] = counts.get(rec.task_tag, 0) + 1
    return {tag: {**{k: v / counts[tag] for k, v in fam.items()}, "count": counts[tag]}
            for tag, fam in sums.items()}


def evaluate_flow_loss(model: VelocityModel, records: list[TaskRecord],
                       seed: int = 0, draws: int = 4) -> float:
    """Unweighted held-out velocity regression loss with fixed (eps, t)
    draws per record; comparable across runs that share the seed."""
    if not records:
        raise ValueError("evaluation split is empty")
    total = 0.0
    n = 0
    for i, rec in enumerate(records):
        rng = np.random.default_rng(seed * 7_919 + i)
        for _ in range(draws):
            fs = sample_training_instance(rec, rng, p_drop_text=0.0, p_drop_images=0.0)
            v_pred = model.predict_velocity(rec, fs.x_t, fs.t)
            total += training_loss(v_pred, fs.v_star, np.ones_like(fs.w)).item()
            n += 1
    return total / n


def format_eval(scores: dict) -> str:
    parts = []
    for tag in sorted(scores):
        inner = " ".join(f"{k}={v:.3f}" for k, v in sorted(scores[tag].items()) if k != "count")
        parts.append(f"[{tag} n={scores[tag]['count']} {inner}]")
    return " ".join(parts)


def write_eval_csv(path: str | Path, scores: dict) -> None:
    """CSV schema: family,metric,value,count (one row per family metric)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["family", "metric", "value", "count"])
        for tag in sorted(scores):
            for metric in sorted(scores[tag]):
                if metric == "count":
                    continue
                writer.writerow([tag, metric, f"{scores[tag][metric]:.6f}", scores[tag]["count"]])


__all__ = [
    "StageConfig", "TrainConfig", "RunMetrics", "split_holdout", "rescale_record",
    "train_model", "evaluate", "evaluate_flow_loss", "guidance_for_record",
    "format_eval", "write_eval_csv", "family_counts",
]
