"""Two-stage pre-training: distribution matching, then positive-enhanced learning."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import contrastive as cc
from .augment import AugmentationConfig, augment, augment_batch_pair
from .data import Dataset, stack_sequences
from .model import EncoderConfig, Model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    stage_switch_epoch: int = 45
    batch_size: int = 128
    peak_lr: float = 0.1
    floor_lr: float = 1e-4
    warmup_epochs: float = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.1
    tau_prime: float = 0.05
    k: int = 16
    queue_size: int = 4096
    seed: int = 0
    symmetrize: bool = True
    ema: bool = False
    ema_momentum: float = 0.99
    renormalize: bool = False
    mine_from: str = "target"
    precision: int = 32
    checkpoint_every: int = 1
    keep_checkpoints: int = 0
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.stage_switch_epoch <= self.epochs:
            raise ConfigError("need 0 < stage_switch_epoch <= epochs")
        if self.tau <= 0 or self.tau_prime <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.k <= self.queue_size:
            raise ConfigError("need 0 <= K <= queue_size")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch centring)")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.mine_from not in ("target", "student"):
            raise ConfigError("mine_from must be 'target' or 'student'")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "augment" in obj and isinstance(obj["augment"], dict):
                _reject_unknown(AugmentationConfig, obj["augment"], "augment")
                obj["augment"] = AugmentationConfig(**obj["augment"])
            if "encoder" in obj and isinstance(obj["encoder"], dict):
                _reject_unknown(EncoderConfig, obj["encoder"], "encoder")
                obj["encoder"] = EncoderConfig(**obj["encoder"])
            return cls(**obj)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(obj)

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        obj = self.to_dict()
        for key, value in overrides.items():
            node = obj
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return TrainConfig.from_dict(obj)


def _reject_unknown(kind, obj, name):
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")


def paper_scale_config() -> TrainConfig:
    return TrainConfig(
        epochs=400, stage_switch_epoch=300, batch_size=512, peak_lr=0.5, floor_lr=0.0005,
        warmup_epochs=10, tau=0.1, tau_prime=0.05, k=100, queue_size=65536,
        encoder=EncoderConfig(widths=[64, 64, 64, 64, 128, 128, 128, 256, 256],
                              projector_hidden=512, projector_out=128),
    )


def lr_schedule(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay to ``floor_lr``.

    The final step ``epochs * steps_per_epoch - 1`` lands exactly on the floor.
    """
    total = config.epochs * steps_per_epoch
    warm = int(round(config.warmup_epochs * steps_per_epoch))
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside schedule of {total} steps")
    if step < warm:
        return config.peak_lr * step / warm
    span = total - 1 - warm
    if span <= 0:
        return config.peak_lr
    progress = (step - warm) / span
    return config.floor_lr + 0.5 * (config.peak_lr - config.floor_lr) * (1 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------


class Trainer:
    """Owns model, optimiser buffers, queue and rng for one pre-training run."""

    def __init__(self, config: TrainConfig, dataset: Dataset, out_dir=None):
        self.config = config
        self.dataset = dataset
        self.train_set = dataset.split("train") or list(dataset.sequences)
        self.steps_per_epoch = len(self.train_set) // config.batch_size
        if self.steps_per_epoch < 1:
            raise ConfigError(
                f"batch_size {config.batch_size} exceeds the {len(self.train_set)} training samples")
        self.model = Model(config.encoder, dataset.adjacency, seed=config.seed, dtype=config.dtype)
        self.target = self.model.copy() if config.ema else None
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.model.params.items()}
        self.queue = cc.ContextQueue(config.queue_size, config.encoder.projector_out)
        self.rng = np.random.default_rng([config.seed, 1])
        self.epoch = 0
        self.step = 0
        self.fill_steps = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metrics: list[dict] = []

    # -- data ---------------------------------------------------------
    def _batches(self):
        perm = self.rng.permutation(len(self.train_set))
        b = self.config.batch_size
        for i in range(self.steps_per_epoch):
            seqs = [self.train_set[j] for j in perm[i * b:(i + 1) * b]]
            yield stack_sequences(seqs)

    # -- queue warm-up ------------------------------------------------
    def fill_queue(self) -> None:
        """Forward target embeddings until the queue is full; no loss, no update."""
        needed = math.ceil(self.config.queue_size / self.config.batch_size)
        while self.fill_steps < needed:
            for data, labels, ids in self._batches():
                if self.fill_steps >= needed:
                    break
                views = np.stack([augment(s, self.rng, self.config.augment) for s in data])
                with ad.no_grad():
                    z = (self.target or self.model).embed(views, train=True)
                    zbar = cc.center_and_normalize(z)
                self.queue.push(zbar.data, ids, labels)
                self.fill_steps += 1

    # -- one optimisation step ---------------------------------------
    def _direction(self, pred, tgt, queue_entries, exclude, stage):
        cfg = self.config
        s_bar = cc.center_and_normalize(pred)
        t_bar = cc.center_and_normalize(tgt).data.astype(np.float64)
        mining_scores = None
        if stage == 2 and cfg.mine_from == "student":
            mining_scores = s_bar.data.astype(np.float64) @ queue_entries.T
        weights, dots, _ = cc.target_distributions(
            t_bar, queue_entries, cfg.tau_prime, cfg.k, enhance=(stage == 2), exclude=exclude,
            mining_scores=mining_scores, renormalize=cfg.renormalize)
        log_d = cc.student_log_distribution(s_bar, queue_entries, cfg.tau)
        return cc.distribution_loss(weights, log_d), t_bar, dots

    def compute_loss(self, x1, x2, ids, stage: int, queue_entries=None, queue_ids=None):
        """Loss tensor plus the target embeddings that get pushed afterwards."""
        if queue_entries is None:
            queue_entries = self.queue.entries()
            queue_ids = self.queue.ids()
        exclude = cc.self_mask(ids, queue_ids)
        out = self.model.forward_views(x1, x2, train=True, target=self.target,
                                       symmetrize=self.config.symmetrize)
        loss, t2_bar, dots = self._direction(out["p1"], out["t2"], queue_entries, exclude, stage)
        if self.config.symmetrize:
            loss21, _, _ = self._direction(out["p2"], out["t1"], queue_entries, exclude, stage)
            loss = ad.multiply(ad.add(loss, loss21), 0.5)
        masked = np.where(exclude, -np.inf, dots)
        top1 = masked.max(axis=1)
        top1 = top1[np.isfinite(top1)]
        return loss, t2_bar, float(top1.mean()) if top1.size else float("nan")

    def _sgd(self, lr: float) -> None:
        cfg = self.config
        for name, p in self.model.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = g + cfg.weight_decay * p.data
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            p.data = p.data - lr * v
            p.grad = None
        if self.target is not None:
            m = cfg.ema_momentum
            for name, p in self.target.params.items():
                p.data = m * p.data + (1 - m) * self.model.params[name].data

    def train_step(self, data, labels, ids, stage: int) -> dict:
        if not self.queue.full:
            raise RuntimeError("train_step needs a full queue; call fill_queue first")
        t0 = time.perf_counter()
        lr = lr_schedule(self.step, self.config, self.steps_per_epoch)
        x1, x2 = augment_batch_pair(data, self.rng, self.config.augment)
        try:
            loss, t2_bar, top1 = self.compute_loss(x1, x2, ids, stage)
            value = loss.item()
            if not np.isfinite(value):
                raise ad.NonFiniteError("loss is not finite")
            ad.backward(loss)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            self._dump_diagnostics(str(exc), stage)
            raise TrainingDivergedError(f"non-finite values at step {self.step}: {exc}") from exc
        self._sgd(lr)
        self.queue.push(t2_bar, ids, labels)
        record = {
            "step": self.step,
            "epoch": self.epoch,
            "stage": stage,
            "lr": lr,
            "loss": value,
            "mean_top1_sim": top1,
            "queue_fill": len(self.queue),
            "wall_ms": round((time.perf_counter() - t0) * 1000, 3),
        }
        self.step += 1
        return record

    def stage_for(self, epoch: int) -> int:
        return 1 if epoch < self.config.stage_switch_epoch else 2

    def run_epoch(self) -> list[dict]:
        stage = self.stage_for(self.epoch)
        records = []
        for data, labels, ids in self._batches():
            rec = self.train_step(data, labels, ids, stage)
            records.append(rec)
            self._log(rec)
        self.epoch += 1
        return records

    # -- persistence --------------------------------------------------
    def _log(self, record: dict) -> None:
        self.metrics.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def _dump_diagnostics(self, reason: str, stage: int) -> None:
        if self.out_dir is None:
            return
        dump = {
            "reason": reason, "step": self.step, "epoch": self.epoch, "stage": stage,
            "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in self.model.params.items()},
            "param_finite": {k: bool(np.isfinite(p.data).all()) for k, p in self.model.params.items()},
            "queue_fill": len(self.queue),
        }
        (self.out_dir / "diverged.json").write_text(json.dumps(dump, indent=1))

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.model.state_arrays())
        arrays.update({f"momentum/{k}": v for k, v in self.velocity.items()})
        if self.target is not None:
            arrays.update({f"target/{k}": v for k, v in self.target.state_arrays().items()})
        q = self.queue.state()
        arrays["queue/entries"] = q["entries"]
        arrays["queue/labels"] = q["labels"]
        return arrays

    def save(self, path) -> Path:
        meta = {
            "kind": "cpm-pretrain",
            "model": self.model.describe(),
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "fill_steps": self.fill_steps,
            "rng": self.rng.bit_generator.state,
            "queue_ids": self.queue.ids(),
        }
        return save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def resume(cls, path, dataset: Dataset, config: TrainConfig | None = None, out_dir=None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; ``config`` may replace the stored one.

        A replacement config must keep the model, batch size and precision.
        """
        arrays, meta = load_checkpoint(path)
        stored = TrainConfig.from_dict(meta["config"])
        config = config or stored
        for key in ("encoder", "batch_size", "precision", "queue_size", "ema", "seed"):
            if getattr(config, key) != getattr(stored, key):
                raise ConfigError(f"cannot resume with a different {key}")
        trainer = cls(config, dataset, out_dir=out_dir)
        trainer.model.load_state_arrays(arrays)
        for k in trainer.velocity:
            trainer.velocity[k] = arrays[f"momentum/{k}"].astype(config.dtype).copy()
        if trainer.target is not None:
            trainer.target.load_state_arrays({k[len("target/"):]: v for k, v in arrays.items()
                                              if k.startswith("target/")})
        trainer.queue = cc.ContextQueue.from_state(
            config.queue_size, arrays["queue/entries"], meta["queue_ids"], arrays["queue/labels"])
        trainer.rng.bit_generator.state = meta["rng"]
        trainer.epoch = int(meta["epoch"])
        trainer.step = int(meta["step"])
        trainer.fill_steps = int(meta["fill_steps"])
        return trainer


@dataclass
class PretrainResult:
    checkpoint: Path | None
    metrics: list[dict]
    trainer: Trainer


def run_pretrain(config: TrainConfig, dataset: Dataset, out_dir=None, resume_from=None,
                 stop_after_epoch: int | None = None, progress: bool = False) -> PretrainResult:
    """Fill the queue, then train stage 1 and stage 2.

    With ``out_dir`` a config echo, ``metrics.jsonl`` and per-epoch
    checkpoints are written there.  ``stop_after_epoch`` ends the run early
    after that many completed epochs (used to branch ablations).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if metrics_path.exists():
            metrics_path.unlink()
    if resume_from is not None:
        trainer = Trainer.resume(resume_from, dataset, config, out_dir=out)
    else:
        trainer = Trainer(config, dataset, out_dir=out)
    if out is not None:
        echo = {"config": config.to_dict(), "resumed_from": str(resume_from) if resume_from else None,
                "steps_per_epoch": trainer.steps_per_epoch,
                "parameters": trainer.model.num_parameters()}
        (out / "config.json").write_text(json.dumps(echo, indent=1))
    trainer.fill_queue()
    last = stop_after_epoch if stop_after_epoch is not None else config.epochs
    saved: list[Path] = []
    final = None
    while trainer.epoch < last:
        t0 = time.perf_counter()
        records = trainer.run_epoch()
        if progress:
            loss = float(np.mean([r["loss"] for r in records]))
            log.info("epoch %d stage %d loss %.4f (%.1fs)", trainer.epoch, records[-1]["stage"], loss,
                     time.perf_counter() - t0)
        if out is not None and config.checkpoint_every and trainer.epoch % config.checkpoint_every == 0:
            path = trainer.save(out / "checkpoints" / f"epoch_{trainer.epoch:03d}.cpmp")
            saved.append(path)
            if config.keep_checkpoints and len(saved) > config.keep_checkpoints:
                saved.pop(0).unlink(missing_ok=True)
    if out is not None:
        final = trainer.save(out / "final.cpmp")
    return PretrainResult(final, trainer.metrics, trainer)
