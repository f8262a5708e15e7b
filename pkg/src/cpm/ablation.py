"""One-parameter sweeps over pre-training, each run scored by linear probe and mining precision.

When every value of the swept parameter shares the same training prefix,
the prefix is trained once per seed and each value resumes from its
checkpoint.  Resuming restores weights, optimiser momentum, queue and rng,
so a branched run is identical to a from-scratch run with that value.
"""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import Dataset
from .evaluation import EvalConfig, linear_evaluate, mining_precision
from .model import model_from_checkpoint
from .trainer import TrainConfig, run_pretrain

log = logging.getLogger(__name__)

# parameters that only change what happens after the stage switch
STAGE2_ONLY = {"k", "renormalize", "mine_from"}


@dataclass
class AblationRun:
    param: str
    value: Any
    seed: int
    top1: float
    precision: float
    final_loss: float
    run_dir: str


def shared_prefix(param: str, values: Sequence, base: TrainConfig) -> int | None:
    """Epochs of training common to every value, or ``None`` if nothing is shared."""
    if param in STAGE2_ONLY:
        return base.stage_switch_epoch
    if param == "stage_switch_epoch":
        return int(min(values))
    return None


def _label(value) -> str:
    return str(value).replace("/", "_")


def _score(checkpoint, dataset: Dataset, config: TrainConfig, eval_config: EvalConfig,
           precision_k: int) -> tuple[float, float]:
    model = model_from_checkpoint(checkpoint)[0]
    train, test = dataset.split("train"), dataset.split("test")
    report = linear_evaluate(model, train, test, eval_config, dataset.num_classes)
    report.save(Path(checkpoint).parent / "report.json")
    prec = mining_precision(model, train, precision_k, config.queue_size, config.batch_size,
                            config.augment, seed=eval_config.seed)
    return report.top1, prec


def _prefix_job(base: TrainConfig, dataset: Dataset, out: Path, epochs: int) -> str:
    res = run_pretrain(base, dataset, out, stop_after_epoch=epochs)
    return str(res.checkpoint)


def _branch_job(param, value, config: TrainConfig, dataset: Dataset, out: Path, resume_from,
                eval_config: EvalConfig, precision_k: int) -> AblationRun:
    res = run_pretrain(config, dataset, out, resume_from=resume_from)
    if resume_from is not None:
        # prepend the shared prefix so each run's log covers the whole schedule
        prefix_log = Path(resume_from).parent / "metrics.jsonl"
        if prefix_log.exists():
            own = (out / "metrics.jsonl").read_text()
            (out / "metrics.jsonl").write_text(prefix_log.read_text() + own)
    top1, prec = _score(res.checkpoint, dataset, config, eval_config, precision_k)
    loss = res.metrics[-1]["loss"] if res.metrics else float("nan")
    return AblationRun(param, value, config.seed, top1, prec, loss, str(out))


def run_ablation(base: TrainConfig, dataset: Dataset, param: str, values: Sequence, seeds: Sequence[int],
                 out_dir, eval_config: EvalConfig | None = None, precision_k: int | None = None,
                 share_prefix: bool = True, jobs: int = 1,
                 prefixes: dict[int, str] | None = None) -> list[AblationRun]:
    """Pre-train and score every ``(value, seed)`` pair; results in value-major order.

    ``prefixes`` maps seed to an already trained prefix checkpoint (for
    example one shared with another sweep); those seeds skip prefix training.
    """
    eval_config = eval_config or EvalConfig()
    precision_k = precision_k or base.k or 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = {(v, s): base.with_overrides({param: v, "seed": s}) for v in values for s in seeds}
    prefix = shared_prefix(param, values, base) if share_prefix else None

    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        starts: dict[int, str | None] = {s: None for s in seeds}
        if prefix:
            given = {s: str(p) for s, p in (prefixes or {}).items() if s in starts}
            lead = min(values) if param == "stage_switch_epoch" else values[0]
            todo = [s for s in seeds if s not in given]
            args = [(configs[(lead, s)], dataset, out / f"seed{s}" / "prefix", prefix) for s in todo]
            done = (pool.map(_prefix_job, *zip(*args)) if pool else [_prefix_job(*a) for a in args]) if args else []
            starts = {**dict(zip(todo, done)), **given}
        args = []
        for (v, s), cfg in configs.items():
            run_dir = out / f"seed{s}" / f"{param}={_label(v)}"
            if run_dir.exists():
                shutil.rmtree(run_dir)
            args.append((param, v, cfg, dataset, run_dir, starts[s], eval_config, precision_k))
        runs = list(pool.map(_branch_job, *zip(*args))) if pool else [_branch_job(*a) for a in args]
    finally:
        if pool:
            pool.shutdown()
    with open(out / "runs.jsonl", "w") as fh:
        for r in runs:
            fh.write(json.dumps(asdict(r)) + "\n")
    return runs


def summarize(runs: Sequence[AblationRun]) -> list[dict]:
    """Seed-averaged accuracy and precision per value, in first-seen value order."""
    order: list = []
    for r in runs:
        if r.value not in order:
            order.append(r.value)
    rows = []
    for v in order:
        sel = [r for r in runs if r.value == v]
        acc = np.array([r.top1 for r in sel])
        prec = np.array([r.precision for r in sel])
        rows.append({"value": v, "seeds": len(sel), "top1_mean": float(acc.mean()),
                     "top1_std": float(acc.std()), "precision_mean": float(prec.mean()),
                     "top1_per_seed": [float(a) for a in acc]})
    return rows
