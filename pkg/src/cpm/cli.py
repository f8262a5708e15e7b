"""Command-line entry point: ``cpm <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as skel
from .ablation import run_ablation, summarize
from .augment import AugmentationConfig
from .evaluation import (EvalConfig, export_embeddings, finetune_evaluate, linear_evaluate,
                         mining_precision)
from .model import Model, model_from_checkpoint
from .trainer import ConfigError, TrainConfig, run_pretrain

log = logging.getLogger("cpm")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage already; keep that, but route through one place
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_overrides(pairs) -> dict:
    """``key=value`` strings to a dict; values are read as JSON when they parse."""
    out = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not key=value")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _split_overrides(overrides: dict) -> tuple[dict, dict]:
    train = {k: v for k, v in overrides.items() if not k.startswith("eval.")}
    ev = {k[len("eval."):]: v for k, v in overrides.items() if k.startswith("eval.")}
    return train, ev


def train_config(args) -> TrainConfig:
    base = TrainConfig.from_file(args.config) if getattr(args, "config", None) else TrainConfig()
    train, _ = _split_overrides(parse_overrides(getattr(args, "set", None)))
    return base.with_overrides(train) if train else base


def eval_config(args) -> EvalConfig:
    _, ev = _split_overrides(parse_overrides(getattr(args, "set", None)))
    for flag in ("epochs", "lr", "seed"):
        val = getattr(args, flag, None)
        if val is not None:
            ev[flag] = val
    known = {f.name for f in dataclasses.fields(EvalConfig)}
    unknown = set(ev) - known
    if unknown:
        raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
    return EvalConfig(**ev)


def _dataset(args) -> skel.Dataset:
    if args.data:
        return skel.load_dataset(args.data)
    return skel.benchmark_dataset()


def _echo(out: Path, verb: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "command.json").write_text(json.dumps({"verb": verb, "argv": sys.argv[1:], **resolved},
                                                 indent=1, default=str))


def _write_metrics_report(records, out: Path, switch_epoch: int) -> None:
    from . import plotting
    keys = ["step", "epoch", "stage", "lr", "loss", "mean_top1_sim", "queue_fill", "wall_ms"]
    plotting.write_csv(out / "metrics.csv", keys, [[r[k] for k in keys] for r in records])
    if records:
        plotting.plot_metrics(records, out / "loss.png", switch_epoch)


# ----------------------------------------------------------------------
# verbs


def cmd_synth(args) -> int:
    out = Path(args.out)
    kwargs = dict(num_classes=args.classes, samples_per_class=args.per_class, num_joints=args.joints,
                  num_frames=args.frames, noise_sigma=args.noise, seed=args.seed,
                  test_fraction=args.test_fraction, amplitude_jitter=args.amplitude_jitter,
                  view_jitter=args.view_jitter)
    seqs, manifest = skel.generate_synthetic_dataset(**kwargs)
    path = skel.save_dataset(out / "manifest.json", seqs, manifest)
    _echo(out, "synth", {"generator": kwargs})
    print(f"wrote {len(seqs)} sequences to {path}")
    return 0


def cmd_pretrain(args) -> int:
    config = train_config(args)
    dataset = _dataset(args)
    out = Path(args.out)
    _echo(out, "pretrain", {"config": config.to_dict(), "data": args.data})
    res = run_pretrain(config, dataset, out, resume_from=args.resume, stop_after_epoch=args.stop_after_epoch,
                       progress=True)
    _write_metrics_report(res.metrics, out, config.stage_switch_epoch)
    print(f"checkpoint {res.checkpoint}")
    return 0


def _load_model(args, dataset) -> Model:
    if args.checkpoint:
        return model_from_checkpoint(args.checkpoint)[0]
    config = train_config(args)
    log.info("no checkpoint given; using a randomly initialised encoder (seed %d)", config.seed)
    return Model(config.encoder, dataset.adjacency, seed=config.seed, dtype=config.dtype)


def _write_report(report, out: Path) -> None:
    from . import plotting
    report.save(out / "report.json")
    plotting.write_csv(out / "per_class.csv", ["class", "accuracy"], list(enumerate(report.per_class)))
    print(f"top1 {report.top1:.4f}")


def cmd_eval(args, protocol: str) -> int:
    ev = eval_config(args)
    dataset = _dataset(args)
    out = Path(args.out)
    _echo(out, f"eval-{protocol}", {"eval": dataclasses.asdict(ev), "checkpoint": args.checkpoint,
                                    "data": args.data})
    model = _load_model(args, dataset)
    train, test = dataset.split("train"), dataset.split("test")
    if protocol == "linear":
        report = linear_evaluate(model, train, test, ev, dataset.num_classes)
    else:
        aug = AugmentationConfig() if args.augment else None
        report = finetune_evaluate(model, train, test, ev, dataset.num_classes, aug)
    _write_report(report, out)
    return 0


def _epoch_of(path: Path) -> int:
    stem = path.stem
    return int(stem.split("_")[-1]) if stem.startswith("epoch_") else -1


def cmd_mine_precision(args) -> int:
    from . import plotting
    dataset = _dataset(args)
    out = Path(args.out)
    paths = [Path(p) for p in args.checkpoint or []]
    if args.run_dir:
        paths += sorted(Path(args.run_dir).glob("checkpoints/epoch_*.cpmp"))
    if not paths:
        raise ConfigError("give --checkpoint or --run-dir")
    _echo(out, "mine-precision", {"k": args.k, "queue_size": args.queue_size, "checkpoints": [str(p) for p in paths]})
    rows = []
    for p in paths:
        model, _, meta = model_from_checkpoint(p)
        cfg = TrainConfig.from_dict(meta["config"]) if "config" in meta else TrainConfig()
        prec = mining_precision(model, dataset.split("train"), args.k, args.queue_size, cfg.batch_size,
                                cfg.augment, seed=args.seed)
        rows.append([str(p), _epoch_of(p), prec])
        print(f"{p}\t{prec:.4f}")
    plotting.write_csv(out / "precision.csv", ["checkpoint", "epoch", "precision"], rows)
    epochs = [r[1] for r in rows]
    if len(rows) > 1 and min(epochs) >= 0:
        plotting.plot_precision(epochs, {f"K={args.k}": [r[2] for r in rows]}, out / "precision.png")
    return 0


def _parse_values(raw: str) -> list:
    vals = []
    for item in raw.split(","):
        item = item.strip()
        try:
            vals.append(json.loads(item))
        except json.JSONDecodeError:
            vals.append(item)
    return vals


def cmd_ablate(args) -> int:
    from . import plotting
    config = train_config(args)
    ev = eval_config(args)
    param = {"K": "k", "tau'": "tau_prime", "switch": "stage_switch_epoch"}.get(args.param, args.param)
    values = _parse_values(args.values)
    for v in values:
        config.with_overrides({param: v})  # fail fast on a bad key or value
    seeds = [int(s) for s in args.seeds.split(",")]
    dataset = _dataset(args)
    out = Path(args.out)
    _echo(out, "ablate", {"config": config.to_dict(), "eval": dataclasses.asdict(ev), "param": param,
                          "values": values, "seeds": seeds, "data": args.data})
    runs = run_ablation(config, dataset, param, values, seeds, out, ev, precision_k=args.precision_k,
                        share_prefix=not args.no_share, jobs=args.jobs)
    rows = summarize(runs)
    plotting.write_csv(out / "summary.csv", ["value", "seeds", "top1_mean", "top1_std", "precision_mean"],
                       [[r["value"], r["seeds"], r["top1_mean"], r["top1_std"], r["precision_mean"]] for r in rows])
    numeric = all(isinstance(r["value"], (int, float)) and not isinstance(r["value"], bool) for r in rows)
    if numeric:
        plotting.plot_sweep(param, [r["value"] for r in rows], [r["top1_mean"] for r in rows], out / "sweep.png",
                            precisions=[r["precision_mean"] for r in rows])
    for r in rows:
        print(f"{param}={r['value']}\ttop1 {r['top1_mean']:.4f} +- {r['top1_std']:.4f}\t"
              f"precision {r['precision_mean']:.4f}")
    return 0


def cmd_export(args) -> int:
    dataset = _dataset(args)
    model = model_from_checkpoint(args.checkpoint)[0]
    seqs = dataset.split(args.split) if args.split != "all" else list(dataset.sequences)
    path = export_embeddings(model, seqs, args.out)
    print(f"wrote {len(seqs)} embeddings to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite
    results = run_suite(points=args.points, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\tmax_rel_err={r.max_error:.3e}\t{r.seconds:.2f}s")
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} within {TOLERANCE:g}")
    return 0 if not bad else 1


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpm", description="Contrastive positive mining for skeleton sequences.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, data=True, config=False, out_default=None):
        if data:
            sp.add_argument("--data", help="dataset manifest (default: built-in synthetic benchmark)")
        if config:
            sp.add_argument("--config", help="JSON file with TrainConfig fields")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config key (dotted for nesting; eval.* for the probe); repeatable")
        sp.add_argument("--out", required=out_default is None, default=out_default, help="output location")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--per-class", type=int, default=80)
    sp.add_argument("--joints", type=int, default=15)
    sp.add_argument("--frames", type=int, default=64)
    sp.add_argument("--noise", type=float, default=skel.BENCHMARK_GENERATOR["noise_sigma"])
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--test-fraction", type=float, default=0.25)
    sp.add_argument("--amplitude-jitter", type=float, default=skel.BENCHMARK_GENERATOR["amplitude_jitter"])
    sp.add_argument("--view-jitter", type=float, default=skel.BENCHMARK_GENERATOR["view_jitter"])
    common(sp, data=False)

    sp = sub.add_parser("pretrain", help="two-stage self-supervised pre-training")
    common(sp, config=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--stop-after-epoch", type=int)

    for verb, protocol in (("eval-linear", "linear"), ("eval-finetune", "finetune")):
        sp = sub.add_parser(verb, help=f"{protocol} evaluation of a checkpoint")
        common(sp, config=True)
        sp.add_argument("--checkpoint", help="pre-trained checkpoint (omit for a random-init encoder)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--seed", type=int)
        if protocol == "finetune":
            sp.add_argument("--augment", action="store_true", help="augment clips while fine-tuning")
        sp.set_defaults(protocol=protocol)

    sp = sub.add_parser("mine-precision", help="precision of mined positives for checkpoints")
    common(sp)
    sp.add_argument("--checkpoint", action="append", help="checkpoint path; repeatable")
    sp.add_argument("--run-dir", help="pretrain output directory; scores every epoch checkpoint")
    sp.add_argument("-k", "--k", type=int, default=16)
    sp.add_argument("--queue-size", type=int, default=4096)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("ablate", help="sweep one TrainConfig parameter")
    common(sp, config=True)
    sp.add_argument("--param", required=True, help="config key (aliases: K, tau', switch)")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--precision-k", type=int, help="K used to score mining precision (default: config k)")
    sp.add_argument("--no-share", action="store_true", help="train every run from scratch")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    sp = sub.add_parser("export-embeddings", help="write eval-mode features to an EMBD file")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="all", choices=["all", "train", "test"])

    sp = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    sp.add_argument("--points", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"cpm: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handlers = {
        "synth": cmd_synth,
        "pretrain": cmd_pretrain,
        "eval-linear": lambda a: cmd_eval(a, "linear"),
        "eval-finetune": lambda a: cmd_eval(a, "finetune"),
        "mine-precision": cmd_mine_precision,
        "ablate": cmd_ablate,
        "export-embeddings": cmd_export,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"cpm: config error: {exc}", file=sys.stderr)
        return 2
    except (skel.DataFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"cpm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
