"""Command-line entry point.

Every command resolves one flat ``key=value`` run configuration (defaults,
then ``--config`` file, then flags), echoes it to stdout followed by a blank
line, and only then reports.  Exit codes: 0 ok, 2 config, 3 I/O or file
format, 4 numerical abort, 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgio
from . import gradcheck
from .errors import ConfigError, FormatError, InputError, NumericalError
from .metrics import write_metrics
from .probe import ProbeConfig, attention_trace, evaluate, export_attention, probe_domain_accuracy
from .synth import DatasetConfig, dataset_load, dataset_save, generate
from .trainer import Checkpoint, TrainConfig, checkpoint_load, checkpoint_save, config_for_dataset, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_GRADCHECK = 0, 2, 3, 4, 5

# sweep values: attention window sizes (2L+1) and key/query dimensions
SWEEP_WINDOWS = (15, 21, 25, 31)
SWEEP_RA = (16, 32, 64, 128)


@dataclass(frozen=True)
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    dataset: str = ""
    out: str = "out"
    jobs: int = 1

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.out) / "dataset.aadd"


# flag dest -> config keys it sets
FLAG_KEYS = {
    "seed": ("data.seed", "train.seed", "probe.seed"),
    "out": ("out",),
    "jobs": ("jobs",),
    "data": ("dataset",),
    "domains": ("data.n_domains",),
    "classes": ("data.n_classes",),
    "dim": ("data.r_x",),
    "frames": ("data.T",),
    "train_seqs": ("data.train_per_domain",),
    "test_seqs": ("data.test_per_domain",),
    "noise": ("data.noise",),
    "shift": ("data.shift",),
    "segment_mean": ("data.segment_mean",),
    "mode": ("train.mode",),
    "lam": ("train.lam",),
    "mu": ("train.mu",),
    "split_depth": ("train.split_depth",),
    "window": ("train.attention.left", "train.attention.right"),
    "ra": ("train.attention.r_a",),
    "heads": ("train.attention.heads",),
    "score": ("train.attention.score",),
    "pos_enc": ("train.attention.pos_enc",),
    "epochs": ("train.epochs",),
    "batch": ("train.batch_size",),
}


def resolve(args) -> RunConfig:
    pairs = {}
    if args.config:
        pairs.update(cfgio.parse_pairs(Path(args.config).read_text()))
    for dest, keys in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "pos_enc":
            value = "true" if value == "on" else "false"
        for k in keys:
            pairs[k] = str(value)
    return cfgio.from_pairs(RunConfig, pairs)


def echo(run: RunConfig) -> None:
    sys.stdout.write(cfgio.to_text(run) + "\n")


def _common(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--jobs", type=int)


def _data_flags(p):
    p.add_argument("--domains", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int, help="frame dimension")
    p.add_argument("--frames", type=int, help="frames per sequence")
    p.add_argument("--train-seqs", type=int, help="train sequences per domain")
    p.add_argument("--test-seqs", type=int, help="test sequences per domain")
    p.add_argument("--noise", type=float)
    p.add_argument("--shift", type=float)
    p.add_argument("--segment-mean", type=float)


def _train_flags(p):
    p.add_argument("--data", help="dataset file (default: OUT/dataset.aadd)")
    p.add_argument("--mode", choices=("baseline", "adit", "aadit"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--split-depth", type=int)
    p.add_argument("--window", type=int, help="half-width L of a symmetric window (R = L)")
    p.add_argument("--ra", type=int, help="key/query dimension")
    p.add_argument("--heads", type=int)
    p.add_argument("--score", choices=("dot", "additive"))
    p.add_argument("--pos-enc", choices=("on", "off"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aadit", description="attentive adversarial domain-invariant training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    _common(p)
    _data_flags(p)

    p = sub.add_parser("train", help="train a model, writing metrics and checkpoints")
    _common(p)
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint and append a metrics row")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", help="metrics CSV to append to (default: OUT/metrics.csv)")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    _common(p)
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--inject-fault", choices=("grl-sign",), help=argparse.SUPPRESS)

    p = sub.add_parser("export-attention", help="write attention heatmap CSVs")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, nargs="+", default=[0])
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("sweep", help="train and evaluate aadit over window sizes or key/query dimensions")
    _common(p)
    _train_flags(p)
    p.add_argument("--kind", choices=("window", "ra"), required=True)
    p.add_argument("--values", type=int, nargs="+",
                   help=f"window sizes (default {SWEEP_WINDOWS}) or r_a values (default {SWEEP_RA})")
    return parser


def cmd_gen_data(run: RunConfig, args) -> int:
    echo(run)
    ds = generate(run.data)
    out = run.dataset_path
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_save(ds, out)
    print(f"wrote {out}")
    for name in ("train", "test"):
        split = ds.split(name)
        doms = np.bincount([s.domain for s in split], minlength=run.data.n_domains)
        cls = np.bincount(np.concatenate([s.Y for s in split]), minlength=run.data.n_classes)
        print(f"{name}: {len(split)} sequences; per domain {doms.tolist()}; frames per class {cls.tolist()}")
    return EXIT_OK


def _load_for_run(run: RunConfig):
    ds = dataset_load(run.dataset_path)
    return ds, replace(run, data=ds.config, train=config_for_dataset(run.train, ds))


def _save_run(run: RunConfig, out: Path) -> None:
    (out / "run.cfg").write_text(cfgio.to_text(run))


def cmd_train(run: RunConfig, args) -> int:
    ds, run = _load_for_run(run)
    resume = checkpoint_load(args.resume) if args.resume else None
    echo(run)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_run(run, out)
    model, history, written = train_loop(run.train, ds, checkpoint_dir=out, resume=resume)
    if written:
        # the last epoch checkpoint already holds the final state
        (out / "final.aadl").write_bytes(written[-1].read_bytes())
    else:
        checkpoint_save(model, run.train, out / "final.aadl", step=resume.step if resume else 0,
                        rng_state=resume.rng_state if resume else None)
    write_metrics(history, out / "metrics.csv", append=resume is not None)
    print(f"trained {len(history)} steps; wrote {out / 'metrics.csv'}, {len(written)} epoch checkpoints, "
          f"{out / 'final.aadl'}")
    if history:
        last = history[-1]
        print(f"last step: l_senone={last.l_senone:.6f} l_domain={last.l_domain}")
    return EXIT_OK


def _evaluate(run: RunConfig, ds, ck, jobs: int):
    row = evaluate(ck.model, ds.test, step=ck.step, jobs=jobs)
    row.probe_acc = probe_domain_accuracy(ck.model, ds.train, ds.test, run.probe, jobs)
    return row


def cmd_eval(run: RunConfig, args) -> int:
    ck = checkpoint_load(args.checkpoint)
    ds = dataset_load(run.dataset_path)
    run = replace(run, data=ds.config, train=ck.config)
    echo(run)
    row = _evaluate(run, ds, ck, run.jobs)
    path = Path(args.metrics) if args.metrics else Path(run.out) / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_metrics([row], path, append=True)
    for name, value in zip(("step", "l_senone", "l_domain", "class_acc", "domain_acc", "probe_acc"),
                           row.as_strings()):
        print(f"{name}: {value}")
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, args) -> int:
    echo(run)
    if not args.h > 0:
        raise ConfigError(f"--h must be positive, got {args.h}")
    grl = gradcheck.sign_flipped_grl if args.inject_fault == "grl-sign" else gradcheck.grl_backward
    results = gradcheck.run(seed=run.train.seed, h=args.h, grl=grl)
    print(gradcheck.format_table(results))
    failed = [r for r in results if not r.ok]
    print(f"tolerance {results[0].tolerance:g} at h={args.h:g}: "
          f"{len(results) - len(failed)}/{len(results)} groups pass")
    if failed:
        names = ", ".join(f"{r.config}:{r.group}" for r in failed)
        print(f"error: gradient check failed for {names}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_export_attention(run: RunConfig, args) -> int:
    ck = checkpoint_load(args.checkpoint)
    if ck.model.mode != "aadit":
        raise ConfigError(f"attention export needs an aadit checkpoint, {args.checkpoint} is {ck.model.mode}")
    ds = dataset_load(run.dataset_path)
    run = replace(run, data=ds.config, train=ck.config)
    echo(run)
    split = ds.split(args.split)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in args.index:
        if not 0 <= i < len(split):
            raise ConfigError(f"sequence index {i} outside {args.split} split of size {len(split)}")
        path = out / f"attention_{args.split}_{i:05d}.csv"
        export_attention(attention_trace(ck.model, split[i]), path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(run: RunConfig, args) -> int:
    ds, run = _load_for_run(run)
    run = replace(run, train=replace(run.train, mode="aadit"))
    echo(run)
    values = args.values or (SWEEP_WINDOWS if args.kind == "window" else SWEEP_RA)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for v in values:
        att = run.train.attention
        if args.kind == "window":
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"window size must be odd and positive, got {v}")
            att = replace(att, left=(v - 1) // 2, right=(v - 1) // 2)
        else:
            att = replace(att, r_a=v)
        point = replace(run, train=replace(run.train, attention=att))
        sub = out / f"{args.kind}_{v}"
        sub.mkdir(exist_ok=True)
        _save_run(point, sub)
        model, history, _ = train_loop(point.train, ds)
        checkpoint_save(model, point.train, sub / "final.aadl", step=len(history))
        row = _evaluate(point, ds, Checkpoint(point.train, model, len(history)), run.jobs)
        write_metrics(history + [row], sub / "metrics.csv")
        summary.append((v, row))
        print(f"{args.kind}={v}: class_acc={row.class_acc:.4f} probe_acc={row.probe_acc:.4f}")
    lines = [f"{args.kind},step,l_senone,l_domain,class_acc,domain_acc,probe_acc"]
    lines += [",".join([str(v)] + row.as_strings()) for v, row in summary]
    (out / f"sweep_{args.kind}.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / f'sweep_{args.kind}.csv'}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-attention": cmd_export_attention,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = resolve(args)
        return COMMANDS[args.command](run, args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
