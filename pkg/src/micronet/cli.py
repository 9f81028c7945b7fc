"""Command-line entry point with one subcommand per workflow step."""
from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from .accounting import REFERENCE_BUDGETS, count_model
from .arch import ArchError, build_arch, full_rank_partner, load_arch, summary_rows
from .bundle import FormatError, WeightBundle
from .data import DatasetError, blob_heatmaps, load_image, load_image_dir, synthetic_blobs
from .tensor import ConfigError, ShapeError
from .train import TrainConfig, TrainingError, train_toy
from .verify import run_suite

THREADS_ENV = "MICRONET_THREADS"


class CommandError(click.ClickException):
    """Failure reported as JSON on stderr with a nonzero exit."""

    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind, self.exit_code = kind, code

    def show(self, file=None):
        click.echo(json.dumps(dict(error=self.kind, message=self.message)), err=True)


def _fail(exc: Exception, code: int = 2):
    raise CommandError(type(exc).__name__, str(exc), code) from exc


def _parse_hw(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise CommandError("UsageError", f"--input must look like 224x224, got {text!r}") from None


def _load(name, config):
    try:
        return load_arch(config if config else name)
    except (ArchError, ConfigError) as exc:
        _fail(exc)


@click.group()
@click.option("--threads", type=int, default=None, envvar=THREADS_ENV, show_envvar=True,
              help="Upper bound on BLAS threads; 1 gives bit-reproducible runs.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for every RNG.")
@click.pass_context
def cli(ctx, threads, seed):
    """Tools for micro-factorized networks."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    if threads is not None:
        if threads < 1:
            raise CommandError("UsageError", "--threads must be >= 1")
        ctx.with_resource(threadpool_limits(limits=threads))


@cli.command()
@click.argument("name", required=False)
@click.option("--config", type=click.Path(dir_okay=False), help="Architecture file to load instead.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.pass_context
def build(ctx, name, config, as_json):
    """Build an architecture and print one row per block."""
    if not name and not config:
        raise CommandError("UsageError", "give an architecture name or --config")
    spec = _load(name, config)
    net = build_arch(spec, seed=ctx.obj["seed"])
    rows = summary_rows(net)
    if as_json:
        for r in rows:
            r["out"] = list(r["out"])
            if "G" in r:
                r["G"] = list(r["G"])
        click.echo(json.dumps(dict(arch=spec.name, input=list(spec.input_hw), rows=rows,
                                   params=net.num_params()), indent=2))
        return
    click.echo(f"{spec.name}  input 3x{spec.input_hw[0]}x{spec.input_hw[1]}  "
               f"params {net.num_params():,d}")
    click.echo(f"{'layer':<10} {'kind':<13} {'k':>2} {'C':>5} {'C/R':>5} {'G':>9} {'s':>2}  output")
    for r in rows:
        g = r.get("G")
        gs = f"({g[0]},{g[1] if g[1] else '-'})" if g else ""
        out = "x".join(map(str, r["out"]))
        click.echo(f"{r['name']:<10} {r['kind']:<13} {r.get('k', ''):>2} {r.get('C', ''):>5} "
                   f"{r.get('CR', ''):>5} {gs:>9} {r.get('stride', ''):>2}  {out}")


@cli.command()
@click.argument("name", required=False)
@click.option("--config", type=click.Path(dir_okay=False))
@click.option("--input", "input_hw", help="Input resolution HxW (default: the architecture's).")
@click.option("--exclude", type=click.Choice(["classifier"]), multiple=True,
              help="Leave these entries out of the reported totals.")
@click.option("--check", is_flag=True, help="Compare totals with the reference budget.")
@click.option("--json", "as_json", is_flag=True)
@click.option("--all-rows", is_flag=True, help="Also print zero-cost layers.")
@click.pass_context
def flops(ctx, name, config, input_hw, exclude, check, as_json, all_rows):
    """Per-layer MAdds and parameter ledger."""
    if not name and not config:
        raise CommandError("UsageError", "give an architecture name or --config")
    spec = _load(name, config)
    net = build_arch(spec, seed=ctx.obj["seed"])
    hw = _parse_hw(input_hw) if input_hw else spec.input_hw
    try:
        report = count_model(net, (1, spec.in_channels, *hw))
    except (ShapeError, ConfigError) as exc:
        _fail(exc)
    result = None
    if check:
        if spec.name not in REFERENCE_BUDGETS:
            raise CommandError("KeyError", f"no reference budget for {spec.name!r}")
        result = report.check()
    if as_json:
        doc = report.to_dict(exclude)
        if result is not None:
            doc["check"] = result
        click.echo(json.dumps(doc, indent=2))
    else:
        click.echo(report.to_text(exclude, nonzero_only=not all_rows))
        if result is not None:
            click.echo(
                f"check {spec.name}: MAdds {result['madds'] / 1e6:.2f}M vs "
                f"{result['ref_madds'] / 1e6:.1f}M ({result['madds_dev']:+.1%}), params "
                f"{result['params'] / 1e6:.2f}M vs {result['ref_params'] / 1e6:.1f}M "
                f"({result['params_dev']:+.1%}) -> {'PASS' if result['ok'] else 'FAIL'}")
    if result is not None and not result["ok"]:
        ctx.exit(1)


@cli.command()
@click.argument("suite", type=click.Choice(["rank", "oracle", "grad", "shiftmax", "cost", "all"]))
@click.pass_context
def verify(ctx, suite):
    """Run a property suite with pinned seeds."""
    checks = run_suite(suite)
    for c in checks:
        status = "PASS" if c.ok else "FAIL"
        detail = f"  [{c.detail}]" if c.detail else ""
        click.echo(f"{status}  {c.passed}/{c.total}  {c.name}{detail}")
    failed = sum(not c.ok for c in checks)
    click.echo(f"{len(checks) - failed}/{len(checks)} properties passed")
    if failed:
        ctx.exit(1)


@cli.command()
@click.argument("arch")
@click.option("--data", type=click.Path(file_okay=False), help="Directory root/<class>/<image>.")
@click.option("--synthetic", is_flag=True, help="Use the built-in blob dataset.")
@click.option("--samples-per-class", type=int, default=50, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=0.1, show_default=True)
@click.option("--weight-decay", type=float, default=3e-5, show_default=True)
@click.option("--label-smoothing", type=float, default=0.1, show_default=True)
@click.option("--mutual", is_flag=True, help="Co-train a full-rank partner and learn from it.")
@click.option("--beta", type=float, default=1.0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="weights.mnwb",
              show_default=True)
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default="metrics.jsonl",
              show_default=True)
@click.pass_context
def train(ctx, arch, data, synthetic, samples_per_class, epochs, batch_size, lr, weight_decay,
          label_smoothing, mutual, beta, out_path, log_path):
    """Train ARCH (name or .cfg path) and write a weight bundle plus a metric log."""
    if bool(data) == bool(synthetic):
        raise CommandError("UsageError", "choose exactly one of --data and --synthetic")
    seed = ctx.obj["seed"]
    spec = _load(arch, None)
    try:
        cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr0=lr, weight_decay=weight_decay,
                          label_smoothing=label_smoothing, beta=beta, mutual=mutual, seed=seed)
        net = build_arch(spec, seed=seed)
        if spec.task == "keypoint":
            if data:
                raise DatasetError("keypoint training supports --synthetic targets only")
            n = samples_per_class
            x = np.random.default_rng(seed).standard_normal(
                (n, spec.in_channels, *spec.input_hw)).astype(np.float32)
            out_hw = net.trace((1, spec.in_channels, *spec.input_hw), "", [])[2:]
            y = blob_heatmaps(n, spec.keypoints, out_hw, seed)
        elif data:
            x, y, names = load_image_dir(data, spec.input_hw)
            if y.max() >= spec.classes:
                raise DatasetError(f"{len(names)} classes found, architecture has {spec.classes}")
        else:
            if spec.input_hw[0] != spec.input_hw[1]:
                raise DatasetError("the synthetic set renders square images")
            x, y = synthetic_blobs(samples_per_class, spec.classes, spec.input_hw[0], seed)
        partner = full_rank_partner(net, seed=seed + 1) if mutual else None
        result = train_toy(net, x, y, cfg, partner=partner, log_path=log_path)
        WeightBundle.from_model(net, meta=dict(seed=seed, epochs=epochs)).save(out_path)
    except (DatasetError, TrainingError, ConfigError, ValueError) as exc:
        _fail(exc)
    last = result.log[-1] if result.log else {}
    click.echo(json.dumps(dict(bundle=str(out_path), log=str(log_path), final=last)))


@cli.command()
@click.argument("bundle", type=click.Path(dir_okay=False))
@click.argument("image", type=click.Path(dir_okay=False))
@click.option("--top-k", type=int, default=5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False),
              help="Where keypoint heatmaps are written (.npy).")
def infer(bundle, image, top_k, out_path):
    """Classify IMAGE (top-k labels) or write keypoint heatmaps."""
    try:
        wb = WeightBundle.load(bundle)
        net = wb.to_model()
        spec = net.arch
        x, resized = load_image(image, spec.input_hw)
    except (FormatError, DatasetError, ConfigError) as exc:
        _fail(exc)
    if resized:
        click.echo(json.dumps(dict(warning="resized", to=list(spec.input_hw))), err=True)
    out = net.predict(x[None])[0]
    if spec.task == "keypoint":
        dest = Path(out_path or "heatmaps.npy")
        np.save(dest, out)
        click.echo(json.dumps(dict(heatmaps=str(dest), shape=list(out.shape))))
        return
    order = np.argsort(-out, kind="stable")[:top_k]
    for rank, c in enumerate(order, 1):
        click.echo(f"{rank}\t{int(c)}\t{float(out[c]):.6f}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="micronet", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        click.echo(json.dumps(dict(error="Aborted", message="aborted")), err=True)
        return 1
    except CommandError as e:
        e.show()
        return e.exit_code
    except click.ClickException as e:
        click.echo(json.dumps(dict(error=type(e).__name__, message=e.format_message())), err=True)
        return e.exit_code or 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
