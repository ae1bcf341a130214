"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every subcommand writes a JSON manifest next to its outputs recording the
resolved configuration, seed and SHA-256 checksums of inputs and outputs.
Manifests hold no timestamps so identical runs produce identical manifests.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .diagnostics import gradient_suite, worst
from .metrics import aggregate, evaluate_pair, roi_mean
from .physics import (PhantomSyntaxError, field_to_phase, format_phantom_spec, forward_field,
                      highpass_phase, load_phantom_spec, parse_phantom_spec,
                      random_phantom_spec, render_phantom)
from .tensor import ShapeError
from .training import (NumericalError, Trainer, TrainRunConfig, leave_one_out_split,
                       parse_config_text, reconstruct)
from .volume import Volume, VolumeFormatError, read_volume, write_volume

log = logging.getLogger("cpsinet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHI_FILE = "chi.vol"
PHASE_FILE = "phase.vol"
HP_FILE = "hp_phase.vol"
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, subcommand: str, config: dict, seed, inputs: Sequence,
                   outputs: Sequence) -> None:
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def demo_spec_text() -> str:
    return resources.files("cpsinet").joinpath("data/demo_phantom.txt").read_text()


# -- phantom ---------------------------------------------------------------

def _write_triplet(spec, out: Path, noise: float, seed: int, width: float, b0_axis: int,
                   masks: bool) -> List[Path]:
    out.mkdir(parents=True, exist_ok=True)
    chi = render_phantom(spec)
    phase = field_to_phase(forward_field(chi, b0_axis))
    if noise > 0:
        rng = np.random.default_rng(seed)
        phase = phase.with_data(phase.data + rng.normal(0.0, noise, phase.dims))
    hp = highpass_phase(phase, width)
    paths = [out / CHI_FILE, out / PHASE_FILE, out / HP_FILE]
    for v, p in zip((chi, phase, hp), paths):
        write_volume(v, p)
    if masks:
        for i, prim in enumerate(spec.primitives):
            p = out / f"roi_{i:02d}_{prim.shape}.vol"
            write_volume(Volume(prim.mask(spec.dims).astype(np.float32), spec.voxel_size), p)
            paths.append(p)
    return paths


def cmd_phantom(args) -> int:
    base = {"noise_sigma": args.noise, "filter_width": args.filter_width,
            "b0_axis": args.b0_axis, "masks": args.masks}
    out = Path(args.out_dir)
    if args.random:
        dims = tuple(args.dims)
        outputs, inputs = [], []
        for i in range(args.random):
            spec = random_phantom_spec(dims, seed=int(np.random.SeedSequence(
                [args.seed, i]).generate_state(1)[0]))
            sub = out / f"phantom_{i:03d}"
            sub.mkdir(parents=True, exist_ok=True)
            (sub / "spec.txt").write_text(format_phantom_spec(spec))
            noise_seed = int(np.random.SeedSequence([args.seed, i, 1]).generate_state(1)[0])
            outputs += [sub / "spec.txt"] + _write_triplet(
                spec, sub, args.noise, noise_seed, args.filter_width, args.b0_axis, args.masks)
        config = dict(base, random=args.random, dims=list(dims))
    else:
        if args.spec:
            inputs = [Path(args.spec)]
            spec = load_phantom_spec(args.spec)
        else:
            inputs = []
            spec = parse_phantom_spec(demo_spec_text())
        outputs = _write_triplet(spec, out, args.noise, args.seed, args.filter_width,
                                 args.b0_axis, args.masks)
        config = dict(base, spec=args.spec or "<packaged demo>")
    write_manifest(out / MANIFEST, "phantom", config, args.seed, inputs, outputs)
    print(f"wrote {len(outputs)} files to {out}")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def load_dataset(root) -> List[tuple]:
    """Pairs from ``root/*/hp_phase.vol`` + ``chi.vol``, ordered by directory name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    dirs = sorted(d for d in root.iterdir() if (d / HP_FILE).exists() and (d / CHI_FILE).exists())
    if not dirs:
        raise DataError(f"no <dir>/{HP_FILE} + {CHI_FILE} pairs under {root}")
    pairs = []
    for d in dirs:
        hp, chi = read_volume(d / HP_FILE), read_volume(d / CHI_FILE)
        if hp.dims != chi.dims:
            raise DataError(f"{d}: phase dims {hp.dims} != chi dims {chi.dims}")
        pairs.append((hp, chi, d))
    return pairs


def _resolve_run(args) -> TrainRunConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = {"variant": args.variant, "steps": args.steps, "seed": args.seed, "lr": args.lr,
                 "batch_size": args.batch_size, "patch": args.patch, "stride": args.stride,
                 "checkpoint_every": args.checkpoint_every}
    if args.widths:
        overrides["widths"] = ",".join(str(w) for w in args.widths)
    try:
        return parse_config_text(text, overrides=overrides)
    except ValueError as exc:
        raise UsageError(f"bad run config: {exc}") from None


def cmd_train(args) -> int:
    run = _resolve_run(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = load_dataset(args.dataset)
    if len(pairs) < 2:
        raise DataError(f"training needs at least 2 pairs, found {len(pairs)}")
    data = [(hp, chi) for hp, chi, _ in pairs]
    held_out = None
    if args.fold is not None:
        if not 0 <= args.fold < len(data):
            raise UsageError(f"--fold {args.fold} outside [0, {len(data)})")
        data, _ = leave_one_out_split(data, args.fold)
        held_out = str(pairs[args.fold][2])
    inputs = [d / f for _, _, d in pairs for f in (HP_FILE, CHI_FILE)]
    params = state = None
    if args.resume:
        params, state, saved = load_checkpoint(args.resume)
        if saved.to_dict() != run.to_dict():
            raise UsageError("--resume checkpoint was written with a different run config")
        inputs.append(Path(args.resume))
    trainer = Trainer(run, data, params, state)
    outputs = []

    def periodic(t: Trainer) -> None:
        p = out / f"checkpoint_step{t.state.step:06d}.ckpt"
        save_checkpoint(t.params, t.state, run, p)
        outputs.append(p)

    start = trainer.state.step
    trainer.fit(run.steps - start if args.resume else run.steps, callback=periodic)
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(trainer.params, trainer.state, run, ckpt)
    curve = out / "loss.csv"
    with open(curve, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(trainer.losses, start=start + 1):
            fh.write(f"{i},{v!r}\n")
    outputs += [ckpt, curve]
    config = dict(run.to_dict(), fold=args.fold, held_out=held_out, dataset=str(args.dataset))
    write_manifest(out / MANIFEST, "train", config, run.seed, inputs, outputs)
    last = trainer.losses[-1] if trainer.losses else float("nan")
    print(f"trained {len(trainer.losses)} steps, final loss {last:.6g}; checkpoint {ckpt}")
    return EXIT_OK


# -- reconstruct -----------------------------------------------------------

def cmd_reconstruct(args) -> int:
    params, _, run = load_checkpoint(args.checkpoint)
    phase = read_volume(args.phase)
    if phase.unit != "radians":
        raise DataError(f"{args.phase}: expected a phase volume in radians, got {phase.unit}")
    for ax, n in zip(("depth", "height", "width"), phase.dims):
        if n % 4 or n < 16:
            raise DataError(f"{args.phase}: {ax} axis is {n}; must be a multiple of 4 and >= 16")
    qsm = reconstruct(params, run, phase, args.patch, args.stride,
                      input_scale=args.input_scale, target_scale=args.target_scale)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(qsm, out)
    config = {"patch": args.patch, "stride": args.stride, "input_scale": run.input_scale,
              "target_scale": run.target_scale, "model": run.model.to_dict()}
    write_manifest(f"{out}.manifest.json", "reconstruct", config, run.seed,
                   [args.checkpoint, args.phase], [out])
    print(f"wrote {out} ({'x'.join(map(str, qsm.dims))}, ppm)")
    return EXIT_OK


# -- evaluate --------------------------------------------------------------

def _parse_roi(items: Sequence[str]) -> Dict[str, str]:
    rois = {}
    for item in items or ():
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--roi expects NAME=MASK, got {item!r}")
        rois[name] = path
    return rois


def cmd_evaluate(args) -> int:
    if len(args.recon) != len(args.gt):
        raise UsageError(f"{len(args.recon)} reconstructions but {len(args.gt)} ground truths")
    rois = _parse_roi(args.roi)
    masks = {name: read_volume(p) for name, p in rois.items()}
    rows, roi_rows = [], []
    for r, g in zip(args.recon, args.gt):
        rv, gv = read_volume(r), read_volume(g)
        if rv.dims != gv.dims:
            raise DataError(f"{r} is {rv.dims} but {g} is {gv.dims}")
        row = evaluate_pair(rv, gv)
        row["sample"] = str(r)
        rows.append(row)
        for name, m in masks.items():
            for label, v in (("recon", rv), ("gt", gv)):
                roi_rows.append({"roi": name, "sample": f"{row['sample']}:{label}",
                                 "mean": roi_mean(v, m)})
    report = aggregate(rows, roi_rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    table = report.to_table()
    (out / "metrics.txt").write_text(table)
    sys.stdout.write(table)
    write_manifest(out / MANIFEST, "evaluate", {"roi": rois}, None,
                   list(args.recon) + list(args.gt) + list(rois.values()),
                   [out / "metrics.csv", out / "metrics.txt"])
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    def show(r):
        flag = "ok  " if r.passed else "FAIL"
        print(f"{flag} {r.op:<17} err={r.error:.3e} tol={r.tolerance:.0e}  {r.case}", flush=True)

    results = gradient_suite(seed=args.seed, progress=show)
    w = worst(results)
    failed = [r for r in results if not r.passed]
    print(f"worst: {w.op} ({w.case}) relative error {w.error:.3e} (tolerance {w.tolerance:.0e})")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report = out / "gradcheck.json"
        report.write_text(json.dumps([vars(r) for r in results], indent=2) + "\n")
        write_manifest(out / MANIFEST, "gradcheck", {}, args.seed, [], [report])
    return EXIT_NUMERIC if failed else EXIT_OK


# -- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpsinet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="render a phantom into chi / phase / HP phase volumes")
    ph.add_argument("out_dir")
    ph.add_argument("--spec", help="phantom spec file (default: packaged 64^3 demo)")
    ph.add_argument("--random", type=int, metavar="N",
                    help="instead write N random phantoms into OUT_DIR/phantom_XXX")
    ph.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64), help="dims for --random")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--noise", type=float, default=0.0, help="phase noise sigma (radians)")
    ph.add_argument("--filter-width", type=float, default=0.25,
                    help="Hanning low-pass width in cycles/voxel")
    ph.add_argument("--b0-axis", type=int, default=0, choices=(0, 1, 2))
    ph.add_argument("--masks", action="store_true", help="also write one mask per primitive")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train on a dataset directory of phantom triplets")
    tr.add_argument("dataset")
    tr.add_argument("out_dir")
    tr.add_argument("--config", help="key = value run config; flags override it")
    tr.add_argument("--variant", choices=("full", "no_dib", "no_mff"))
    tr.add_argument("--fold", type=int, help="hold out pair K (leave-one-out)")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--patch", type=int)
    tr.add_argument("--stride", type=int)
    tr.add_argument("--widths", type=int, nargs=3)
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--resume", help="continue from a checkpoint of the same run config")
    tr.set_defaults(func=cmd_train)

    rc = sub.add_parser("reconstruct", help="patch-wise QSM inference on a phase volume")
    rc.add_argument("checkpoint")
    rc.add_argument("phase")
    rc.add_argument("output")
    rc.add_argument("--patch", type=int)
    rc.add_argument("--stride", type=int)
    rc.add_argument("--input-scale", type=float,
                    help="expected phase scale; refuse checkpoints trained with another")
    rc.add_argument("--target-scale", type=float,
                    help="expected output scale; refuse checkpoints trained with another")
    rc.set_defaults(func=cmd_reconstruct)

    ev = sub.add_parser("evaluate", help="PSNR / SSIM / RMSE / HFEN table and CSV")
    ev.add_argument("--recon", nargs="+", required=True)
    ev.add_argument("--gt", nargs="+", required=True)
    ev.add_argument("--roi", nargs="*", metavar="NAME=MASK")
    ev.add_argument("--out-dir", default=".")
    ev.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out-dir")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cpsinet {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"cpsinet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, VolumeFormatError, CheckpointError, PhantomSyntaxError, ShapeError,
            OSError, ValueError) as exc:
        print(f"cpsinet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
