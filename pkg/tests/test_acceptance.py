"""Exit criteria for the package, one test per criterion.

Each test records a single PASS/FAIL line that is repeated in the terminal
summary. Run just this module with ``pytest tests/test_acceptance.py -s``.
"""
import hashlib
import math
import time

import numpy as np
import pytest

from cpsinet.checkpoint import decode_checkpoint, encode_checkpoint
from cpsinet.cli import main as cli
from cpsinet.diagnostics import gradient_suite, worst
from cpsinet.metrics import hfen_percent, psnr, rmse_percent, roi_mean, ssim, ssim_map
from cpsinet.network import (ModelConfig, connections, dib_params, dib_forward, forward,
                             init_parameters, layer_table)
from cpsinet.physics import (PhantomSpec, Primitive, forward_field, highpass_phase,
                             hanning_lowpass_1d, make_dataset, random_phantom_spec,
                             render_phantom)
from cpsinet.tensor import ConvSpec, conv3d, conv_transpose3d
from cpsinet.training import Trainer, TrainRunConfig, leave_one_out_split, reconstruct
from cpsinet.volume import HEADER_SIZE, Volume, VolumeFormatError, decode_volume, encode_volume

from oracles import (brute_hfen, brute_psnr, brute_rmse, direct_conv3d, sphere_field,
                     ssim_windows)

TINY = ModelConfig(widths=(6, 12, 24))


def test_criterion_01_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = gradient_suite(seed=0)
    elapsed = time.perf_counter() - t0
    bad = [r for r in results if not r.passed]
    ops = [r for r in results if r.tolerance == 1e-4]
    net = [r for r in results if r.op == "network"]
    w = worst(results)
    ok = not bad and bool(ops) and bool(net) and elapsed < 60
    assert criterion(1, ok, f"{len(results)} checks, worst {w.op} {w.error:.2e} "
                            f"(tol {w.tolerance:.0e}), {len(bad)} failing, {elapsed:.1f}s < 60s")


def test_criterion_02_convolution_oracle(criterion):
    rng = np.random.default_rng(2024)
    cases, worst_err = 0, 0.0
    for stride in (1, 2, 4):
        for dilation in (1, 2, 3):
            for _ in range(23):
                k = int(rng.integers(1, 4))
                p = int(rng.integers(0, 2))
                cin, cout = (int(v) for v in rng.integers(1, 4, 2))
                lo = max(1, dilation * (k - 1) + 1 - 2 * p)
                n = tuple(int(v) for v in rng.integers(lo, lo + 4, 3))
                x = rng.standard_normal((1, cin) + n)
                w = rng.standard_normal((cout, cin, k, k, k))
                b = rng.standard_normal(cout)
                got = conv3d(x, w, b, ConvSpec(cin, cout, k, stride, dilation, p)).data
                ref = direct_conv3d(x, w, b, stride, dilation, p)
                worst_err = max(worst_err, float(np.abs(got - ref).max()))
                cases += 1
    adj_err = 0.0
    for i in range(100):
        s, d, k = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        spec = ConvSpec(2, 3, k, s, d, int(rng.integers(0, 2)))
        x = rng.standard_normal((1, 2, 9, 8, 7))
        w = rng.standard_normal((3, 2, k, k, k))
        y = conv3d(x, w, None, spec).data
        g = rng.standard_normal(y.shape)
        back = conv_transpose3d(g, w, None, ConvSpec(3, 2, k, s, d, spec.padding[0]), x.shape[2:])
        lhs, rhs = float(np.sum(y * g)), float(np.sum(x * back.data))
        adj_err = max(adj_err, abs(lhs - rhs) / max(1.0, abs(lhs)))
    ok = cases >= 200 and worst_err <= 1e-6 and adj_err <= 1e-6
    assert criterion(2, ok, f"{cases} direct-sum cases max |diff| {worst_err:.1e}; "
                            f"adjoint identity max rel {adj_err:.1e} (tol 1e-6)")


def test_criterion_03_architecture_invariants(criterion):
    x = np.random.default_rng(3).standard_normal((1, 1, 48, 48, 48)).astype(np.float32)
    shapes = {}
    for variant in ("full", "no_dib", "no_mff"):
        cfg = ModelConfig(variant)
        shapes[variant] = forward(x, init_parameters(cfg), cfg).shape
    shapes_ok = all(s == (1, 1, 48, 48, 48) for s in shapes.values())

    cfg = ModelConfig()
    block = dib_params(init_parameters(cfg, 1), cfg, 0)
    as64 = lambda layer: [(s, w.data.astype(np.float64), b.data.astype(np.float64)) for s, w, b in layer]
    block.layer1, block.layer2 = as64(block.layer1), as64(block.layer2)
    imp = np.zeros((1, block.in_channels, 21, 21, 21))
    imp[0, :, 10, 10, 10] = 1.0
    resp = np.abs(dib_forward(imp, block).data).max(axis=(0, 1))
    cheb = np.abs(np.indices(resp.shape) - 10).max(axis=0)
    outside = float(resp[cheb > 6].max())
    reaches = bool(resp[cheb == 6].any())

    full = {(c.name, c.src, c.dst, c.in_channels, c.out_channels) for c in connections(ModelConfig("full"))}
    mff = {(c.name, c.src, c.dst, c.in_channels, c.out_channels) for c in connections(ModelConfig("no_mff"))}
    no_dib_dilated = [l.name for l in layer_table(ModelConfig("no_dib")) if l.spec.dilation != (1, 1, 1)]
    ok = shapes_ok and outside == 0.0 and reaches and mff < full and not no_dib_dilated
    assert criterion(3, ok, f"shapes {sorted(set(shapes.values()))}; DIB response outside "
                            f"radius 6 = {outside}; no_mff {len(mff)} ⊂ full {len(full)} connections")


def test_criterion_04_physics_oracle(criterion):
    t0 = time.perf_counter()
    dims, R, dchi, c = (64, 64, 64), 8.0, 0.9, (32.0, 32.0, 32.0)
    chi = render_phantom(PhantomSpec(dims, primitives=[Primitive("sphere", c, (R,), dchi)]))
    field = forward_field(chi).data.astype(np.float64)
    ref, r = sphere_field(dims, c, R, dchi)
    shell = (r >= 1.5 * R) & (r <= 3 * R)
    err = float(np.linalg.norm(field[shell] - ref[shell]) / np.linalg.norm(ref[shell]))
    const = forward_field(Volume(np.full(dims, 0.9), unit="ppm")).data
    const_max = float(np.abs(const).max())
    elapsed = time.perf_counter() - t0
    ok = err < 0.05 and const_max <= 1e-6 and elapsed < 30
    assert criterion(4, ok, f"sphere shell relative l2 error {100 * err:.2f}% < 5%; constant chi "
                            f"max field {const_max:.1e}; {elapsed:.1f}s < 30s")


def test_criterion_05_highpass(criterion):
    rng = np.random.default_rng(5)
    ph = Volume(rng.standard_normal((16, 64, 64)) + 3.0, unit="radians")
    dc = float(np.abs(highpass_phase(ph).data.astype(np.float64).mean(axis=(1, 2))).max())
    x = np.arange(64)
    energy = {}
    for name, f in (("high", 16 / 64), ("low", 1 / 64)):
        wave = np.broadcast_to(np.cos(2 * np.pi * f * x), (8, 64, 64))
        out = highpass_phase(Volume(wave, unit="radians")).data.astype(np.float64)
        energy[name] = float(np.sum(out ** 2) / np.sum(wave.astype(np.float32).astype(np.float64) ** 2))
    # documented transfer along the x axis at the low test frequency: (1 - h(f))^2
    predicted_low = (1 - hanning_lowpass_1d(np.array([1 / 64]), 0.25)[0]) ** 2
    ok = (dc <= 1e-6 and energy["high"] > 0.9 and energy["low"] < 0.1
          and math.isclose(energy["low"], predicted_low, rel_tol=1e-3, abs_tol=1e-9))
    assert criterion(5, ok, f"slice DC {dc:.1e}; high-freq energy kept {energy['high']:.4f}; "
                            f"low-freq kept {energy['low']:.2e} (transfer predicts {predicted_low:.2e})")


def test_criterion_06_metric_oracles(criterion):
    rng = np.random.default_rng(6)
    worst_scalar, worst_window = 0.0, 0.0
    for i in range(50):
        shape = tuple(int(v) for v in rng.integers(15, 18, 3))
        gt = rng.standard_normal(shape) * rng.uniform(0.05, 2.0)
        rec = gt + rng.uniform(0.01, 1.0) * rng.standard_normal(shape)
        for got, ref in ((psnr(rec, gt), brute_psnr(rec, gt)),
                         (rmse_percent(rec, gt), brute_rmse(rec, gt)),
                         (hfen_percent(rec, gt), brute_hfen(rec, gt))):
            worst_scalar = max(worst_scalar, abs(got - ref) / abs(ref))
        windows = ssim_windows(rec, gt)
        worst_window = max(worst_window, float(np.abs(ssim_map(rec, gt) - windows).max()))
        worst_scalar = max(worst_scalar, abs(ssim(rec, gt) - windows.mean()))
    gt = rng.standard_normal((16, 16, 16))
    identities = (psnr(gt, gt) == math.inf and ssim(gt, gt) == 1.0
                  and rmse_percent(gt, gt) == 0.0 and hfen_percent(gt, gt) == 0.0)
    ok = worst_scalar <= 1e-6 and worst_window <= 1e-9 and identities
    assert criterion(6, ok, f"50 pairs: worst scalar rel diff {worst_scalar:.1e} (tol 1e-6), "
                            f"worst SSIM window {worst_window:.1e} (tol 1e-9); identities exact={identities}")


OVERFIT_STEPS = 2000
OVERFIT_BUDGET = 300.0


@pytest.fixture(scope="module")
def overfit_run():
    """Tiny model on one 32^3 patch with the default optimizer settings."""
    data = make_dataset([random_phantom_spec((32, 32, 32), seed=1)])
    run = TrainRunConfig(model=TINY, batch_size=1, patch=32, stride=32, steps=OVERFIT_STEPS)
    trainer = Trainer(run, data)
    t0 = time.perf_counter()
    hit = budget_step = None
    for step in range(1, OVERFIT_STEPS + 1):
        trainer.step()
        if hit is None and trainer.losses[-1] < 1e-4 * trainer.losses[0]:
            hit = (step, time.perf_counter() - t0)
            break
        if budget_step is None and time.perf_counter() - t0 > OVERFIT_BUDGET:
            budget_step = step
    return {"losses": trainer.losses, "hit": hit, "elapsed": time.perf_counter() - t0,
            "budget_step": budget_step}


def test_criterion_07_overfit(criterion, overfit_run):
    losses = overfit_run["losses"]
    best = min(losses) / losses[0]
    hit = overfit_run["hit"]
    ok = hit is not None and hit[1] < OVERFIT_BUDGET
    where = (f"reached at step {hit[0]} after {hit[1]:.0f}s" if hit else
             f"not reached in {len(losses)} steps ({overfit_run['elapsed']:.0f}s; "
             f"budget ran out at step {overfit_run['budget_step']})")
    assert criterion(7, ok, f"loss < 1e-4 x initial: {where}; best ratio {best:.2e}")


def test_overfit_moving_average_trend(overfit_run):
    losses = np.asarray(overfit_run["losses"])
    if len(losses) < 600:
        pytest.skip("overfit run stopped before the trend window")
    ma = np.convolve(losses, np.ones(200) / 200, mode="valid")
    tail = ma[400 - 199:]
    upticks = tail[1:] / np.minimum.accumulate(tail)[:-1]
    worst = int(np.argmax(upticks))
    assert upticks.max() <= 1.05, f"uptick {upticks[worst]:.3f} at the window ending on step {402 + worst}"


LOO_STEPS = 1500


@pytest.fixture(scope="module")
def loo_run():
    """Nine random phantoms, fold 0 held out, trained at test-tier widths."""
    t0 = time.perf_counter()
    specs = [random_phantom_spec((32, 32, 32), seed=s) for s in range(9)]
    data = make_dataset(specs)
    train_set, (held,) = leave_one_out_split(data, 0)
    run = TrainRunConfig(model=TINY, batch_size=4, patch=16, stride=8, steps=LOO_STEPS)
    trainer = Trainer(run, train_set)
    phase, chi = held
    before = reconstruct(trainer.params, run, phase)
    trainer.fit()
    after = reconstruct(trainer.params, run, phase)
    return {"spec": specs[0], "chi": chi, "before": before, "after": after,
            "elapsed": time.perf_counter() - t0}


def test_criterion_08_leave_one_out(criterion, loo_run):
    chi, before, after = loo_run["chi"], loo_run["before"], loo_run["after"]
    gain = psnr(after, chi) - psnr(before, chi)
    err = rmse_percent(after, chi)
    elapsed = loo_run["elapsed"]
    ok = gain >= 3.0 and err < 100.0 and elapsed < 1800
    assert criterion(8, ok, f"held-out PSNR {psnr(before, chi):.2f} -> {psnr(after, chi):.2f} dB "
                            f"(gain {gain:.2f} >= 3), RMSE {err:.1f}% < 100%, {elapsed:.0f}s < 1800s")


def test_sphere_roi_mean_matches_set_chi(loo_run):
    chi, after = loo_run["chi"], loo_run["after"]
    checked = []
    for p in loo_run["spec"].primitives:
        if p.shape != "sphere":
            continue
        # voxels later primitives painted over are not part of this sphere any more
        mask = p.mask(chi.dims) & (chi.data == np.float32(p.chi))
        if mask.sum() == 0:
            continue
        checked.append((p.chi, roi_mean(after, mask)))
    assert checked
    for target, got in checked:
        assert abs(got - target) <= 0.05 * abs(target), checked


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_09_determinism(criterion, tmp_path):
    data = tmp_path / "data"
    assert cli(["phantom", str(data), "--random", "3", "--dims", "32", "32", "32", "--seed", "7"]) == 0
    tier = ["--widths", "6", "12", "24", "--patch", "16", "--stride", "8", "--batch-size", "4"]
    ckpts = []
    for name in ("a", "b"):
        assert cli(["train", str(data), str(tmp_path / name), "--steps", "10", "--seed", "7"] + tier) == 0
        ckpts.append((tmp_path / name / "checkpoint.ckpt").read_bytes())
    phase = data / "phantom_000" / "hp_phase.vol"
    sums = []
    for name in ("r1.vol", "r2.vol"):
        assert cli(["reconstruct", str(tmp_path / "a" / "checkpoint.ckpt"), str(phase),
                    str(tmp_path / name)]) == 0
        sums.append(_sha(tmp_path / name))
    ok = ckpts[0] == ckpts[1] and sums[0] == sums[1]
    assert criterion(9, ok, f"checkpoints identical={ckpts[0] == ckpts[1]} ({len(ckpts[0])} bytes); "
                            f"reconstruct sha256 {sums[0][:12]}... stable={sums[0] == sums[1]}")


def test_criterion_10_roundtrips(criterion, tmp_path):
    rng = np.random.default_rng(10)
    vol = Volume(rng.standard_normal((16, 24, 8)) * 1e3, (0.5, 0.7, 1.9), "ppm")
    vol_ok = decode_volume(encode_volume(vol)).equals(vol)

    data = make_dataset([random_phantom_spec((16, 16, 16), seed=0)])
    run = TrainRunConfig(model=ModelConfig(widths=(3, 6, 9)), batch_size=1, patch=16, stride=16)
    trainer = Trainer(run, data)
    trainer.fit(3)
    blob = encode_checkpoint(trainer.params, trainer.state, run)
    params, state, run2 = decode_checkpoint(blob)
    ckpt_ok = (encode_checkpoint(params, state, run2) == blob and run2 == run
               and all(params[k].data.tobytes() == trainer.params[k].data.tobytes() for k in params))

    good = encode_volume(vol)
    misparsed = rejected = 0
    for _ in range(5000):
        buf = bytearray(good)
        for pos in rng.choice(HEADER_SIZE, int(rng.integers(1, 5)), replace=False):
            buf[pos] = int(rng.integers(256))
        try:
            got = decode_volume(bytes(buf))
        except VolumeFormatError:
            rejected += 1
            continue
        if bytes(buf) != good or not got.equals(vol):
            misparsed += 1
    ok = vol_ok and ckpt_ok and misparsed == 0
    assert criterion(10, ok, f"volume bit-exact={vol_ok}, checkpoint bit-exact={ckpt_ok}; "
                             f"5000 header mutations: {rejected} rejected, {misparsed} misparsed")
