"""Finite-difference gradient suite over every differentiable op and a tiny network."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .network import (ModelConfig, connections, dib_forward, dib_params, forward,
                      init_parameters, resample)
from .tensor import (ConvSpec, concat_channels, conv3d, conv_transpose3d, grad_check_detail,
                     leaky_relu, mse_loss)

__all__ = ["OP_TOLERANCE", "NETWORK_TOLERANCE", "GradResult", "gradient_suite", "worst"]

OP_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
STEP = 1e-3
# Composite checks perturb many pre-activations at once, so even small steps
# can straddle a leaky ReLU kink; those probes are detected and skipped.
COMPOSITE_STEP = 1e-6
TINY = ModelConfig(widths=(6, 12, 24))


@dataclass
class GradResult:
    op: str
    case: str
    error: float
    tolerance: float
    seconds: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _shape(rng, lo: int = 1, channels: Optional[int] = None):
    c = int(rng.integers(1, 4)) if channels is None else channels
    return (1, c) + tuple(int(v) for v in rng.integers(max(lo, 2), 7, 3))


def _conv_case(rng, transposed: bool):
    k = int(rng.integers(1, 4))
    s = int(rng.choice([1, 2]))
    d = int(rng.integers(1, 3))
    p = int(rng.integers(0, 2))
    cin, cout = (int(v) for v in rng.integers(1, 4, 2))
    if transposed:
        n = tuple(int(v) for v in rng.integers(1, 4, 3))
        p = min(p, (min(n) - 1) * s // 2 + d * (k - 1) // 2)
        spec = ConvSpec(cin, cout, k, s, d, p)
        wshape = (cin, cout, k, k, k)
    else:
        n = tuple(int(v) for v in rng.integers(d * (k - 1) + 1, 7, 3))
        spec = ConvSpec(cin, cout, k, s, d, p)
        wshape = (cout, cin, k, k, k)
    x = rng.standard_normal((1, cin) + n)
    w = rng.standard_normal(wshape)
    b = rng.standard_normal(cout)
    return spec, [x, w, b]


def _cases(rng, reps: int):
    """Yield (op name, case label, fn, inputs, max_coords)."""
    for _ in range(reps):
        spec, inputs = _conv_case(rng, False)
        yield "conv3d", str(spec), lambda x, w, b, s=spec: conv3d(x, w, b, s), inputs, None
        spec, inputs = _conv_case(rng, True)
        yield ("conv_transpose3d", str(spec),
               lambda x, w, b, s=spec: conv_transpose3d(x, w, b, s), inputs, None)
        x = rng.standard_normal(_shape(rng))
        # keep samples away from the kink so central differences stay smooth
        x = np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + x, x)
        slope = float(rng.uniform(0.05, 0.5))
        yield "leaky_relu", f"slope={slope:.3f}", lambda t, a=slope: leaky_relu(t, a), [x], None
        a = rng.standard_normal(_shape(rng))
        b = rng.standard_normal((1, int(rng.integers(1, 3))) + a.shape[2:])
        yield "concat_channels", f"{a.shape}+{b.shape}", lambda p, q: concat_channels([p, q]), [a, b], None
        shape = _shape(rng)
        target = rng.standard_normal(shape)
        for flag in (False, True):
            yield ("mse_loss", f"per_voxel={flag}",
                   lambda p, t=target, f=flag: mse_loss([p], [t], per_voxel=f),
                   [rng.standard_normal(shape)], None)


def _network_case(rng, variant: str):
    config = ModelConfig(variant=variant, widths=TINY.widths, seed=0)
    base = init_parameters(config, dtype=np.float64)
    names = list(base)
    picked = [n for n in names if n.endswith(".weight")]
    picked = [picked[0], picked[len(picked) // 2], picked[-1]]
    x = rng.standard_normal((1, 1, 16, 16, 16))

    def fn(phase, *ws):
        params = dict(base)
        params.update(zip(picked, ws))
        return forward(phase, params, config)

    return fn, [x] + [base[n].data for n in picked], picked


def gradient_suite(seed: int = 0, reps: int = 3, network_coords: int = 12,
                   progress: Optional[Callable[[GradResult], None]] = None) -> List[GradResult]:
    """Run every op check plus DIB, resampling and whole-network checks (float64, h=1e-3)."""
    rng = np.random.default_rng(seed)
    results = []

    def record(op, case, fn, inputs, coords, tol, composite=False):
        t0 = time.perf_counter()
        out = grad_check_detail(fn, inputs, h=COMPOSITE_STEP if composite else STEP,
                                max_coords=coords, seed=int(rng.integers(2**31)),
                                kink_guard=composite)
        res = GradResult(op, case, out.error, tol, time.perf_counter() - t0,
                         out.checked, out.skipped)
        results.append(res)
        if progress is not None:
            progress(res)

    for op, case, fn, inputs, coords in _cases(rng, reps):
        record(op, case, fn, inputs, coords, OP_TOLERANCE)

    # composite blocks at the smallest valid sizes
    block_cfg = ModelConfig(widths=(3, 6, 9))
    params = init_parameters(block_cfg, dtype=np.float64)
    dib = dib_params(params, block_cfg, 0)
    names = [f"dib.L0.l{j}.r{r}.weight" for j in (1, 2) for r in (1, 2, 3)]
    x = rng.standard_normal((1, dib.in_channels, 6, 6, 6))

    def dib_fn(x, *ws):
        p = dict(params)
        p.update(zip(names, ws))
        return dib_forward(x, dib_params(p, block_cfg, 0), block_cfg.slope)

    record("dib_forward", "level 0, widths (3, 6, 9)", dib_fn,
           [x] + [params[n].data for n in names], 40, OP_TOLERANCE, True)
    seen = set()
    for conn in connections(block_cfg):
        if conn.mode in seen:
            continue
        seen.add(conn.mode)
        n = {"down2": 4, "down4": 4, "identity": 3, "up2": 2, "up4": 2}[conn.mode]
        x = rng.standard_normal((1, conn.in_channels, n, n, n))
        wn = f"{conn.name}.weight"

        def res_fn(x, w, c=conn, wn=wn):
            p = dict(params)
            p[wn] = w
            return resample(x, c, p, block_cfg.slope)

        record("resample", f"{conn.mode} ({conn.name})", res_fn, [x, params[wn].data], 40,
               OP_TOLERANCE, True)

    for variant in ("full", "no_dib", "no_mff"):
        fn, inputs, picked = _network_case(rng, variant)
        record("network", f"{variant}, tiny widths, 16^3, input + {', '.join(picked)}",
               fn, inputs, network_coords, NETWORK_TOLERANCE, True)
    return results


def worst(results: List[GradResult]) -> GradResult:
    """The result closest to (or furthest past) its tolerance."""
    return max(results, key=lambda r: r.error / r.tolerance)
