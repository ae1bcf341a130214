"""Synthetic susceptibility phantoms and the SWI-style phase they produce.

Pipeline: render a piecewise-constant susceptibility map (ppm), push it through
the k-space dipole kernel to get the field perturbation, convert to phase at
the SWI echo time, add Gaussian phase noise and remove the low spatial
frequencies slice by slice with a Hanning homodyne filter.

Grids are powers of two in every axis because the FFT is radix-2.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import fft as rfft
from .volume import Volume

__all__ = [
    "GAMMA_BAR_MHZ_PER_T",
    "B0_TESLA",
    "TE_SECONDS",
    "PHASE_PER_PPM",
    "Primitive",
    "PhantomSpec",
    "PhantomSyntaxError",
    "parse_phantom_spec",
    "format_phantom_spec",
    "load_phantom_spec",
    "random_phantom_spec",
    "render_phantom",
    "dipole_kernel",
    "forward_field",
    "field_to_phase",
    "hanning_lowpass_1d",
    "highpass_transfer",
    "highpass_phase",
    "patch_origins",
    "extract_patches",
    "assemble_patches",
    "simulate_swi_phase",
    "make_dataset",
]

GAMMA_BAR_MHZ_PER_T = 42.58
B0_TESLA = 3.0
TE_SECONDS = 0.020
# radians of phase per ppm of field: 2*pi * gamma_bar * B0 * TE (the MHz and ppm factors cancel)
PHASE_PER_PPM = 2.0 * math.pi * GAMMA_BAR_MHZ_PER_T * B0_TESLA * TE_SECONDS

SHAPES = ("sphere", "box", "cylinder")
CHI_LIMIT = 2.0


@dataclass(frozen=True)
class Primitive:
    """One geometric region of constant susceptibility.

    ``center`` is in voxel coordinates (voxel ``i`` spans ``[i - 0.5, i + 0.5)``).
    ``size`` is ``(radius,)`` for a sphere, ``(sx, sy, sz)`` edge lengths for a
    box and ``(radius, length)`` for a cylinder whose axis is ``axis``.
    """

    shape: str
    center: Tuple[float, float, float]
    size: Tuple[float, ...]
    chi: float
    axis: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        want = {"sphere": 1, "box": 3, "cylinder": 2}[self.shape]
        if len(self.size) != want:
            raise ValueError(f"{self.shape} needs {want} size values, got {self.size}")
        if min(self.size) <= 0:
            raise ValueError(f"{self.shape} size must be positive, got {self.size}")
        if len(self.center) != 3:
            raise ValueError(f"center needs 3 coordinates, got {self.center}")
        if not -CHI_LIMIT <= self.chi <= CHI_LIMIT:
            raise ValueError(f"chi {self.chi} ppm outside [-{CHI_LIMIT}, {CHI_LIMIT}]")
        if self.axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {self.axis}")

    def extent(self) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=float)
        if self.shape == "sphere":
            half = np.full(3, self.size[0])
        elif self.shape == "box":
            half = np.asarray(self.size, dtype=float) / 2
        else:
            half = np.full(3, self.size[0])
            half[self.axis] = self.size[1] / 2
        return c - half, c + half

    def mask(self, dims: Sequence[int]) -> np.ndarray:
        z, y, x = np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")
        r = [z - self.center[0], y - self.center[1], x - self.center[2]]
        if self.shape == "sphere":
            return r[0] ** 2 + r[1] ** 2 + r[2] ** 2 <= self.size[0] ** 2
        if self.shape == "box":
            out = np.ones(tuple(dims), dtype=bool)
            for ri, s in zip(r, self.size):
                out &= (ri >= -s / 2) & (ri < s / 2)
            return out
        radial = sum(r[i] ** 2 for i in range(3) if i != self.axis)
        along = r[self.axis]
        half = self.size[1] / 2
        return (radial <= self.size[0] ** 2) & (along >= -half) & (along < half)


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 64)
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    background: float = 0.0
    primitives: List[Primitive] = field(default_factory=list)


class PhantomSyntaxError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _numbers(text: str, line: int, count: int | None = None) -> list:
    try:
        vals = [float(t) for t in re.split(r"[,\s]+", text.strip()) if t]
    except ValueError:
        raise PhantomSyntaxError(line, f"expected numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise PhantomSyntaxError(line, f"expected {count} numbers, got {len(vals)}")
    return vals


def parse_phantom_spec(text: str) -> PhantomSpec:
    """Parse the phantom text format.

    One statement per line; ``#`` starts a comment::

        dims = 64 64 64
        voxel_size = 1 1 1
        background = 0.0
        sphere   center=32,32,32 radius=8 chi=0.9
        box      center=10.5,10.5,10.5 size=4,4,4 chi=0.1
        cylinder center=32,32,32 radius=3 length=20 axis=0 chi=-0.05

    Primitives are painted in order, later ones overwrite earlier ones.
    """
    spec = PhantomSpec()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if re.match(r"^\w+\s*=", line):
            key, _, value = line.partition("=")
            key = key.strip()
            if key == "dims":
                vals = _numbers(value, lineno, 3)
                if any(v != int(v) or not rfft.is_power_of_two(int(v)) for v in vals):
                    raise PhantomSyntaxError(lineno, f"dims must be powers of two, got {value.strip()}")
                spec.dims = tuple(int(v) for v in vals)
            elif key == "voxel_size":
                spec.voxel_size = tuple(_numbers(value, lineno, 3))
            elif key == "background":
                spec.background = _numbers(value, lineno, 1)[0]
            else:
                raise PhantomSyntaxError(lineno, f"unknown setting {key!r}")
            continue
        keyword, _, rest = line.partition(" ")
        if keyword not in SHAPES:
            raise PhantomSyntaxError(lineno, f"unknown shape {keyword!r}; expected one of {SHAPES}")
        fields = {}
        for item in rest.split():
            k, sep, v = item.partition("=")
            if not sep:
                raise PhantomSyntaxError(lineno, f"expected key=value, got {item!r}")
            fields[k] = v
        try:
            center = tuple(_numbers(fields.pop("center"), lineno, 3))
            chi = _numbers(fields.pop("chi"), lineno, 1)[0]
            axis = 0
            if keyword == "sphere":
                size = (_numbers(fields.pop("radius"), lineno, 1)[0],)
            elif keyword == "box":
                size = tuple(_numbers(fields.pop("size"), lineno, 3))
            else:
                size = (_numbers(fields.pop("radius"), lineno, 1)[0],
                        _numbers(fields.pop("length"), lineno, 1)[0])
                axis = int(_numbers(fields.pop("axis", "0"), lineno, 1)[0])
        except KeyError as exc:
            raise PhantomSyntaxError(lineno, f"{keyword} is missing {exc.args[0]!r}") from None
        if fields:
            raise PhantomSyntaxError(lineno, f"unexpected fields {sorted(fields)}")
        try:
            spec.primitives.append(Primitive(keyword, center, size, chi, axis))
        except ValueError as exc:
            raise PhantomSyntaxError(lineno, str(exc)) from None
    return spec


def format_phantom_spec(spec: PhantomSpec) -> str:
    fmt = lambda vals: ",".join(repr(float(v)) for v in vals)
    lines = [f"dims = {' '.join(str(d) for d in spec.dims)}",
             f"voxel_size = {' '.join(repr(float(v)) for v in spec.voxel_size)}",
             f"background = {float(spec.background)!r}"]
    for p in spec.primitives:
        if p.shape == "sphere":
            geo = f"radius={p.size[0]!r}"
        elif p.shape == "box":
            geo = f"size={fmt(p.size)}"
        else:
            geo = f"radius={p.size[0]!r} length={p.size[1]!r} axis={p.axis}"
        lines.append(f"{p.shape} center={fmt(p.center)} {geo} chi={float(p.chi)!r}")
    return "\n".join(lines) + "\n"


def load_phantom_spec(path) -> PhantomSpec:
    with open(path) as fh:
        return parse_phantom_spec(fh.read())


def random_phantom_spec(dims: Sequence[int] = (64, 64, 64), seed: int = 0,
                        n_inclusions: int = 10) -> PhantomSpec:
    """Brain-like phantom: a weakly varying tissue block with small, strongly
    paramagnetic or diamagnetic inclusions (spheres, boxes, cylinders)."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    n = np.asarray(dims, dtype=float)
    prims = [Primitive("box", tuple((n - 1) / 2), tuple(np.floor(n * 0.75)),
                       float(rng.uniform(-0.02, 0.02)))]
    for _ in range(n_inclusions):
        shape = SHAPES[int(rng.integers(3))]
        scale = min(dims) / 16
        if shape == "sphere":
            size = (float(rng.uniform(1.0, 3.0) * scale),)
        elif shape == "box":
            size = tuple(float(v) for v in np.round(rng.uniform(1.5, 5.0, 3) * scale))
        else:
            size = (float(rng.uniform(0.75, 2.0) * scale), float(rng.uniform(3.0, 8.0) * scale))
        prim = Primitive(shape, (0.0, 0.0, 0.0), size, 0.0, int(rng.integers(3)))
        lo, hi = prim.extent()
        half = (hi - lo) / 2
        low = half - 0.5 + 1
        high = n - 0.5 - half - 1
        center = tuple(float(np.round(rng.uniform(a, max(a, b)) * 2) / 2) for a, b in zip(low, high))
        chi = float(rng.choice([-1.0, 1.0], p=[0.3, 0.7]) * rng.uniform(0.05, 0.25))
        prims.append(Primitive(shape, center, size, chi, prim.axis))
    return PhantomSpec(dims, (1.0, 1.0, 1.0), 0.0, prims)


def render_phantom(spec: PhantomSpec) -> Volume:
    dims = tuple(int(d) for d in spec.dims)
    if not all(rfft.is_power_of_two(d) for d in dims):
        raise ValueError(f"phantom dims must be powers of two, got {dims}")
    chi = np.full(dims, spec.background, dtype=np.float64)
    tol = 1e-9
    for i, prim in enumerate(spec.primitives):
        lo, hi = prim.extent()
        if np.any(lo < -0.5 - tol) or np.any(hi > np.asarray(dims) - 0.5 + tol):
            raise ValueError(f"primitive {i} ({prim.shape} at {prim.center}) extends outside "
                             f"the {dims} grid")
        chi[prim.mask(dims)] = prim.chi
    return Volume(chi, spec.voxel_size, "ppm")


def dipole_kernel(dims: Sequence[int], voxel_size: Sequence[float] = (1.0, 1.0, 1.0),
                  b0_axis: int = 0) -> np.ndarray:
    """``1/3 - k_b0^2 / |k|^2`` on the FFT frequency grid, 0 at k = 0."""
    freqs = [rfft.fftfreq(int(n), float(d)) for n, d in zip(dims, voxel_size)]
    k = np.meshgrid(*freqs, indexing="ij")
    k2 = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        kernel = 1.0 / 3.0 - k[b0_axis] ** 2 / k2
    kernel[0, 0, 0] = 0.0
    return kernel


def _require_pow2(dims, what: str) -> None:
    if not all(rfft.is_power_of_two(d) for d in dims):
        raise ValueError(f"{what} needs power-of-two dims, got {tuple(dims)}")


def forward_field(chi: Volume, b0_axis: int = 0) -> Volume:
    """Relative field perturbation (ppm) produced by a susceptibility map."""
    _require_pow2(chi.dims, "forward_field")
    kernel = dipole_kernel(chi.dims, chi.voxel_size, b0_axis)
    field_ = rfft.ifftn(kernel * rfft.fftn(chi.data.astype(np.float64))).real
    return Volume(field_, chi.voxel_size, "ppm")


def field_to_phase(field_: Volume, scale: float = PHASE_PER_PPM) -> Volume:
    if field_.unit != "ppm":
        raise ValueError(f"field must be in ppm, got {field_.unit!r}")
    return Volume(field_.data.astype(np.float64) * scale, field_.voxel_size, "radians")


def hanning_lowpass_1d(freq: np.ndarray, width: float) -> np.ndarray:
    """Centered Hanning window spanning ``width`` of k-space (frequencies in cycles/voxel)."""
    f = np.asarray(freq, dtype=float)
    inside = np.abs(f) < width / 2
    return np.where(inside, 0.5 * (1.0 + np.cos(2.0 * np.pi * f / width)), 0.0)


def highpass_transfer(freq_y, freq_x, width: float) -> np.ndarray:
    """In-plane transfer function of :func:`highpass_phase`: ``1 - h(fy) h(fx)``."""
    return 1.0 - np.multiply.outer(hanning_lowpass_1d(freq_y, width),
                                   hanning_lowpass_1d(freq_x, width))


def highpass_phase(phase: Volume, filter_width: float = 0.25) -> Volume:
    """Subtract a per-slice (axis 0) 2D Hanning low-pass of the phase.

    Every slice loses its mean exactly because the window is 1 at DC.
    """
    if phase.unit != "radians":
        raise ValueError(f"phase must be in radians, got {phase.unit!r}")
    if not 0.0 < filter_width < 1.0:
        raise ValueError(f"filter_width must lie in (0, 1), got {filter_width}")
    _, ny, nx = phase.dims
    _require_pow2((ny, nx), "highpass_phase")
    transfer = highpass_transfer(rfft.fftfreq(ny), rfft.fftfreq(nx), filter_width)
    spectrum = rfft.fftn(phase.data.astype(np.float64), axes=(1, 2))
    hp = rfft.ifftn(spectrum * transfer[None], axes=(1, 2)).real
    return Volume(hp, phase.voxel_size, "radians")


def _triple(v) -> Tuple[int, int, int]:
    return (int(v),) * 3 if np.isscalar(v) else tuple(int(i) for i in v)


def patch_origins(dims: Sequence[int], patch, stride) -> List[Tuple[int, int, int]]:
    """Patch corners on a stride grid plus end-aligned corners, in z, y, x major order."""
    patch, stride = _triple(patch), _triple(stride)
    if min(stride) < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    starts = []
    for n, p, s in zip(dims, patch, stride):
        if p > n:
            raise ValueError(f"patch {p} larger than volume axis {n}")
        axis = list(range(0, n - p + 1, s))
        if axis[-1] != n - p:
            axis.append(n - p)
        starts.append(axis)
    return [(z, y, x) for z in starts[0] for y in starts[1] for x in starts[2]]


def extract_patches(v: Volume, patch, stride) -> List[Volume]:
    p = _triple(patch)
    return [v.with_data(v.data[z:z + p[0], y:y + p[1], x:x + p[2]])
            for z, y, x in patch_origins(v.dims, patch, stride)]


def assemble_patches(patches: Sequence, origins: Sequence, dims: Sequence[int],
                     voxel_size=None, unit: str | None = None) -> Volume:
    """Place patches at their origins, averaging wherever they overlap."""
    if len(patches) != len(origins) or not patches:
        raise ValueError(f"{len(patches)} patches for {len(origins)} origins")
    dims = tuple(int(d) for d in dims)
    acc = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)
    for patch, (z, y, x) in zip(patches, origins):
        data = patch.data if isinstance(patch, Volume) else np.asarray(patch)
        pz, py, px = data.shape
        if z < 0 or y < 0 or x < 0 or z + pz > dims[0] or y + py > dims[1] or x + px > dims[2]:
            raise ValueError(f"patch at {(z, y, x)} of shape {data.shape} exceeds {dims}")
        acc[z:z + pz, y:y + py, x:x + px] += data
        count[z:z + pz, y:y + py, x:x + px] += 1
    if np.any(count == 0):
        missing = tuple(int(i) for i in np.argwhere(count == 0)[0])
        raise ValueError(f"voxel {missing} is not covered by any patch")
    first = patches[0]
    if voxel_size is None:
        voxel_size = first.voxel_size if isinstance(first, Volume) else (1.0, 1.0, 1.0)
    if unit is None:
        unit = first.unit if isinstance(first, Volume) else "dimensionless"
    return Volume(acc / count, voxel_size, unit)


def simulate_swi_phase(chi: Volume, noise_sigma: float = 0.0, seed: int = 0,
                       filter_width: float = 0.25, b0_axis: int = 0) -> Volume:
    phase = field_to_phase(forward_field(chi, b0_axis))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        phase = phase.with_data(phase.data + rng.normal(0.0, noise_sigma, phase.dims))
    return highpass_phase(phase, filter_width)


def make_dataset(specs: Sequence[PhantomSpec], noise_sigma: float = 0.0, seed: int = 0,
                 filter_width: float = 0.25, b0_axis: int = 0) -> List[Tuple[Volume, Volume]]:
    """``(hp_phase, chi)`` pairs, one per spec; noise for pair ``i`` uses seed ``(seed, i)``."""
    pairs = []
    for i, spec in enumerate(specs):
        chi = render_phantom(spec)
        noise_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        pairs.append((simulate_swi_phase(chi, noise_sigma, noise_seed, filter_width, b0_axis), chi))
    return pairs
