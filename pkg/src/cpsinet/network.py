"""Cross-connected Psi-shaped network for susceptibility reconstruction.

Three resolution levels (1, 1/2, 1/4). An encoder produces one feature set per
level; an intermediate branch of dilated interaction blocks (DIBs) refines them
from the bottom level upwards; a decoder turns the DIB outputs back into a
single-channel susceptibility map. Between branches, every level is connected
to every other level by a resampling "cross connection" (strided conv down,
1x1x1 conv across, transposed conv up). The ``no_mff`` ablation keeps only
the same-level connections and ``no_dib`` swaps each DIB for two plain convs.

Architecture table for widths ``(W0, W1, W2)``, ``c_l = W_l / 3``:

=====================  =========================  ===============================
name                   op                         channels
=====================  =========================  ===============================
enc.L0.conv1/conv2     3^3 conv                   1 -> W0 -> W0
enc.Ll.down            3^3 conv, stride 2         W(l-1) -> Wl        (l = 1, 2)
enc.Ll.conv1/conv2     3^3 conv                   Wl -> Wl -> Wl      (l = 1, 2)
xenc.EmtoLl            cross connection m -> l    Wm -> c_l
dib.Ll.up              2^3 transposed, stride 2   W(l+1) -> c_l       (l = 0, 1)
dib.Ll.l1.r{1,2,3}     3^3 conv, dilation r       in_l -> c_l
dib.Ll.l2.r{1,2,3}     3^3 conv, dilation r       3 c_l -> c_l
xdib.DmtoLl            cross connection m -> l    Wm -> c_l
dec.Ll.up              2^3 transposed, stride 2   W(l+1) -> c_l       (l = 0, 1)
dec.Ll.conv1/conv2     3^3 conv                   in_l -> Wl -> Wl
head                   3^3 conv                   W0 -> 1
=====================  =========================  ===============================

``in_l`` is ``c_l`` times the number of concatenated sources: three cross
connections (one for ``no_mff``) plus the upsampled deeper level when l < 2.
With ``no_dib`` the six dilated convs of a level become ``dib.Ll.conv1``
(in_l -> Wl) and ``dib.Ll.conv2`` (Wl -> Wl). Every conv is followed by a
leaky ReLU.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .tensor import (ConvSpec, ShapeError, Tensor, concat_channels, conv3d,
                     conv_transpose3d, leaky_relu)

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "LayerDef",
    "CrossConnection",
    "DIBParams",
    "Parameters",
    "layer_table",
    "connections",
    "init_parameters",
    "parameter_count",
    "dib_params",
    "dib_forward",
    "resample",
    "forward",
]

VARIANTS = ("full", "no_dib", "no_mff")
LEVELS = 3
DILATIONS = (1, 2, 3)

Parameters = Dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    widths: tuple = (24, 48, 96)
    slope: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.widths) != LEVELS:
            raise ValueError(f"need {LEVELS} widths, got {self.widths}")
        for w in self.widths:
            if w <= 0 or w % 3:
                raise ValueError(f"every width must be a positive multiple of 3, got {self.widths}")
        if not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky slope must lie in (0, 1), got {self.slope}")

    def branch(self, level: int) -> int:
        """Channels per dilated branch (and per cross-connection source) at ``level``."""
        return self.widths[level] // 3

    def to_dict(self) -> dict:
        return {"variant": self.variant, "widths": list(self.widths),
                "slope": self.slope, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(d["variant"], tuple(d["widths"]), float(d["slope"]), int(d["seed"]))


@dataclass(frozen=True)
class LayerDef:
    name: str
    transposed: bool
    spec: ConvSpec

    @property
    def weight_shape(self) -> tuple:
        s = self.spec
        lead = (s.in_channels, s.out_channels) if self.transposed else (s.out_channels, s.in_channels)
        return lead + s.kernel

    @property
    def fan_in(self) -> int:
        s = self.spec
        if self.transposed:
            # each output voxel of a kernel==stride deconv sees in_channels * (k/s)^3 taps
            return max(1, s.in_channels * s.taps // int(np.prod(s.stride)))
        return s.in_channels * s.taps


@dataclass(frozen=True)
class CrossConnection:
    """Resampling link from level ``src`` of one branch to level ``dst`` of the next."""

    name: str
    src: int
    dst: int
    in_channels: int
    out_channels: int

    @property
    def mode(self) -> str:
        if self.src == self.dst:
            return "identity"
        factor = 2 ** abs(self.dst - self.src)
        return f"down{factor}" if self.dst > self.src else f"up{factor}"

    @property
    def factor(self) -> int:
        return 2 ** abs(self.dst - self.src)

    def layer(self) -> LayerDef:
        if self.src == self.dst:
            return LayerDef(self.name, False, ConvSpec(self.in_channels, self.out_channels, 1))
        spec = ConvSpec.resample(self.in_channels, self.out_channels, self.factor)
        return LayerDef(self.name, self.dst < self.src, spec)


def connections(config: ModelConfig) -> List[CrossConnection]:
    """All cross connections of a configuration, encoder->DIB first, then DIB->decoder."""
    out = []
    for prefix, tag in (("xenc", "E"), ("xdib", "D")):
        for dst in range(LEVELS):
            for src in range(LEVELS):
                if config.variant == "no_mff" and src != dst:
                    continue
                out.append(CrossConnection(f"{prefix}.{tag}{src}toL{dst}", src, dst,
                                           config.widths[src], config.branch(dst)))
    return out


def _sources(config: ModelConfig, level: int) -> int:
    n = 3 if config.variant != "no_mff" else 1
    return n + (1 if level < LEVELS - 1 else 0)


def layer_table(config: ModelConfig) -> List[LayerDef]:
    """Every learnable layer in forward-execution order."""
    W = config.widths
    layers: List[LayerDef] = []
    conv = lambda name, cin, cout, dil=1: LayerDef(name, False, ConvSpec.same(cin, cout, dil))
    up2 = lambda name, cin, cout: LayerDef(name, True, ConvSpec.resample(cin, cout, 2))
    xconn = {c.name: c for c in connections(config)}

    for lv in range(LEVELS):
        if lv == 0:
            layers.append(conv("enc.L0.conv1", 1, W[0]))
        else:
            layers.append(LayerDef(f"enc.L{lv}.down", False,
                                   ConvSpec(W[lv - 1], W[lv], 3, 2, 1, 1)))
            layers.append(conv(f"enc.L{lv}.conv1", W[lv], W[lv]))
        layers.append(conv(f"enc.L{lv}.conv2", W[lv], W[lv]))

    for branch, tag in (("dib", "E"), ("dec", "D")):
        prefix = "xenc" if branch == "dib" else "xdib"
        for lv in reversed(range(LEVELS)):
            c = config.branch(lv)
            for src in range(LEVELS):
                name = f"{prefix}.{tag}{src}toL{lv}"
                if name in xconn:
                    layers.append(xconn[name].layer())
            if lv < LEVELS - 1:
                layers.append(up2(f"{branch}.L{lv}.up", W[lv + 1], c))
            cin = c * _sources(config, lv)
            if branch == "dib" and config.variant != "no_dib":
                for r in DILATIONS:
                    layers.append(conv(f"dib.L{lv}.l1.r{r}", cin, c, r))
                for r in DILATIONS:
                    layers.append(conv(f"dib.L{lv}.l2.r{r}", 3 * c, c, r))
            else:
                layers.append(conv(f"{branch}.L{lv}.conv1", cin, W[lv]))
                layers.append(conv(f"{branch}.L{lv}.conv2", W[lv], W[lv]))

    layers.append(conv("head", W[0], 1))
    return layers


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(l.weight_shape)) + l.spec.out_channels for l in layer_table(config))


def _generator(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))


def init_parameters(config: ModelConfig, seed: Optional[int] = None,
                    dtype=np.float32) -> Parameters:
    """He-normal weights, zero biases, drawn per parameter from Philox keyed by (seed, name)."""
    seed = config.seed if seed is None else seed
    params: Parameters = {}
    for layer in layer_table(config):
        wname = f"{layer.name}.weight"
        std = np.sqrt(2.0 / layer.fan_in)
        w = _generator(seed, wname).standard_normal(layer.weight_shape) * std
        params[wname] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.spec.out_channels, dtype),
                                              requires_grad=True)
    return params


def _apply(layer: LayerDef, x: Tensor, params: Parameters, slope: float) -> Tensor:
    w = params[f"{layer.name}.weight"]
    b = params[f"{layer.name}.bias"]
    op = conv_transpose3d if layer.transposed else conv3d
    return leaky_relu(op(x, w, b, layer.spec), slope)


@dataclass
class DIBParams:
    """Weights of one dilated interaction block.

    ``layer1`` and ``layer2`` hold ``(spec, weight, bias)`` for dilation 1, 2, 3.
    """

    level: int
    branch_width: int
    layer1: list = field(default_factory=list)
    layer2: list = field(default_factory=list)

    @property
    def in_channels(self) -> int:
        return self.layer1[0][0].in_channels


def dib_params(params: Parameters, config: ModelConfig, level: int) -> DIBParams:
    if config.variant == "no_dib":
        raise ValueError("the no_dib variant has no dilated interaction blocks")
    c = config.branch(level)
    cin = c * _sources(config, level)
    out = DIBParams(level, c)
    for j, layer in ((1, out.layer1), (2, out.layer2)):
        for r in DILATIONS:
            spec = ConvSpec.same(cin if j == 1 else 3 * c, c, r)
            name = f"dib.L{level}.l{j}.r{r}"
            layer.append((spec, params[f"{name}.weight"], params[f"{name}.bias"]))
    return out


def dib_forward(x: Tensor, block: DIBParams, slope: float = 0.1) -> Tensor:
    """Two layers of three parallel dilated convs; layer 2 convs each see all of layer 1."""
    if x.shape[1] != block.in_channels:
        raise ShapeError(f"DIB level {block.level}: channel axis has {x.shape[1]}, "
                         f"expected {block.in_channels}")
    g = concat_channels([leaky_relu(conv3d(x, w, b, s), slope) for s, w, b in block.layer1])
    return concat_channels([leaky_relu(conv3d(g, w, b, s), slope) for s, w, b in block.layer2])


def resample(x: Tensor, conn: CrossConnection, params: Parameters, slope: float = 0.1) -> Tensor:
    if conn.dst > conn.src:
        for ax, n in zip(("depth", "height", "width"), x.shape[2:]):
            if n % conn.factor:
                raise ShapeError(f"{conn.name}: {ax} axis {n} not divisible by {conn.factor}")
    return _apply(conn.layer(), x, params, slope)


def _check_input(phase: Tensor) -> None:
    if phase.data.ndim != 5 or phase.shape[1] != 1:
        raise ShapeError(f"expected input shaped (N, 1, D, H, W), got {phase.shape}")
    for ax, n in zip(("depth", "height", "width"), phase.shape[2:]):
        if n % 4 or n < 16:
            raise ShapeError(f"{ax} axis is {n}; must be a multiple of 4 and >= 16")


def forward(phase, params: Parameters, config: ModelConfig,
            features: Optional[dict] = None) -> Tensor:
    """Map ``(N, 1, D, H, W)`` filtered phase to an equally shaped susceptibility map.

    When ``features`` is a dict it receives the per-level outputs of each
    branch under keys like ``"enc.L0"``, ``"dib.L2"`` and ``"dec.L1"``.
    """
    phase = phase if isinstance(phase, Tensor) else Tensor(phase)
    _check_input(phase)
    slope = config.slope
    layers = {l.name: l for l in layer_table(config)}
    conns = connections(config)
    run = lambda name, x: _apply(layers[name], x, params, slope)
    feats = {} if features is None else features

    enc = []
    h = phase
    for lv in range(LEVELS):
        if lv == 0:
            h = run("enc.L0.conv1", h)
        else:
            h = run(f"enc.L{lv}.conv1", run(f"enc.L{lv}.down", h))
        h = run(f"enc.L{lv}.conv2", h)
        enc.append(h)
        feats[f"enc.L{lv}"] = h

    def branch(name: str, prefix: str, inputs: list) -> list:
        outs: list = [None] * LEVELS
        for lv in reversed(range(LEVELS)):
            parts = [resample(inputs[c.src], c, params, slope)
                     for c in conns if c.name.startswith(prefix) and c.dst == lv]
            if lv < LEVELS - 1:
                parts.append(run(f"{name}.L{lv}.up", outs[lv + 1]))
            z = concat_channels(parts)
            if name == "dib" and config.variant != "no_dib":
                z = dib_forward(z, dib_params(params, config, lv), slope)
            else:
                z = run(f"{name}.L{lv}.conv2", run(f"{name}.L{lv}.conv1", z))
            outs[lv] = z
            feats[f"{name}.L{lv}"] = z
        return outs

    dib = branch("dib", "xenc", enc)
    dec = branch("dec", "xdib", dib)
    return run("head", dec[0])
