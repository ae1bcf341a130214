"""Optimising the network on (filtered phase, susceptibility) patch pairs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .network import ModelConfig, Parameters, forward, init_parameters
from .physics import assemble_patches, extract_patches, patch_origins
from .tensor import Tensor, backward, mse_loss
from .volume import Volume

__all__ = [
    "Pair",
    "TrainRunConfig",
    "OptimizerState",
    "NumericalError",
    "leave_one_out_split",
    "adam_step",
    "Trainer",
    "train",
    "reconstruct",
    "parse_config_text",
]

log = logging.getLogger(__name__)

Pair = Tuple[Volume, Volume]


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainRunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 2
    steps: int = 1000
    patch: int = 48
    stride: int = 24
    seed: int = 0
    input_scale: float = math.pi
    target_scale: float = 1.0
    per_voxel_loss: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.patch % 4 or self.patch < 16:
            raise ValueError(f"patch must be a multiple of 4 and >= 16, got {self.patch}")
        if self.batch_size < 1 or self.steps < 0 or self.stride < 1:
            raise ValueError("batch_size and stride must be >= 1, steps >= 0")
        if self.input_scale <= 0 or self.target_scale <= 0:
            raise ValueError("scales must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["betas"] = tuple(d["betas"])
        return cls(**d)


_MODEL_KEYS = {"variant": str, "slope": float}
_RUN_KEYS = {"lr": float, "eps": float, "batch_size": int, "steps": int, "patch": int,
             "stride": int, "seed": int, "input_scale": float, "target_scale": float,
             "checkpoint_every": int}


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config_text(text: str, base: Optional[TrainRunConfig] = None,
                      overrides: Optional[Dict[str, str]] = None) -> TrainRunConfig:
    """Build a run config from ``key = value`` lines, then apply ``overrides``.

    Recognised keys: the scalar fields of :class:`TrainRunConfig`, ``betas``
    (two numbers), ``per_voxel_loss`` (bool), and the model keys ``variant``,
    ``widths`` (three integers) and ``slope``. The model seed follows ``seed``.
    """
    items: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        items[key.strip()] = value.strip()
    items.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})

    run = base or TrainRunConfig()
    model = run.model.to_dict()
    kw = {}
    for key, value in items.items():
        try:
            if key in _RUN_KEYS:
                kw[key] = _RUN_KEYS[key](value)
            elif key == "betas":
                kw["betas"] = tuple(float(v) for v in value.replace(",", " ").split())
            elif key == "per_voxel_loss":
                kw[key] = _bool(value)
            elif key in _MODEL_KEYS:
                model[key] = _MODEL_KEYS[key](value)
            elif key == "widths":
                model["widths"] = [int(v) for v in value.replace(",", " ").split()]
            else:
                raise ValueError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise ValueError(f"{key}: {exc}") from None
    model["seed"] = kw.get("seed", run.seed)
    return replace(run, model=ModelConfig.from_dict(model), **kw)


def leave_one_out_split(dataset: Sequence[Pair], held_out_index: int):
    n = len(dataset)
    if n < 2:
        raise ValueError(f"need at least 2 pairs to split, got {n}")
    if not 0 <= held_out_index < n:
        raise IndexError(f"held-out index {held_out_index} outside [0, {n})")
    train = [p for i, p in enumerate(dataset) if i != held_out_index]
    return train, [dataset[held_out_index]]


@dataclass
class OptimizerState:
    """Adam moments per parameter name plus the step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Parameters, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()},
                   0, lr, tuple(betas), eps)


def adam_step(params: Parameters, state: OptimizerState) -> None:
    """One bias-corrected Adam update from the ``grad`` buffers of ``params``."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        dt = p.data.dtype.type
        m = state.m[name] = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1 - b2) * g * g
        step = dt(state.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        p.data = p.data - step
        p.grad = None


class Trainer:
    """Step-wise training loop.

    The batch drawn at step ``t`` depends only on ``(run.seed, t)``, so a run
    resumed from a checkpoint replays exactly what an uninterrupted run would.
    """

    def __init__(self, run: TrainRunConfig, dataset: Sequence[Pair],
                 params: Optional[Parameters] = None, state: Optional[OptimizerState] = None):
        if not dataset:
            raise ValueError("empty training set")
        self.run = run
        self.params = params if params is not None else init_parameters(run.model, run.seed)
        self.state = state if state is not None else OptimizerState.zeros_like(
            self.params, run.lr, run.betas, run.eps)
        self.inputs, self.targets, self.pool = [], [], []
        for i, (phase, chi) in enumerate(dataset):
            if phase.dims != chi.dims:
                raise ValueError(f"pair {i}: phase {phase.dims} vs chi {chi.dims}")
            if phase.unit != "radians" or chi.unit != "ppm":
                raise ValueError(f"pair {i}: expected radians/ppm, got {phase.unit}/{chi.unit}")
            if min(phase.dims) < run.patch:
                raise ValueError(f"pair {i}: dims {phase.dims} smaller than patch {run.patch}")
            self.inputs.append(phase.data / np.float32(run.input_scale))
            self.targets.append(chi.data / np.float32(run.target_scale))
            self.pool.extend((i, o) for o in patch_origins(phase.dims, run.patch, run.stride))
        self.losses: List[float] = []

    def batch(self, step: int):
        rng = np.random.default_rng([self.run.seed, step])
        k = min(self.run.batch_size, len(self.pool))
        picks = rng.choice(len(self.pool), size=k, replace=False)
        p = self.run.patch
        xs, ys = [], []
        for j in picks:
            i, (z, y, x) = self.pool[j]
            xs.append(self.inputs[i][z:z + p, y:y + p, x:x + p])
            ys.append(self.targets[i][z:z + p, y:y + p, x:x + p])
        return np.stack(xs)[:, None], np.stack(ys)[:, None]

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        pred = forward(x, self.params, self.run.model)
        return mse_loss([pred], [y], per_voxel=self.run.per_voxel_loss)

    def step(self) -> float:
        x, y = self.batch(self.state.step)
        loss = self.loss(x, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at step {self.state.step}")
        backward(loss)
        adam_step(self.params, self.state)
        self.losses.append(value)
        return value

    def fit(self, steps: Optional[int] = None,
            callback: Optional[Callable[["Trainer"], None]] = None) -> List[float]:
        steps = self.run.steps if steps is None else steps
        for _ in range(steps):
            value = self.step()
            if self.state.step % 50 == 0:
                log.info("step %d loss %.6g", self.state.step, value)
            every = self.run.checkpoint_every
            if callback is not None and every and self.state.step % every == 0:
                callback(self)
        return self.losses


def train(run: TrainRunConfig, dataset: Sequence[Pair],
          callback: Optional[Callable[[Trainer], None]] = None):
    """Train from scratch for ``run.steps`` steps; returns (params, state, loss curve)."""
    trainer = Trainer(run, dataset)
    trainer.fit(callback=callback)
    return trainer.params, trainer.state, trainer.losses


def reconstruct(params: Parameters, run: TrainRunConfig, phase: Volume,
                patch: Optional[int] = None, stride: Optional[int] = None,
                input_scale: Optional[float] = None,
                target_scale: Optional[float] = None) -> Volume:
    """Patch-wise inference over a whole filtered-phase volume; result in ppm.

    Input and output scaling come from ``run`` (the checkpoint) so they match
    training. Passing ``input_scale`` / ``target_scale`` asserts the expected
    values and rejects a checkpoint trained with different ones.
    """
    for what, want, have in (("input", input_scale, run.input_scale),
                             ("target", target_scale, run.target_scale)):
        if want is not None and want != have:
            raise ValueError(f"{what} scale mismatch: checkpoint has {have!r}, expected {want!r}")
    if phase.unit != "radians":
        raise ValueError(f"expected a phase volume in radians, got {phase.unit!r}")
    for ax, n in zip(("depth", "height", "width"), phase.dims):
        if n % 4 or n < 16:
            raise ValueError(f"{ax} axis is {n}; must be a multiple of 4 and >= 16")
    patch = min(run.patch if patch is None else patch, *phase.dims)
    patch -= patch % 4
    stride = max(1, patch // 2) if stride is None else stride
    pieces = extract_patches(phase, patch, stride)
    origins = patch_origins(phase.dims, patch, stride)
    outs = []
    for piece in pieces:
        x = (piece.data / np.float32(run.input_scale))[None, None]
        y = forward(x, params_inference(params), run.model)
        outs.append(y.data[0, 0] * np.float32(run.target_scale))
    return assemble_patches(outs, origins, phase.dims, phase.voxel_size, "ppm")


def params_inference(params: Parameters) -> Parameters:
    """Graph-free views of the parameters (no gradients recorded)."""
    return {k: Tensor(p.data) for k, p in params.items()}
