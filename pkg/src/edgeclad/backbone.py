"""Staged convolutional backbone with feature taps and a frozen shared prefix.

Stages are numbered from 1.  Stage 0 denotes the raw input, so a split index
of 0 means an empty prefix.  The network is evaluated only up to the deepest
tapped stage; later stages are never run and are excluded from accounting.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

NONLINEARITIES = {
    "relu": nn.ReLU,
    "leaky_relu": nn.LeakyReLU,
    "tanh": nn.Tanh,
    "identity": nn.Identity,
}
VARIANTS = ("stfpm", "paste")
ROLES = ("teacher", "student")
BYTES_PER_PARAM = 4


class SpecError(ValueError):
    """Raised when a backbone description violates its invariants."""


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    convs: tuple[tuple[int, int], ...]
    nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "convs", tuple((int(k), int(s)) for k, s in self.convs))


@dataclass(frozen=True)
class BackboneSpec:
    """Description of a backbone: stage layout, tapped stages, split point, weights.

    ``weights_path`` switches the teacher to an external flat float32 file;
    otherwise weights are drawn deterministically from ``seed``.
    """

    input_shape: tuple[int, int, int]
    stages: tuple[StageSpec, ...]
    tap_indices: tuple[int, ...]
    split_index: int
    seed: int = 0
    weights_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "tap_indices", tuple(sorted(set(int(t) for t in self.tap_indices))))
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be three positive ints, got {self.input_shape}")
        if not self.stages:
            raise SpecError("stage list is empty")
        for i, stage in enumerate(self.stages, start=1):
            if stage.out_channels < 1:
                raise SpecError(f"stage {i}: out_channels must be positive")
            if not stage.convs:
                raise SpecError(f"stage {i}: no convolutions")
            for k, s in stage.convs:
                if k < 1 or k % 2 == 0:
                    raise SpecError(f"stage {i}: kernel size {k} is not odd")
                if s not in (1, 2):
                    raise SpecError(f"stage {i}: stride {s} not in {{1, 2}}")
            if stage.nonlinearity not in NONLINEARITIES:
                raise SpecError(f"stage {i}: unknown nonlinearity {stage.nonlinearity!r}")
        if not self.tap_indices:
            raise SpecError("no tap indices")
        n = len(self.stages)
        for t in self.tap_indices:
            if not 1 <= t <= n:
                raise SpecError(f"tap index {t} outside [1, {n}]")
        if not 0 <= self.split_index < min(self.tap_indices):
            raise SpecError(
                f"split_index {self.split_index} must satisfy 0 <= split < min(taps)={min(self.tap_indices)}"
            )

    @property
    def last_stage(self) -> int:
        return max(self.tap_indices)

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """Output shape of every stage (index 0 is the input)."""
        c, h, w = self.input_shape
        shapes = [(c, h, w)]
        for stage in self.stages:
            for _, s in stage.convs:
                h, w = math.ceil(h / s), math.ceil(w / s)
            c = stage.out_channels
            shapes.append((c, h, w))
        return shapes

    @property
    def split_shape(self) -> tuple[int, int, int]:
        return self.stage_shapes()[self.split_index]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["tap_indices"] = list(self.tap_indices)
        d["stages"] = [
            {"out_channels": s.out_channels, "convs": [list(c) for c in s.convs], "nonlinearity": s.nonlinearity}
            for s in self.stages
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        try:
            stages = tuple(
                StageSpec(int(s["out_channels"]), tuple(tuple(c) for c in s["convs"]), s.get("nonlinearity", "relu"))
                for s in d["stages"]
            )
            return cls(
                input_shape=tuple(d["input_shape"]),
                stages=stages,
                tap_indices=tuple(d["tap_indices"]),
                split_index=int(d["split_index"]),
                seed=int(d.get("seed", 0)),
                weights_path=d.get("weights_path"),
            )
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed backbone spec: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneSpec":
        return cls.from_dict(json.loads(text))


def desk_spec(image_size: int = 64, seed: int = 0, split_index: int = 1, taps: Iterable[int] = (2, 3)) -> BackboneSpec:
    """Small plain conv net used for desk-scale experiments.

    Stage heads downsample by 2 and channels double: 24 -> 48 -> 96.  At 64x64
    input the split feature holds 24x32x32 = 24,576 floats.
    """
    stages = (
        StageSpec(24, ((3, 2), (3, 1))),
        StageSpec(48, ((3, 2), (3, 1))),
        StageSpec(96, ((3, 2), (3, 1))),
    )
    return BackboneSpec((3, image_size, image_size), stages, tuple(taps), split_index, seed)


class Backbone(nn.Module):
    """Evaluable network built from a :class:`BackboneSpec`.

    ``stages[i - 1]`` computes stage ``i``.  Stages beyond the deepest tap are
    not instantiated.
    """

    def __init__(self, spec: BackboneSpec, seed: int | None = None):
        super().__init__()
        self.spec = spec
        self.seed = spec.seed if seed is None else seed
        self.output_shapes = spec.stage_shapes()[: spec.last_stage + 1]
        stages = []
        in_ch = spec.input_shape[0]
        for stage in spec.stages[: spec.last_stage]:
            layers: list[nn.Module] = []
            for k, s in stage.convs:
                layers.append(nn.Conv2d(in_ch, stage.out_channels, k, stride=s, padding=k // 2, bias=True))
                layers.append(NONLINEARITIES[stage.nonlinearity]())
                in_ch = stage.out_channels
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.reset_parameters(self.seed)

    def convs(self) -> list[nn.Conv2d]:
        return [m for stage in self.stages for m in stage if isinstance(m, nn.Conv2d)]

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        # He-normal weights, zero biases; generated on CPU in declared order.
        gen = torch.Generator().manual_seed(int(seed))
        for conv in self.convs():
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float32) * std)
            conv.bias.zero_()

    def run(self, x: Tensor, start: int, stop: int) -> list[Tensor]:
        """Run stages ``start+1 .. stop``; returns outputs of each, in order."""
        outs = []
        for idx in range(start, stop):
            x = self.stages[idx](x)
            outs.append(x)
        return outs


def build_backbone(spec: BackboneSpec, seed: int | None = None) -> Backbone:
    """Instantiate ``spec``; an external weights file overrides the seed."""
    spec.validate()
    net = Backbone(spec, seed)
    if spec.weights_path is not None and seed is None:
        load_weights(net, spec.weights_path)
    return net


def parameter_order(net: Backbone) -> list[Tensor]:
    out = []
    for conv in net.convs():
        out.extend([conv.weight, conv.bias])
    return out


def save_weights(net: Backbone, path: str | Path) -> None:
    """Write all parameters as little-endian float32 in declared order."""
    flat = np.concatenate([p.detach().cpu().numpy().ravel() for p in parameter_order(net)])
    Path(path).write_bytes(flat.astype("<f4").tobytes())


@torch.no_grad()
def load_weights(net: Backbone, path: str | Path) -> None:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    params = parameter_order(net)
    expected = sum(p.numel() for p in params)
    if flat.size != expected:
        raise SpecError(f"weights file holds {flat.size} floats, spec needs {expected}")
    offset = 0
    for p in params:
        n = p.numel()
        p.copy_(torch.from_numpy(flat[offset : offset + n].copy()).view_as(p))
        offset += n


def _check_batch(x: Tensor, shape: Sequence[int], what: str) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise ValueError(f"{what}: expected batch of shape (N, {', '.join(map(str, shape))}), got {tuple(x.shape)}")


def forward_prefix(backbone: Backbone, images: Tensor) -> Tensor:
    """Activations at the split stage; never tracks gradients."""
    spec = backbone.spec
    _check_batch(images, spec.input_shape, "images")
    if spec.split_index == 0:
        return images
    with torch.no_grad():
        return backbone.run(images, 0, spec.split_index)[-1]


def forward_taps(backbone: Backbone, start: Tensor, role: str = "student", from_split: bool = False) -> list[Tensor]:
    """Tap outputs in ascending stage order.

    ``start`` is either an image batch or (``from_split=True``) a batch of
    split-stage feature maps.  The teacher role runs without autograd.
    """
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
    spec = backbone.spec
    split = spec.split_index
    if from_split:
        _check_batch(start, backbone.output_shapes[split], "split features")
        x = start
    else:
        x = forward_prefix(backbone, start)
    with torch.set_grad_enabled(role == "student" and torch.is_grad_enabled()):
        outs = backbone.run(x, split, spec.last_stage)
    return [outs[t - split - 1] for t in spec.tap_indices]


# --------------------------------------------------------------------------
# static accounting


@dataclass
class ResourceReport:
    macs_inference: int
    macs_training: int
    params_total: int
    params_trainable: int
    architecture_bytes: int
    prefix_macs: int = 0
    postsplit_macs: int = 0
    per_stage_macs: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def conv_macs(kernel: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return kernel * kernel * cin * cout * hout * wout


def conv_params(kernel: int, cin: int, cout: int, bias: bool = True) -> int:
    return kernel * kernel * cin * cout + (cout if bias else 0)


def stage_costs(spec: BackboneSpec) -> tuple[list[int], list[int]]:
    """Per-stage (MACs, params) for stages 1..last tapped stage."""
    macs, params = [], []
    c, h, w = spec.input_shape
    for stage in spec.stages[: spec.last_stage]:
        m = p = 0
        for k, s in stage.convs:
            h, w = math.ceil(h / s), math.ceil(w / s)
            m += conv_macs(k, c, stage.out_channels, h, w)
            p += conv_params(k, c, stage.out_channels)
            c = stage.out_channels
        macs.append(m)
        params.append(p)
    return macs, params


def count_resources(spec: BackboneSpec, variant: str) -> ResourceReport:
    """Static MAC / parameter / byte accounting for one teacher-student pair.

    Training MACs count the student only: frozen stages forward once,
    trainable stages forward plus a backward costed at twice the forward.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    spec.validate()
    macs, params = stage_costs(spec)
    k = spec.split_index
    pre_m, post_m = sum(macs[:k]), sum(macs[k:])
    pre_p, post_p = sum(params[:k]), sum(params[k:])
    if variant == "stfpm":
        inference = 2 * (pre_m + post_m)
        training = 3 * (pre_m + post_m)
        total = 2 * (pre_p + post_p)
        trainable = pre_p + post_p
    else:
        inference = pre_m + 2 * post_m
        training = pre_m + 3 * post_m
        total = pre_p + 2 * post_p
        trainable = post_p
    return ResourceReport(
        macs_inference=inference,
        macs_training=training,
        params_total=total,
        params_trainable=trainable,
        architecture_bytes=BYTES_PER_PARAM * total,
        prefix_macs=pre_m,
        postsplit_macs=post_m,
        per_stage_macs=macs,
    )
