"""Student-teacher distillation: loss, anomaly maps, and the detector estimator."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import Tensor

from .backbone import Backbone, BackboneSpec, build_backbone, desk_spec, forward_prefix, forward_taps
from .replay import FEATURE_CODECS, ReplayMemory
from .validation import check_images, check_is_fitted

COMBINERS = ("mean", "product")
NORM_FLOOR = 1e-12


def normalize_channels(f: Tensor) -> Tensor:
    """Scale each spatial position's channel vector to unit length.

    Works on (C, h, w) or (N, C, h, w); zero vectors stay zero.
    """
    dim = -3
    norm = torch.linalg.vector_norm(f, dim=dim, keepdim=True)
    return f / norm.clamp_min(NORM_FLOOR)


def _check_pairs(teacher_feats, student_feats) -> None:
    if len(teacher_feats) == 0:
        raise ValueError("empty feature list")
    if len(teacher_feats) != len(student_feats):
        raise ValueError(f"{len(teacher_feats)} teacher levels vs {len(student_feats)} student levels")
    for i, (t, s) in enumerate(zip(teacher_feats, student_feats)):
        if t.shape != s.shape:
            raise ValueError(f"level {i}: teacher shape {tuple(t.shape)} != student shape {tuple(s.shape)}")


def level_maps(teacher_feats: list[Tensor], student_feats: list[Tensor]) -> list[Tensor]:
    """Per level, half the squared distance between normalized vectors."""
    _check_pairs(teacher_feats, student_feats)
    return [
        0.5 * (normalize_channels(t) - normalize_channels(s)).pow(2).sum(dim=-3)
        for t, s in zip(teacher_feats, student_feats)
    ]


def distillation_loss(teacher_feats: list[Tensor], student_feats: list[Tensor]) -> Tensor:
    return sum(m.mean() for m in level_maps(teacher_feats, student_feats))


@dataclass
class AnomalyMap:
    data: Tensor
    per_level: list[Tensor] = field(default_factory=list)


def anomaly_map(
    teacher_feats: list[Tensor],
    student_feats: list[Tensor],
    out_hw: tuple[int, int],
    combine: str = "mean",
) -> AnomalyMap:
    """Pixel-level anomaly maps of shape (N, H, W) (or (H, W) for unbatched input)."""
    if combine not in COMBINERS:
        raise ValueError(f"unknown reducer {combine!r}; expected one of {COMBINERS}")
    h, w = int(out_hw[0]), int(out_hw[1])
    if h < 1 or w < 1:
        raise ValueError(f"out_hw must be positive, got {out_hw}")
    levels = level_maps(teacher_feats, student_feats)
    unbatched = levels[0].ndim == 2
    ups = []
    for m in levels:
        m4 = m[None, None] if unbatched else m[:, None]
        up = F.interpolate(m4, size=(h, w), mode="bilinear", align_corners=False)
        ups.append(up[0, 0] if unbatched else up[:, 0])
    stacked = torch.stack(ups)
    data = stacked.mean(0) if combine == "mean" else stacked.prod(0)
    return AnomalyMap(data=data, per_level=levels)


def image_score(amap) -> Tensor:
    """Max pixel per image."""
    data = amap.data if isinstance(amap, AnomalyMap) else torch.as_tensor(amap)
    if data.ndim == 2:
        return data.max()
    return data.flatten(1).max(dim=1).values


@dataclass
class ModelBundle:
    spec: BackboneSpec
    teacher: Backbone
    student: Backbone
    variant: str

    def frozen_parameters(self) -> list[Tensor]:
        params = list(self.teacher.parameters())
        if self.variant == "paste":
            params += [p for st in self.student.stages[: self.spec.split_index] for p in st.parameters()]
        return params


def make_bundle(spec: BackboneSpec, variant: str = "paste", student_seed: int | None = None) -> ModelBundle:
    """Frozen teacher plus a trainable student.

    The student draws its weights from ``student_seed`` (default: teacher seed
    + 1).  In the paste variant its first ``split_index`` stages are the
    teacher's own modules, so the prefix exists once and is frozen.
    """
    if variant not in ("stfpm", "paste"):
        raise ValueError(f"unknown variant {variant!r}")
    teacher = build_backbone(spec)
    student = build_backbone(spec, seed=spec.seed + 1 if student_seed is None else student_seed)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    if variant == "paste":
        for i in range(spec.split_index):
            student.stages[i] = teacher.stages[i]
    return ModelBundle(spec, teacher, student, variant)


class StudentTeacherDetector(BaseEstimator):
    """STFPM / PaSTe anomaly detector trained on normal images only.

    ``fit`` starts from fresh weights; ``partial_fit`` keeps training the
    current student, optionally mixing in batches from a replay memory.
    ``transform`` returns pixel anomaly maps and ``score_samples`` the image
    scores (higher means more anomalous).

    Parameters
    ----------
    backbone : BackboneSpec, dict or None
        Backbone description; ``None`` selects the 64x64 desk backbone.
    variant : {"paste", "stfpm"}
    epochs : int
        Passes over the training set per ``fit`` / ``partial_fit`` call.
    batch_size : int
    lr, momentum, weight_decay : float
        SGD settings for the student.
    combine : {"mean", "product"}
        How per-level maps are merged.
    input_mean, input_std : float
        Fixed affine standardization applied to images before the backbone.
    random_state : int
        Seeds batch order and replay draws.
    """

    def __init__(
        self,
        backbone=None,
        variant="paste",
        epochs=20,
        batch_size=8,
        lr=0.4,
        momentum=0.9,
        weight_decay=1e-4,
        combine="mean",
        input_mean=0.5,
        input_std=0.25,
        student_seed=None,
        random_state=0,
    ):
        self.backbone = backbone
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.combine = combine
        self.input_mean = input_mean
        self.input_std = input_std
        self.student_seed = student_seed
        self.random_state = random_state

    # -- setup -----------------------------------------------------------
    def _resolve_spec(self) -> BackboneSpec:
        if self.backbone is None:
            return desk_spec()
        if isinstance(self.backbone, BackboneSpec):
            return self.backbone
        return BackboneSpec.from_dict(self.backbone)

    def _initialize(self) -> None:
        if self.combine not in COMBINERS:
            raise ValueError(f"unknown combine {self.combine!r}")
        self.spec_ = self._resolve_spec()
        self.bundle_ = make_bundle(self.spec_, self.variant, self.student_seed)
        trainable = [p for p in self.bundle_.student.parameters() if p.requires_grad]
        self.optimizer_ = torch.optim.SGD(
            trainable, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay
        )
        self.batch_rng_ = np.random.default_rng(self.random_state)
        self.replay_rng_ = np.random.default_rng([self.random_state, 1])
        self.loss_history_: list[float] = []
        self.n_steps_ = 0

    # -- training --------------------------------------------------------
    def fit(self, X, y=None):
        self._initialize()
        return self.partial_fit(X)

    def partial_fit(self, X, y=None, memory: ReplayMemory | None = None, epochs: int | None = None):
        if not hasattr(self, "bundle_"):
            self._initialize()
        X = check_images(X, self.spec_.input_shape)
        if memory is not None and memory.codec in FEATURE_CODECS and self.variant != "paste":
            raise ValueError(f"codec {memory.codec!r} needs the paste variant (frozen shared prefix)")
        student = self.bundle_.student
        student.train()
        n = X.shape[0]
        for _ in range(self.epochs if epochs is None else epochs):
            order = self.batch_rng_.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                extra = None
                if memory is not None and len(memory) > 0:
                    k = min(len(idx), len(memory))
                    extra, _ = memory.draw_batch(k, self.replay_rng_)
                self._step(X[idx], extra, memory.codec if memory is not None else None)
        student.eval()
        return self

    def _standardize(self, x: Tensor) -> Tensor:
        return (x - self.input_mean) / self.input_std

    def _step(self, xb: Tensor, extra, codec: str | None) -> float:
        b = self.bundle_
        if extra is not None and codec in FEATURE_CODECS:
            cur = forward_prefix(b.teacher, self._standardize(xb))
            feats = torch.cat([cur, torch.as_tensor(extra, dtype=torch.float32)])
            t = forward_taps(b.teacher, feats, "teacher", from_split=True)
            s = forward_taps(b.student, feats, "student", from_split=True)
        else:
            if extra is not None:
                xb = torch.cat([xb, check_images(extra, self.spec_.input_shape, "replayed images")])
            t, s = self._features(xb, train=True)
        loss = distillation_loss(t, s)
        self.optimizer_.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer_.step()
        value = float(loss.detach())
        self.loss_history_.append(value)
        self.n_steps_ += 1
        return value

    def _features(self, x: Tensor, train: bool = False) -> tuple[list[Tensor], list[Tensor]]:
        b = self.bundle_
        x = self._standardize(x)
        if b.variant == "paste":
            # prefix is shared: compute once, branch at the split
            f = forward_prefix(b.teacher, x)
            t = forward_taps(b.teacher, f, "teacher", from_split=True)
            with torch.set_grad_enabled(train):
                s = forward_taps(b.student, f, "student", from_split=True)
        else:
            t = forward_taps(b.teacher, x, "teacher")
            with torch.set_grad_enabled(train):
                s = forward_taps(b.student, x, "student")
        return t, s

    # -- inference -------------------------------------------------------
    @torch.no_grad()
    def anomaly_maps(self, X, batch_size: int = 32) -> np.ndarray:
        """Pixel anomaly maps, shape (N, H, W), float32."""
        check_is_fitted(self, "bundle_")
        X = check_images(X, self.spec_.input_shape)
        out_hw = self.spec_.input_shape[1:]
        maps = []
        for start in range(0, X.shape[0], batch_size):
            t, s = self._features(X[start : start + batch_size])
            maps.append(anomaly_map(t, s, out_hw, self.combine).data)
        return torch.cat(maps).numpy()

    def transform(self, X) -> np.ndarray:
        return self.anomaly_maps(X)

    def score_samples(self, X) -> np.ndarray:
        maps = self.anomaly_maps(X)
        return maps.reshape(maps.shape[0], -1).max(axis=1)

    @torch.no_grad()
    def split_features(self, X, batch_size: int = 32) -> np.ndarray:
        """Frozen-prefix activations for storage in a feature replay memory."""
        check_is_fitted(self, "bundle_")
        X = check_images(X, self.spec_.input_shape)
        parts = [
            forward_prefix(self.bundle_.teacher, self._standardize(X[i : i + batch_size]))
            for i in range(0, X.shape[0], batch_size)
        ]
        return torch.cat(parts).numpy()

    def frozen_checksum(self) -> str:
        """Digest of teacher and shared-prefix weights, for audit."""
        import hashlib

        check_is_fitted(self, "bundle_")
        h = hashlib.sha256()
        for p in self.bundle_.frozen_parameters():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def clone_state(self) -> "StudentTeacherDetector":
        return copy.deepcopy(self)
