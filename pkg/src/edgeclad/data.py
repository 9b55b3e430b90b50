"""Task streams: MVTec-layout loading and procedural defect textures."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MVTEC_OBJECTS = (
    "bottle", "cable", "capsule", "hazelnut", "transistor",
    "metal_nut", "pill", "screw", "zipper", "toothbrush",
)
DATA_ROOT_ENV = "EDGECLAD_DATA_ROOT"


class DatasetError(FileNotFoundError):
    """A dataset directory or file is missing or malformed."""


@dataclass
class Task:
    task_id: int
    name: str
    train_images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    test_images: np.ndarray
    test_labels: np.ndarray  # (M,) 0 normal / 1 anomalous
    test_masks: np.ndarray  # (M, H, W) uint8 in {0, 1}

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])


def validate_task(task: Task) -> Task:
    """Raise ``ValueError`` unless ``task`` satisfies the stream invariants."""
    tr, te = task.train_images, task.test_images
    if tr.ndim != 4 or len(tr) == 0:
        raise ValueError(f"task {task.name}: training set must be a nonempty (N, C, H, W) array")
    if te.ndim != 4 or te.shape[1:] != tr.shape[1:]:
        raise ValueError(f"task {task.name}: test images shaped {te.shape}, train {tr.shape}")
    for name, arr in (("train", tr), ("test", te)):
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError(f"task {task.name}: {name} images outside [0, 1]")
    if task.test_labels.shape != (len(te),) or not np.isin(task.test_labels, (0, 1)).all():
        raise ValueError(f"task {task.name}: labels must be one 0/1 value per test image")
    if task.test_masks.shape != (len(te),) + te.shape[2:]:
        raise ValueError(f"task {task.name}: masks shaped {task.test_masks.shape}, need {(len(te),) + te.shape[2:]}")
    if not np.isin(task.test_masks, (0, 1)).all():
        raise ValueError(f"task {task.name}: masks must be binary")
    has_defect = task.test_masks.reshape(len(te), -1).any(axis=1)
    if np.any(has_defect & (task.test_labels == 0)):
        raise ValueError(f"task {task.name}: normal test image with a nonempty mask")
    if np.any(~has_defect & (task.test_labels == 1)):
        raise ValueError(f"task {task.name}: anomalous test image with an empty mask")
    return task


# --------------------------------------------------------------------------
# MVTec layout


def _list_images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _read_image(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
    except OSError as exc:
        raise DatasetError(f"unreadable image: {path}") from exc


def _read_mask(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L").resize((size, size), Image.NEAREST)
            return (np.asarray(im) > 127).astype(np.uint8)
    except OSError as exc:
        raise DatasetError(f"unreadable mask: {path}") from exc


def _require_dir(d: Path) -> Path:
    if not d.is_dir():
        raise DatasetError(f"missing directory: {d}")
    return d


def load_mvtec_task(root, category: str, image_size: int = 256, task_id: int = 0) -> Task:
    """Load ``<root>/<category>`` in MVTec AD layout.

    Anomalous test images must have a mask named ``<stem>_mask.png`` (or
    ``<stem>.png``) under ``ground_truth/<defect_kind>``.
    """
    base = _require_dir(Path(root) / category)
    train_dir = _require_dir(base / "train" / "good")
    test_dir = _require_dir(base / "test")
    train_files = _list_images(train_dir)
    if not train_files:
        raise DatasetError(f"no training images in {train_dir}")
    train = np.stack([_read_image(p, image_size) for p in train_files])

    images, labels, masks = [], [], []
    for kind_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        for p in _list_images(kind_dir):
            images.append(_read_image(p, image_size))
            if kind_dir.name == "good":
                labels.append(0)
                masks.append(np.zeros((image_size, image_size), np.uint8))
                continue
            gt_dir = base / "ground_truth" / kind_dir.name
            candidates = [gt_dir / f"{p.stem}_mask.png", gt_dir / f"{p.stem}.png"]
            mask_path = next((c for c in candidates if c.is_file()), None)
            if mask_path is None:
                raise DatasetError(f"missing mask for anomalous image {p}: expected {candidates[0]}")
            labels.append(1)
            masks.append(_read_mask(mask_path, image_size))
    if not images:
        raise DatasetError(f"no test images under {test_dir}")
    task = Task(task_id, category, train, np.stack(images), np.array(labels, np.int8), np.stack(masks))
    return validate_task(task)


def load_mvtec_stream(root=None, categories=MVTEC_OBJECTS, image_size: int = 256) -> list[Task]:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise DatasetError(f"no data root given and ${DATA_ROOT_ENV} is unset")
    return [load_mvtec_task(root, c, image_size, task_id=i) for i, c in enumerate(categories)]


def export_mvtec(tasks: list[Task], root) -> None:
    """Write tasks as 8-bit PNGs in MVTec layout (defect kind ``synthetic``)."""
    root = Path(root)

    def save(arr: np.ndarray, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(arr.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path)

    for task in tasks:
        base = root / task.name
        for i, img in enumerate(task.train_images):
            save(img, base / "train" / "good" / f"{i:03d}.png")
        for i, (img, lab, mask) in enumerate(zip(task.test_images, task.test_labels, task.test_masks)):
            kind = "synthetic" if lab else "good"
            save(img, base / "test" / kind / f"{i:03d}.png")
            if lab:
                gt = base / "ground_truth" / kind / f"{i:03d}_mask.png"
                gt.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray((mask * 255).astype(np.uint8)).save(gt)


# --------------------------------------------------------------------------
# synthetic defect textures

DEFECT_AREA_RANGE = (0.005, 0.10)
DEFECT_CONTRAST = 0.4
DEFECT_NOISE = 0.12


def texture_params(task_index: int) -> tuple[float, float, tuple[float, float, float]]:
    """(cycles per image, orientation in degrees, RGB tint) for task ``task_index``.

    Orientation follows a golden-angle schedule and frequency cycles over five
    values, so all tuples are distinct.
    """
    orientation = (task_index * 137.50776405) % 180.0
    frequency = 3.0 + 2.0 * (task_index % 5)
    phase = 2 * math.pi * task_index / 7.0
    tint = tuple(0.75 + 0.25 * math.cos(phase + c * 2 * math.pi / 3) for c in range(3))
    return frequency, orientation, tint


def _texture(rng: np.random.Generator, size: int, params) -> np.ndarray:
    freq, theta_deg, tint = params
    theta = math.radians(theta_deg + rng.normal(0, 3.0))
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    grey = 0.5 + 0.3 * wave + rng.normal(0, 0.03, (size, size))
    img = np.stack([grey * t + (1 - t) * 0.5 for t in tint])
    return np.clip(img, 0, 1)


def _shape_mask(rng: np.random.Generator, size: int, area: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    aspect = rng.uniform(0.5, 2.0)
    h = max(2.0, math.sqrt(area * aspect))
    w = max(2.0, area / h)
    cy = rng.uniform(h / 2, size - h / 2)
    cx = rng.uniform(w / 2, size - w / 2)
    if rng.random() < 0.5:
        return (np.abs(yy + 0.5 - cy) <= h / 2) & (np.abs(xx + 0.5 - cx) <= w / 2)
    return ((yy + 0.5 - cy) / (h / 2)) ** 2 + ((xx + 0.5 - cx) / (w / 2)) ** 2 <= 1.0


def _defect_mask(rng: np.random.Generator, size: int, n_range: tuple[int, int]) -> np.ndarray:
    lo, hi = DEFECT_AREA_RANGE
    n_pix = size * size
    while True:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        target = rng.uniform(1.5 * lo, 0.8 * hi) * n_pix
        mask = np.zeros((size, size), bool)
        for share in rng.dirichlet(np.ones(n)) if n > 1 else [1.0]:
            mask |= _shape_mask(rng, size, max(share * target, 4.0))
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask


def _inject(rng: np.random.Generator, img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = img.copy()
    region = img[:, mask]
    grey = float(region.mean())
    sign = 1.0 if grey < 0.5 else -1.0
    noise = rng.normal(0, DEFECT_NOISE, int(mask.sum()))
    for c in range(3):
        fill = region[c].mean() + sign * DEFECT_CONTRAST
        out[c, mask] = np.clip(fill + noise, 0, 1)
    return out


def _to_8bit(img: np.ndarray) -> np.ndarray:
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def synth_task(
    seed: int,
    task_index: int,
    image_size: int = 64,
    n_train: int = 40,
    n_test_normal: int = 10,
    n_test_anomalous: int = 10,
    defects_per_image: tuple[int, int] = (1, 3),
) -> Task:
    rng = np.random.default_rng([seed, task_index])
    params = texture_params(task_index)
    train = np.stack([_to_8bit(_texture(rng, image_size, params)) for _ in range(n_train)])
    images, labels, masks = [], [], []
    for _ in range(n_test_normal):
        images.append(_to_8bit(_texture(rng, image_size, params)))
        labels.append(0)
        masks.append(np.zeros((image_size, image_size), np.uint8))
    for _ in range(n_test_anomalous):
        base = _texture(rng, image_size, params)
        mask = _defect_mask(rng, image_size, defects_per_image)
        images.append(_to_8bit(_inject(rng, base, mask)))
        labels.append(1)
        masks.append(mask.astype(np.uint8))
    name = f"texture_{task_index:02d}"
    task = Task(task_index, name, train, np.stack(images), np.array(labels, np.int8), np.stack(masks))
    return validate_task(task)


def synth_task_stream(seed: int, num_tasks: int, image_size: int = 64, **kw) -> list[Task]:
    """Deterministic stream of procedural texture tasks with injected defects."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    return [synth_task(seed, k, image_size, **kw) for k in range(num_tasks)]
