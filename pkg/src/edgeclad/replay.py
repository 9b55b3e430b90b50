"""Fixed-capacity replay memory with balanced per-task quotas.

Four codecs are supported:

``raw_image``    8-bit RGB images, fed at the network input.
``raw_feature``  float32 split-stage feature maps.
``fq_feature``   8-bit min-max quantized feature maps.
``pq_feature``   product-quantized feature maps, one codebook per task.

Feature codecs are only meaningful when the layers before the split are
frozen (the paste variant); the detector enforces this.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import quantizers as q

CODECS = ("raw_image", "raw_feature", "fq_feature", "pq_feature")
FEATURE_CODECS = ("raw_feature", "fq_feature", "pq_feature")
MB = 10**6


@dataclass(frozen=True)
class PQParams:
    m: int = 6
    b: int = 7
    packed: bool = False


@dataclass
class FootprintReport:
    payload_bytes: int
    codebook_bytes: int
    metadata_bytes: int
    total_bytes: int
    per_sample_bytes: int

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MB

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_mb"] = self.total_mb
        return d


def quotas(capacity: int, n_tasks: int) -> list[int]:
    """Per-task slots: ``capacity // n`` each, remainder to the earliest tasks."""
    if n_tasks < 1:
        return []
    base, extra = divmod(capacity, n_tasks)
    return [base + (1 if i < extra else 0) for i in range(n_tasks)]


def per_sample_bytes(codec: str, image_shape=None, feature_shape=None, pq_params: PQParams | None = None) -> int:
    if codec == "raw_image":
        if image_shape is None:
            raise ValueError("raw_image footprint needs image_shape")
        return int(np.prod(image_shape))
    if feature_shape is None:
        raise ValueError(f"{codec} footprint needs feature_shape")
    elems = int(np.prod(feature_shape))
    if codec == "raw_feature":
        return 4 * elems
    if codec == "fq_feature":
        return elems + 8
    if codec == "pq_feature":
        if pq_params is None:
            raise ValueError("pq_feature footprint needs pq_params")
        if np.ndim(feature_shape) == 0 or len(feature_shape) != 3:
            raise ValueError("pq_feature footprint needs feature_shape as (C, h, w)")
        _, h, w = feature_shape
        return q.pq_payload_bytes(h * w, pq_params.m, pq_params.b, pq_params.packed)
    raise ValueError(f"unknown codec {codec!r}; expected one of {CODECS}")


def memory_footprint(
    codec: str,
    capacity: int,
    image_shape=None,
    feature_shape=None,
    pq_params: PQParams | None = None,
    num_codebooks: int = 1,
) -> FootprintReport:
    """Analytic byte count of a full memory; codebooks are itemized separately."""
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    for shape in (image_shape, feature_shape):
        if shape is not None and np.min(shape) < 1:
            raise ValueError(f"shape must be positive, got {shape}")
    per = per_sample_bytes(codec, image_shape, feature_shape, pq_params)
    payload = capacity * per
    codebook = 0
    if codec == "pq_feature" and capacity > 0:
        c = feature_shape[0]
        codebook = num_codebooks * q.pq_codebook_bytes(c, pq_params.m, pq_params.b)
    return FootprintReport(payload, codebook, 0, payload + codebook, per)


class CodecMismatch(ValueError):
    pass


class ReplayMemory:
    """Replay store holding at most ``capacity`` encoded samples.

    Parameters
    ----------
    capacity : int
        Total number of stored samples across all tasks.
    codec : str
        One of :data:`CODECS`.
    pq_params : PQParams, optional
        Required for ``pq_feature``.
    seed : int
        Seeds selection of new samples and eviction of old ones.
    """

    def __init__(self, capacity: int = 100, codec: str = "raw_image", pq_params: PQParams | None = None, seed: int = 0):
        if codec not in CODECS:
            raise ValueError(f"unknown codec {codec!r}; expected one of {CODECS}")
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        if codec == "pq_feature" and pq_params is None:
            pq_params = PQParams()
        self.capacity = int(capacity)
        self.codec = codec
        self.pq_params = pq_params
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.entries: list[tuple[int, object]] = []
        self.codebooks: dict[int, q.Codebook] = {}
        self.task_order: list[int] = []
        self.sample_shape: tuple[int, ...] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> dict[int, int]:
        out = {t: 0 for t in self.task_order}
        for t, _ in self.entries:
            out[t] += 1
        return out

    # -- encoding --------------------------------------------------------
    def _check_samples(self, samples) -> np.ndarray:
        x = np.asarray(samples)
        if x.ndim != 4 or len(x) == 0:
            raise CodecMismatch(f"expected a nonempty batch (N, C, H, W), got shape {x.shape}")
        if self.codec == "raw_image":
            if x.shape[1] != 3:
                raise CodecMismatch(f"raw_image codec stores RGB images, got {x.shape[1]} channels")
            if x.dtype != np.uint8 and (x.min() < 0 or x.max() > 1):
                raise CodecMismatch("raw_image codec expects uint8 or [0, 1] float images")
        elif x.dtype == np.uint8:
            raise CodecMismatch(f"{self.codec} codec expects float feature maps, got uint8 images")
        if self.sample_shape is not None and tuple(x.shape[1:]) != self.sample_shape:
            raise CodecMismatch(f"sample shape {x.shape[1:]} differs from stored {self.sample_shape}")
        return x

    def _encode(self, task_id: int, x: np.ndarray):
        if self.codec == "raw_image":
            if x.dtype == np.uint8:
                return x.copy()
            return np.floor(x.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
        if self.codec == "raw_feature":
            return np.array(x, dtype=np.float32)
        if self.codec == "fq_feature":
            return q.fq_quantize(np.asarray(x, dtype=np.float32))
        return q.pq_encode(np.asarray(x, dtype=np.float32), self.codebooks[task_id])

    def _decode(self, task_id: int, payload) -> np.ndarray:
        if self.codec == "raw_image":
            return payload.astype(np.float32) / 255.0
        if self.codec == "raw_feature":
            return payload
        if self.codec == "fq_feature":
            return q.fq_dequantize(payload).astype(np.float32)
        return q.pq_decode(payload, self.codebooks[task_id]).astype(np.float32)

    def payload_nbytes(self, payload) -> int:
        if self.codec in ("raw_image", "raw_feature"):
            return payload.nbytes
        if self.codec == "fq_feature":
            return payload.nbytes
        return q.pq_payload_bytes(payload.codes.shape[0], self.pq_params.m, self.pq_params.b, self.pq_params.packed)

    # -- operations ------------------------------------------------------
    def update(self, task_id: int, samples) -> "ReplayMemory":
        """Insert a new task and rebalance quotas.

        Old tasks shrink to their new quota by uniform random eviction; the new
        task keeps the first ``quota`` samples of a seeded shuffle.  For the
        pq codec a codebook is trained on all of ``samples`` first and is never
        retrained.
        """
        if task_id in self.task_order:
            raise ValueError(f"task {task_id} already in memory")
        x = self._check_samples(samples)
        if self.capacity == 0:
            self.task_order.append(task_id)
            return self
        self.sample_shape = tuple(x.shape[1:])
        self.task_order.append(task_id)
        quota = quotas(self.capacity, len(self.task_order))
        counts = self.counts()
        for t, qt in zip(self.task_order[:-1], quota[:-1]):
            excess = counts[t] - qt
            if excess > 0:
                positions = [i for i, (tid, _) in enumerate(self.entries) if tid == t]
                drop = set(self.rng.choice(positions, size=excess, replace=False).tolist())
                self.entries = [e for i, e in enumerate(self.entries) if i not in drop]
        order = self.rng.permutation(len(x))[: quota[-1]]
        if self.codec == "pq_feature":
            p = self.pq_params
            self.codebooks[task_id] = q.pq_train(q.maps_to_vectors(x.astype(np.float32)), p.m, p.b, seed=[self.seed, task_id])
        for i in order:
            self.entries.append((task_id, self._encode(task_id, x[i])))
        return self

    def draw_batch(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Decode ``n`` uniformly drawn entries (with replacement only if n > size)."""
        if not self.entries:
            raise ValueError("cannot draw from an empty replay memory")
        if n < 1:
            raise ValueError("n must be >= 1")
        idx = rng.choice(len(self.entries), size=n, replace=n > len(self.entries))
        samples = np.stack([self._decode(*self.entries[i]) for i in idx])
        task_ids = np.array([self.entries[i][0] for i in idx])
        return samples, task_ids

    def decode_all(self) -> tuple[np.ndarray, np.ndarray]:
        samples = np.stack([self._decode(*e) for e in self.entries])
        return samples, np.array([t for t, _ in self.entries])

    def footprint(self) -> FootprintReport:
        """Measured bytes of the current contents."""
        payload = sum(self.payload_nbytes(p) for _, p in self.entries)
        present = {t for t, _ in self.entries}
        codebook = sum(cb.nbytes for t, cb in self.codebooks.items() if t in present)
        per = self.payload_nbytes(self.entries[0][1]) if self.entries else 0
        return FootprintReport(payload, codebook, 0, payload + codebook, per)

    # -- persistence -----------------------------------------------------
    def _blob(self, payload) -> bytes:
        if self.codec == "pq_feature":
            return q.dumps_pq(payload, self.pq_params.b, self.pq_params.packed)
        return q.dumps(payload)

    def save(self, directory) -> FootprintReport:
        """Write ``manifest.json``, ``entries.bin`` and ``codebooks.bin``.

        Returns the on-disk byte count, with container headers and the
        manifest itemized as metadata.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        blobs = [self._blob(p) for _, p in self.entries]
        cb_ids = sorted(t for t in self.codebooks)
        cb_blobs = [q.dumps(self.codebooks[t]) for t in cb_ids]
        offsets, pos = [], 0
        for (t, _), b in zip(self.entries, blobs):
            offsets.append({"task_id": int(t), "offset": pos, "length": len(b)})
            pos += len(b)
        cb_offsets, pos = [], 0
        for t, b in zip(cb_ids, cb_blobs):
            cb_offsets.append({"task_id": int(t), "offset": pos, "length": len(b)})
            pos += len(b)
        manifest = {
            "format": "edgeclad-replay/1",
            "codec": self.codec,
            "capacity": self.capacity,
            "seed": self.seed,
            "pq_params": asdict(self.pq_params) if self.pq_params else None,
            "task_order": [int(t) for t in self.task_order],
            "quotas": quotas(self.capacity, len(self.task_order)),
            "sample_shape": list(self.sample_shape) if self.sample_shape else None,
            "entries": offsets,
            "codebooks": cb_offsets,
            "rng_state": self.rng.bit_generator.state,
        }
        (d / "entries.bin").write_bytes(b"".join(blobs))
        (d / "codebooks.bin").write_bytes(b"".join(cb_blobs))
        mtext = json.dumps(manifest, indent=2, sort_keys=True)
        (d / "manifest.json").write_text(mtext)
        on_disk = sum((d / f).stat().st_size for f in ("entries.bin", "codebooks.bin", "manifest.json"))
        measured = self.footprint()
        meta = on_disk - measured.payload_bytes - measured.codebook_bytes
        return FootprintReport(measured.payload_bytes, measured.codebook_bytes, meta, on_disk, measured.per_sample_bytes)

    @classmethod
    def load(cls, directory) -> "ReplayMemory":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        pq_params = PQParams(**manifest["pq_params"]) if manifest["pq_params"] else None
        mem = cls(manifest["capacity"], manifest["codec"], pq_params, manifest["seed"])
        mem.task_order = list(manifest["task_order"])
        mem.sample_shape = tuple(manifest["sample_shape"]) if manifest["sample_shape"] else None
        mem.rng.bit_generator.state = manifest["rng_state"]
        data = (d / "entries.bin").read_bytes()
        for e in manifest["entries"]:
            mem.entries.append((e["task_id"], q.loads(data[e["offset"] : e["offset"] + e["length"]])))
        cdata = (d / "codebooks.bin").read_bytes()
        for e in manifest["codebooks"]:
            mem.codebooks[e["task_id"]] = q.loads(cdata[e["offset"] : e["offset"] + e["length"]])
        return mem


def update_memory(memory: ReplayMemory, task_id: int, samples) -> ReplayMemory:
    return memory.update(task_id, samples)


def draw_batch(memory: ReplayMemory, n: int, rng: np.random.Generator):
    return memory.draw_batch(n, rng)
