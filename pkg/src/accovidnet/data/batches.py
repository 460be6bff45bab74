"""In-memory datasets and deterministic, resumable batch streams."""

from __future__ import annotations

import queue
import threading
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ManifestError
from .images import AugmentConfig, ImageRecord, augment, preprocess
from .manifest import CLASS_NAMES, Manifest

_STAGE_KEYS = {"stage1": 1, "stage2": 2, "eval": 3}


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W, 3) float32
    labels: np.ndarray  # (N,) int64
    paths: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> list[int]:
        return [int((self.labels == k).sum()) for k in range(len(CLASS_NAMES))]


def load_split(manifest: Manifest, split: str, size: tuple[int, int] | int) -> ImageDataset:
    """Preprocess every entry of ``split`` into one array."""
    entries = manifest.select(split)
    if not entries:
        raise ManifestError(f"manifest has no {split!r} entries")
    records = [preprocess(manifest.resolve(e), size, e.label) for e in entries]
    return ImageDataset(
        images=np.stack([r.pixels for r in records]),
        labels=np.array([e.label for e in entries], dtype=np.int64),
        paths=[e.image_path for e in entries],
    )


@dataclass
class LabeledBatch:
    images: torch.Tensor  # (N, 3, H, W)
    labels: torch.Tensor  # (N,)
    index: int


def prefetch(items: Iterable, capacity: int = 4) -> Iterator:
    """Produce ``items`` on a background thread through a bounded queue, in order."""
    if capacity <= 0:
        yield from items
        return
    q: queue.Queue = queue.Queue(maxsize=capacity)
    stop = threading.Event()
    done = object()

    def put(obj) -> bool:
        while not stop.is_set():
            try:
                q.put(obj, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for item in items:
                if not put((item, None)):
                    return
        except BaseException as exc:  # re-raised in the consumer
            put((None, exc))
            return
        put((done, None))

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item, exc = q.get()
            if exc is not None:
                raise exc
            if item is done:
                return
            yield item
    finally:
        stop.set()
        worker.join()


def balanced_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each class, then interleave the classes round-robin."""
    pools = [rng.permutation(np.flatnonzero(labels == k)) for k in np.unique(labels)]
    order = []
    for r in range(max(len(p) for p in pools)):
        order.extend(int(p[r]) for p in pools if r < len(p))
    return np.array(order, dtype=np.int64)


class BatchStream:
    """Batches of a dataset whose content depends only on ``(seed, stage, epoch, index)``.

    That makes a stream resumable mid-epoch: ``batches(stage, epoch, start=k)``
    yields exactly what an uninterrupted pass would yield from batch ``k`` on.
    """

    def __init__(
        self,
        dataset: ImageDataset,
        batch_size: int,
        seed: int = 0,
        balanced: bool = False,
        augment: AugmentConfig | None = None,
        shuffle: bool = True,
        min_batch: int = 1,
        prefetch: int = 4,
        dtype: torch.dtype = torch.float32,
    ):
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.balanced = balanced
        self.augment = augment if augment is not None and augment.enabled else None
        self.shuffle = shuffle
        self.min_batch = min_batch
        self.prefetch = prefetch
        self.dtype = dtype

    def order(self, stage: str, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.dataset))
        rng = np.random.default_rng([self.seed, _STAGE_KEYS[stage], epoch])
        if self.balanced:
            return balanced_order(self.dataset.labels, rng)
        return rng.permutation(len(self.dataset))

    def chunks(self, stage: str, epoch: int) -> list[np.ndarray]:
        order = self.order(stage, epoch)
        parts = [order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        return [p for p in parts if len(p) >= self.min_batch]

    def num_batches(self, stage: str = "stage1", epoch: int = 0) -> int:
        return len(self.chunks(stage, epoch))

    def _make(self, stage: str, epoch: int, index: int, idx: np.ndarray) -> LabeledBatch:
        images = self.dataset.images[idx]
        if self.augment is not None:
            rng = np.random.default_rng([self.seed, _STAGE_KEYS[stage], epoch, index])
            images = np.stack(
                [augment(ImageRecord(img), rng, self.augment).pixels for img in images]
            )
        x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(self.dtype)
        y = torch.from_numpy(self.dataset.labels[idx].copy())
        return LabeledBatch(x, y, index)

    def batches(self, stage: str, epoch: int, start: int = 0) -> Iterator[LabeledBatch]:
        chunks = self.chunks(stage, epoch)
        gen = (self._make(stage, epoch, i, c) for i, c in enumerate(chunks) if i >= start)
        return prefetch(gen, self.prefetch)
