"""Corpus ingestion, the attacker/target/test split, patch batching and conditions."""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import LabelError, SplitError
from .imaging import dih4, extract_patches, read_image

log = logging.getLogger(__name__)

SPLIT_NAMES = ("q_data", "p_data", "p_test")
DEFAULT_FRACTIONS = {"q_data": 0.4, "p_data": 0.4, "p_test": 0.2}


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    scene_seed: Optional[int] = None
    device: Optional[str] = None
    split: Optional[str] = None


@dataclass
class SplitPlan:
    q_classes: list
    p_classes: list
    splits: dict = field(default_factory=dict)

    def counts(self) -> dict:
        """Per-split, per-class image counts (class keys as strings for JSON)."""
        out = {}
        for name in SPLIT_NAMES:
            c = Counter(r.label for r in self.splits.get(name, []))
            out[name] = {str(k): c.get(k, 0) for k in self.p_classes}
        return out

    def totals(self) -> dict:
        return {name: len(self.splits.get(name, [])) for name in SPLIT_NAMES}

    def report(self) -> dict:
        return {"q_classes": self.q_classes, "p_classes": self.p_classes, "totals": self.totals(), "counts": self.counts()}

    def save(self, path) -> None:
        payload = self.report()
        payload["splits"] = {k: [asdict(r) for r in v] for k, v in self.splits.items()}
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path) -> "SplitPlan":
        payload = json.loads(Path(path).read_text())
        splits = {k: [Record(**r) for r in v] for k, v in payload["splits"].items()}
        return cls(payload["q_classes"], payload["p_classes"], splits)


def read_manifest(path) -> list[Record]:
    """Read a manifest CSV (``path,label,scene_seed`` plus optional ``device``/``split``)
    or scan a directory-per-class layout (``<root>/<name ending in digits>/*.png|jpg``).

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if path.is_dir():
        return _scan_class_dirs(path)
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p = Path(row["path"])
            if not p.is_absolute():
                p = (path.parent / p).resolve()
            seed = row.get("scene_seed")
            records.append(
                Record(
                    str(p),
                    int(row["label"]),
                    int(seed) if seed not in (None, "") else None,
                    row.get("device") or None,
                    row.get("split") or None,
                )
            )
    return records


def _scan_class_dirs(root: Path) -> list[Record]:
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        m = re.search(r"(\d+)$", sub.name)
        if not m:
            continue
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() in (".png", ".jpg", ".jpeg"):
                records.append(Record(str(f), int(m.group(1))))
    return records


def build_splits(
    records: Sequence[Record],
    q_classes: Sequence[int],
    p_classes: Sequence[int],
    seed: int = 0,
    fractions: Optional[dict] = None,
    check_files: bool = True,
) -> SplitPlan:
    """Partition images into disjoint ``q_data`` / ``p_data`` / ``p_test`` sets.

    Records carrying a ``split`` value keep it. Otherwise, when every record of
    a class has a ``device`` id, whole devices are assigned to splits; without
    device ids the split is image-level (with a warning).
    """
    q_classes, p_classes = sorted(set(q_classes)), sorted(set(p_classes))
    if not set(q_classes) <= set(p_classes):
        raise SplitError("q_classes must be a subset of p_classes")
    fractions = dict(DEFAULT_FRACTIONS, **(fractions or {}))
    rng = np.random.default_rng(seed)
    splits = {name: [] for name in SPLIT_NAMES}
    warned = False
    for label in p_classes:
        recs = sorted((r for r in records if r.label == label), key=lambda r: r.path)
        if check_files:
            missing = [r.path for r in recs if not Path(r.path).exists()]
            if missing:
                raise FileNotFoundError(f"{len(missing)} listed files missing, e.g. {missing[0]}")
        in_q = label in q_classes
        fixed = [r for r in recs if r.split]
        free = [r for r in recs if not r.split]
        for r in fixed:
            if r.split not in SPLIT_NAMES:
                raise SplitError(f"unknown split {r.split!r} for {r.path}")
            splits[r.split].append(r)
        if free:
            if all(r.device for r in free):
                parts = _split_by_device(free, in_q, fractions, rng)
            else:
                if not warned:
                    log.warning("no device metadata: splitting at image level")
                    warned = True
                parts = _split_images(free, in_q, fractions, rng)
            for name in SPLIT_NAMES:
                splits[name].extend(parts[name])
        required = SPLIT_NAMES if in_q else ("p_data", "p_test")
        for name in required:
            if not any(r.label == label for r in splits[name]):
                raise SplitError(f"class {label} has no images in {name}")
        if not in_q and any(r.label == label for r in splits["q_data"]):
            raise SplitError(f"class {label} is not attacker-known but appears in q_data")
    return SplitPlan(q_classes, p_classes, splits)


def _targets(n: int, in_q: bool, fractions: dict) -> tuple[int, int]:
    n_test = int(round(fractions["p_test"] * n))
    n_q = int(round(fractions["q_data"] * n)) if in_q else 0
    return n_test, n_q


def _split_images(recs, in_q, fractions, rng):
    order = rng.permutation(len(recs))
    shuffled = [recs[i] for i in order]
    n_test, n_q = _targets(len(recs), in_q, fractions)
    return {
        "p_test": shuffled[:n_test],
        "q_data": shuffled[n_test : n_test + n_q],
        "p_data": shuffled[n_test + n_q :],
    }


def _split_by_device(recs, in_q, fractions, rng):
    devices = sorted({r.device for r in recs})
    devices = [devices[i] for i in rng.permutation(len(devices))]
    by_dev = {d: [r for r in recs if r.device == d] for d in devices}
    n_test, n_q = _targets(len(recs), in_q, fractions)
    parts = {name: [] for name in SPLIT_NAMES}
    for d in devices:
        if len(parts["p_test"]) < n_test:
            parts["p_test"].extend(by_dev[d])
        elif len(parts["q_data"]) < n_q:
            parts["q_data"].extend(by_dev[d])
        else:
            parts["p_data"].extend(by_dev[d])
    return parts


def encode_condition(target: int, n_classes: int, h: int, w: int) -> np.ndarray:
    """One-hot condition planes: plane ``target - 1`` is ones, the rest zeros."""
    if not 1 <= target <= n_classes:
        raise LabelError(f"target {target} outside 1..{n_classes}")
    planes = np.zeros((n_classes, h, w), dtype=np.float32)
    planes[target - 1] = 1.0
    return planes


def decode_condition(planes: np.ndarray) -> int:
    return int(np.argmax(planes.reshape(planes.shape[0], -1).mean(axis=1))) + 1


class PatchSet:
    """In-memory patches (N x P x P x 3, float32) with labels.

    ``classes`` fixes the label -> class-index mapping used by the networks.
    """

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, classes: Sequence[int], aux: Optional[np.ndarray] = None):
        self.pixels = np.asarray(pixels, dtype=np.float32)
        self.aux = None if aux is None else np.asarray(aux, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.classes = sorted(classes)
        self._index = {c: i for i, c in enumerate(self.classes)}
        if len(self.labels) and not set(self.labels.tolist()) <= set(self.classes):
            raise LabelError("patch labels outside the class list")

    @classmethod
    def from_records(
        cls,
        records: Sequence[Record],
        patch_size: int,
        classes: Optional[Sequence[int]] = None,
        aux_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    ):
        """Tile every image; ``aux_fn`` (e.g. a residual extractor) runs on the
        whole image and its output is tiled alongside."""
        pix, labels, aux = [], [], []
        for r in records:
            img = read_image(r.path, r.label)
            for p in extract_patches(img, patch_size):
                pix.append(p.pixels)
                labels.append(r.label)
            if aux_fn is not None:
                aux.extend(p.pixels for p in extract_patches(aux_fn(img.pixels), patch_size))
        classes = classes if classes is not None else sorted(set(labels))
        shape = (0, patch_size, patch_size, 3)
        stack = lambda a: np.stack(a) if a else np.zeros(shape)  # noqa: E731
        return cls(stack(pix), np.array(labels, dtype=np.int64), classes, stack(aux) if aux_fn else None)

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_index(self, labels) -> np.ndarray:
        return np.array([self._index[int(l)] for l in np.atleast_1d(labels)], dtype=np.int64)

    def subset(self, idx) -> "PatchSet":
        return PatchSet(self.pixels[idx], self.labels[idx], self.classes, None if self.aux is None else self.aux[idx])


def epoch_rng(seed: int, epoch: int, worker_id: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, worker_id, epoch])


def sample_training_tuple(patches: PatchSet, rng: np.random.Generator, classes: Optional[Sequence[int]] = None):
    """Draw ``(patch, label, target, augment_id)`` with a uniform target over ``classes``."""
    if len(patches) == 0:
        raise SplitError("empty patch set")
    classes = list(classes) if classes is not None else patches.classes
    i = int(rng.integers(len(patches)))
    k = int(rng.integers(8))
    target = classes[int(rng.integers(len(classes)))]
    return dih4(patches.pixels[i], k), int(patches.labels[i]), target, k


@dataclass
class Batch:
    x: np.ndarray  # N x 3 x P x P
    y: np.ndarray  # class indices
    target: np.ndarray  # class indices, uniform and independent of y
    aux: Optional[np.ndarray] = None  # N x 3 x P x P, same augmentation as x
    augment_ids: Optional[np.ndarray] = None


def iterate_batches(
    patches: PatchSet,
    batch_size: int,
    seed: int,
    epoch: int,
    augment: bool = True,
    drop_last: bool = False,
    worker_id: int = 0,
) -> Iterator[Batch]:
    """Seeded shuffle per epoch; the stream depends only on ``(seed, worker_id, epoch)``."""
    rng = epoch_rng(seed, epoch, worker_id)
    order = rng.permutation(len(patches))
    augs = rng.integers(0, 8, size=len(patches)) if augment else np.zeros(len(patches), dtype=np.int64)
    targets = rng.integers(0, patches.n_classes, size=len(patches))
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) == 0:
            break
        x = np.stack([dih4(patches.pixels[i], int(augs[i])) for i in idx])
        aux = None
        if patches.aux is not None:
            aux = np.stack([dih4(patches.aux[i], int(augs[i])) for i in idx])
            aux = np.ascontiguousarray(aux.transpose(0, 3, 1, 2))
        yield Batch(
            np.ascontiguousarray(x.transpose(0, 3, 1, 2)),
            patches.class_index(patches.labels[idx]),
            targets[idx].astype(np.int64),
            aux,
            augs[idx],
        )
