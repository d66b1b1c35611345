"""Dataset loading, preprocessing and deterministic k-fold assignment."""
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError
from .network import IMAGENET_MEAN, IMAGENET_STD

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
MASK_THRESHOLD = 128


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray   # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DatasetError(f"{self.id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}")


def list_images(directory: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Load an 8-bit grayscale mask and binarise it at 128."""
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc
    return (gray >= MASK_THRESHOLD).astype(np.uint8)


def load_dataset(images_dir, masks_dir) -> List[SampleRecord]:
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise DatasetError(f"directory not found: {d}")
    images, masks = list_images(images_dir), list_images(masks_dir)
    records = []
    for sid in sorted(images):
        if sid not in masks:
            raise DatasetError(f"missing mask for image {images[sid]} in {masks_dir}")
        image, mask = read_image(images[sid]), read_mask(masks[sid])
        if mask.shape != image.shape[:2]:
            raise DatasetError(f"{masks[sid]}: mask shape {mask.shape} != image shape {image.shape[:2]}")
        records.append(SampleRecord(sid, image, mask))
    return records


def preprocess(s: SampleRecord, mean: Sequence[float] = IMAGENET_MEAN,
               std: Sequence[float] = IMAGENET_STD) -> Tuple[np.ndarray, np.ndarray]:
    """Standardize the image per channel and map the mask to {0.0, 1.0}.

    ``mean``/``std`` are on the [0, 1] scale, as published with the backbone.
    Returns float32 arrays of shape (H, W, 3) and (H, W).
    """
    return standardize(s.image, mean, std), normalize_mask(s.mask)


def standardize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ConfigError(f"standardization std must be positive, got {tuple(std)}")
    x = np.asarray(image, dtype=np.float64) / 255.0
    return ((x - np.asarray(mean, dtype=np.float64)) / std).astype(np.float32)


def normalize_mask(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.max(initial=0) > 1:
        m = m >= MASK_THRESHOLD
    return (m > 0).astype(np.float32)


# -- folds -----------------------------------------------------------------------

@dataclass(frozen=True)
class FoldManifest:
    k: int
    seed: int
    assignment: Dict[str, int]

    def ids(self, fold: int) -> List[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> List[str]:
        return sorted(i for i, f in self.assignment.items() if f != fold)

    def sizes(self) -> List[int]:
        return [sum(1 for f in self.assignment.values() if f == j) for j in range(self.k)]

    def save(self, path):
        lines = [f"# k={self.k}\tseed={self.seed}", "sample_id\tfold_index"]
        lines += [f"{sid}\t{fold}" for sid, fold in sorted(self.assignment.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "FoldManifest":
        lines = Path(path).read_text().splitlines()
        try:
            header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split("\t"))
            k, seed = int(header["k"]), int(header["seed"])
            assignment = {}
            for n, line in enumerate(lines[2:], start=3):
                if not line.strip():
                    continue
                sid, fold = line.split("\t")
                assignment[sid] = int(fold)
        except (IndexError, KeyError, ValueError) as exc:
            raise DatasetError(f"malformed fold manifest {path}: {exc}") from exc
        if any(not 0 <= f < k for f in assignment.values()):
            raise DatasetError(f"fold manifest {path} has fold indices outside [0, {k})")
        return cls(k, seed, assignment)


def make_folds(records: Sequence, k: int = 5, seed: int = 0) -> FoldManifest:
    """Shuffle ids with ``seed`` and deal them round-robin into ``k`` folds."""
    ids = sorted(r.id if isinstance(r, SampleRecord) else str(r) for r in records)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ConfigError(f"cannot split {len(ids)} records into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldManifest(k, seed, {ids[j]: n % k for n, j in enumerate(order)})


def holdout_split(records: Sequence[SampleRecord], fraction: float = 0.1,
                  seed: int = 0) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    """Random train/validation split for single-model (non cross-validated) runs."""
    if not 0 < fraction < 1:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    n_val = max(1, int(round(len(records) * fraction)))
    if n_val >= len(records):
        raise ConfigError(f"{len(records)} records are too few for a holdout split")
    order = np.random.default_rng(seed).permutation(len(records))
    val = set(order[:n_val].tolist())
    return ([r for i, r in enumerate(records) if i not in val],
            [r for i, r in enumerate(records) if i in val])


def sample_seed(global_seed: int, sample_id: str, epoch: int) -> int:
    """Per-sample augmentation seed derived from (global seed, id, epoch)."""
    ss = np.random.SeedSequence([global_seed, zlib.crc32(sample_id.encode()), epoch])
    return int(ss.generate_state(1)[0])


def split_records(records: Sequence[SampleRecord], manifest: FoldManifest,
                  fold: int) -> Tuple[List[SampleRecord], List[SampleRecord]]:
    missing = [r.id for r in records if r.id not in manifest.assignment]
    if missing:
        raise DatasetError(f"records missing from fold manifest: {missing[:5]}")
    if not 0 <= fold < manifest.k:
        raise ConfigError(f"fold {fold} outside [0, {manifest.k})")
    train = [r for r in records if manifest.assignment[r.id] != fold]
    val = [r for r in records if manifest.assignment[r.id] == fold]
    return train, val
