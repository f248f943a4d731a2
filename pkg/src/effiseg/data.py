"""Dataset ingestion, seeded splitting, offline augmentation, preprocessing.

Expected on-disk layout: <root>/<dataset>/images/* and <root>/<dataset>/masks/*
with matching filename stems. Masks are 8-bit and binarized at 127 on load.
"""

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")

# dataset ids as used in directory names and reports
KVASIR = "Kvasir"
CLINICDB = "CVC-ClinicDB"
COLONDB = "CVC-ColonDB"
ETIS = "ETIS"
ENDOSCENE = "EndoScene"
SPLITTABLE_DATASETS = (KVASIR, CLINICDB)
TEST_ONLY_DATASETS = (COLONDB, ETIS, ENDOSCENE)

MASK_THRESHOLD = 127
ROTATION_MAX_DEGREES = 30.0

# per-channel statistics of the encoder's pretraining corpus
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


@dataclass
class Sample:
    """One image/mask pair. Mask values are strictly {0, 1} after ingestion."""

    image: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray   # (h, w) uint8 in {0, 1}
    source: str
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"sample {self.id}: image must be (h, w, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"sample {self.id}: mask shape {self.mask.shape} does not match "
                f"image {self.image.shape[:2]}"
            )
        bad = np.setdiff1d(np.unique(self.mask), [0, 1])
        if bad.size:
            raise ValueError(f"sample {self.id}: mask contains non-binary values {bad[:5]}")

    @property
    def key(self) -> str:
        return f"{self.source}/{self.id}"


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.80, 0.10, 0.10)
    seed: int = 0
    splittable: Tuple[str, ...] = SPLITTABLE_DATASETS

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios {self.ratios} must sum to 1")
        if any(r < 0 for r in self.ratios):
            raise ConfigError(f"split ratios {self.ratios} must be nonnegative")


def _stable_rng(seed: int, *labels: str) -> np.random.Generator:
    """Process-independent RNG derived from a seed and string labels."""
    entropy = [seed] + [zlib.crc32(label.encode("utf-8")) for label in labels]
    return np.random.default_rng(entropy)


def _index_by_stem(directory: Path) -> Dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if p.stem in files:
            raise ConfigError(f"duplicate stem {p.stem!r} in {directory}: {files[p.stem].name} and {p.name}")
        files[p.stem] = p
    return files


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"), dtype=np.uint8)
    return (raw > MASK_THRESHOLD).astype(np.uint8)


def load_dataset(root, name: str) -> List[Sample]:
    """Load every paired image/mask of one corpus, sorted by id.

    Unpaired files are a hard error naming the offenders; an empty corpus is
    also an error.
    """
    base = Path(root) / name
    images_dir = base / "images"
    masks_dir = base / "masks"
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise ConfigError(f"dataset {name!r}: missing directory {d}")
    images = _index_by_stem(images_dir)
    masks = _index_by_stem(masks_dir)
    orphan_images = sorted(set(images) - set(masks))
    orphan_masks = sorted(set(masks) - set(images))
    if orphan_images or orphan_masks:
        raise ConfigError(
            f"dataset {name!r} has unpaired files: "
            f"images without masks {orphan_images[:10]}, masks without images {orphan_masks[:10]}"
        )
    if not images:
        raise ConfigError(f"dataset {name!r} at {base} contains no images")
    samples = []
    for stem in sorted(images):
        image = load_image(images[stem])
        mask = load_mask(masks[stem])
        if mask.shape != image.shape[:2]:
            raise ConfigError(
                f"dataset {name!r} sample {stem!r}: image {image.shape[:2]} and "
                f"mask {mask.shape} sizes differ"
            )
        samples.append(Sample(image=image, mask=mask, source=name, id=stem))
    return samples


def split_samples(
    samples: Sequence[Sample], spec: SplitSpec
) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """Seeded per-corpus 80/10/10 partition into (train, val, test).

    Each corpus is split independently (val and test sizes floor at their
    ratios, train takes the remainder), then merged. Output lists are sorted
    by (source, id) so the partition is independent of input order.
    """
    by_source: Dict[str, List[Sample]] = {}
    for s in samples:
        by_source.setdefault(s.source, []).append(s)
    unknown = sorted(set(by_source) - set(spec.splittable))
    if unknown:
        raise ConfigError(f"datasets {unknown} are not splittable (test-only corpora bypass the split)")
    train: List[Sample] = []
    val: List[Sample] = []
    test: List[Sample] = []
    for source in sorted(by_source):
        group = sorted(by_source[source], key=lambda s: s.id)
        n = len(group)
        n_val = int(n * spec.ratios[1])
        n_test = int(n * spec.ratios[2])
        n_train = n - n_val - n_test
        perm = _stable_rng(spec.seed, "split", source).permutation(n)
        train.extend(group[i] for i in perm[:n_train])
        val.extend(group[i] for i in perm[n_train:n_train + n_val])
        test.extend(group[i] for i in perm[n_train + n_val:])
    key = lambda s: (s.source, s.id)
    return sorted(train, key=key), sorted(val, key=key), sorted(test, key=key)


def flip_horizontal(sample: Sample, id_suffix: str = "__hflip") -> Sample:
    return Sample(
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        mask=np.ascontiguousarray(sample.mask[:, ::-1]),
        source=sample.source,
        id=sample.id + id_suffix,
    )


def rotate_random(sample: Sample, seed: int, id_suffix: str = "__rot") -> Sample:
    """Rotate image and mask by the same seeded random angle.

    Angle is uniform in [-30, +30] degrees; borders are reflect-padded;
    the image is interpolated bilinearly, the mask nearest-neighbor so it
    stays strictly binary.
    """
    rng = _stable_rng(seed, "rotate", sample.source, sample.id)
    angle = float(rng.uniform(-ROTATION_MAX_DEGREES, ROTATION_MAX_DEGREES))
    image = ndimage.rotate(sample.image, angle, reshape=False, order=1, mode="reflect")
    mask = ndimage.rotate(sample.mask, angle, reshape=False, order=0, mode="reflect")
    return Sample(
        image=np.clip(image, 0, 255).astype(np.uint8),
        mask=(mask > 0).astype(np.uint8),
        source=sample.source,
        id=sample.id + id_suffix,
    )


def augment_offline(train: Sequence[Sample], seed: int) -> List[Sample]:
    """Emit exactly three samples per input: original, flipped, rotated."""
    if not train:
        raise ValueError("augment_offline: empty training set")
    out: List[Sample] = []
    for s in train:
        out.append(s)
        out.append(flip_horizontal(s))
        out.append(rotate_random(s, seed))
    return out


def preprocess_image(image: np.ndarray, size: Tuple[int, int] = (224, 224)) -> torch.Tensor:
    """(h, w, 3) uint8 -> standardized (3, size) float32 tensor.

    Bilinear resize (align_corners=False), scale to [0, 1], then per-channel
    standardization with the pretraining mean/std.
    """
    img = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0
    img = F.interpolate(img[None], size=size, mode="bilinear", align_corners=False)[0]
    mean = torch.tensor(NORM_MEAN).view(3, 1, 1)
    std = torch.tensor(NORM_STD).view(3, 1, 1)
    return (img - mean) / std


def preprocess_mask(mask: np.ndarray, size: Tuple[int, int] = (224, 224)) -> torch.Tensor:
    """(h, w) binary -> (1, size) float32 tensor holding only 0.0 and 1.0.

    Nearest-neighbor resize followed by re-binarization.
    """
    m = torch.from_numpy(np.ascontiguousarray(mask)).float()[None, None]
    m = F.interpolate(m, size=size, mode="nearest")[0]
    return (m > 0.5).float()


def preprocess(
    sample: Sample, size: Tuple[int, int] = (224, 224)
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Resize and standardize one sample into ((3, h, w), (1, h, w)) tensors."""
    img = preprocess_image(sample.image, size)
    mask = preprocess_mask(sample.mask, size)
    if mask.sum() == 0:
        logger.warning("sample %s: all-background mask after preprocessing", sample.key)
    return img, mask


def preprocess_batch(
    samples: Sequence[Sample], size: Tuple[int, int] = (224, 224)
) -> Tuple[torch.Tensor, torch.Tensor]:
    pairs = [preprocess(s, size) for s in samples]
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def write_split_manifest(path, train: Sequence[Sample], val: Sequence[Sample],
                         test: Sequence[Sample]) -> None:
    """Plain-text manifest of (source/id, subset) lines, deterministic order."""
    lines = []
    for subset_name, subset in (("train", train), ("val", val), ("test", test)):
        for s in sorted(subset, key=lambda s: (s.source, s.id)):
            lines.append(f"{s.key}\t{subset_name}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_split_manifest(path) -> Dict[str, str]:
    """Map of sample key -> subset name, as written by write_split_manifest."""
    assignments = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, subset = line.rsplit("\t", 1)
        assignments[key] = subset
    return assignments


def save_sample(sample: Sample, images_dir, masks_dir) -> None:
    """Write a sample as paired PNGs (mask scaled to {0, 255})."""
    images_dir = Path(images_dir)
    masks_dir = Path(masks_dir)
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{sample.source}__{sample.id}"
    Image.fromarray(sample.image).save(images_dir / f"{stem}.png")
    Image.fromarray(sample.mask * np.uint8(255)).save(masks_dir / f"{stem}.png")
