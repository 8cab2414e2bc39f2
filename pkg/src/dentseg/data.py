"""Dataset discovery, preprocessing and the deterministic train/val/test split.

Expected layout under the dataset root::

    train/images/*.png        train/masks/*.png
    test/images/*.png         test/masks/*.png
    new_dataset/images/*.png  new_dataset/masks/*.png

Images and masks are paired by filename stem.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import BadRatios, DecodeError, DuplicateId, EmptyDataset, MissingMask, UnsupportedDepth

SUBSETS = ("train", "test", "new_dataset")
IMAGE_SIZE = 256
MASK_THRESHOLD = 127
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class SamplePair:
    image_path: Path
    mask_path: Path
    source_subset: str
    sample_id: str


@dataclass
class DatasetIndex:
    pairs: list[SamplePair]

    @property
    def total_count(self) -> int:
        return len(self.pairs)

    @property
    def ids(self) -> list[str]:
        return [p.sample_id for p in self.pairs]

    def by_id(self) -> dict[str, SamplePair]:
        return {p.sample_id: p for p in self.pairs}

    def subset_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SUBSETS}
        for p in self.pairs:
            counts[p.source_subset] += 1
        return counts


@dataclass
class PreprocessedSample:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    mask: np.ndarray   # (1, S, S) float32 in {0, 1}
    sample_id: str


@dataclass
class SplitAssignment:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int
    ratios: tuple[float, float, float] = field(default=DEFAULT_RATIOS)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": self.train_ids,
            "val": self.val_ids,
            "test": self.test_ids,
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitAssignment":
        d = json.loads(text)
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]), tuple(d["ratios"]))

    def ids_for(self, split: str) -> list[str]:
        try:
            return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}; expected train, val or test") from None


def _pngs(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() == ".png")


def load_dataset(root) -> DatasetIndex:
    root = Path(root)
    seen: dict[str, Path] = {}
    pairs = []
    for subset in SUBSETS:
        masks = {p.stem: p for p in _pngs(root / subset / "masks")}
        for img in _pngs(root / subset / "images"):
            sid = img.stem
            if sid in seen:
                raise DuplicateId(sid, (seen[sid], img))
            seen[sid] = img
            if sid not in masks:
                raise MissingMask(sid)
            pairs.append(SamplePair(img, masks[sid], subset, sid))
    if not pairs:
        raise EmptyDataset(f"no image/mask pairs found under {root}")
    pairs.sort(key=lambda p: p.sample_id)
    return DatasetIndex(pairs)


# ------------------------------------------------------------------ decoding

def decode_png(path) -> np.ndarray:
    """Decode to a numpy array, keeping the source bit depth."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            return np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def _as_gray_or_rgb(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.dtype == bool:
        raw = raw.astype(np.uint8) * 255
    if raw.dtype != np.uint8:
        raise UnsupportedDepth(f"expected 8-bit pixels, got dtype {raw.dtype}")
    if raw.ndim == 3 and raw.shape[2] in (2, 4):
        raw = raw[..., :-1]  # drop alpha
    if raw.ndim == 3 and raw.shape[2] == 1:
        raw = raw[..., 0]
    if raw.ndim not in (2, 3) or (raw.ndim == 3 and raw.shape[2] != 3) or min(raw.shape[:2]) < 1:
        raise DecodeError(f"unsupported pixel array shape {raw.shape}")
    return raw


def _source_coords(out_size: int, in_size: int) -> np.ndarray:
    # half-pixel centres: output pixel i samples source coordinate (i + 0.5) * in/out - 0.5
    return (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize of an (H, W[, C]) float array, edge-clamped, no antialiasing."""
    out_h, out_w = size
    img = np.asarray(img, dtype=np.float64)
    for axis, (n_out, n_in) in enumerate(((out_h, img.shape[0]), (out_w, img.shape[1]))):
        src = np.clip(_source_coords(n_out, n_in), 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        shape = [1] * img.ndim
        shape[axis] = n_out
        frac = frac.reshape(shape)
        img = np.take(img, lo, axis=axis) * (1 - frac) + np.take(img, hi, axis=axis) * frac
    return img


def resize_nearest(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    out_h, out_w = size
    rows = np.minimum(((np.arange(out_h) + 0.5) * img.shape[0] / out_h).astype(np.intp), img.shape[0] - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * img.shape[1] / out_w).astype(np.intp), img.shape[1] - 1)
    return img[rows][:, cols]


def preprocess_image(raw: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """8-bit gray/RGB pixels -> (3, size, size) float32 in [0, 1]."""
    raw = _as_gray_or_rgb(raw)
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    out = resize_bilinear(raw, (size, size)) / 255.0
    return np.clip(out, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def preprocess_mask(raw: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """8-bit mask -> (1, size, size) float32 in {0, 1}; any colour channel above 127 marks foreground."""
    raw = _as_gray_or_rgb(raw)
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    binary = resize_nearest(raw, (size, size)) > MASK_THRESHOLD
    return binary[None].astype(np.float32)


def load_sample(pair: SamplePair, size: int = IMAGE_SIZE) -> PreprocessedSample:
    try:
        image = preprocess_image(decode_png(pair.image_path), size)
        mask = preprocess_mask(decode_png(pair.mask_path), size)
    except (DecodeError, UnsupportedDepth) as exc:
        raise type(exc)(f"{pair.sample_id}: {exc}") from exc
    return PreprocessedSample(image, mask, pair.sample_id)


def load_samples(pairs, size: int = IMAGE_SIZE, workers: int = 1) -> list[PreprocessedSample]:
    """Preprocess pairs; results keep the input order whatever ``workers`` is."""
    pairs = list(pairs)
    if workers <= 1:
        return [load_sample(p, size) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: load_sample(p, size), pairs))


# ------------------------------------------------------------------ splitting

def split_sizes(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    """floor(r_train*n), floor(r_val*n), remainder to test."""
    r_train, r_val, _ = (Fraction(str(r)) for r in ratios)
    n_train = math.floor(r_train * n)
    n_val = math.floor(r_val * n)
    return n_train, n_val, n - n_train - n_val


def split_dataset(index: DatasetIndex, ratios=DEFAULT_RATIOS, seed: int = 42) -> SplitAssignment:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"split ratios must be three non-negative fractions summing to 1, got {ratios}")
    if index.total_count == 0:
        raise EmptyDataset("cannot split an empty index")
    ids = sorted(index.ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    return SplitAssignment(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train:n_train + n_val],
        test_ids=shuffled[n_train + n_val:],
        seed=seed,
        ratios=ratios,
    )
