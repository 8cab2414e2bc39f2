"""Independent oracles shared by the test modules."""
from __future__ import annotations

import importlib.util
from pathlib import Path

import numpy as np
from PIL import Image

ROOT = Path(__file__).resolve().parents[1]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x: np.ndarray, h: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    The divisor is the perturbation actually representable in ``x.dtype``.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        hi_x = float(flat[i])
        f_hi = f()
        flat[i] = orig - h
        lo_x = float(flat[i])
        f_lo = f()
        flat[i] = orig
        gflat[i] = (f_hi - f_lo) / (hi_x - lo_x)
    return grad


def projected(y: np.ndarray, r: np.ndarray) -> float:
    """Scalar probe loss sum(y * r), accumulated in double precision."""
    return float(np.sum(y.astype(np.float64) * r))


def write_png(path: Path, array: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def blob_pair(rng: np.random.Generator, size: int, n_blobs: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic 8-bit radiograph-like image with bright disks and their binary mask."""
    yy, xx = np.mgrid[:size, :size]
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_blobs):
        cy, cx = rng.integers(0, size, 2)
        r = rng.integers(1, max(2, size // 5) + 1)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    img = np.clip(0.3 + 0.4 * mask + 0.08 * rng.standard_normal((size, size)), 0, 1)
    return (img * 255).round().astype(np.uint8), (mask * 255).astype(np.uint8)


def make_dataset(root: Path, counts: dict[str, int], size: int = 32, seed: int = 0) -> Path:
    """Write a dataset tree with ``counts[subset]`` image/mask pairs per subset."""
    rng = np.random.default_rng(seed)
    for subset, n in counts.items():
        for i in range(n):
            img, mask = blob_pair(rng, size)
            write_png(root / subset / "images" / f"{subset}_{i:03d}.png", img)
            write_png(root / subset / "masks" / f"{subset}_{i:03d}.png", mask)
    return root


def load_converter():
    """Import scripts/convert_vgg19.py, which is not part of the installed package."""
    spec = importlib.util.spec_from_file_location("convert_vgg19", ROOT / "scripts" / "convert_vgg19.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def torchvision_taps(tv_model, x: np.ndarray) -> dict[str, np.ndarray]:
    """Activations after the last ReLU of each VGG19 block, from torchvision."""
    import torch

    ends = {3: "s1", 8: "s2", 17: "s3", 26: "s4", 35: "bottleneck"}
    out = {}
    h = torch.from_numpy(x)
    with torch.no_grad():
        for i, layer in enumerate(tv_model.features):
            h = layer(h)
            if i in ends:
                out[ends[i]] = h.numpy().copy()
            if i == 35:
                break
    return out


def fingerprint(taps: dict[str, np.ndarray]) -> dict[str, tuple[float, float]]:
    return {k: (float(v.astype(np.float64).sum()), float(v.max())) for k, v in taps.items()}
