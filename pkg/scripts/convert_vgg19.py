#!/usr/bin/env python3
"""Convert published VGG19 ImageNet weights into a dentseg weight archive.

Supported inputs:

* torchvision state dicts (``vgg19-dcbb9e9d.pth``): ``features.{i}.weight`` is
  already (out, in, 3, 3);
* Keras HDF5 files (``vgg19_weights_tf_dim_ordering_tf_kernels_notop.h5``):
  kernels are (3, 3, in, out) and get transposed.

Usage::

    python scripts/convert_vgg19.py vgg19-dcbb9e9d.pth vgg19.dsw
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from dentseg.archive import WeightArchive, write_weight_archive
from dentseg.models import vgg19_conv_names

# conv positions inside torchvision's vgg19().features
TORCHVISION_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34)


def from_torch_state(state: dict) -> WeightArchive:
    tensors = {}
    for (name, _, _), idx in zip(vgg19_conv_names(), TORCHVISION_CONV_INDICES):
        for suffix in ("weight", "bias"):
            key = f"features.{idx}.{suffix}"
            if key not in state:
                raise KeyError(f"state dict has no {key!r}")
            value = state[key]
            value = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
            tensors[f"{name}.{suffix}"] = value.astype(np.float32)
    return WeightArchive(tensors, {"source": "torchvision"})


def from_keras_h5(path) -> WeightArchive:
    import h5py

    tensors = {}
    with h5py.File(path, "r") as fh:
        root = fh["model_weights"] if "model_weights" in fh else fh
        for name, _, _ in vgg19_conv_names():
            if name not in root:
                raise KeyError(f"{path}: no group {name!r}")
            arrays = []
            root[name].visititems(lambda _, obj: arrays.append(obj[()]) if isinstance(obj, h5py.Dataset) else None)
            kernel = [a for a in arrays if a.ndim == 4]
            bias = [a for a in arrays if a.ndim == 1]
            if len(kernel) != 1 or len(bias) != 1:
                raise ValueError(f"{path}: expected one kernel and one bias under {name!r}")
            tensors[f"{name}.weight"] = kernel[0].transpose(3, 2, 0, 1).astype(np.float32)
            tensors[f"{name}.bias"] = bias[0].astype(np.float32)
    return WeightArchive(tensors, {"source": "keras"})


def convert(src, dst) -> Path:
    src = Path(src)
    if src.suffix in (".h5", ".hdf5"):
        archive = from_keras_h5(src)
    else:
        import torch

        archive = from_torch_state(torch.load(src, map_location="cpu", weights_only=True))
    return write_weight_archive(archive, dst)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("src", help="torchvision .pth or Keras .h5 VGG19 weights")
    parser.add_argument("dst", help="output weight archive")
    args = parser.parse_args(argv)
    out = convert(args.src, args.dst)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
