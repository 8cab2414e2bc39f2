"""Sequential layer graph with named skip taps and concat merge points."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch
from . import functional as F
from .layers import Layer


@dataclass(frozen=True)
class Tap:
    """Records the running activation under ``name``.

    ``skip=True`` taps must be consumed by exactly one later :class:`Merge`;
    ``skip=False`` taps only expose the activation (e.g. the bottleneck).
    """

    name: str
    skip: bool = True


@dataclass(frozen=True)
class Merge:
    """Concatenates the running activation (first) with tap ``name``."""

    name: str


Node = Layer | Tap | Merge


class ModelGraph:
    def __init__(self, nodes: list[Node], architecture: str, config: dict | None = None,
                 rng: np.random.Generator | None = None):
        self.nodes = list(nodes)
        self.architecture = architecture
        self.config = dict(config or {})
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = "infer"
        self.taps: dict[str, np.ndarray] = {}
        self._merge_split: dict[str, int] = {}
        self._validate_wiring()

    def _validate_wiring(self) -> None:
        names = set()
        open_taps: set[str] = set()
        for node in self.nodes:
            if isinstance(node, Layer):
                if node.name in names:
                    raise ValueError(f"duplicate layer name {node.name!r}")
                names.add(node.name)
            elif isinstance(node, Tap):
                if node.skip:
                    open_taps.add(node.name)
            elif isinstance(node, Merge):
                if node.name not in open_taps:
                    raise ValueError(f"merge {node.name!r} has no preceding skip tap")
                open_taps.remove(node.name)
        if open_taps:
            raise ValueError(f"skip taps never merged: {sorted(open_taps)}")

    @property
    def layers(self) -> list[Layer]:
        return [n for n in self.nodes if isinstance(n, Layer)]

    def train(self) -> "ModelGraph":
        self.mode = "train"
        return self

    def eval(self) -> "ModelGraph":
        self.mode = "infer"
        return self

    # -- parameters

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``layer.param``; the dict holds live references."""
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.buffers.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.grads.items()}

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.grads = {}

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        from ..errors import MissingWeight, WeightShapeMismatch

        own = self.state_dict()
        for name, target in own.items():
            if name not in state:
                if strict:
                    raise MissingWeight(name)
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise WeightShapeMismatch(name, target.shape, value.shape)
            target[...] = value

    # -- execution

    def forward(self, x: np.ndarray, keep_taps: bool = False) -> np.ndarray:
        train = self.mode == "train"
        saved: dict[str, np.ndarray] = {}
        self.taps = {}
        for node in self.nodes:
            if isinstance(node, Layer):
                x = node.forward(x, train)
            elif isinstance(node, Tap):
                if node.skip:
                    saved[node.name] = x
                if keep_taps:
                    self.taps[node.name] = x
            else:
                skip = saved.pop(node.name)
                self._merge_split[node.name] = x.shape[1]
                x = F.concat_channels(x, skip)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        pending: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            if isinstance(node, Layer):
                dy = node.backward(dy)
            elif isinstance(node, Merge):
                dy, pending[node.name] = F.split_channels(dy, self._merge_split[node.name])
            elif node.skip:
                dy = dy + pending.pop(node.name)
        return dy

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def predict(self, x: np.ndarray, batch_size: int = 4) -> np.ndarray:
        """Infer-mode forward in chunks; restores the previous mode."""
        prev = self.mode
        self.eval()
        try:
            outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        finally:
            self.mode = prev
        return np.concatenate(outs, axis=0)

    def output_shape(self, input_shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        """Shape propagation without running any kernel."""
        n, c, h, w = input_shape
        saved: dict[str, tuple[int, int, int]] = {}
        for node in self.nodes:
            if isinstance(node, Layer):
                c = node.output_channels(c)
                h, w = node.output_spatial(h, w)
            elif isinstance(node, Tap):
                if node.skip:
                    saved[node.name] = (c, h, w)
            else:
                sc, sh, sw = saved.pop(node.name)
                if (sh, sw) != (h, w):
                    raise ShapeMismatch(f"merge {node.name!r}: skip is {sh}x{sw}, decoder is {h}x{w}")
                c += sc
        return n, c, h, w
