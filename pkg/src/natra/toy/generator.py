"""Layered convolutional generator with per-layer latent injection.

Every layer receives its own copy of the latent code, so a latent "stack"
is an (L, D) matrix: row i feeds layer i. Feeding the same code to all
rows reproduces the ordinary single-code generator; editing a subset of
rows realizes layer-local semantic edits. forward, head and tail all walk
the same per-layer function, which makes decode(z) == tail(head(z, l), l)
hold bit-exactly for every split point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..common import (
    init_conv,
    init_linear,
    load_checkpoint_meta,
    load_state,
    save_checkpoint,
    sha256_file,
    to_images,
    torch_generator,
)


@dataclass
class GeneratorConfig:
    latent_dim: int = 64
    image_size: int = 32
    channels: tuple = (48, 32, 24)  # hidden layer widths; output adds a 3-channel layer

    @property
    def num_layers(self) -> int:
        return len(self.channels) + 1


@dataclass
class FeatureMap:
    """Intermediate activation plus the codes the remaining layers will use.

    tail() needs per-layer codes for the layers after the split, so head()
    carries them along instead of closing over a single z.
    """

    features: torch.Tensor  # (B, C_l, H_l, W_l)
    split_layer: int
    codes: torch.Tensor  # (B, L, D), rows >= split_layer feed tail()

    def scaled(self, alpha: torch.Tensor) -> torch.Tensor:
        """Features with every channel scaled by alpha at all positions."""
        return self.features * alpha.reshape(1, -1, 1, 1)


class LayeredGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or GeneratorConfig()
        c = self.config.channels
        d = self.config.latent_dim
        if self.config.image_size != 4 * 2 ** len(c):
            raise ValueError("image_size must be 4 * 2**len(channels)")

        self.base = nn.Linear(d, c[0] * 16)
        widths = list(c[1:]) + [3]
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, padding=1) for c_in, c_out in zip(c, widths)
        )
        self.projs = nn.ModuleList(nn.Linear(d, w) for w in widths)
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        g = torch_generator(seed, "generator-init")
        init_linear(self.base, g)
        for conv, proj in zip(self.convs, self.projs):
            init_conv(conv, g)
            init_linear(proj, g, gain=0.1)

    # -- latent plumbing ----------------------------------------------------

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def layer_shapes(self) -> list:
        """(H, W, C) of each layer's output, in order."""
        c = self.config.channels
        shapes = [(4 * 2**i, 4 * 2**i, ch) for i, ch in enumerate(c)]
        shapes.append((self.config.image_size, self.config.image_size, 3))
        return shapes

    def as_stack(self, z, stacked: bool = False) -> torch.Tensor:
        """Normalize latent input to a (B, L, D) float32 stack.

        2-D input is a batch of single codes (B, D), each broadcast to all
        layer rows, unless stacked=True marks it as one (L, D) stack. 3-D
        input is always a stack batch (B, L, D).
        """
        t = torch.as_tensor(np.asarray(z) if isinstance(z, (list, np.ndarray)) else z)
        t = t.to(self.base.weight.dtype)
        d, L = self.latent_dim, self.num_layers
        if t.ndim == 1:
            if t.shape[0] != d:
                raise ValueError(f"latent has dim {t.shape[0]}, expected {d}")
            return t.reshape(1, 1, d).expand(1, L, d)
        if t.ndim == 2:
            if stacked:
                if t.shape != (L, d):
                    raise ValueError(f"stack shape {tuple(t.shape)} != ({L}, {d})")
                return t.reshape(1, L, d)
            if t.shape[1] != d:
                raise ValueError(f"latent has dim {t.shape[1]}, expected {d}")
            return t.reshape(-1, 1, d).expand(-1, L, d)
        if t.ndim == 3:
            if t.shape[1:] != (L, d):
                raise ValueError(f"stack shape {tuple(t.shape)} != (B, {L}, {d})")
            return t
        raise ValueError(f"unsupported latent shape {tuple(t.shape)}")

    # -- layer walk ---------------------------------------------------------

    def _run_layer(self, index: int, h: torch.Tensor | None, code: torch.Tensor) -> torch.Tensor:
        if index == 0:
            c0 = self.config.channels[0]
            out = self.base(code).reshape(-1, c0, 4, 4)
            return torch.nn.functional.leaky_relu(out, 0.2)
        conv = self.convs[index - 1]
        proj = self.projs[index - 1]
        h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = conv(h) + proj(code).reshape(h.shape[0], -1, 1, 1)
        if index == self.num_layers - 1:
            return torch.sigmoid(h)
        return torch.nn.functional.leaky_relu(h, 0.2)

    def head(self, z, split_layer: int, stacked: bool = False) -> FeatureMap:
        """Run layers 0..split_layer-1. Valid splits: 1 <= l <= L-1."""
        self._check_split(split_layer)
        stack = self.as_stack(z, stacked=stacked)
        h = None
        for i in range(split_layer):
            h = self._run_layer(i, h, stack[:, i])
        return FeatureMap(features=h, split_layer=split_layer, codes=stack)

    def tail(self, features: FeatureMap | torch.Tensor, split_layer: int, codes=None) -> torch.Tensor:
        """Run layers split_layer..L-1 on a feature map, returning images."""
        self._check_split(split_layer)
        if isinstance(features, FeatureMap):
            if features.split_layer != split_layer:
                raise ValueError(
                    f"feature map was split at {features.split_layer}, not {split_layer}"
                )
            h, stack = features.features, features.codes
        else:
            if codes is None:
                raise ValueError("raw feature tensors need explicit codes")
            h, stack = features, self.as_stack(codes)
        for i in range(split_layer, self.num_layers):
            h = self._run_layer(i, h, stack[:, i])
        return h

    def forward(self, z) -> torch.Tensor:
        stack = self.as_stack(z)
        h = None
        for i in range(self.num_layers):
            h = self._run_layer(i, h, stack[:, i])
        return h

    def _check_split(self, split_layer: int) -> None:
        if not (1 <= split_layer <= self.num_layers - 1):
            raise ValueError(
                f"split layer {split_layer} outside [1, {self.num_layers - 1}]"
            )

    # -- numpy-facing API ---------------------------------------------------

    def decode_tensor(self, z) -> torch.Tensor:
        return self.forward(z)

    @torch.no_grad()
    def decode(self, z) -> np.ndarray:
        """Decode codes (D,) or (B, D) to float images in [0, 1].

        A 1-D input returns one (H, W, C) image, batches return (B, H, W, C).
        Per-layer stacks go through decode_stack.
        """
        arr = z if isinstance(z, torch.Tensor) else np.asarray(z)
        out = to_images(self.forward(self.as_stack(arr)))
        return out[0] if arr.ndim == 1 else out

    @torch.no_grad()
    def decode_stack(self, stack) -> np.ndarray:
        """Decode per-layer stacks (L, D) or (B, L, D) to float images."""
        arr = stack if isinstance(stack, torch.Tensor) else np.asarray(stack)
        out = to_images(self.forward(self.as_stack(arr, stacked=arr.ndim == 2)))
        return out[0] if arr.ndim == 2 else out


def save_generator(path: Path | str, generator: LayeredGenerator, extra_meta: dict | None = None) -> str:
    meta = {
        "kind": "layered_generator",
        "latent_dim": generator.config.latent_dim,
        "image_size": generator.config.image_size,
        "channels": list(generator.config.channels),
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, generator, meta)


def load_generator(path: Path | str) -> LayeredGenerator:
    meta = load_checkpoint_meta(path)
    config = GeneratorConfig(
        latent_dim=meta["latent_dim"],
        image_size=meta["image_size"],
        channels=tuple(meta["channels"]),
    )
    gen = LayeredGenerator(config)
    gen.load_state_dict(load_state(path))
    gen.eval()
    return gen


def generator_checksum(path: Path | str) -> str:
    return sha256_file(path)
