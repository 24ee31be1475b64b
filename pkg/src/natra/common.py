"""Shared plumbing: errors, seeding, image conversion, checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class NatraError(Exception):
    """Base class for errors this package raises on purpose."""


class MissingArtifactError(NatraError):
    """A required file produced by an earlier stage is absent."""

    def __init__(self, path: Path | str, hint: str = ""):
        self.path = Path(path)
        msg = f"missing artifact: {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)


class TrainingDivergedError(NatraError):
    """A training loss became non-finite."""

    def __init__(self, stage: str, iteration: int, value: float):
        self.stage = stage
        self.iteration = iteration
        self.value = value
        super().__init__(f"{stage}: loss became non-finite at iteration {iteration} ({value})")


def derive_seed(seed: int, *tags) -> int:
    """Stable child seed for a named stage.

    Hashing (seed, tags) rather than offsetting keeps stages independent:
    reordering or adding stages never shifts another stage's stream.
    """
    text = ":".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def torch_generator(seed: int, *tags) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *tags))
    return g


def np_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path: Path | str, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path | str):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# Image representation.
#
# Public arrays are float (H, W, C) in [0, 1]. Torch code uses (B, C, H, W).
# All conversions funnel through the helpers below so the layout convention
# lives in exactly one place.
# ---------------------------------------------------------------------------


def to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, C) or (B, H, W, C) array in [0, 1] -> (B, C, H, W) tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (H,W,C) or (B,H,W,C), got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    return t.to(dtype)


def to_images(tensor: torch.Tensor) -> np.ndarray:
    """(B, C, H, W) tensor -> (B, H, W, C) float64 array, no clipping."""
    if tensor.ndim == 3:
        tensor = tensor[None]
    arr = tensor.detach().cpu().numpy().astype(np.float64)
    return arr.transpose(0, 2, 3, 1)


def save_png(path: Path | str, image: np.ndarray) -> None:
    """Quantize a (H, W, C) float image in [0, 1] to 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H,W,C) image, got shape {arr.shape}")
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    Image.fromarray(q).save(path, format="PNG")


def load_png(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def png_bytes(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Checkpoints: a torch state-dict blob plus a JSON sidecar describing the
# architecture, so loading never depends on pickled class definitions.
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path | str, module: torch.nn.Module, meta: dict) -> str:
    """Write <path> (weights) and <path>.json (meta). Returns the blob sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)
    checksum = sha256_file(path)
    sidecar = dict(meta)
    sidecar["checksum"] = checksum
    write_json(path.with_suffix(path.suffix + ".json"), sidecar)
    return checksum


def load_checkpoint_meta(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    return read_json(path.with_suffix(path.suffix + ".json"))


def load_state(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    return torch.load(path, map_location="cpu", weights_only=True)


def init_linear(layer: torch.nn.Linear, gen: torch.Generator, gain: float = 1.0) -> None:
    """Fan-in scaled uniform init drawn from an explicit generator."""
    fan_in = layer.weight.shape[1]
    bound = gain / np.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


def init_conv(layer: torch.nn.Conv2d, gen: torch.Generator, gain: float = 1.0) -> None:
    fan_in = layer.weight.shape[1] * layer.weight.shape[2] * layer.weight.shape[3]
    bound = gain / np.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)
