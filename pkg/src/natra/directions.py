"""Unsupervised direction discovery and bounded latent edits.

Directions come from PCA over activations of randomly decoded latents: the
generator's strongest activation modes are the semantic factors it renders.
A least-squares regression maps activation-space coordinates back to latent
offsets so a discovered direction can be applied to any code. Edits are
magnitude- and layer-bounded, and a curated catalog names the directions
worth using downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .common import MissingArtifactError, NatraError, canonical_json, np_rng, sha256_file
from .toy.generator import LayeredGenerator, generator_checksum

DEFAULT_SAMPLES = 10_000
DEFAULT_DIRECTIONS = 16
LATENT_SOURCE = "latent-space"


@dataclass
class DirectionBasis:
    """Orthonormal direction columns with their variance shares.

    source is LATENT_SOURCE when the basis lives in latent space, or the
    activation layer index the basis was computed at.
    """

    vectors: np.ndarray  # (dim, M), orthonormal columns
    mean: np.ndarray  # (dim,)
    variance_share: np.ndarray  # (M,), non-increasing, sums to <= 1
    source: str | int

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_directions(self) -> int:
        return self.vectors.shape[1]

    def validate(self) -> None:
        gram = self.vectors.T @ self.vectors
        if not np.allclose(gram, np.eye(self.n_directions), atol=1e-6):
            raise ValueError("direction columns are not orthonormal within 1e-6")
        if np.any(np.diff(self.variance_share) > 1e-12):
            raise ValueError("variance shares must be non-increasing")
        if self.variance_share.sum() > 1.0 + 1e-9:
            raise ValueError("variance shares must sum to at most 1")


@dataclass
class LatentRegressionBasis:
    """Least-squares map from activation coordinates to latent offsets."""

    matrix: np.ndarray  # (D, M)
    residual: float  # mean squared residual of the fit

    def validate(self) -> None:
        if not np.isfinite(self.matrix).all():
            raise ValueError("regression matrix must be finite")


def sample_latents(count: int, latent_dim: int = 64, seed: int = 0) -> np.ndarray:
    """Draw count i.i.d. standard-normal latent codes, (count, D) float64."""
    if count < 2:
        raise ValueError("count must be >= 2")
    return np_rng(seed, "direction-samples").standard_normal((count, latent_dim))


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # PCA signs are arbitrary; make each column's largest-magnitude
    # coordinate positive so reruns and permuted inputs agree.
    out = vectors.copy()
    for k in range(out.shape[1]):
        peak = np.argmax(np.abs(out[:, k]))
        if out[peak, k] < 0:
            out[:, k] = -out[:, k]
    return out


def compute_basis(
    vectors: np.ndarray, m: int = DEFAULT_DIRECTIONS, source: str | int = LATENT_SOURCE
) -> DirectionBasis:
    """Top-m principal components of the (centered) sample rows.

    All-identical samples have no principal directions; they yield the
    first m standard basis vectors with zero variance shares so that
    projections of such degenerate data are well-defined (and zero).
    """
    data = np.asarray(vectors, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("vectors must be a (K, dim) array")
    k, dim = data.shape
    if k < m + 1:
        raise ValueError(f"need at least {m + 1} vectors for {m} directions, got {k}")
    if m < 1 or m > dim:
        raise ValueError(f"m must be in [1, {dim}]")
    mu = data.mean(axis=0)
    centered = data - mu
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    tol = svals[0] * max(k, dim) * np.finfo(np.float64).eps if svals.size else 0.0
    rank = int((svals > tol).sum())
    total = float((svals**2).sum())
    if rank == 0:
        basis = np.eye(dim, m, dtype=np.float64)
        shares = np.zeros(m)
    elif m > rank:
        raise ValueError(f"m={m} exceeds sample rank {rank}")
    else:
        basis = _fix_signs(vt[:m].T)
        shares = svals[:m] ** 2 / total
    out = DirectionBasis(vectors=basis, mean=mu, variance_share=shares, source=source)
    out.validate()
    return out


def layer_activations(
    generator: LayeredGenerator, layer: int, latents: np.ndarray, chunk: int = 256
) -> np.ndarray:
    """Flattened activations of the given layer, (K, C*H*W) float64."""
    n_layers = generator.num_layers
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer must be in [0, {n_layers - 1}], got {layer}")
    z = torch.from_numpy(np.asarray(latents, dtype=np.float32))
    outs = []
    with torch.no_grad():
        for start in range(0, z.shape[0], chunk):
            part = z[start : start + chunk]
            if layer == n_layers - 1:
                acts = generator.decode_tensor(part)
            else:
                acts = generator.head(part, layer + 1).features
            outs.append(acts.reshape(acts.shape[0], -1).double().numpy())
    return np.concatenate(outs, axis=0)


def project_activations(
    generator: LayeredGenerator,
    layer: int,
    latents: np.ndarray,
    m: int = DEFAULT_DIRECTIONS,
) -> tuple[DirectionBasis, np.ndarray]:
    """PCA basis over activations at a layer, plus each sample's coordinates."""
    acts = layer_activations(generator, layer, latents)
    basis = compute_basis(acts, m, source=layer)
    coords = (acts - basis.mean) @ basis.vectors
    return basis, coords


def regress_latent_basis(latents: np.ndarray, coords: np.ndarray) -> LatentRegressionBasis:
    """Closed-form least squares U = argmin sum_j |U b_j - z_j|^2."""
    z = np.asarray(latents, dtype=np.float64)
    b = np.asarray(coords, dtype=np.float64)
    if z.ndim != 2 or b.ndim != 2 or z.shape[0] != b.shape[0]:
        raise ValueError("latents and coords must be (K, D) and (K, M) with equal K")
    rank = np.linalg.matrix_rank(b)
    if rank < b.shape[1]:
        raise ValueError(f"coords are rank-deficient: rank {rank} < {b.shape[1]}")
    solution, _, _, _ = np.linalg.lstsq(b, z, rcond=None)
    fitted = b @ solution
    residual = float(np.mean(np.sum((fitted - z) ** 2, axis=1)))
    out = LatentRegressionBasis(matrix=solution.T, residual=residual)
    out.validate()
    return out


ALL_LAYERS = "all"


@dataclass
class EditSpec:
    """One bounded move along a discovered direction, on chosen layers."""

    direction_index: int
    magnitude: float
    layer_start: int = 0
    layer_end: int | str = ALL_LAYERS
    basis_id: str = ""

    def layer_range(self, n_layers: int) -> tuple[int, int]:
        if self.layer_end == ALL_LAYERS:
            start, end = 0, n_layers - 1
        else:
            start, end = self.layer_start, int(self.layer_end)
        if not 0 <= start <= end <= n_layers - 1:
            raise ValueError(
                f"layer range [{start}, {end}] invalid for {n_layers} layers"
            )
        return start, end


def edit_vector(
    edit: EditSpec, basis: DirectionBasis | LatentRegressionBasis
) -> np.ndarray:
    """The latent-space displacement r * u_k for an edit."""
    if isinstance(basis, DirectionBasis):
        if basis.source != LATENT_SOURCE:
            raise ValueError(
                "activation-space basis cannot edit latents directly; "
                "use the latent regression basis"
            )
        matrix = basis.vectors
    else:
        matrix = basis.matrix
    if not 0 <= edit.direction_index < matrix.shape[1]:
        raise ValueError(
            f"direction index {edit.direction_index} out of range "
            f"[0, {matrix.shape[1] - 1}]"
        )
    return edit.magnitude * matrix[:, edit.direction_index]


def apply_edit(
    stack: np.ndarray, edit: EditSpec, basis: DirectionBasis | LatentRegressionBasis
) -> np.ndarray:
    """Add the edit's displacement to layers [start, end]; others untouched."""
    codes = np.asarray(stack, dtype=np.float64)
    if codes.ndim != 2:
        raise ValueError("stack must be a (L, D) per-layer code array")
    start, end = edit.layer_range(codes.shape[0])
    delta = edit_vector(edit, basis)
    if delta.shape[0] != codes.shape[1]:
        raise ValueError(
            f"direction dim {delta.shape[0]} != latent dim {codes.shape[1]}"
        )
    out = codes.copy()
    out[start : end + 1] += delta
    return out


def save_basis(
    path: Path | str,
    basis: DirectionBasis,
    regression: LatentRegressionBasis | None = None,
    seed: int | None = None,
) -> str:
    """Write the matrix blob plus a JSON sidecar; returns the basis id."""
    path = Path(path)
    arrays = {
        "vectors": basis.vectors,
        "mean": basis.mean,
        "variance_share": basis.variance_share,
    }
    if regression is not None:
        arrays["regression"] = regression.matrix
        arrays["regression_residual"] = np.array([regression.residual])
    np.savez(path, **arrays)
    blob = path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")
    basis_id = sha256_file(blob)[:16]
    sidecar = {
        "dim": basis.dim,
        "m": basis.n_directions,
        "source": basis.source,
        "seed": seed,
        "basis_id": basis_id,
        "variance_share": basis.variance_share.tolist(),
    }
    blob.with_suffix(".json").write_text(canonical_json(sidecar) + "\n")
    return basis_id


def load_basis(
    path: Path | str,
) -> tuple[DirectionBasis, LatentRegressionBasis | None, dict]:
    path = Path(path)
    blob = path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")
    if not blob.exists():
        raise MissingArtifactError(blob, hint="run discover first")
    sidecar = blob.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    with np.load(blob) as data:
        basis = DirectionBasis(
            vectors=data["vectors"],
            mean=data["mean"],
            variance_share=data["variance_share"],
            source=meta.get("source", LATENT_SOURCE),
        )
        regression = None
        if "regression" in data:
            regression = LatentRegressionBasis(
                matrix=data["regression"],
                residual=float(data["regression_residual"][0]),
            )
    return basis, regression, meta


CATALOG_SCHEMA_VERSION = 1

_ENTRY_FIELDS = {
    "name": str,
    "direction_index": int,
    "layer_start": int,
    "layer_end": (int, str),
    "magnitude_lo": (int, float),
    "magnitude_hi": (int, float),
    "task_relevant": bool,
}


@dataclass
class CatalogEntry:
    """A named, range-bounded, relevance-flagged direction."""

    name: str
    direction_index: int
    magnitude_lo: float
    magnitude_hi: float
    task_relevant: bool
    layer_start: int = 0
    layer_end: int | str = ALL_LAYERS

    def validate(self) -> None:
        if not self.name:
            raise ValueError("entry name must be non-empty")
        if not (np.isfinite(self.magnitude_lo) and np.isfinite(self.magnitude_hi)):
            raise ValueError(f"entry {self.name!r}: magnitude range must be finite")
        if self.magnitude_lo >= self.magnitude_hi:
            raise ValueError(
                f"entry {self.name!r}: magnitude_lo must be below magnitude_hi"
            )
        if self.layer_end != ALL_LAYERS and self.layer_start > int(self.layer_end):
            raise ValueError(f"entry {self.name!r}: layer_start exceeds layer_end")

    def edit_spec(self, magnitude: float, basis_id: str = "") -> EditSpec:
        if not self.magnitude_lo <= magnitude <= self.magnitude_hi:
            raise ValueError(
                f"magnitude {magnitude} outside entry {self.name!r} range "
                f"[{self.magnitude_lo}, {self.magnitude_hi}]"
            )
        return EditSpec(
            direction_index=self.direction_index,
            magnitude=magnitude,
            layer_start=self.layer_start,
            layer_end=self.layer_end,
            basis_id=basis_id,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "direction_index": self.direction_index,
            "layer_start": self.layer_start,
            "layer_end": self.layer_end,
            "magnitude_lo": self.magnitude_lo,
            "magnitude_hi": self.magnitude_hi,
            "task_relevant": self.task_relevant,
        }


def _entry_from_dict(obj: dict, index: int) -> CatalogEntry:
    for key, types in _ENTRY_FIELDS.items():
        if key not in obj:
            raise NatraError(f"catalog entry {index}: missing field {key!r}")
        if not isinstance(obj[key], types):
            raise NatraError(
                f"catalog entry {index}: field {key!r} has wrong type "
                f"{type(obj[key]).__name__}"
            )
    if isinstance(obj["layer_end"], str) and obj["layer_end"] != ALL_LAYERS:
        raise NatraError(
            f"catalog entry {index}: field 'layer_end' must be an int or \"all\""
        )
    entry = CatalogEntry(
        name=obj["name"],
        direction_index=obj["direction_index"],
        layer_start=obj["layer_start"],
        layer_end=obj["layer_end"],
        magnitude_lo=float(obj["magnitude_lo"]),
        magnitude_hi=float(obj["magnitude_hi"]),
        task_relevant=obj["task_relevant"],
    )
    try:
        entry.validate()
    except ValueError as exc:
        raise NatraError(f"catalog entry {index}: {exc}") from exc
    return entry


def entry_template(
    entry: CatalogEntry,
    basis: DirectionBasis | LatentRegressionBasis,
    n_layers: int,
    latent_dim: int,
) -> np.ndarray:
    """Per-layer displacement template (L, D) for a unit magnitude of an entry."""
    spec = EditSpec(
        direction_index=entry.direction_index,
        magnitude=1.0,
        layer_start=entry.layer_start,
        layer_end=entry.layer_end,
    )
    start, end = spec.layer_range(n_layers)
    direction = edit_vector(spec, basis)
    template = np.zeros((n_layers, latent_dim))
    template[start : end + 1] = direction
    return template


@dataclass
class TransformationCatalog:
    """Curated registry of named edits against one basis and generator."""

    basis_id: str
    generator_checksum: str
    entries: list = field(default_factory=list)
    version: int = 0

    def names(self) -> list:
        return [e.name for e in self.entries]

    def get(self, name: str) -> CatalogEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(f"no catalog entry named {name!r}")

    def add_entry(self, entry: CatalogEntry) -> None:
        entry.validate()
        if entry.name in self.names():
            raise ValueError(f"duplicate entry name {entry.name!r}")
        self.entries.append(entry)

    def rename(self, old: str, new: str) -> None:
        if not new:
            raise ValueError("new name must be non-empty")
        if new in self.names():
            raise ValueError(f"entry named {new!r} already exists")
        entry = self.get(old)
        self.entries[self.entries.index(entry)] = replace(entry, name=new)

    def set_range(self, name: str, lo: float, hi: float) -> None:
        entry = self.get(name)
        updated = replace(entry, magnitude_lo=lo, magnitude_hi=hi)
        updated.validate()
        self.entries[self.entries.index(entry)] = updated

    def set_task_relevance(self, name: str, flag: bool) -> None:
        entry = self.get(name)
        self.entries[self.entries.index(entry)] = replace(entry, task_relevant=flag)

    def task_irrelevant(self) -> list:
        return [e for e in self.entries if not e.task_relevant]

    def to_dict(self) -> dict:
        return {
            "schema": CATALOG_SCHEMA_VERSION,
            "version": self.version,
            "basis_id": self.basis_id,
            "generator_checksum": self.generator_checksum,
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(canonical_json(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, obj: dict) -> "TransformationCatalog":
        if not isinstance(obj, dict):
            raise NatraError("catalog: top level must be an object")
        for key, types in (
            ("version", int),
            ("basis_id", str),
            ("generator_checksum", str),
            ("entries", list),
        ):
            if key not in obj:
                raise NatraError(f"catalog: missing field {key!r}")
            if not isinstance(obj[key], types):
                raise NatraError(f"catalog: field {key!r} has wrong type")
        entries = [_entry_from_dict(e, i) for i, e in enumerate(obj["entries"])]
        catalog = cls(
            basis_id=obj["basis_id"],
            generator_checksum=obj["generator_checksum"],
            entries=[],
            version=obj["version"],
        )
        for entry in entries:
            catalog.add_entry(entry)
        return catalog

    @classmethod
    def load(cls, path: Path | str) -> "TransformationCatalog":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path, hint="run discover first")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise NatraError(
                f"catalog {path.name}: invalid JSON at line {exc.lineno}: {exc.msg}"
            ) from exc
        return cls.from_dict(obj)


def catalog_for_generator(
    catalog: TransformationCatalog, generator: LayeredGenerator
) -> bool:
    """Whether the catalog was authored against this generator's weights."""
    return catalog.generator_checksum == generator_checksum(generator)
