"""Seeded sampling and disk layout for toy shape datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..common import MissingArtifactError, load_png, np_rng, save_png, write_json
from .factors import FACTOR_RANGES, FactorVector
from .render import render

# Binary attribute tasks derived from continuous factors: label 1 when the
# factor exceeds the threshold (hue compares against the wheel midpoint).
ATTRIBUTE_THRESHOLDS = {
    "scale": 0.65,
    "hue": 180.0,
    "pos_x": 0.0,
    "pos_y": 0.0,
    "rotation": 180.0,
}


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, H, W, C) float in [0, 1]
    labels: np.ndarray  # (N,) int64
    factors: list = field(default_factory=list)  # FactorVector per example
    num_classes: int = 2

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int):
        return self.images[idx], int(self.labels[idx])

    def attribute_labels(self, factor: str) -> np.ndarray:
        """Binary labels from a factor threshold, for attribute tasks."""
        if factor not in ATTRIBUTE_THRESHOLDS:
            raise ValueError(f"no attribute threshold for factor {factor!r}")
        thr = ATTRIBUTE_THRESHOLDS[factor]
        vals = np.array([getattr(f, factor) for f in self.factors])
        return (vals > thr).astype(np.int64)

    def subset(self, indices) -> "ToyDataset":
        idx = np.asarray(indices)
        if idx.dtype != bool:
            idx = idx.astype(np.int64)
        return ToyDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            factors=[self.factors[i] for i in idx],
            num_classes=self.num_classes,
        )


def sample_factors(rng: np.random.Generator, shape_class: int) -> FactorVector:
    """One i.i.d. factor draw, uniform over each factor's range."""

    def u(name):
        lo, hi = FACTOR_RANGES[name]
        return float(rng.uniform(lo, hi))

    return FactorVector(
        shape_class=shape_class,
        rotation=u("rotation"),
        scale=u("scale"),
        hue=u("hue"),
        pos_x=u("pos_x"),
        pos_y=u("pos_y"),
    )


def sample_dataset(n: int, seed: int, num_classes: int = 2, size: int = 32) -> ToyDataset:
    """Render n examples with balanced labels and i.i.d. continuous factors.

    Labels are an exactly balanced multiset (counts differ by at most one)
    in seeded random order; all other factors are independent of the label.
    """
    if not (2 <= num_classes <= 4):
        raise ValueError(f"num_classes must be in [2, 4], got {num_classes}")
    rng = np_rng(seed, "toy-dataset")
    labels = np.array([i % num_classes for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    factors = [sample_factors(rng, int(c)) for c in labels]
    images = np.stack([render(f, size=size) for f in factors]) if n else np.zeros((0, size, size, 3))
    return ToyDataset(images=images, labels=labels, factors=factors, num_classes=num_classes)


def save_dataset(dataset: ToyDataset, out_dir: Path | str) -> None:
    """Write images/<id>.png plus labels.csv with the factor columns."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        name = f"img_{i:05d}.png"
        save_png(out_dir / "images" / name, dataset.images[i])
        f = dataset.factors[i]
        rows.append(
            {
                "filename": name,
                "label": int(dataset.labels[i]),
                **{k: repr(v) if isinstance(v, float) else v for k, v in f.as_dict().items()},
            }
        )
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["filename", "label"])
        writer.writeheader()
        writer.writerows(rows)
    write_json(out_dir / "meta.json", {"n": len(dataset), "num_classes": dataset.num_classes})


def load_dataset(in_dir: Path | str) -> ToyDataset:
    in_dir = Path(in_dir)
    csv_path = in_dir / "labels.csv"
    if not csv_path.exists():
        raise MissingArtifactError(csv_path, "run gen-data first")
    images, labels, factors = [], [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(load_png(in_dir / "images" / row["filename"]))
            labels.append(int(row["label"]))
            factors.append(
                FactorVector(
                    shape_class=int(row["shape_class"]),
                    rotation=float(row["rotation"]),
                    scale=float(row["scale"]),
                    hue=float(row["hue"]),
                    pos_x=float(row["pos_x"]),
                    pos_y=float(row["pos_y"]),
                )
            )
    num_classes = max(labels) + 1 if labels else 2
    meta_path = in_dir / "meta.json"
    if meta_path.exists():
        import json

        num_classes = json.loads(meta_path.read_text())["num_classes"]
    return ToyDataset(
        images=np.stack(images) if images else np.zeros((0, 32, 32, 3)),
        labels=np.array(labels, dtype=np.int64),
        factors=factors,
        num_classes=num_classes,
    )
