"""Retrieval datasets: procedural synthetic corpus plus folder ingest/export.

The synthetic corpus is a set of sinusoidal gratings. Each class gets its own
frequency, orientation, and channel color weighting; instances differ by a
small phase jitter, Gaussian pixel noise, and a +/-25% size jitter. Pixel
values are integer-valued floats in [0, 255] so a PNG round trip is lossless.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError

NOISE_SIGMA = 8.0


@dataclass
class RetrievalDataset:
    images: list  # (3, H, W) float64 arrays, integer values in [0, 255]
    labels: np.ndarray
    query_indices: np.ndarray
    reference_indices: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.query_indices = np.asarray(self.query_indices, dtype=np.int64)
        self.reference_indices = np.asarray(self.reference_indices, dtype=np.int64)
        if set(self.query_indices) & set(self.reference_indices):
            raise ConfigurationError("query and reference sets must be disjoint")
        ref_labels = set(self.labels[self.reference_indices].tolist())
        for q in self.query_indices:
            if int(self.labels[q]) not in ref_labels:
                raise ConfigurationError(
                    f"query {int(q)} has no reference of its class {int(self.labels[q])}"
                )

    def __len__(self):
        return len(self.images)

    def content_hash(self):
        h = hashlib.sha256()
        for img in self.images:
            h.update(np.ascontiguousarray(img).tobytes())
        h.update(self.labels.tobytes())
        h.update(self.query_indices.tobytes())
        h.update(self.reference_indices.tobytes())
        return h.hexdigest()


def synth_generate(num_classes=8, per_class=40, base_size=64, seed=0):
    """Generate the labeled grating corpus with one held-out query per class."""
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng([seed, 0x5EED])

    freqs = rng.uniform(2.5, 7.0, size=num_classes)
    thetas = rng.uniform(0.0, np.pi, size=num_classes)
    colors = rng.uniform(0.5, 1.0, size=(num_classes, 3))

    images, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            h = int(round(base_size * rng.uniform(0.75, 1.25)))
            w = int(round(base_size * rng.uniform(0.75, 1.25)))
            yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
            phase = rng.uniform(-0.6, 0.6)
            pattern = np.sin(
                2 * np.pi * freqs[c] * (xx * np.cos(thetas[c]) + yy * np.sin(thetas[c])) + phase
            )
            img = 127.5 + 90.0 * colors[c][:, None, None] * pattern[None]
            img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
            images.append(np.clip(np.round(img), 0, 255).astype(np.float64))
            labels.append(c)

    labels = np.asarray(labels)
    queries = np.asarray([c * per_class for c in range(num_classes)])
    refs = np.asarray(sorted(set(range(len(images))) - set(queries.tolist())))
    return RetrievalDataset(
        images=images,
        labels=labels,
        query_indices=queries,
        reference_indices=refs,
        provenance={
            "kind": "synthetic",
            "num_classes": num_classes,
            "per_class": per_class,
            "base_size": base_size,
            "seed": seed,
        },
    )


def export_folder(dataset, path):
    """Write the dataset as PNG files plus a labels.csv (filename,label,split)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    queries = set(dataset.query_indices.tolist())
    rows = []
    for i, img in enumerate(dataset.images):
        name = f"img_{i:05d}.png"
        arr = np.clip(np.round(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(path / name)
        split = "query" if i in queries else "reference"
        rows.append((name, int(dataset.labels[i]), split))
    with open(path / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "split"])
        writer.writerows(rows)


def ingest_folder(path):
    """Load a PNG folder with a labels.csv into a RetrievalDataset."""
    path = Path(path)
    labels_file = path / "labels.csv"
    if not labels_file.is_file():
        raise IngestionError(f"missing labels file: {labels_file}")

    problems = []
    images, labels, queries, refs = [], [], [], []
    with open(labels_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if set(reader.fieldnames or ()) < {"filename", "label", "split"}:
            raise IngestionError("labels.csv must have columns filename,label,split")
        for row in reader:
            fname = row["filename"]
            fpath = path / fname
            if not fpath.is_file():
                problems.append(f"missing image: {fname}")
                continue
            try:
                arr = np.asarray(Image.open(fpath).convert("RGB"), dtype=np.float64)
            except Exception as exc:
                problems.append(f"unreadable image {fname}: {exc}")
                continue
            idx = len(images)
            images.append(arr.transpose(2, 0, 1))
            labels.append(int(row["label"]))
            if row["split"] == "query":
                queries.append(idx)
            elif row["split"] == "reference":
                refs.append(idx)
            else:
                problems.append(f"bad split for {fname}: {row['split']}")
    if problems:
        raise IngestionError("; ".join(problems))
    try:
        return RetrievalDataset(
            images=images,
            labels=np.asarray(labels),
            query_indices=np.asarray(queries, dtype=np.int64),
            reference_indices=np.asarray(refs, dtype=np.int64),
            provenance={"kind": "folder", "path": str(path)},
        )
    except ConfigurationError as exc:
        raise IngestionError(str(exc)) from exc
