"""Reproducible client scenarios, non-IID label partitioning, and datasets."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .wireless import channel_gain, path_loss_db

# clamp so a client dropped exactly on the base station keeps a finite loss
MIN_DISTANCE_KM = 0.001

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised on malformed IDX files; messages carry the failing byte offset."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


@dataclass
class ScenarioConfig:
    """Knobs for one synthetic deployment around a centered base station."""

    n_clients: int = 100
    area_km: float = 2.0
    total_bandwidth_hz: float = 1e6
    tx_power_w: float = 0.1
    noise_dbm: float = -94.0
    model_size_bits: float = 1e5
    cpu_hz_range: tuple[float, float] = (1e8, 1e9)
    cycles_range: tuple[float, float] = (1e7, 5e7)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients!r}")
        for name in ("area_km", "total_bandwidth_hz", "tx_power_w", "model_size_bits"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        for name in ("cpu_hz_range", "cycles_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)!r}")

    @property
    def noise_w(self) -> float:
        return dbm_to_watts(self.noise_dbm)


@dataclass
class ClientProfile:
    """Static per-client state: placement, channel gain, compute speed, data."""

    id: int
    position_km: tuple[float, float]
    distance_km: float
    gain: float
    cpu_hz: float
    cycles_per_sample: float
    tx_power_w: float
    dataset_indices: list[int] = field(default_factory=list)


def generate_scenario(cfg: ScenarioConfig) -> list[ClientProfile]:
    """Draw a reproducible client population for one deployment.

    Clients are placed uniformly over the square, the base station sits at
    the center, and distances are clamped to MIN_DISTANCE_KM. CPU speeds
    and per-sample cycle costs are uniform over their configured ranges.
    Draw order (positions, cpu, cycles) is fixed so a seed pins the result.
    """
    rng = np.random.default_rng(cfg.seed)
    positions = rng.uniform(0.0, cfg.area_km, size=(cfg.n_clients, 2))
    cpu_hz = rng.uniform(cfg.cpu_hz_range[0], cfg.cpu_hz_range[1], size=cfg.n_clients)
    cycles = rng.uniform(cfg.cycles_range[0], cfg.cycles_range[1], size=cfg.n_clients)

    center = np.array([cfg.area_km / 2.0, cfg.area_km / 2.0])
    profiles = []
    for i in range(cfg.n_clients):
        dist = float(np.hypot(*(positions[i] - center)))
        dist = max(dist, MIN_DISTANCE_KM)
        gain = channel_gain(path_loss_db(dist))
        profiles.append(
            ClientProfile(
                id=i,
                position_km=(float(positions[i, 0]), float(positions[i, 1])),
                distance_km=dist,
                gain=gain,
                cpu_hz=float(cpu_hz[i]),
                cycles_per_sample=float(cycles[i]),
                tx_power_w=cfg.tx_power_w,
            )
        )
    return profiles


def proportions_to_counts(proportions, total: int) -> np.ndarray:
    """Round fractional shares of ``total`` to integers, largest remainder first.

    Ties on the fractional part go to the lowest index. Counts always sum
    to ``total`` exactly.
    """
    proportions = np.asarray(proportions, dtype=float)
    if total < 0:
        raise ValueError(f"total must be >= 0, got {total}")
    raw = proportions * total
    counts = np.floor(raw).astype(int)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort on descending remainder keeps lowest index first on ties
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, n_clients: int, beta: float, seed: int) -> list[list[int]]:
    """Split sample indices across clients with per-class Dirichlet skew.

    For each class (in sorted label order) a symmetric Dirichlet(beta) draw
    sets each client's share of that class; shares are rounded with
    ``proportions_to_counts`` and the class's shuffled indices are handed
    out contiguously. Small beta concentrates classes on few clients,
    large beta approaches a uniform split.
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta!r}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in range(n_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(n_clients, beta))
        counts = proportions_to_counts(shares, len(idx))
        stops = np.cumsum(counts)
        starts = stops - counts
        for c in range(n_clients):
            parts[c].extend(int(k) for k in idx[starts[c] : stops[c]])
    for c in range(n_clients):
        parts[c].sort()
    return parts


@dataclass
class LabeledDataset:
    """Feature matrix plus integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.features):
            raise ValueError(
                f"labels must be 1-D and aligned with features, got "
                f"{self.labels.shape} vs {self.features.shape}"
            )
        if len(self.labels) and not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {self.labels.dtype}")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be >= 0")

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=int)
        return LabeledDataset(self.features[idx], self.labels[idx], split=self.split)


def _read_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated at byte {len(buf)}, expected 4 bytes at offset {offset}")
    return struct.unpack(">I", buf[offset : offset + 4])[0]


def load_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    """Load an images/labels file pair in the big-endian IDX format.

    Pixels are flattened row-major and scaled to [0, 1]. Malformed files
    raise IdxFormatError naming the byte offset of the problem.
    """
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lab_buf = f.read()

    magic = _read_u32(img_buf, 0, str(images_path))
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    n_images = _read_u32(img_buf, 4, str(images_path))
    rows = _read_u32(img_buf, 8, str(images_path))
    cols = _read_u32(img_buf, 12, str(images_path))
    need = 16 + n_images * rows * cols
    if len(img_buf) < need:
        raise IdxFormatError(
            f"{images_path}: truncated at byte {len(img_buf)}, header promises {need} bytes"
        )

    magic = _read_u32(lab_buf, 0, str(labels_path))
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    n_labels = _read_u32(lab_buf, 4, str(labels_path))
    if len(lab_buf) < 8 + n_labels:
        raise IdxFormatError(
            f"{labels_path}: truncated at byte {len(lab_buf)}, header promises {8 + n_labels} bytes"
        )
    if n_images != n_labels:
        raise IdxFormatError(
            f"image/label count mismatch: {images_path} has {n_images}, {labels_path} has {n_labels}"
        )

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n_images * rows * cols, offset=16)
    features = pixels.reshape(n_images, rows * cols).astype(float) / 255.0
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    return LabeledDataset(features, labels, split=split)


def synth_gaussian(
    n_classes: int,
    n_per_class: int,
    n_features: int,
    class_sep: float,
    seed: int,
    split: str = "train",
) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class, with seeded means.

    Class means are random directions scaled to norm ``class_sep``; samples
    are unit-variance Gaussians around them. class_sep=0 collapses all
    classes onto one blob (chance-level data).
    """
    if n_classes < 1 or n_per_class < 1 or n_features < 1:
        raise ValueError("n_classes, n_per_class and n_features must be >= 1")
    if class_sep < 0:
        raise ValueError(f"class_sep must be >= 0, got {class_sep!r}")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n_classes, n_features))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_sep * directions / norms
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = means[labels] + rng.normal(size=(len(labels), n_features))
    return LabeledDataset(features, labels.astype(np.int64), split=split)


# --- scenario serialization ---

SCENARIO_DOC_VERSION = 1


def scenario_to_doc(profiles: list[ClientProfile]) -> dict:
    """JSON-ready document with every profile field, for reproducibility."""
    return {
        "version": SCENARIO_DOC_VERSION,
        "clients": [
            {
                "id": p.id,
                "position_km": list(p.position_km),
                "distance_km": p.distance_km,
                "gain": p.gain,
                "cpu_hz": p.cpu_hz,
                "cycles_per_sample": p.cycles_per_sample,
                "tx_power_w": p.tx_power_w,
                "dataset_indices": list(p.dataset_indices),
            }
            for p in profiles
        ],
    }


def scenario_from_doc(doc: dict) -> list[ClientProfile]:
    if doc.get("version") != SCENARIO_DOC_VERSION:
        raise ValueError(f"unsupported scenario doc version {doc.get('version')!r}")
    profiles = []
    for row in doc["clients"]:
        profiles.append(
            ClientProfile(
                id=int(row["id"]),
                position_km=(float(row["position_km"][0]), float(row["position_km"][1])),
                distance_km=float(row["distance_km"]),
                gain=float(row["gain"]),
                cpu_hz=float(row["cpu_hz"]),
                cycles_per_sample=float(row["cycles_per_sample"]),
                tx_power_w=float(row["tx_power_w"]),
                dataset_indices=[int(k) for k in row["dataset_indices"]],
            )
        )
    return profiles


def with_partition(profiles: list[ClientProfile], parts: list[list[int]]) -> list[ClientProfile]:
    """Copy of ``profiles`` with dataset_indices filled from a partition."""
    if len(parts) != len(profiles):
        raise ValueError(f"partition covers {len(parts)} clients, scenario has {len(profiles)}")
    return [replace(p, dataset_indices=list(parts[i])) for i, p in enumerate(profiles)]
