"""Synthetic labeled slides with ground-truth instance roles.

A slide is a bag of latent vectors. Noisy instances come from a shared
background Gaussian mixture whose component means live outside the first
``n_classes - 1`` coordinates; discriminative instances of class c sit at
``separation * noise_sigma`` along coordinate c-1, so the class signal
occupies a known subspace, the bag label is exactly detectable from the
witnesses, and witness/background roles stay linearly separable. Class 0
carries no witnesses.

Each instance also exists at ``n_scales`` granularities: scale 0 is the
raw vector, scale j >= 1 applies a frozen random orthogonal map plus small
Gaussian jitter. All views share the raw feature width so bags stack into
one matrix regardless of the scale mix.

Role ground truth is for the analysis instruments only; the trainer never
reads it.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError

MAGIC = b"ABXD"
FORMAT_VERSION = 1


@dataclass
class DatasetConfig:
    n_slides: int = 200
    instances_min: int = 96
    instances_max: int = 160
    witness_rate: float = 0.05
    raw_dim: int = 24
    n_classes: int = 2
    separation: float = 2.5
    noise_sigma: float = 1.0
    region_grid: int = 2
    n_scales: int = 2
    bg_components: int = 8
    bg_scale: float = 3.0
    bg_class_leak: float = 2.0
    scale_noise: float = 0.05
    seed: int = 1

    def validate(self):
        if not 0.0 < self.witness_rate <= 1.0:
            raise ConfigError(f"witness_rate must be in (0, 1], got {self.witness_rate}")
        # separation 0 is allowed as the unlearnable control
        if self.separation < 0:
            raise ConfigError(f"separation must be >= 0, got {self.separation}")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.raw_dim < self.n_classes:
            raise ConfigError("raw_dim must leave room for the class subspace")
        if not 1 <= self.instances_min <= self.instances_max:
            raise ConfigError("bad instances range")
        if self.n_slides < 2:
            raise ConfigError("need at least 2 slides")
        if self.region_grid < 1 or self.n_scales < 1 or self.bg_components < 1:
            raise ConfigError("region_grid, n_scales and bg_components must be >= 1")
        if self.bg_scale < 0 or self.bg_class_leak < 0:
            raise ConfigError("bg_scale and bg_class_leak must be >= 0")
        return self


@dataclass
class Slide:
    slide_id: int
    label: int
    coords: np.ndarray      # (s, 2) in [0, 1)
    region_ids: np.ndarray  # (s,) ints
    roles: np.ndarray       # (s,) bool, True = discriminative
    views: np.ndarray       # (n_scales, s, raw_dim)

    @property
    def n_instances(self) -> int:
        return self.views.shape[1]

    @property
    def instances(self) -> np.ndarray:
        """Raw (scale-0) feature matrix."""
        return self.views[0]

    @property
    def n_discriminative(self) -> int:
        return int(self.roles.sum())

    def noisy_indices(self):
        return np.flatnonzero(~self.roles)


@dataclass
class Dataset:
    train: list
    test: list
    manifest: dict

    @property
    def raw_dim(self):
        return int(self.manifest["config"]["raw_dim"])

    @property
    def n_classes(self):
        return int(self.manifest["config"]["n_classes"])

    def all_slides(self):
        return self.train + self.test


@dataclass
class SharedStructures:
    """Per-dataset frozen randomness: scale maps, background means, shifts."""

    scale_maps: np.ndarray   # (n_scales, d, d); index 0 is identity
    bg_means: np.ndarray     # (k, d), zero inside the class subspace
    class_shifts: np.ndarray  # (n_classes, d); row 0 is zero


def shared_structures(config: DatasetConfig) -> SharedStructures:
    rng = np.random.default_rng([config.seed, 0])
    d = config.raw_dim
    maps = np.zeros((config.n_scales, d, d))
    maps[0] = np.eye(d)
    for j in range(1, config.n_scales):
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        maps[j] = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    bg = rng.standard_normal((config.bg_components, d)) * config.bg_scale * config.noise_sigma
    # bg_class_leak scales the component spread inside the class subspace:
    # at 0 the class coordinates are clean, larger values bury the witness
    # shift among component offsets
    bg[:, : config.n_classes - 1] *= (config.bg_class_leak / config.bg_scale
                                      if config.bg_scale else 0.0)
    shifts = np.zeros((config.n_classes, d))
    for c in range(1, config.n_classes):
        shifts[c, c - 1] = config.separation * config.noise_sigma
    return SharedStructures(scale_maps=maps, bg_means=bg, class_shifts=shifts)


def region_bins(coords: np.ndarray, n_regions: int) -> np.ndarray:
    """Row-major spatial grid over the unit square. n_regions is factored
    as rows x cols with rows the largest divisor <= sqrt(n_regions)."""
    if n_regions < 1:
        raise ConfigError(f"n_regions must be >= 1, got {n_regions}")
    rows = 1
    for cand in range(1, int(math.isqrt(n_regions)) + 1):
        if n_regions % cand == 0:
            rows = cand
    cols = n_regions // rows
    r = np.minimum((coords[:, 1] * rows).astype(int), rows - 1)
    c = np.minimum((coords[:, 0] * cols).astype(int), cols - 1)
    return r * cols + c


def with_regions(slide: Slide, n_regions: int) -> Slide:
    """Copy of the slide re-binned to a different region count."""
    return Slide(slide.slide_id, slide.label, slide.coords,
                 region_bins(slide.coords, n_regions), slide.roles, slide.views)


def make_slide(config: DatasetConfig, label: int, rng, slide_id: int = 0,
               shared: SharedStructures = None) -> Slide:
    if shared is None:
        shared = shared_structures(config)
    if not 0 <= label < config.n_classes:
        raise ConfigError(f"label {label} out of range")
    d, sigma = config.raw_dim, config.noise_sigma

    size = int(rng.integers(config.instances_min, config.instances_max + 1))
    coords = rng.uniform(0.0, 1.0, size=(size, 2))
    roles = np.zeros(size, dtype=bool)
    if label > 0:
        n_disc = max(1, round(config.witness_rate * size))
        roles[rng.choice(size, size=n_disc, replace=False)] = True
    comps = rng.integers(0, config.bg_components, size=size)
    base = shared.bg_means[comps] + sigma * rng.standard_normal((size, d))
    base[roles] = (shared.class_shifts[label]
                   + sigma * rng.standard_normal((int(roles.sum()), d)))

    views = np.zeros((config.n_scales, size, d))
    views[0] = base
    for j in range(1, config.n_scales):
        jitter = config.scale_noise * sigma * rng.standard_normal((size, d))
        views[j] = base @ shared.scale_maps[j].T + jitter

    return Slide(slide_id=slide_id, label=label, coords=coords,
                 region_ids=region_bins(coords, config.region_grid ** 2),
                 roles=roles, views=views)


def config_hash(config: DatasetConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def make_dataset(config: DatasetConfig) -> Dataset:
    """Balanced labels, deterministic slides, seeded 7:3 train/test split."""
    config.validate()
    shared = shared_structures(config)
    labels = [i % config.n_classes for i in range(config.n_slides)]
    slides = [
        make_slide(config, labels[i], np.random.default_rng([config.seed, 1, i]),
                   slide_id=i, shared=shared)
        for i in range(config.n_slides)
    ]
    perm = np.random.default_rng([config.seed, 2]).permutation(config.n_slides)
    n_train = round(0.7 * config.n_slides)
    train_ids = set(int(i) for i in perm[:n_train])

    entries = []
    train, test = [], []
    for slide in slides:
        split = "train" if slide.slide_id in train_ids else "test"
        (train if split == "train" else test).append(slide)
        entries.append({
            "id": slide.slide_id,
            "file": f"slides/slide_{slide.slide_id:05d}.abxd",
            "label": slide.label,
            "split": split,
            "n_instances": slide.n_instances,
            "n_discriminative": slide.n_discriminative,
        })
    manifest = {
        "format": FORMAT_VERSION,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "n_train": len(train),
        "n_test": len(test),
        "slides": entries,
    }
    return Dataset(train=train, test=test, manifest=manifest)


# ---------------------------------------------------------------------------
# persistence: manifest.json + one flat binary block file per slide
# ---------------------------------------------------------------------------

def slide_to_bytes(slide: Slide) -> bytes:
    s, d = slide.views.shape[1], slide.views.shape[2]
    t = slide.views.shape[0]
    head = struct.pack("<4sIIIII", MAGIC, FORMAT_VERSION, s, d, t, slide.label)
    bitmap = np.packbits(slide.roles).tobytes()
    payload = (slide.coords.astype("<f8").tobytes()
               + slide.region_ids.astype("<f8").tobytes()
               + slide.views.astype("<f8").tobytes())
    return head + bitmap + payload


def slide_from_bytes(blob: bytes, slide_id: int) -> Slide:
    magic, version, s, d, t, label = struct.unpack_from("<4sIIIII", blob, 0)
    if magic != MAGIC:
        raise ValidationError(f"bad slide file magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported slide format version {version}")
    off = struct.calcsize("<4sIIIII")
    nbit = (s + 7) // 8
    roles = np.unpackbits(np.frombuffer(blob, np.uint8, nbit, off))[:s].astype(bool)
    off += nbit
    coords = np.frombuffer(blob, "<f8", s * 2, off).reshape(s, 2).copy()
    off += s * 2 * 8
    region_ids = np.frombuffer(blob, "<f8", s, off).astype(np.int64)
    off += s * 8
    views = np.frombuffer(blob, "<f8", t * s * d, off).reshape(t, s, d).copy()
    return Slide(slide_id=slide_id, label=int(label), coords=coords,
                 region_ids=region_ids, roles=roles, views=views)


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(ds.manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    by_id = {s.slide_id: s for s in ds.all_slides()}
    for entry in ds.manifest["slides"]:
        with open(out / entry["file"], "wb") as fh:
            fh.write(slide_to_bytes(by_id[entry["id"]]))


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    train, test = [], []
    for entry in manifest["slides"]:
        slide = slide_from_bytes((root / entry["file"]).read_bytes(), entry["id"])
        if slide.label != entry["label"]:
            raise ValidationError(f"slide {entry['id']}: label mismatch vs manifest")
        (train if entry["split"] == "train" else test).append(slide)
    return Dataset(train=train, test=test, manifest=manifest)
