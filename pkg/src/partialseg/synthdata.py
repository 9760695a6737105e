"""Deterministic 2-D multi-organ phantoms split into one fully labeled
dataset and several partially labeled ones.

On disk::

    <root>/manifest.json
    <root>/<dataset_id>/descriptor.json
    <root>/<dataset_id>/images/<sample>.pgm        16-bit intensities
    <root>/<dataset_id>/masks/<sample>.pgm         8-bit visible (merged) labels
    <root>/<dataset_id>/masks/<sample>.full.pgm    8-bit global labels
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from partialseg.errors import CorruptFile, RejectionLimitExceeded, VersionMismatch
from partialseg.label_space import (
    BACKGROUND,
    LabelSpace,
    MergePartition,
    dump_label_config,
    identity_partition,
    project_labels,
    single_organ_partition,
)

FORMAT_VERSION = 1
MAX_ATTEMPTS = 1000

ORGAN_SPACE = LabelSpace(("background", "liver", "spleen", "pancreas", "kidney_left", "kidney_right"))


@dataclass(frozen=True)
class OrganShape:
    """One organ's shape family and jitter ranges, in unit image coordinates
    (x to the right, y down)."""

    label: int
    kind: str  # ellipse | rectangle | annulus
    center: tuple[float, float]
    radii: tuple[float, float]
    intensity: float
    center_jitter: float = 0.05
    radius_jitter: float = 0.2
    angle: float = 0.0
    angle_jitter: float = 0.3
    intensity_jitter: float = 0.04
    presence: float = 0.95


DEFAULT_ORGANS = (
    OrganShape(1, "ellipse", (0.30, 0.36), (0.19, 0.14), 0.56, angle=0.3),
    OrganShape(2, "ellipse", (0.76, 0.34), (0.09, 0.11), 0.60, angle=-0.4),
    OrganShape(3, "rectangle", (0.55, 0.53), (0.15, 0.04), 0.50, angle=-0.2),
    OrganShape(4, "annulus", (0.70, 0.72), (0.07, 0.10), 0.64, angle=0.2),
    OrganShape(5, "annulus", (0.30, 0.72), (0.07, 0.10), 0.64, angle=-0.2),
)


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    organs: tuple[OrganShape, ...] = DEFAULT_ORGANS
    noise_sigma: float = 0.07
    body_intensity: float = 0.45
    air_intensity: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["organs"] = tuple(OrganShape(**{**o, "center": tuple(o["center"]), "radii": tuple(o["radii"])}) for o in d["organs"])
        return cls(**d)


@dataclass(frozen=True)
class DatasetDescriptor:
    id: str
    role: str  # "full" | "partial"
    partition: MergePartition
    sample_count: int
    n_train: int
    gain: float = 1.0
    offset: float = 0.0
    train: tuple[str, ...] = ()
    test: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ("full", "partial"):
            raise ValueError(f"role must be 'full' or 'partial', got {self.role!r}")
        if (self.role == "full") != self.partition.is_identity:
            raise ValueError(f"dataset {self.id}: role {self.role} contradicts its partition")
        if not 0 <= self.n_train <= self.sample_count:
            raise ValueError("n_train must lie in [0, sample_count]")
        if set(self.train) & set(self.test):
            raise ValueError(f"dataset {self.id}: train and test overlap")

    @property
    def kept(self) -> tuple[int, ...]:
        return self.partition.space.foreground if self.partition.is_identity else self.partition.kept

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "id": self.id,
            "role": self.role,
            "classes": list(self.partition.space.names),
            "kept": list(self.kept),
            "groups": [sorted(g) for g in self.partition.groups],
            "sample_count": self.sample_count,
            "n_train": self.n_train,
            "gain": self.gain,
            "offset": self.offset,
            "train": list(self.train),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict, space: LabelSpace) -> "DatasetDescriptor":
        if d.get("format_version") != FORMAT_VERSION:
            raise VersionMismatch(f"descriptor format {d.get('format_version')} != {FORMAT_VERSION}")
        if list(d["classes"]) != list(space.names):
            raise VersionMismatch(f"descriptor classes {d['classes']} differ from manifest {space.names}")
        kept = [int(k) for k in d["kept"]]
        if any(not 0 < k < space.num_classes for k in kept):
            raise VersionMismatch(f"descriptor {d['id']!r} keeps unknown classes {kept}")
        partition = identity_partition(space) if d["role"] == "full" else single_organ_partition(space, kept)
        if [sorted(g) for g in partition.groups] != [list(g) for g in d["groups"]]:
            raise VersionMismatch(f"descriptor {d['id']!r} groups disagree with its kept classes")
        return cls(
            id=d["id"], role=d["role"], partition=partition, sample_count=int(d["sample_count"]),
            n_train=int(d["n_train"]), gain=float(d["gain"]), offset=float(d["offset"]),
            train=tuple(d["train"]), test=tuple(d["test"]),
        )


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float64 in [0, 1], quantized to 16 bits
    gt_full: np.ndarray  # global labels
    gt_visible: np.ndarray  # labels in the dataset's merged space

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.id == other.id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.gt_full, other.gt_full)
            and np.array_equal(self.gt_visible, other.gt_visible)
        )


@dataclass
class Suite:
    space: LabelSpace
    spec: PhantomSpec
    descriptors: list[DatasetDescriptor]
    samples: dict[str, list[Sample]] = field(default_factory=dict)

    def descriptor(self, ds_id: str) -> DatasetDescriptor:
        for d in self.descriptors:
            if d.id == ds_id:
                return d
        raise KeyError(ds_id)

    def split(self, ds_id: str, which: str) -> list[Sample]:
        d = self.descriptor(ds_id)
        wanted = set(d.train if which == "train" else d.test)
        return [s for s in self.samples[ds_id] if s.id in wanted]


def default_descriptors(
    space: LabelSpace = ORGAN_SPACE, full_count: int = 30, full_train: int = 24, partial_count: int = 40, partial_train: int = 32
) -> list[DatasetDescriptor]:
    """F plus P1..P4 keeping liver, spleen, pancreas and both kidneys."""
    out = [DatasetDescriptor("F", "full", identity_partition(space), full_count, full_train)]
    kept_sets = [(1,), (2,), (3,), (4, 5)]
    # per-dataset scanner calibration; F is the reference
    domains = [(1.15, -0.06), (0.88, 0.05), (1.08, 0.04), (0.92, -0.04)]
    for i, (kept, (gain, offset)) in enumerate(zip(kept_sets, domains), start=1):
        out.append(
            DatasetDescriptor(f"P{i}", "partial", single_organ_partition(space, kept), partial_count, partial_train, gain, offset)
        )
    return out


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def dataset_seed(master: int, index: int) -> int:
    s = master & 0xFFFFFFFFFFFFFFFF
    for _ in range(index + 1):
        s = splitmix64(s)
    return s


# Rasterization ---------------------------------------------------------------


def _grid(size):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c)  # xx, yy


def _shape_mask(kind, xx, yy, cx, cy, rx, ry, angle):
    ca, sa = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * ca + (yy - cy) * sa) / rx
    v = (-(xx - cx) * sa + (yy - cy) * ca) / ry
    if kind == "ellipse":
        return u**2 + v**2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if kind == "annulus":
        r2 = u**2 + v**2
        # kidney-like: ring with a notch-free thick wall
        return (r2 <= 1.0) & (r2 >= 0.12)
    raise ValueError(f"unknown shape kind {kind!r}")


def render_phantom(spec: PhantomSpec, rng: np.random.Generator, gain: float = 1.0, offset: float = 0.0):
    """Draw one image and its global label mask."""
    size = spec.image_size
    xx, yy = _grid(size)
    body = ((xx - 0.5) / 0.47) ** 2 + ((yy - 0.52) / 0.44) ** 2 <= 1.0
    labels = np.zeros((size, size), dtype=np.int64)
    intensity = np.where(body, spec.body_intensity, spec.air_intensity)
    occupied = ~body
    attempts = 0
    for organ in spec.organs:
        present = rng.random() < organ.presence
        while True:
            attempts += 1
            if attempts > MAX_ATTEMPTS:
                raise RejectionLimitExceeded(f"could not place disjoint organs after {MAX_ATTEMPTS} attempts")
            cx = organ.center[0] + rng.uniform(-1, 1) * organ.center_jitter
            cy = organ.center[1] + rng.uniform(-1, 1) * organ.center_jitter
            scale = 1.0 + rng.uniform(-1, 1) * organ.radius_jitter
            rx, ry = organ.radii[0] * scale, organ.radii[1] * scale * (1.0 + rng.uniform(-0.1, 0.1))
            angle = organ.angle + rng.uniform(-1, 1) * organ.angle_jitter
            value = organ.intensity + rng.normal(0.0, organ.intensity_jitter)
            mask = _shape_mask(organ.kind, xx, yy, cx, cy, rx, ry, angle)
            if not mask.any():
                continue
            if not (mask & occupied).any():
                break
        if present:
            labels[mask] = organ.label
            intensity = np.where(mask, value, intensity)
            occupied = occupied | mask
    image = gain * intensity + offset + rng.normal(0.0, spec.noise_sigma, size=(size, size))
    image = quantize(image)
    return image, labels


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


def build_suite(spec: PhantomSpec, descriptors: Sequence[DatasetDescriptor] | None = None) -> Suite:
    """Generate every dataset in memory. Same spec (incl. seed) -> same arrays."""
    if descriptors is None:
        descriptors = default_descriptors()
    space = descriptors[0].partition.space
    suite = Suite(space, spec, [])
    for index, d in enumerate(descriptors):
        rng = np.random.default_rng(dataset_seed(spec.seed, index))
        samples = []
        for k in range(d.sample_count):
            image, gt = render_phantom(spec, rng, d.gain, d.offset)
            samples.append(Sample(f"{d.id}_{k:04d}", image, gt, project_labels(gt, d.partition)))
        order = rng.permutation(d.sample_count)
        train = tuple(sorted(samples[i].id for i in order[: d.n_train]))
        test = tuple(sorted(samples[i].id for i in order[d.n_train :]))
        suite.descriptors.append(replace(d, train=train, test=test))
        suite.samples[d.id] = samples
    return suite


def sensitivity_split(suite: Suite, n_full: int) -> Suite:
    """Move all but ``n_full`` of F's training samples into single-label
    datasets S1..S4 (round robin over the partial datasets' label sets)."""
    full = next(d for d in suite.descriptors if d.role == "full")
    partials = [d for d in suite.descriptors if d.role == "partial"]
    if not 0 <= n_full <= len(full.train):
        raise ValueError(f"n_full must lie in [0, {len(full.train)}]")
    keep, moved = full.train[:n_full], full.train[n_full:]
    by_id = {s.id: s for s in suite.samples[full.id]}
    out = Suite(suite.space, suite.spec, [], dict(suite.samples))
    for d in suite.descriptors:
        out.descriptors.append(replace(d, train=keep, n_train=len(keep)) if d is full else d)
    for j, p in enumerate(partials):
        ids = moved[j :: len(partials)]
        if not ids:
            continue
        new_id = f"S{j + 1}"
        out.samples[new_id] = [
            Sample(f"{sid}", by_id[sid].image, by_id[sid].gt_full, project_labels(by_id[sid].gt_full, p.partition))
            for sid in ids
        ]
        out.descriptors.append(
            DatasetDescriptor(new_id, "partial", p.partition, len(ids), len(ids), full.gain, full.offset, tuple(ids), ())
        )
    return out


# PGM I/O ---------------------------------------------------------------------


def write_pgm(path, array: np.ndarray, maxval: int) -> None:
    h, w = array.shape
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.asarray(array).astype(dtype).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        magic, dims, maxval, data = raw.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
        maxval = int(maxval)
    except ValueError as exc:
        raise CorruptFile(f"{path}: bad PGM header") from exc
    if magic != b"P5" or not 0 < maxval < 65536:
        raise CorruptFile(f"{path}: not a binary PGM")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    if len(data) != w * h * dtype.itemsize:
        raise CorruptFile(f"{path}: expected {w * h * dtype.itemsize} data bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(h, w)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_suite(suite: Suite, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for d in suite.descriptors:
        ds_dir = root / d.id
        (ds_dir / "images").mkdir(parents=True, exist_ok=True)
        (ds_dir / "masks").mkdir(parents=True, exist_ok=True)
        for s in suite.samples[d.id]:
            write_pgm(ds_dir / "images" / f"{s.id}.pgm", np.round(s.image * 65535.0), 65535)
            write_pgm(ds_dir / "masks" / f"{s.id}.pgm", s.gt_visible, 255)
            write_pgm(ds_dir / "masks" / f"{s.id}.full.pgm", s.gt_full, 255)
        _write_json(ds_dir / "descriptor.json", {**d.to_dict(), "samples": [s.id for s in suite.samples[d.id]]})
    manifest = {
        "format_version": FORMAT_VERSION,
        "label_config": dump_label_config(suite.space, {d.id: d.partition for d in suite.descriptors}),
        "datasets": [d.id for d in suite.descriptors],
        "phantom": suite.spec.to_dict(),
    }
    _write_json(root / "manifest.json", manifest)
    return root


def generate(spec: PhantomSpec, descriptors: Sequence[DatasetDescriptor] | None, root) -> Suite:
    suite = build_suite(spec, descriptors)
    write_suite(suite, root)
    return suite


def load(root) -> Suite:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{root}: unreadable manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"manifest format {manifest.get('format_version')} != {FORMAT_VERSION}")
    space = LabelSpace(tuple(manifest["label_config"]["classes"]))
    suite = Suite(space, PhantomSpec.from_dict(manifest["phantom"]), [])
    for ds_id in manifest["datasets"]:
        ds_dir = root / ds_id
        try:
            doc = json.loads((ds_dir / "descriptor.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptFile(f"{ds_dir}: unreadable descriptor") from exc
        d = DatasetDescriptor.from_dict(doc, space)
        samples = []
        for sid in doc["samples"]:
            image = read_pgm(ds_dir / "images" / f"{sid}.pgm").astype(np.float64) / 65535.0
            visible = read_pgm(ds_dir / "masks" / f"{sid}.pgm").astype(np.int64)
            full = read_pgm(ds_dir / "masks" / f"{sid}.full.pgm").astype(np.int64)
            if full.max(initial=0) >= space.num_classes or visible.max(initial=0) >= d.partition.num_groups:
                raise CorruptFile(f"{sid}: mask labels out of range")
            if not np.array_equal(project_labels(full, d.partition), visible):
                raise CorruptFile(f"{sid}: visible mask is not the projection of the full mask")
            samples.append(Sample(sid, image, full, visible))
        suite.descriptors.append(d)
        suite.samples[ds_id] = samples
    return suite


def manifest_hash(root) -> str:
    """Content hash of every file under a generated data tree."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]
