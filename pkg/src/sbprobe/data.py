"""Synthetic face-proxy dataset and CSV manifests.

Each subject is an elliptical "face" with a skin tone, an identity texture
(low-frequency sinusoids plus eye geometry) and a binary attribute rendered
inside the face: class ``m`` darkens the lower face, class ``f`` adds a
reddish mouth region. Backgrounds are blue-grey so a simple colour threshold
separates face from background. Images are quantised to 8 bits, exactly as
they are after a PNG round trip.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .imaging import FaceImage, load_image, quantize, save_image

TOY_CLASSES = ("f", "m")
MANIFEST_COLUMNS = ("image_path", "subject_id", "attribute", "partition")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    subject_id: str
    attribute: str
    partition: str = ""


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    name: str = "dataset"
    root: Path | None = None

    def resolve(self, rec: ManifestRecord) -> Path:
        p = Path(rec.image_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, rec: ManifestRecord) -> FaceImage:
        return load_image(self.resolve(rec), source_id=rec.image_path)

    def classes(self) -> tuple[str, ...]:
        return tuple(sorted({r.attribute for r in self.records}))


def read_manifest(path: str | Path, name: str | None = None) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_path", "subject_id", "attribute"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigurationError(f"{path}: manifest lacks columns {sorted(missing)}")
        recs = [ManifestRecord(r["image_path"], r["subject_id"], r["attribute"], (r.get("partition") or "").strip())
                for r in reader]
    return DatasetManifest(recs, name or path.stem, path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            w.writerow([r.image_path, r.subject_id, r.attribute, r.partition])
    return path


# ---------------------------------------------------------------------------
# synthetic face proxies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Subject:
    sid: str
    label: int
    skin: np.ndarray
    waves: np.ndarray  # rows of (freq_y, freq_x, phase, amplitude)
    eye_dx: float
    eye_y: float
    eye_r: float
    ry: float
    rx: float
    attr_strength: float


def _make_subject(rng: np.random.Generator, sid: str, label: int, size: int) -> _Subject:
    r = rng.uniform(0.72, 0.88)
    skin = np.array([r, r * rng.uniform(0.68, 0.78), r * rng.uniform(0.46, 0.56)])
    waves = np.column_stack([
        rng.uniform(-3.0, 3.0, 3), rng.uniform(-3.0, 3.0, 3),
        rng.uniform(0, 2 * np.pi, 3), rng.uniform(0.04, 0.08, 3),
    ])
    strength = rng.uniform(0.18, 0.32) if label == 1 else rng.uniform(0.10, 0.20)
    return _Subject(sid, label, skin, waves,
                    eye_dx=rng.uniform(0.10, 0.15) * size, eye_y=rng.uniform(-0.14, -0.08) * size,
                    eye_r=rng.uniform(0.035, 0.06) * size,
                    ry=rng.uniform(0.34, 0.39) * size, rx=rng.uniform(0.27, 0.31) * size,
                    attr_strength=strength)


def _render(s: _Subject, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-1.0, 1.0)
    cx = size / 2 + rng.uniform(-1.0, 1.0)
    dy, dx = yy - cy, xx - cx

    g = rng.uniform(0.2, 0.6)
    bg_col = np.array([g * rng.uniform(0.75, 0.95), g * rng.uniform(0.9, 1.05), g * rng.uniform(1.1, 1.35)])
    ramp = rng.uniform(-0.08, 0.08) * (yy / size - 0.5) + rng.uniform(-0.08, 0.08) * (xx / size - 0.5)
    img = bg_col[None, None, :] + ramp[:, :, None]

    face = (dy / s.ry) ** 2 + (dx / s.rx) ** 2 <= 1.0
    tex = np.ones((size, size))
    for fy, fx, ph, amp in s.waves:
        tex += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) / size + ph)
    skin = s.skin[None, None, :] * tex[:, :, None] * rng.uniform(0.93, 1.07)

    for side in (-1.0, 1.0):
        eye = (dy - s.eye_y) ** 2 + (dx - side * s.eye_dx) ** 2 <= s.eye_r**2
        skin[eye] *= 0.45

    lower = face & (dy > 0.12 * size)
    if s.label == 1:
        skin[lower] *= 1.0 - s.attr_strength
    else:
        mouth = ((dy - 0.2 * size) / (0.05 * size)) ** 2 + (dx / (0.12 * size)) ** 2 <= 1.0
        skin[mouth] += np.array([s.attr_strength, -0.5 * s.attr_strength, -0.3 * s.attr_strength])
    img[face] = skin[face]
    img += rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class ToySample:
    image: FaceImage
    subject_id: str
    label: int
    face_mask: np.ndarray | None = None


def generate_toy_dataset(n_subjects: int = 100, images_per_subject: int = 5, size: int = 32,
                         seed: int = 0) -> list[ToySample]:
    """Deterministic class-balanced face-proxy set (half the subjects per class)."""
    if n_subjects < 2 or images_per_subject < 1:
        raise ConfigurationError("need at least 2 subjects and 1 image per subject")
    if size < 16:
        raise ConfigurationError("image size must be at least 16 px")
    rng = np.random.default_rng(seed)
    labels = np.array([i % 2 for i in range(n_subjects)])
    out = []
    for i in range(n_subjects):
        sid = f"s{i:04d}"
        subj = _make_subject(rng, sid, int(labels[i]), size)
        for j in range(images_per_subject):
            px = _render(subj, rng, size)
            img = quantize(FaceImage(px, source_id=f"{sid}_{j:02d}"))
            out.append(ToySample(img, sid, subj.label))
    return out


def write_toy_dataset(out_dir: str | Path, n_subjects: int = 100, images_per_subject: int = 5,
                      size: int = 32, seed: int = 0) -> DatasetManifest:
    out_dir = Path(out_dir)
    samples = generate_toy_dataset(n_subjects, images_per_subject, size, seed)
    recs = []
    for s in samples:
        rel = Path("images") / f"{s.image.source_id}.png"
        save_image(s.image, out_dir / rel)
        recs.append(ManifestRecord(rel.as_posix(), s.subject_id, TOY_CLASSES[s.label]))
    manifest = DatasetManifest(recs, "toy", out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def manifest_from_samples(samples: Sequence[ToySample], name: str = "toy") -> DatasetManifest:
    """In-memory manifest whose image paths are the samples' source ids."""
    return DatasetManifest([ManifestRecord(s.image.source_id, s.subject_id, TOY_CLASSES[s.label])
                            for s in samples], name)
