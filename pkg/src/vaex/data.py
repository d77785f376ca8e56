"""Synthetic face-sprite corpus plus loading/splitting for image folders.

The generator draws parametric faces (ellipse head, eyes, brows, mouth arc,
hair patch) at a desk-scale resolution. The class-controlling attribute is
the hair extent, whose per-class ranges are disjoint; the smile curvature is
deliberately coupled with the class so a classifier trained on the corpus
picks up an auditable bias.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

LABELS_HEADER = "#vaex-labels v1"
MANIFEST_HEADER = "#vaex-manifest v1"


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset does not follow the expected layout."""


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x 3 floats in [0, 1]
    label: int


@dataclass
class AttributeSpec:
    """Per-class ranges of the class attribute plus nuisance ranges.

    `hair_extent` drives the label and must not overlap between classes;
    `smile` ranges may overlap - their per-class shift is the built-in bias.
    """

    hair_extent: tuple = ((0.15, 0.35), (0.55, 0.80))
    smile: tuple = ((-0.40, 0.45), (0.05, 0.90))
    brow_angle: tuple = (-0.45, 0.45)
    face_tint: tuple = (0.55, 0.95)
    background: tuple = (0.05, 0.35)
    jitter: float = 1.5

    def __post_init__(self):
        (lo0, hi0), (lo1, hi1) = self.hair_extent
        if not (lo0 < hi0 and lo1 < hi1):
            raise ValueError("hair extent ranges must be increasing")
        if max(lo0, lo1) <= min(hi0, hi1):
            raise ValueError("class-controlling hair ranges must be disjoint")


@dataclass
class DatasetManifest:
    directory: Path
    ids: list
    labels: dict
    attributes: dict = field(default_factory=dict)
    skipped: int = 0


def _soft_mask(field_values: np.ndarray, sharpness: float = 4.0) -> np.ndarray:
    return np.clip(field_values * sharpness, 0.0, 1.0)


def _render_sprite(size: int, params: dict) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    scale = size / 32.0

    img = np.empty((size, size, 3))
    img[:] = params["background"]

    cx, cy = params["center"]
    rx, ry = params["radii"]
    head_field = 1.0 - ((xs - cx) / rx) ** 2 - ((ys - cy) / ry) ** 2
    head = _soft_mask(head_field)
    face_color = np.array(params["face_color"])
    img = img * (1 - head[..., None]) + head[..., None] * face_color

    # hair: top part of the head down to a class-dependent cut line
    cut = (cy - ry) + params["hair_extent"] * 2.0 * ry
    hair = head * _soft_mask((cut - ys) / scale, 2.0)
    hair_color = np.array(params["hair_color"])
    img = img * (1 - hair[..., None]) + hair[..., None] * hair_color

    dark = np.array([0.08, 0.07, 0.09])
    eye_dx, eye_dy = 3.6 * scale, 1.6 * scale
    eye_r = 1.1 * scale
    for side in (-1, 1):
        ex, ey = cx + side * eye_dx, cy - eye_dy
        eye = _soft_mask(1.0 - ((xs - ex) ** 2 + (ys - ey) ** 2) / eye_r ** 2, 2.0)
        img = img * (1 - eye[..., None]) + eye[..., None] * dark

        # brow: short bar above the eye, rotated by the nuisance angle
        angle = side * params["brow_angle"]
        bx, by = ex, ey - 2.4 * scale
        dx, dy = np.cos(angle), np.sin(angle)
        u = (xs - bx) * dx + (ys - by) * dy
        v = -(xs - bx) * dy + (ys - by) * dx
        brow = _soft_mask(1.0 - np.maximum(np.abs(u) / (2.0 * scale), np.abs(v) / (0.55 * scale)), 3.0)
        img = img * (1 - brow[..., None]) + brow[..., None] * dark

    # mouth arc: parabola with signed curvature (positive = smiling)
    mw = 3.8 * scale
    my = cy + 3.6 * scale
    rel = np.clip((xs - cx) / mw, -1.4, 1.4)
    curve_y = my + params["smile"] * 2.2 * scale * (rel ** 2 - 0.5)
    mouth = _soft_mask(1.0 - np.abs(ys - curve_y) / (0.6 * scale), 2.5)
    mouth = mouth * (np.abs(xs - cx) < mw) * head
    img = img * (1 - mouth[..., None]) + mouth[..., None] * dark

    return np.clip(img, 0.0, 1.0)


def _draw_params(rng: np.random.Generator, spec: AttributeSpec, label: int, size: int) -> dict:
    scale = size / 32.0
    hair_lo, hair_hi = spec.hair_extent[label]
    smile_lo, smile_hi = spec.smile[label]
    tint = rng.uniform(*spec.face_tint)
    return {
        "background": rng.uniform(*spec.background) + rng.uniform(-0.02, 0.02, size=3),
        "center": (size / 2.0 + rng.uniform(-spec.jitter, spec.jitter) * scale,
                   size / 2.0 + rng.uniform(-spec.jitter, spec.jitter) * scale),
        "radii": (rng.uniform(9.5, 11.5) * scale, rng.uniform(10.5, 12.5) * scale),
        "face_color": (tint, tint * rng.uniform(0.72, 0.85), tint * rng.uniform(0.55, 0.70)),
        "hair_color": rng.uniform(0.05, 0.30, size=3) * np.array([1.0, 0.8, 0.6]),
        "hair_extent": rng.uniform(hair_lo, hair_hi),
        "smile": rng.uniform(smile_lo, smile_hi),
        "brow_angle": rng.uniform(*spec.brow_angle),
    }


def generate_synthetic_dataset(n: int, seed: int, out_dir,
                               spec: AttributeSpec | None = None,
                               size: int = 32) -> DatasetManifest:
    """Write a balanced, fully seed-determined sprite corpus to `out_dir`."""
    if n < 2:
        raise ValueError(f"need n >= 2 so both classes appear, got {n}")
    spec = spec or AttributeSpec()
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    ids, labels, attributes = [], {}, {}
    for i in range(n):
        sample_id = f"s{i:05d}"
        label = i % 2
        rng = np.random.default_rng([seed, i])
        params = _draw_params(rng, spec, label, size)
        image = _render_sprite(size, params)
        Image.fromarray((image * 255.0).round().astype(np.uint8)).save(
            image_dir / f"{sample_id}.png")
        ids.append(sample_id)
        labels[sample_id] = label
        attributes[sample_id] = {
            "hair_extent": params["hair_extent"],
            "smile": params["smile"],
            "brow_angle": params["brow_angle"],
        }

    with open(out_dir / "labels.tsv", "w", encoding="utf-8") as fh:
        fh.write(LABELS_HEADER + "\n")
        for sample_id in ids:
            fh.write(f"{sample_id}\t{labels[sample_id]}\n")

    with open(out_dir / "manifest.tsv", "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        fh.write(f"#n={n}\tseed={seed}\tsize={size}\n")
        fh.write("#id\tlabel\thair_extent\tsmile\tbrow_angle\n")
        for sample_id in ids:
            attr = attributes[sample_id]
            fh.write(f"{sample_id}\t{labels[sample_id]}\t{attr['hair_extent']:.8f}"
                     f"\t{attr['smile']:.8f}\t{attr['brow_angle']:.8f}\n")

    return DatasetManifest(out_dir, ids, labels, attributes)


def _center_crop(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return arr[top:top + side, left:left + side]


def load_dataset(directory, image_size: int | None = None):
    """Load samples (center-cropped, resized, scaled to [0, 1]) ordered by id.

    Returns (samples, manifest); unreadable images are skipped with a warning
    and counted in the manifest.
    """
    directory = Path(directory)
    labels_path = directory / "labels.tsv"
    if not labels_path.exists():
        raise DatasetFormatError(f"{directory}: labels.tsv not found")
    lines = labels_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LABELS_HEADER:
        raise DatasetFormatError(f"{labels_path}: missing '{LABELS_HEADER}' header")

    labels = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        try:
            sample_id, label = line.split("\t")
            labels[sample_id] = int(label)
        except ValueError as exc:
            raise DatasetFormatError(f"{labels_path}: bad line {line!r}") from exc
    if not labels:
        raise DatasetFormatError(f"{labels_path}: no samples listed")

    samples, skipped = [], 0
    for sample_id in sorted(labels):
        path = directory / "images" / f"{sample_id}.png"
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"))
        except (OSError, SyntaxError) as exc:
            warnings.warn(f"skipping unreadable image {path}: {exc}")
            skipped += 1
            continue
        arr = _center_crop(arr)
        if image_size is not None and arr.shape[0] != image_size:
            arr = np.asarray(Image.fromarray(arr).resize((image_size, image_size),
                                                         Image.BILINEAR))
        samples.append(Sample(sample_id, arr.astype(np.float64) / 255.0, labels[sample_id]))

    manifest = DatasetManifest(directory, [s.id for s in samples],
                               {s.id: s.label for s in samples}, skipped=skipped)
    return samples, manifest


def split_dataset(labels: dict, fractions, seed: int):
    """Deterministic stratified split into len(fractions) disjoint id lists."""
    fractions = list(fractions)
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be nonnegative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    rng = np.random.default_rng(seed)
    splits = [[] for _ in fractions]
    for label in sorted(set(labels.values())):
        ids = sorted(i for i, l in labels.items() if l == label)
        rng.shuffle(ids)
        # largest-remainder allocation keeps splits exhaustive and ratios tight
        exact = [f * len(ids) for f in fractions]
        counts = [int(e) for e in exact]
        remainders = sorted(range(len(fractions)), key=lambda j: exact[j] - counts[j],
                            reverse=True)
        for j in remainders[: len(ids) - sum(counts)]:
            counts[j] += 1
        start = 0
        for j, count in enumerate(counts):
            splits[j].extend(ids[start:start + count])
            start += count
    return [sorted(s) for s in splits]


def stack_images(samples) -> torch.Tensor:
    """Samples to a (N, 3, H, W) float32 tensor."""
    arr = np.stack([s.image for s in samples]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
