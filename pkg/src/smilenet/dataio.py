"""Manifests, PGM images, preprocessing, splits and the synthetic corpus.

Landmarks and boxes use pixel-centre coordinates: pixel ``(row, col)`` sits
at ``(x=col, y=row)``, so the full box of an ``h x w`` image is
``Box(0, 0, w - 1, h - 1)``.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DataError, PGMMagicError, PGMMaxvalError, PGMTruncatedError,
                     ShapeError)

MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ["path", "label", "any_au", "subject_id", "landmarks"]


@dataclass(frozen=True)
class Record:
    image_path: str
    label: int
    any_au: int | None = None
    subject_id: str | None = None
    landmarks: tuple | None = None  # ((x, y), ...)


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0
    mode: str = "frame-random"

    def __post_init__(self):
        ratios = (self.train, self.val, self.test)
        if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be positive and sum to 1, got {ratios}")
        if self.mode not in ("frame-random", "subject-grouped"):
            raise ConfigError(f"unknown split mode {self.mode!r}")


# --------------------------------------------------------------------------
# manifest CSV


def _format_landmarks(points):
    if points is None:
        return ""
    return ";".join(f"{_num(x)}:{_num(y)}" for x, y in points)


def _num(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _parse_landmarks(text, where):
    text = text.strip()
    if not text:
        return None
    try:
        return tuple((float(x), float(y)) for x, y in (pt.split(":") for pt in text.split(";")))
    except ValueError:
        raise DataError(f"{where}: malformed landmarks {text!r}") from None


def _parse_flag(text, name, where, optional):
    text = text.strip()
    if text == "" and optional:
        return None
    if text not in ("0", "1"):
        raise DataError(f"{where}: {name} must be 0 or 1, got {text!r}")
    return int(text)


def read_manifest(path):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            records.append(Record(
                image_path=row["path"],
                label=_parse_flag(row["label"], "label", where, optional=False),
                any_au=_parse_flag(row["any_au"], "any_au", where, optional=True),
                subject_id=row["subject_id"] or None,
                landmarks=_parse_landmarks(row["landmarks"], where),
            ))
    validate_manifest(records)
    return records


def validate_manifest(records):
    seen = set()
    n_points = None
    for r in records:
        if r.image_path in seen:
            raise DataError(f"duplicate image path {r.image_path!r}")
        seen.add(r.image_path)
        if r.label not in (0, 1):
            raise DataError(f"{r.image_path}: label must be 0 or 1")
        if r.landmarks is not None:
            if n_points is None:
                n_points = len(r.landmarks)
            elif len(r.landmarks) != n_points:
                raise DataError(f"{r.image_path}: {len(r.landmarks)} landmarks, expected {n_points}")


def write_manifest(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([
                r.image_path, r.label, "" if r.any_au is None else r.any_au,
                r.subject_id or "", _format_landmarks(r.landmarks),
            ])


# --------------------------------------------------------------------------
# PGM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode binary PGM bytes into a float image in [0, 1]."""
    if data[:2] != b"P5":
        raise PGMMagicError(f"not a binary PGM: magic {data[:2]!r}")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PGMTruncatedError(f"header ends before {name}")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise PGMTruncatedError(f"bad {name} field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if maxval < 1 or maxval > 255:
        raise PGMMaxvalError(f"maxval {maxval} outside 1..255")
    if width < 1 or height < 1:
        raise PGMTruncatedError(f"bad dimensions {width}x{height}")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    need = width * height
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise PGMTruncatedError(f"raster has {len(raster)} bytes, expected {need}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def encode_pgm(image) -> bytes:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        raise ShapeError(f"PGM images are 2-D, got shape {img.shape}")
    h, w = img.shape
    pixels = np.rint(img * 255.0).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def save_pgm(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))


# --------------------------------------------------------------------------
# preprocessing


def landmark_box(points, indices):
    try:
        pts = np.array([points[i] for i in indices], dtype=np.float64)
    except IndexError:
        raise DataError(f"mouth landmark index out of range for {len(points)} points") from None
    return Box(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def global_mouth_box(records, mouth_indices, margin=0.0, image_shape=None):
    """One box covering the mouth landmarks of every record.

    The union of the per-image boxes is grown by ``margin`` times its
    width/height on each side, snapped outward to whole pixels and, when
    ``image_shape = (h, w)`` is given, clamped to the image.
    """
    if not records:
        raise DataError("empty manifest")
    if not mouth_indices:
        raise DataError("no mouth landmark indices given")
    boxes = []
    for r in records:
        if r.landmarks is None:
            raise DataError(f"{r.image_path}: record has no landmarks")
        boxes.append(landmark_box(r.landmarks, mouth_indices))
    x0 = min(b.x0 for b in boxes)
    y0 = min(b.y0 for b in boxes)
    x1 = max(b.x1 for b in boxes)
    y1 = max(b.y1 for b in boxes)
    dx, dy = margin * (x1 - x0), margin * (y1 - y0)
    x0, y0 = math.floor(x0 - dx), math.floor(y0 - dy)
    x1, y1 = math.ceil(x1 + dx), math.ceil(y1 + dy)
    if image_shape is not None:
        h, w = image_shape
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
    return Box(x0, y0, x1, y1)


def full_box(image):
    h, w = np.shape(image)
    return Box(0, 0, w - 1, h - 1)


def _sample_coords(lo, hi, n):
    if n == 1:
        return np.array([(lo + hi) / 2.0])
    # (i * span) / (n - 1) keeps integer positions exact when n - 1 == span
    return lo + (np.arange(n) * (hi - lo)) / (n - 1)


def crop_resize(image, box: Box, target_h, target_w):
    """Corner-aligned bilinear resampling of ``box`` to ``target_h x target_w``.

    The output corners sample the box corners exactly. There is no
    anti-alias prefilter.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if box.x1 < box.x0 or box.y1 < box.y0:
        raise DataError(f"degenerate box {box}")
    if box.x0 < 0 or box.y0 < 0 or box.x1 > w - 1 or box.y1 > h - 1:
        raise DataError(f"box {box} lies outside the {h}x{w} image")
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"target size must be positive, got {target_h}x{target_w}")
    ys = _sample_coords(box.y0, box.y1, target_h)
    xs = _sample_coords(box.x0, box.x1, target_w)
    r0 = np.floor(ys).astype(int)
    c0 = np.floor(xs).astype(int)
    fy = (ys - r0)[:, None]
    fx = (xs - c0)[None, :]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[np.ix_(r0, c0)] * (1 - fx) + img[np.ix_(r0, c1)] * fx
    bottom = img[np.ix_(r1, c0)] * (1 - fx) + img[np.ix_(r1, c1)] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# splits and reduction


def _count(ratio, n):
    return int(math.floor(ratio * n + 1e-9))


def split(records, spec: SplitSpec = SplitSpec()):
    """Partition records into (train, val, test) lists.

    Frame-random mode shuffles with ``spec.seed`` and slices: the first
    ``floor(val * n)`` go to val, the next ``floor(test * n)`` to test, the
    rest to train. Subject-grouped mode assigns whole subjects.
    """
    records = list(records)
    n = len(records)
    if n == 0:
        raise DataError("cannot split an empty manifest")
    if n < 5:
        raise DataError(f"need at least 5 records to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    n_val, n_test = _count(spec.val, n), _count(spec.test, n)
    if spec.mode == "frame-random":
        order = rng.permutation(n)
        val = [records[i] for i in order[:n_val]]
        test = [records[i] for i in order[n_val:n_val + n_test]]
        train = [records[i] for i in order[n_val + n_test:]]
        return train, val, test

    groups = {}
    for r in records:
        if r.subject_id is None:
            raise DataError(f"{r.image_path}: subject-grouped split needs subject_id on every record")
        groups.setdefault(r.subject_id, []).append(r)
    subjects = sorted(groups)
    subjects = [subjects[i] for i in rng.permutation(len(subjects))]
    chosen = {"val": [], "test": []}
    remaining = list(subjects)
    for name, target in (("val", n_val), ("test", n_test)):
        size = 0
        # greedily take subjects while that moves the split size toward its target
        for s in list(remaining):
            if size == 0 or abs(size + len(groups[s]) - target) < abs(size - target):
                chosen[name].append(s)
                size += len(groups[s])
                remaining.remove(s)
            if size >= target:
                break
    members = {s: name for name in chosen for s in chosen[name]}
    parts = {"train": [], "val": [], "test": []}
    for r in records:
        parts[members.get(r.subject_id, "train")].append(r)
    return parts["train"], parts["val"], parts["test"]


def reduce_no_au(records, keep_fraction, seed=0):
    """Keep every record with an action unit and ``floor(keep_fraction * m)`` of the m without."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    records = list(records)
    missing = [r.image_path for r in records if r.any_au is None]
    if missing:
        raise DataError(f"{len(missing)} records lack the any_au flag, e.g. {missing[0]!r}")
    no_au = [i for i, r in enumerate(records) if r.any_au == 0]
    keep_n = _count(keep_fraction, len(no_au))
    rng = np.random.default_rng(seed)
    kept = set(rng.choice(no_au, size=keep_n, replace=False).tolist()) if keep_n else set()
    return [r for i, r in enumerate(records) if r.any_au == 1 or i in kept]


# --------------------------------------------------------------------------
# corpora on disk


def write_corpus(out_dir, records, images):
    """Write one PGM per record plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for r, img in zip(records, images):
            save_pgm(out_dir / r.image_path, img)
        write_manifest(out_dir / MANIFEST_NAME, records)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out_dir}: {exc}") from exc
    return out_dir / MANIFEST_NAME


def resolve_manifest(data):
    """Accept a corpus directory or a manifest path; return the manifest path."""
    data = Path(data)
    if data.is_dir():
        data = data / MANIFEST_NAME
    if not data.is_file():
        raise DataError(f"no manifest at {data}")
    return data


def load_corpus(data):
    """Read a manifest and its images; paths resolve relative to the manifest."""
    manifest = resolve_manifest(data)
    records = read_manifest(manifest)
    base = manifest.parent
    images = []
    for r in records:
        p = Path(r.image_path)
        try:
            images.append(load_pgm(p if p.is_absolute() else base / p))
        except OSError as exc:
            raise DataError(f"cannot read image {r.image_path}: {exc}") from exc
    return records, images


def stack_images(images):
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise DataError(f"images have differing sizes: {sorted(shapes)}")
    return np.stack(images)[:, None]


# --------------------------------------------------------------------------
# synthetic corpus

SYNTH_MIN_DIM = 16
# landmark order in synthetic manifests: left corner, vertex, right corner
SYNTH_MOUTH_INDICES = (0, 1, 2)


def render_arc(h, w, rng, smile, noise_sigma):
    """One noisy image holding a bright anti-aliased parabolic arc.

    ``smile=True`` draws a U shape on screen (corners up), otherwise an
    inverted U. Returns ``(image, landmarks)`` with the arc's corner and
    vertex points.
    """
    half = rng.uniform(0.25, 0.38) * w
    depth = rng.uniform(0.15, 0.3) * h
    xc = w / 2 + rng.uniform(-0.08, 0.08) * w
    yc = h / 2 + rng.uniform(-0.08, 0.08) * h
    thickness = rng.uniform(1.5, 3.0)
    contrast = rng.uniform(0.4, 0.7)
    background = rng.uniform(0.15, 0.35)
    # image y grows downward; a smile's vertex is its lowest point on screen
    sign = -1.0 if smile else 1.0
    curv = depth / half ** 2
    vertex_y = yc + depth / 2 if smile else yc - depth / 2

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - xc
    curve = vertex_y + sign * curv * dx ** 2
    slope = 2 * sign * curv * dx
    dist = np.abs(yy - curve) / np.sqrt(1 + slope ** 2)
    ink = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)
    ink *= np.clip(half + 0.5 - np.abs(dx), 0.0, 1.0)
    img = background + contrast * ink + rng.normal(0.0, noise_sigma, size=(h, w))
    corner_y = vertex_y + sign * depth
    landmarks = ((xc - half, corner_y), (xc, vertex_y), (xc + half, corner_y))
    return np.clip(img, 0.0, 1.0), landmarks


def synth_generate(n, image_h=32, image_w=32, noise_sigma=0.1, seed=0, n_subjects=10):
    """Balanced synthetic smile corpus: ``(records, images)``.

    Half the images are smiles (label 1). Every smile has ``any_au = 1``;
    non-smiles get ``any_au = 1`` with probability 1/2 so the no-AU
    reduction has something to act on.
    """
    if n < 2 or n % 2:
        raise ConfigError(f"n must be even and >= 2 for balanced classes, got {n}")
    if image_h < SYNTH_MIN_DIM or image_w < SYNTH_MIN_DIM:
        raise ConfigError(f"synthetic images need both dims >= {SYNTH_MIN_DIM}, got {image_h}x{image_w}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat([0, 1], n // 2))
    width = len(str(n - 1))
    records, images = [], []
    for i, label in enumerate(labels):
        img, marks = render_arc(image_h, image_w, rng, bool(label), noise_sigma)
        any_au = 1 if label else int(rng.random() < 0.5)
        subject = f"s{rng.integers(n_subjects):02d}"
        marks = tuple((round(x, 3), round(y, 3)) for x, y in marks)
        records.append(Record(f"img_{i:0{width}d}.pgm", int(label), any_au, subject, marks))
        images.append(img)
    return records, images


def split_arrays(records, images, spec: SplitSpec):
    """Split a loaded corpus into three ``(images, labels)`` array pairs."""
    index = {r.image_path: i for i, r in enumerate(records)}
    out = []
    for part in split(records, spec):
        idx = [index[r.image_path] for r in part]
        x = stack_images([images[i] for i in idx]) if idx else np.zeros((0, 1) + np.shape(images[0]))
        out.append((x, np.array([records[i].label for i in idx], dtype=np.int64)))
    return out


def rename_records(records, prefix="img_"):
    width = len(str(max(len(records) - 1, 0)))
    return [replace(r, image_path=f"{prefix}{i:0{width}d}.pgm") for i, r in enumerate(records)]
