"""Datasets: sparsely annotated samples, manifests, lung cropping, dihedral
augmentation, the entropy-maximizing fold splitter, and a procedural texture
mosaic generator that stands in for clinical data at desk scale.

A sample is one single-region image crop (1 x H x W float32 intensities), a
label map (H x W uint8, 255 = unlabeled), and a region-of-interest mask.
Manifests are JSON files listing per-case file paths (TSR1 tensors, or PGM
images via the import path) plus per-case class pixel counts, which are
validated against the label files on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, FormatError, ParameterError
from .rng import substream
from .tensor import UNLABELED, read_tensor_file, write_tensor_file

CROP_MARGIN = 32


@dataclass
class SampleRecord:
    case_id: str
    image: np.ndarray   # 1 x H x W float32
    labels: np.ndarray  # H x W uint8, 255 = unlabeled
    roi: np.ndarray     # H x W bool

    def validate(self, num_classes: int | None = None) -> "SampleRecord":
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"{self.case_id}: image must be 1 x H x W, got {self.image.shape}")
        hw = self.image.shape[1:]
        if self.labels.shape != hw or self.roi.shape != hw:
            raise DataError(f"{self.case_id}: labels/roi shapes do not match image {hw}")
        if ((self.labels != UNLABELED) & ~self.roi).any():
            raise DataError(f"{self.case_id}: labeled pixels outside the roi")
        if num_classes is not None:
            bad = (self.labels != UNLABELED) & (self.labels >= num_classes)
            if bad.any():
                raise DataError(f"{self.case_id}: label codes exceed {num_classes} classes")
        return self

    def labeled_class_counts(self, num_classes: int) -> np.ndarray:
        mask = (self.labels != UNLABELED) & self.roi
        return np.bincount(self.labels[mask].astype(np.int64), minlength=num_classes)


# ------------------------------------------------------------------ dihedral


def apply_dihedral(arr: np.ndarray, op_index: int) -> np.ndarray:
    """One of the 8 flip/rotate symmetries over the last two axes.

    op 0..3 rotate counterclockwise by op quarter turns; 4..7 flip
    horizontally first. op 0 is the identity.
    """
    if not 0 <= op_index <= 7:
        raise ParameterError(f"dihedral op index must be 0..7, got {op_index}")
    out = arr
    if op_index >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(np.rot90(out, op_index % 4, axes=(-2, -1)))


def inverse_dihedral(op_index: int) -> int:
    """The op that undoes `op_index` (probed once on a marker grid)."""
    marker = np.arange(6, dtype=np.int64).reshape(2, 3)
    fwd = apply_dihedral(marker, op_index)
    for candidate in range(8):
        if np.array_equal(apply_dihedral(fwd, candidate), marker):
            return candidate
    raise AssertionError("dihedral group is closed; unreachable")


def augment(sample: SampleRecord, op_index: int) -> SampleRecord:
    """Apply the same dihedral op to image, labels, and roi; label values
    are untouched, so per-class pixel counts are preserved exactly."""
    return SampleRecord(
        case_id=sample.case_id,
        image=apply_dihedral(sample.image, op_index),
        labels=apply_dihedral(sample.labels, op_index),
        roi=apply_dihedral(sample.roi, op_index),
    )


# ------------------------------------------------------------------ cropping


def crop_lungs(image: np.ndarray, labels: np.ndarray, lung_mask: np.ndarray,
               margin: int = CROP_MARGIN, keep_unannotated: bool = False,
               case_id: str = "case") -> list[SampleRecord]:
    """One record per connected region of the mask, cropped to the region's
    bounding box expanded by `margin` pixels per side (clipped to the image).

    The roi of each record covers the whole expanded box. Records whose crop
    contains no labeled pixel are dropped unless `keep_unannotated`.
    """
    if image.ndim != 3 or image.shape[0] != 1:
        raise DataError(f"image must be 1 x H x W, got {image.shape}")
    mask = lung_mask.astype(bool)
    if not mask.any():
        raise DataError("empty mask: no region to crop")
    components, count = ndimage.label(mask)
    records = []
    for idx, sl in enumerate(ndimage.find_objects(components, count)):
        y0 = max(sl[0].start - margin, 0)
        y1 = min(sl[0].stop + margin, image.shape[1])
        x0 = max(sl[1].start - margin, 0)
        x1 = min(sl[1].stop + margin, image.shape[2])
        rec = SampleRecord(
            case_id=f"{case_id}-{idx}",
            image=np.ascontiguousarray(image[:, y0:y1, x0:x1]),
            labels=np.ascontiguousarray(labels[y0:y1, x0:x1]),
            roi=np.ones((y1 - y0, x1 - x0), dtype=bool),
        )
        if keep_unannotated or (rec.labels != UNLABELED).any():
            records.append(rec.validate())
    return records


# ----------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    case_id: str
    image_path: Path
    labels_path: Path
    roi_path: Path
    class_counts: np.ndarray


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[ManifestEntry]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def case_ids(self) -> list[str]:
        return [e.case_id for e in self.entries]

    def entry(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise DataError(f"unknown case_id {case_id!r}")


def _read_map(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    return read_tensor_file(path)


def load_record(manifest: DatasetManifest, case_id: str) -> SampleRecord:
    entry = manifest.entry(case_id)
    image = _read_map(entry.image_path).astype(np.float32)
    if image.ndim == 2:
        image = image[None]
    labels = _read_map(entry.labels_path)
    if labels.dtype != np.uint8:
        raise DataError(f"{case_id}: labels must be 8-bit, got {labels.dtype}")
    roi = _read_map(entry.roi_path)
    return SampleRecord(case_id, image, labels, roi.astype(bool)).validate(manifest.num_classes)


def load_manifest(path) -> DatasetManifest:
    """Read a manifest and validate its per-case class pixel counts against
    the label files (filling them in when absent)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable manifest: {exc}") from exc
    for key in ("classes", "records"):
        if key not in doc:
            raise FormatError(f"manifest missing field {key!r}")
    classes = list(doc["classes"])
    root = path.parent
    entries = []
    seen = set()
    for rec in doc["records"]:
        case_id = rec["case_id"]
        if case_id in seen:
            raise DataError(f"duplicate case_id {case_id!r}")
        seen.add(case_id)
        entries.append(
            ManifestEntry(
                case_id=case_id,
                image_path=root / rec["image"],
                labels_path=root / rec["labels"],
                roi_path=root / rec["roi"],
                class_counts=np.asarray(rec.get("class_counts", []), dtype=np.int64),
            )
        )
    manifest = DatasetManifest(classes=classes, entries=entries)
    for entry in manifest.entries:
        sample = load_record(manifest, entry.case_id)
        counts = sample.labeled_class_counts(manifest.num_classes)
        if entry.class_counts.size:
            if not np.array_equal(entry.class_counts, counts):
                raise DataError(
                    f"{entry.case_id}: stored class counts {entry.class_counts.tolist()} "
                    f"do not match label file {counts.tolist()}"
                )
        else:
            entry.class_counts = counts
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "classes": manifest.classes,
        "records": [
            {
                "case_id": e.case_id,
                "image": e.image_path.name,
                "labels": e.labels_path.name,
                "roi": e.roi_path.name,
                "class_counts": e.class_counts.tolist(),
            }
            for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(doc, indent=2))


def class_counts(manifest: DatasetManifest, case_ids=None) -> np.ndarray:
    """Labeled pixel counts per class over a subset of cases (all by default)."""
    total = np.zeros(manifest.num_classes, dtype=np.int64)
    wanted = set(manifest.case_ids() if case_ids is None else case_ids)
    for entry in manifest.entries:
        if entry.case_id in wanted:
            total += entry.class_counts
    return total


# ----------------------------------------------------------------- splitter


@dataclass
class SplitAssignment:
    fold_of_case: dict[str, int]
    fold_class_counts: np.ndarray  # folds x classes
    entropy_per_fold: np.ndarray
    mean_entropy: float
    accepted_scores: list[float] = field(default_factory=list)

    def cases_in_fold(self, fold: int) -> list[str]:
        return [c for c, f in self.fold_of_case.items() if f == fold]

    def fold_sizes(self) -> list[int]:
        folds = max(self.fold_of_case.values()) + 1
        return [len(self.cases_in_fold(f)) for f in range(folds)]

    def to_json_dict(self) -> dict:
        return {
            "fold_of_case": self.fold_of_case,
            "fold_class_counts": self.fold_class_counts.tolist(),
            "entropy_per_fold": self.entropy_per_fold.tolist(),
            "mean_entropy": self.mean_entropy,
            "accepted_scores": self.accepted_scores,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SplitAssignment":
        return cls(
            fold_of_case={k: int(v) for k, v in doc["fold_of_case"].items()},
            fold_class_counts=np.asarray(doc["fold_class_counts"], dtype=np.int64),
            entropy_per_fold=np.asarray(doc["entropy_per_fold"], dtype=np.float64),
            mean_entropy=float(doc["mean_entropy"]),
            accepted_scores=list(doc.get("accepted_scores", [])),
        )


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def hill_climb_split(manifest: DatasetManifest, folds: int, max_stale_iters: int,
                     rng: np.random.Generator) -> SplitAssignment:
    """Partition cases into folds of fixed size, maximizing the average
    per-fold entropy of the class pixel distribution by random case swaps.

    Starts from a seeded shuffle split; each proposal exchanges one case
    between two random folds and is kept only if the average entropy
    strictly increases. Stops after `max_stale_iters` consecutive
    rejections. Fold sizes never change: with N = q*folds + r cases, fold 0
    holds q + r and the rest hold q.
    """
    if folds < 2:
        raise ParameterError(f"need at least 2 folds, got {folds}")
    cases = manifest.case_ids()
    n = len(cases)
    if n < folds:
        raise DataError(f"cannot split {n} cases into {folds} folds")
    counts = np.stack([manifest.entry(c).class_counts for c in cases])

    order = rng.permutation(n)
    base, extra = divmod(n, folds)
    sizes = [base + extra] + [base] * (folds - 1)
    fold_of = np.empty(n, dtype=np.int64)
    members: list[list[int]] = []
    start = 0
    for f, size in enumerate(sizes):
        chunk = order[start : start + size]
        fold_of[chunk] = f
        members.append(list(chunk))
        start += size

    fold_counts = np.stack([counts[m].sum(axis=0) for m in members])
    entropies = np.array([_entropy(fc) for fc in fold_counts])
    score = float(entropies.mean())
    accepted = [score]

    stale = 0
    while stale < max_stale_iters:
        fa, fb = rng.choice(folds, size=2, replace=False)
        ia = int(rng.integers(len(members[fa])))
        ib = int(rng.integers(len(members[fb])))
        ca, cb = members[fa][ia], members[fb][ib]
        new_a = fold_counts[fa] - counts[ca] + counts[cb]
        new_b = fold_counts[fb] - counts[cb] + counts[ca]
        new_entropies = entropies.copy()
        new_entropies[fa] = _entropy(new_a)
        new_entropies[fb] = _entropy(new_b)
        new_score = float(new_entropies.mean())
        if new_score > score:
            members[fa][ia], members[fb][ib] = cb, ca
            fold_of[ca], fold_of[cb] = fb, fa
            fold_counts[fa], fold_counts[fb] = new_a, new_b
            entropies = new_entropies
            score = new_score
            accepted.append(score)
            stale = 0
        else:
            stale += 1

    return SplitAssignment(
        fold_of_case={cases[i]: int(fold_of[i]) for i in range(n)},
        fold_class_counts=fold_counts,
        entropy_per_fold=entropies,
        mean_entropy=score,
        accepted_scores=accepted,
    )


# ------------------------------------------------------------ mosaic textures


def _standardize(t: np.ndarray) -> np.ndarray:
    t = t - t.mean()
    sd = t.std()
    return t / sd if sd > 1e-8 else t


def _tex_blobs(h, w, rng):
    return _standardize(ndimage.gaussian_filter(rng.standard_normal((h, w)), rng.uniform(4.0, 6.5)))


def _tex_speckle(h, w, rng):
    return _standardize(ndimage.gaussian_filter(rng.standard_normal((h, w)), 0.55))


def _tex_coarse_stripes(h, w, rng):
    return _stripes(h, w, rng, wavelength=rng.uniform(11.0, 16.0))


def _tex_fine_stripes(h, w, rng):
    return _stripes(h, w, rng, wavelength=rng.uniform(3.6, 5.4))


def _stripes(h, w, rng, wavelength):
    # orientation is drawn per region, so the class is closed under the
    # flip/rotate augmentations
    theta = rng.uniform(0, math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * (math.cos(theta) * xx + math.sin(theta) * yy) / wavelength + phase)
    return _standardize(wave + 0.25 * rng.standard_normal((h, w)))


def _tex_checks(h, w, rng):
    period = rng.uniform(7.0, 11.0)
    yy, xx = np.mgrid[0:h, 0:w]
    phase_y, phase_x = rng.uniform(0, 2 * math.pi, size=2)
    board = np.sign(np.sin(2 * math.pi * yy / period + phase_y)) * np.sign(
        np.sin(2 * math.pi * xx / period + phase_x)
    )
    return _standardize(board + 0.25 * rng.standard_normal((h, w)))


def _tex_rings(h, w, rng):
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    wavelength = rng.uniform(7.0, 11.0)
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    wave = np.sin(2 * math.pi * r / wavelength + rng.uniform(0, 2 * math.pi))
    return _standardize(wave + 0.25 * rng.standard_normal((h, w)))


def _tex_blocks(h, w, rng):
    cell = int(rng.integers(5, 9))
    coarse = rng.standard_normal((h // cell + 2, w // cell + 2))
    up = np.kron(coarse, np.ones((cell, cell)))[:h, :w]
    return _standardize(up + 0.2 * rng.standard_normal((h, w)))


def _tex_webs(h, w, rng):
    base = ndimage.gaussian_filter(rng.standard_normal((h, w)), rng.uniform(3.0, 5.0))
    ridges = 1.0 - np.abs(_standardize(base))
    return _standardize(ridges + 0.2 * rng.standard_normal((h, w)))


TEXTURE_FAMILIES = [
    ("blobs", _tex_blobs),
    ("speckle", _tex_speckle),
    ("coarse_stripes", _tex_coarse_stripes),
    ("fine_stripes", _tex_fine_stripes),
    ("checks", _tex_checks),
    ("rings", _tex_rings),
    ("blocks", _tex_blocks),
    ("webs", _tex_webs),
]


def synth_mosaic(seed: int, num_classes: int = 6, canvas=(96, 96),
                 region_granularity: int | None = None,
                 unlabeled_fraction: float = 0.3, border: int = 4) -> SampleRecord:
    """Deterministic texture mosaic: a Voronoi partition of the canvas,
    each cell filled by one class's procedural texture.

    Labels are the generating classes with `unlabeled_fraction` of the
    pixels blanked to 255; the roi is the canvas minus a border band.
    """
    if num_classes > len(TEXTURE_FAMILIES):
        raise ParameterError(
            f"{num_classes} classes requested but only {len(TEXTURE_FAMILIES)} texture families exist"
        )
    if not 0.0 <= unlabeled_fraction <= 1.0:
        raise ParameterError(f"unlabeled_fraction must be in [0, 1], got {unlabeled_fraction}")
    h, w = canvas
    if region_granularity is None:
        region_granularity = max(2 * num_classes, (h * w) // 640)
    sites_rng = substream(seed, "mosaic", "sites")
    class_rng = substream(seed, "mosaic", "classes")
    tex_rng = substream(seed, "mosaic", "textures")
    mask_rng = substream(seed, "mosaic", "labelmask")

    sites = np.stack([sites_rng.uniform(0, h, region_granularity),
                      sites_rng.uniform(0, w, region_granularity)], axis=1)
    site_class = np.array([i % num_classes for i in range(region_granularity)])
    class_rng.shuffle(site_class)

    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    region = d2.argmin(axis=0)

    image = np.zeros((h, w), dtype=np.float64)
    for s in range(region_granularity):
        cell = region == s
        if cell.any():
            image[cell] = TEXTURE_FAMILIES[site_class[s]][1](h, w, tex_rng)[cell]

    labels = site_class[region].astype(np.uint8)
    n_blank = int(round(unlabeled_fraction * h * w))
    blank = mask_rng.permutation(h * w)[:n_blank]
    labels.reshape(-1)[blank] = UNLABELED

    roi = np.zeros((h, w), dtype=bool)
    roi[border : h - border, border : w - border] = True
    labels[~roi] = UNLABELED

    return SampleRecord(
        case_id=f"mosaic{seed:08d}",
        image=image[None].astype(np.float32),
        labels=labels,
        roi=roi,
    ).validate(num_classes)


def make_synthetic_manifest(out_dir, seed: int, count: int, size: int = 96,
                            num_classes: int = 6, unlabeled_fraction: float = 0.3,
                            region_granularity: int | None = None) -> DatasetManifest:
    """Generate `count` mosaics into a directory and write manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        case_seed = seed * 1_000_003 + i
        sample = synth_mosaic(
            case_seed,
            num_classes=num_classes,
            canvas=(size, size),
            region_granularity=region_granularity,
            unlabeled_fraction=unlabeled_fraction,
        )
        stem = f"m{i:04d}"
        write_tensor_file(sample.image, out_dir / f"{stem}_image.tsr")
        write_tensor_file(sample.labels, out_dir / f"{stem}_labels.tsr")
        write_tensor_file(sample.roi.astype(np.uint8), out_dir / f"{stem}_roi.tsr")
        entries.append(
            ManifestEntry(
                case_id=sample.case_id,
                image_path=out_dir / f"{stem}_image.tsr",
                labels_path=out_dir / f"{stem}_labels.tsr",
                roi_path=out_dir / f"{stem}_roi.tsr",
                class_counts=sample.labeled_class_counts(num_classes),
            )
        )
    manifest = DatasetManifest(
        classes=[TEXTURE_FAMILIES[i][0] for i in range(num_classes)],
        entries=entries,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------- pgm


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) or ascii (P2) PGM; 8-bit maps to uint8, 16-bit to
    uint16 (big-endian per the format)."""
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P5", b"P2"):
        raise FormatError(f"bad magic: expected P5 or P2, got {raw[:2]!r}")
    ascii_mode = raw[:2] == b"P2"

    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(raw[start:pos])
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"non-numeric header field: {exc}") from exc
    if width < 1 or height < 1:
        raise FormatError(f"dims {width}x{height} invalid")
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} outside 1..65535")

    if ascii_mode:
        values = raw[pos:].split()
        if len(values) < width * height:
            raise FormatError("truncated payload")
        dtype = np.uint8 if maxval < 256 else np.uint16
        data = np.array([int(v) for v in values[: width * height]], dtype=dtype)
        return data.reshape(height, width)

    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    if len(raw) - pos < expected:
        raise FormatError("truncated payload")
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=pos)
    out = data.reshape(height, width)
    return out.astype(np.uint16) if dtype.itemsize == 2 else out.copy()
