"""Dataset plumbing: annotation schema, JSON manifest I/O, foreground
labeling, patch sampling, leave-one-tumor-out splits, and a synthetic
dataset generator with exactly known ground truth.

Manifest format: a single JSON document with a ``tumor_types`` list (the
configured class names, in class-index order) and a ``cases`` array. Each
case carries ``case_id``, ``image`` (path relative to the manifest),
``tumor_type``, ``species``, ``scanner``, and ``annotations`` as
``{"box": [x1, y1, x2, y2], "kind": ...}`` objects. Images are lossless
raster files (PNG).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box

KIND_MITOTIC = "mitotic_figure"
KIND_HARD_NEGATIVE = "hard_negative"
ANNOTATION_KINDS = (KIND_MITOTIC, KIND_HARD_NEGATIVE)

SPECIES = ("human", "canine", "unknown")

# class-index order; the annotated types come first so melanoma (which has
# no mitosis annotations and feeds only the tumor head) sits last
DEFAULT_TUMOR_TYPES = (
    "lung_cancer",
    "breast_cancer",
    "lymphoma",
    "neuroendocrine_tumor",
    "mast_cell_tumor",
    "melanoma",
)
DEFAULT_HELD_OUT = "neuroendocrine_tumor"


@dataclass(frozen=True)
class Annotation:
    """One annotated object: a mitotic figure or a hard negative (an
    imposter cell that counts toward patch foreground but is not a
    detection target)."""

    box: Box
    kind: str = KIND_MITOTIC

    def __post_init__(self):
        if self.kind not in ANNOTATION_KINDS:
            raise ValueError(f"unknown annotation kind {self.kind!r}")

    @property
    def is_detection_target(self) -> bool:
        return self.kind == KIND_MITOTIC


@dataclass(frozen=True)
class CaseRecord:
    """One image region with its annotations and domain metadata."""

    case_id: str
    image_path: str
    tumor_type: str
    species: str = "unknown"
    scanner: str = "unknown"
    annotations: tuple = ()

    def __post_init__(self):
        if self.species not in SPECIES:
            raise ValueError(f"case {self.case_id}: unknown species {self.species!r}")


@dataclass(frozen=True)
class Manifest:
    """A validated dataset: the configured tumor-type list plus cases."""

    tumor_types: tuple
    cases: tuple

    def class_index(self, tumor_type: str) -> int:
        return self.tumor_types.index(tumor_type)


@dataclass(frozen=True)
class PatchSample:
    """One training unit: an image tile, its remapped annotations, the
    case's tumor class index, and the derived foreground flag."""

    image: np.ndarray = field(repr=False)
    annotations: tuple
    tumor_label: int
    foreground: int
    case_id: str = ""
    origin: tuple = (0, 0)

    def detection_boxes(self) -> np.ndarray:
        """(N, 4) boxes of the mitotic-figure annotations only."""
        targets = [a.box.to_array() for a in self.annotations if a.is_detection_target]
        return np.stack(targets) if targets else np.empty((0, 4))


def label_foreground(annotations) -> int:
    """1 iff the patch contains any annotation (mitotic figure or hard
    negative), else 0."""
    return 1 if len(tuple(annotations)) > 0 else 0


# ---------------------------------------------------------------------------
# manifest I/O


class DatasetError(ValueError):
    """Raised for malformed manifests or records."""


def _case_from_json(obj, tumor_types, root: Path) -> CaseRecord:
    case_id = str(obj.get("case_id", "<missing id>"))
    try:
        tumor_type = obj["tumor_type"]
        if tumor_type not in tumor_types:
            raise DatasetError(f"unknown tumor type {tumor_type!r}")
        annotations = []
        for ann in obj.get("annotations", []):
            x1, y1, x2, y2 = (float(v) for v in ann["box"])
            annotations.append(Annotation(Box(x1, y1, x2, y2), ann.get("kind", KIND_MITOTIC)))
        image_path = str((root / obj["image"]).resolve())
        if not Path(image_path).is_file():
            raise DatasetError(f"image file not found: {obj['image']}")
        return CaseRecord(
            case_id=case_id,
            image_path=image_path,
            tumor_type=tumor_type,
            species=obj.get("species", "unknown"),
            scanner=obj.get("scanner", "unknown"),
            annotations=tuple(annotations),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"case {case_id}: {exc}") from exc


def load_dataset(manifest_path) -> Manifest:
    """Parse and validate a manifest; errors name the offending case."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    tumor_types = tuple(doc.get("tumor_types", DEFAULT_TUMOR_TYPES))
    root = manifest_path.parent
    cases = tuple(_case_from_json(obj, tumor_types, root) for obj in doc.get("cases", []))
    return Manifest(tumor_types=tumor_types, cases=cases)


def save_dataset(manifest: Manifest, manifest_path) -> Path:
    """Write a manifest JSON; image paths are stored relative to it."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent.resolve()
    doc = {
        "tumor_types": list(manifest.tumor_types),
        "cases": [
            {
                "case_id": c.case_id,
                "image": _relative_to(Path(c.image_path), root),
                "tumor_type": c.tumor_type,
                "species": c.species,
                "scanner": c.scanner,
                "annotations": [
                    {"box": [a.box.x1, a.box.y1, a.box.x2, a.box.y2], "kind": a.kind}
                    for a in c.annotations
                ],
            }
            for c in manifest.cases
        ],
    }
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return manifest_path


def _relative_to(path: Path, root: Path) -> str:
    try:
        return str(path.resolve().relative_to(root))
    except ValueError:
        return str(path)


def load_case_image(record: CaseRecord) -> np.ndarray:
    """Read the case image as an HWC float32 array in [0, 1]."""
    with Image.open(record.image_path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def dataset_hash(manifest: Manifest) -> str:
    """SHA-256 over the canonical case serialization plus raw pixel bytes."""
    h = hashlib.sha256()
    h.update(json.dumps(list(manifest.tumor_types)).encode())
    for c in manifest.cases:
        payload = {
            "case_id": c.case_id,
            "tumor_type": c.tumor_type,
            "species": c.species,
            "scanner": c.scanner,
            "annotations": [
                {"box": [a.box.x1, a.box.y1, a.box.x2, a.box.y2], "kind": a.kind}
                for a in c.annotations
            ],
        }
        h.update(json.dumps(payload, sort_keys=True).encode())
        arr = (load_case_image(c) * 255).round().astype(np.uint8)
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# patch sampling and splits


def _remap_annotations(annotations, x0, y0, size, min_area_frac=0.3):
    from . import geometry as _g

    boxes = np.stack([a.box.to_array() for a in annotations]) if annotations else np.empty((0, 4))
    remapped, kept = _g.remap_boxes_to_window(boxes, (x0, y0), (size, size), min_area_frac)
    return tuple(
        replace(annotations[src], box=Box.from_array(remapped[i])) for i, src in enumerate(kept)
    )


def sample_patches(record: CaseRecord, image, class_names, patch_size=256,
                   n_patches=8, strategy="balanced", rng=None) -> list:
    """Cut training patches from one case image.

    ``balanced`` centers half the patches near a random annotation
    (uniform jitter up to patch_size/4 per axis) and draws the rest
    uniformly; ``random`` draws all patches uniformly. Annotations are
    remapped into tile coordinates; the foreground flag covers all
    surviving annotations while detection targets remain the
    mitotic-figure ones only.
    """
    if strategy not in ("balanced", "random"):
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    rng = np.random.default_rng() if rng is None else rng
    image = np.asarray(image)
    h, w = image.shape[:2]
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image {h}x{w}")
    tumor_label = list(class_names).index(record.tumor_type)

    n_centered = n_patches // 2 if (strategy == "balanced" and record.annotations) else 0
    patches = []
    for k in range(n_patches):
        if k < n_centered:
            ann = record.annotations[int(rng.integers(0, len(record.annotations)))]
            cx = (ann.box.x1 + ann.box.x2) / 2 + rng.uniform(-patch_size / 4, patch_size / 4)
            cy = (ann.box.y1 + ann.box.y2) / 2 + rng.uniform(-patch_size / 4, patch_size / 4)
            x0 = int(round(cx - patch_size / 2))
            y0 = int(round(cy - patch_size / 2))
            x0 = min(max(x0, 0), w - patch_size)
            y0 = min(max(y0, 0), h - patch_size)
        else:
            x0 = int(rng.integers(0, w - patch_size + 1))
            y0 = int(rng.integers(0, h - patch_size + 1))
        tile = np.ascontiguousarray(image[y0:y0 + patch_size, x0:x0 + patch_size])
        anns = _remap_annotations(record.annotations, x0, y0, patch_size)
        patches.append(
            PatchSample(
                image=tile,
                annotations=anns,
                tumor_label=tumor_label,
                foreground=label_foreground(anns),
                case_id=record.case_id,
                origin=(x0, y0),
            )
        )
    return patches


def split_leave_one_tumor_out(records, held_out: str):
    """Partition cases into (train, test) by tumor type.

    ``test`` is every case of the held-out type; ``train`` is the rest.
    Raises when the held-out type is absent or when it would leave the
    training side empty.
    """
    records = list(records)
    types_present = {r.tumor_type for r in records}
    if held_out not in types_present:
        raise ValueError(f"held-out tumor type {held_out!r} has no cases")
    test = [r for r in records if r.tumor_type == held_out]
    train = [r for r in records if r.tumor_type != held_out]
    if not train:
        raise ValueError(f"holding out {held_out!r} leaves no training cases")
    return train, test


# ---------------------------------------------------------------------------
# synthetic dataset


# per-domain background colors; the default held-out type is deliberately
# the darkest so color augmentation has work to do
DEFAULT_PALETTE = {
    "lung_cancer": (0.86, 0.72, 0.78),
    "breast_cancer": (0.80, 0.66, 0.82),
    "lymphoma": (0.88, 0.79, 0.70),
    "neuroendocrine_tumor": (0.58, 0.47, 0.55),
    "mast_cell_tumor": (0.77, 0.80, 0.88),
    "melanoma": (0.74, 0.69, 0.64),
}

_SPECIES_MAP = {
    "lung_cancer": "canine",
    "breast_cancer": "human",
    "lymphoma": "canine",
    "neuroendocrine_tumor": "human",
    "mast_cell_tumor": "canine",
    "melanoma": "human",
}

# types without mitosis annotations: tumor-head training signal only
_UNANNOTATED_TYPES = ("melanoma",)

_MITOSIS_COLOR = np.array([0.17, 0.10, 0.26])
_RADIUS_RANGE = (4.0, 8.0)


def _draw_ellipse(image, cx, cy, rx, ry, color):
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    mask = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    image[mask] = color


def _place_ellipses(image, count, rng, color_fn, occupied, margin=2.0):
    """Scatter non-crowding ellipses; returns their bounding boxes."""
    h, w = image.shape[:2]
    boxes = []
    attempts = 0
    while len(boxes) < count and attempts < count * 40:
        attempts += 1
        rx = rng.uniform(*_RADIUS_RANGE)
        ry = rng.uniform(*_RADIUS_RANGE)
        cx = rng.uniform(rx + margin, w - rx - margin)
        cy = rng.uniform(ry + margin, h - ry - margin)
        if any((cx - ox) ** 2 + (cy - oy) ** 2 < (rx + orr + 2) ** 2 for ox, oy, orr in occupied):
            continue
        _draw_ellipse(image, cx, cy, rx, ry, color_fn())
        occupied.append((cx, cy, max(rx, ry)))
        boxes.append(Box(cx - rx, cy - ry, cx + rx, cy + ry))
    return boxes


def generate_synthetic_dataset(n_cases, out_dir, image_size=128, seed=0,
                               tumor_types=DEFAULT_TUMOR_TYPES,
                               palette=None, mean_mitoses=3.0,
                               mean_hard_negatives=2.0) -> Manifest:
    """Render a synthetic dataset with exactly known ground truth.

    Cases cycle round-robin through ``tumor_types``; each type gets its
    palette background color (simulating domain shift). Mitoses are dark
    ellipses (annotated as detection targets, Poisson counts), hard
    negatives are lighter ellipses (annotated, foreground-only).
    Unannotated types (melanoma) get clean backgrounds. Images are written
    as PNG next to the manifest, which is returned loaded.
    """
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    palette = dict(DEFAULT_PALETTE if palette is None else palette)
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    cases = []
    for i in range(n_cases):
        tumor_type = tumor_types[i % len(tumor_types)]
        case_id = f"case_{i:04d}"
        bg = np.array(palette[tumor_type], dtype=np.float64)
        bg = np.clip(bg + rng.uniform(-0.03, 0.03, 3), 0.0, 1.0)
        image = np.tile(bg, (image_size, image_size, 1))
        image += rng.normal(0.0, 0.015, image.shape)

        annotations = []
        if tumor_type not in _UNANNOTATED_TYPES:
            occupied = []
            n_mit = int(rng.poisson(mean_mitoses))
            mit_boxes = _place_ellipses(
                image, n_mit, rng,
                lambda: np.clip(_MITOSIS_COLOR + rng.uniform(-0.04, 0.04, 3), 0, 1),
                occupied,
            )
            annotations += [Annotation(b, KIND_MITOTIC) for b in mit_boxes]
            n_hard = int(rng.poisson(mean_hard_negatives))
            hard_boxes = _place_ellipses(
                image, n_hard, rng,
                lambda: np.clip(bg * rng.uniform(0.62, 0.72), 0, 1),
                occupied,
            )
            annotations += [Annotation(b, KIND_HARD_NEGATIVE) for b in hard_boxes]

        image = np.clip(image, 0.0, 1.0)
        rel = f"images/{case_id}.png"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(out_dir / rel)
        cases.append(
            CaseRecord(
                case_id=case_id,
                image_path=str((out_dir / rel).resolve()),
                tumor_type=tumor_type,
                species=_SPECIES_MAP.get(tumor_type, "unknown"),
                scanner="unknown" if tumor_type == "breast_cancer" else f"scanner_{tumor_type}",
                annotations=tuple(annotations),
            )
        )

    manifest = Manifest(tumor_types=tuple(tumor_types), cases=tuple(cases))
    save_dataset(manifest, out_dir / "manifest.json")
    return manifest
