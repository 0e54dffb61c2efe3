"""Synthetic fine-grained shapes and ingestion of labeled image directories.

Each synthetic image holds one class-bearing object on a cluttered
background.  Classes come in pairs that share a colour family and base
polygon and differ only in fine detail (stripe orientation and a small
marking), so resolution loss and clutter genuinely remove evidence.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .degrade import Box, read_manifest_dir, write_manifest_dir
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

# Objects are drawn on a canvas of about this many pixels per side and then
# area-averaged down, which antialiases edges and stripes.
CANVAS_TARGET = 256

# Colour families, RGB in [0, 1]; classes 2k and 2k+1 share family k.
PALETTE = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.55, 0.85],
    [0.25, 0.75, 0.30],
    [0.90, 0.75, 0.20],
    [0.60, 0.30, 0.75],
    [0.20, 0.75, 0.75],
    [0.90, 0.50, 0.70],
    [0.55, 0.40, 0.25],
])


@dataclass
class ShapesConfig:
    num_classes: int = 10
    per_class: int = 320
    side: int = 64
    clutter: int = 12
    scale_range: tuple[float, float] = (0.4, 0.6)
    color_jitter: float = 0.08
    stripe_period: float = 4.0
    seed: int = 0
    # canvas pixels per output pixel; None picks max(2, CANVAS_TARGET // side)
    supersample: int | None = None

    @property
    def factor(self) -> int:
        return self.supersample if self.supersample is not None else max(2, CANVAS_TARGET // self.side)

    def validate(self) -> "ShapesConfig":
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.num_classes > 2 * len(PALETTE):
            raise ConfigError(f"at most {2 * len(PALETTE)} classes are defined")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1.0:
            raise ConfigError(f"object scale range {self.scale_range} must lie in (0, 1]")
        if hi * self.side < 8:
            raise ConfigError("objects would be smaller than 8 pixels")
        if self.per_class < 1 or self.clutter < 0 or self.side < 16:
            raise ConfigError("per_class must be positive, clutter non-negative, side >= 16")
        if self.supersample is not None and self.supersample < 1:
            raise ConfigError("supersample must be at least 1")
        return self


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray | None = None
    split: str = "all"
    provenance: dict = field(default_factory=dict)
    num_classes: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx],
                              None if self.boxes is None else self.boxes[idx],
                              split or self.split, dict(self.provenance), self.num_classes)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _polygon(cx, cy, r, n, rot):
    ang = rot + np.arange(n) * 2 * np.pi / n
    return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in ang]


def _rgb(c) -> tuple[int, int, int]:
    return tuple(int(round(float(v) * 255)) for v in np.clip(c, 0, 1))


def _render_one(cfg: ShapesConfig, label: int, rng: np.random.Generator):
    F = cfg.factor
    S = cfg.side * F
    bg_a, bg_b = rng.uniform(0.3, 0.7, 3), rng.uniform(0.3, 0.7, 3)
    t = np.linspace(0, 1, S, dtype=np.float32)
    horizontal = rng.random() < 0.5
    ramp = t[:, None, None] if horizontal else t[None, :, None]
    bg = (bg_a * (1 - ramp) + bg_b * ramp) * 255
    canvas = Image.fromarray(np.broadcast_to(bg, (S, S, 3)).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(cfg.clutter):
        color = _rgb(PALETTE[rng.integers(len(PALETTE))] * rng.uniform(0.7, 1.1))
        cx, cy = rng.uniform(0, S, 2)
        r = rng.uniform(0.03, 0.08) * S
        kind = rng.integers(3)
        if kind == 0:
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        elif kind == 1:
            draw.polygon(_polygon(cx, cy, r, int(rng.integers(3, 7)), rng.uniform(0, 2 * np.pi)), fill=color)
        else:
            a = rng.uniform(0, np.pi)
            draw.line([cx - 2 * r * np.cos(a), cy - 2 * r * np.sin(a), cx + 2 * r * np.cos(a),
                       cy + 2 * r * np.sin(a)], fill=color, width=max(1, int(r / 3)))

    # object
    family, variant = divmod(label, 2)
    base = PALETTE[family] * (1 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3))
    r = rng.uniform(*cfg.scale_range) * S / 2
    cx = rng.uniform(r, S - r)
    cy = rng.uniform(r, S - r)
    rot = rng.uniform(0, 2 * np.pi)
    mask_img = Image.new("L", (S, S), 0)
    ImageDraw.Draw(mask_img).polygon(_polygon(cx, cy, r, 5 + family % 2, rot), fill=255)
    # the dot sits near the top for variant 0 and near the bottom for variant 1
    dot_img = Image.new("L", (S, S), 0)
    dy = -0.45 * r if variant == 0 else 0.45 * r
    dr = 0.14 * r
    ImageDraw.Draw(dot_img).ellipse([cx - dr, cy + dy - dr, cx + dr, cy + dy + dr], fill=255)

    y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, S)
    x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, S)
    mask = np.asarray(mask_img, dtype=np.float32)[y0:y1, x0:x1, None] / 255
    dot = np.asarray(dot_img, dtype=np.float32)[y0:y1, x0:x1, None] / 255 * mask
    period = cfg.stripe_period * F
    phase = rng.uniform(0, period)
    if variant == 0:
        coord = np.arange(y0, y1, dtype=np.float32)[:, None, None] + phase
    else:
        coord = np.arange(x0, x1, dtype=np.float32)[None, :, None] + phase
    stripe = np.floor(coord / (period / 2)) % 2
    obj = base.astype(np.float32) * (1 - 0.55 * stripe)
    obj = obj * (1 - dot) + np.float32(0.97) * dot

    img = np.asarray(canvas, dtype=np.float32) / 255
    region = img[y0:y1, x0:x1]
    img[y0:y1, x0:x1] = region * (1 - mask) + obj * mask
    side = cfg.side
    small = img.reshape(side, F, side, F, 3).mean(axis=(1, 3))
    full_mask = np.zeros((S, S), dtype=bool)
    full_mask[y0:y1, x0:x1] = mask[:, :, 0] > 0
    cover = full_mask.reshape(side, F, side, F).any(axis=(1, 3))
    rows, cols = np.nonzero(cover)
    box = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
    return np.clip(small, 0, 1).astype(np.float32), box


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, 7]))


def gen_shapes(config: ShapesConfig) -> LabeledDataset:
    """Class-balanced synthetic dataset; sample ``i`` depends only on (seed, i)."""
    cfg = config.validate()
    n = cfg.num_classes * cfg.per_class
    labels = np.arange(n) % cfg.num_classes
    images = np.empty((n, cfg.side, cfg.side, 3), np.float32)
    boxes = np.empty((n, 4), np.int64)
    for i in range(n):
        images[i], boxes[i] = _render_one(cfg, int(labels[i]), _sample_rng(cfg.seed, i))
    prov = {"source": "synthetic-shapes", "config": asdict(cfg)}
    return LabeledDataset(images, labels, boxes, "all", prov, cfg.num_classes)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def split(dataset: LabeledDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified, disjoint (train, val, test) split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1) > 1e-9:
        raise ContractError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 3 and np.count_nonzero(fr) > 1:
            raise ContractError(f"class {c} has only {len(idx)} samples; cannot stratify")
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fr[0] * len(idx)))
        n_val = int(round(fr[1] * len(idx)))
        n_val = min(n_val, len(idx) - n_train)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple(dataset.subset(np.sort(np.array(p, dtype=np.int64)), name)
                 for p, name in zip(parts, ("train", "val", "test")))


# ---------------------------------------------------------------------------
# Image directories
# ---------------------------------------------------------------------------

def _read_csv_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row and not row[0].startswith("#")]


def load_image_dir(root, label_file, box_file=None, size: int | None = 64):
    """Read ``relative_path,label`` rows (and optional
    ``relative_path,x0,y0,x1,y1`` boxes in original pixels).

    Returns ``(dataset, errors)`` where ``errors`` lists unreadable files.
    Boxes are rescaled with the image; boxes outside the image are clamped
    and recorded in ``dataset.provenance["clamped_boxes"]``.
    """
    root = Path(root)
    rows = _read_csv_rows(Path(label_file))
    if rows and rows[0][0] == "relative_path":
        rows = rows[1:]
    boxes_by_path: dict[str, list[float]] = {}
    if box_file is not None:
        brows = _read_csv_rows(Path(box_file))
        if brows and brows[0][0] == "relative_path":
            brows = brows[1:]
        boxes_by_path = {r[0]: [float(v) for v in r[1:5]] for r in brows}
    if not rows:
        log.warning("label file %s is empty", label_file)
    images, labels, boxes, errors, clamped = [], [], [], [], []
    for rel, label in ((r[0], r[1]) for r in rows):
        try:
            with Image.open(root / rel) as im:
                im = im.convert("RGB")
                w0, h0 = im.size
                if size is not None and (w0, h0) != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (OSError, ValueError) as e:
            errors.append((rel, str(e)))
            continue
        h, w = arr.shape[:2]
        box = (-1, -1, -1, -1)
        if rel in boxes_by_path:
            bx0, by0, bx1, by1 = boxes_by_path[rel]
            cl = [min(max(bx0, 0), w0), min(max(by0, 0), h0), min(max(bx1, 0), w0), min(max(by1, 0), h0)]
            if cl != [bx0, by0, bx1, by1]:
                clamped.append(rel)
            sx, sy = w / w0, h / h0
            x0, y0 = int(np.floor(cl[0] * sx)), int(np.floor(cl[1] * sy))
            x1, y1 = int(np.ceil(cl[2] * sx)), int(np.ceil(cl[3] * sy))
            if x1 > x0 and y1 > y0:
                box = (x0, y0, x1, y1)
        images.append(arr)
        labels.append(int(label))
        boxes.append(box)
    side = size or 0
    img_arr = np.stack(images) if images else np.zeros((0, side, side, 3), np.float32)
    box_arr = np.array(boxes, dtype=np.int64) if any(b[0] >= 0 for b in boxes) else None
    prov = {"source": str(root), "label_file": str(label_file), "clamped_boxes": clamped,
            "errors": [list(e) for e in errors]}
    return LabeledDataset(img_arr, np.array(labels, dtype=np.int64), box_arr, "all", prov), errors


def export_image_dir(dataset: LabeledDataset, root) -> tuple[Path, Path | None]:
    """Write 8-bit PNGs plus ``labels.csv`` (and ``boxes.csv`` when boxes exist)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    label_path = root / "labels.csv"
    box_path = root / "boxes.csv" if dataset.boxes is not None else None
    with open(label_path, "w", newline="") as lf:
        lw = csv.writer(lf)
        lw.writerow(["relative_path", "label"])
        bw = None
        bf = open(box_path, "w", newline="") if box_path else None
        try:
            if bf:
                bw = csv.writer(bf)
                bw.writerow(["relative_path", "x0", "y0", "x1", "y1"])
            for i, (img, y) in enumerate(zip(dataset.images, dataset.labels)):
                rel = f"images/{i:06d}.png"
                Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(root / rel)
                lw.writerow([rel, int(y)])
                if bw is not None and dataset.boxes[i][0] >= 0:
                    bw.writerow([rel, *(int(v) for v in dataset.boxes[i])])
        finally:
            if bf:
                bf.close()
    return label_path, box_path


def save_labeled(dataset: LabeledDataset, root, fmt: str = "f32") -> Path:
    meta = {"kind": "labeled", "split": dataset.split, "num_classes": dataset.num_classes,
            "provenance": dataset.provenance}
    return write_manifest_dir(root, {"image": dataset.images}, dataset.labels, dataset.boxes, meta, fmt)


def load_labeled(root) -> LabeledDataset:
    manifest, views, labels, boxes = read_manifest_dir(root)
    if manifest.get("kind") != "labeled":
        raise ContractError(f"{root} does not hold a labeled dataset")
    return LabeledDataset(views["image"], labels, boxes, manifest.get("split", "all"),
                          manifest.get("provenance", {}), manifest.get("num_classes"))


def boxes_as_objects(boxes: np.ndarray | None) -> list[Box | None]:
    if boxes is None:
        return []
    return [Box(*map(int, b)) if b[0] >= 0 else None for b in boxes]
