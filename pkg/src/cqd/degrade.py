"""Deterministic degradations that turn a high-quality image into its
low-quality counterpart, and paired-dataset construction.

Images are float32 arrays of shape (H, W, C) with values in [0, 1].  Pixel
``(i, j)`` has its centre at continuous coordinate ``(y, x) = (i, j)``; a
box ``(x0, y0, x1, y1)`` covers columns ``x0..x1-1`` and rows ``y0..y1-1``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, NumericDomainError

EDGE_OPERATOR = "gradient-magnitude (central differences, p99 normalised)"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# Boxes and resampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, height: int, width: int) -> "Box":
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ContractError(f"box {self} is degenerate or outside a {height}x{width} image")
        return self

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def of(cls, b) -> "Box":
        return b if isinstance(b, Box) else cls(*(int(v) for v in b))


def _as_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ContractError(f"expected an (H, W, C) image, got shape {img.shape}")
    return img


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous pixel coordinates, clamping to the edge."""
    img = _as_image(image)
    H, W, _ = img.shape
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, H - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, W - 1)
    y0 = np.minimum(np.floor(ys).astype(np.int64), H - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def crop_to_box(image, box, out_size: int | tuple[int, int]) -> np.ndarray:
    """Crop ``box`` and resample it to ``out_size`` with bilinear interpolation."""
    img = _as_image(image)
    H, W, _ = img.shape
    box = Box.of(box).validate(H, W)
    oh, ow = (out_size, out_size) if isinstance(out_size, int) else out_size
    sy = (box.y1 - box.y0) / oh
    sx = (box.x1 - box.x0) / ow
    ys = box.y0 + (np.arange(oh) + 0.5) * sy - 0.5
    xs = box.x0 + (np.arange(ow) + 0.5) * sx - 0.5
    return bilinear_sample(img, ys[:, None], xs[None, :])


@lru_cache(maxsize=64)
def _area_matrix(n: int, s: int) -> np.ndarray:
    """(s, n) matrix averaging n source pixels into s equal-width bins."""
    edges = np.arange(n + 1, dtype=np.float64)
    bins = np.linspace(0.0, n, s + 1)
    m = np.zeros((s, n))
    for i in range(s):
        lo, hi = bins[i], bins[i + 1]
        m[i] = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
    return m / (n / s)


@lru_cache(maxsize=64)
def _bilinear_matrix(n: int, s: int) -> np.ndarray:
    """(n, s) matrix upsampling s samples to n by pixel-centre bilinear interpolation."""
    pos = np.clip((np.arange(n) + 0.5) * s / n - 0.5, 0.0, s - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, s - 1)
    w = pos - lo
    m = np.zeros((n, s))
    m[np.arange(n), lo] += 1 - w
    m[np.arange(n), hi] += w
    return m


@lru_cache(maxsize=64)
def _consistent_down_matrix(n: int, s: int) -> np.ndarray:
    """(s, n) operator D with D @ U == I: the bilinear coefficient grid whose
    upsampling has the same bin averages as the source."""
    a, u = _area_matrix(n, s), _bilinear_matrix(n, s)
    return np.linalg.solve(a @ u, a)


def _separable(rows: np.ndarray, img: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``rows @ img[:, :, c] @ cols.T`` for every channel ``c``."""
    tmp = np.tensordot(rows, img, axes=(1, 0))           # (r, W, C)
    return np.tensordot(tmp, cols, axes=(1, 1)).transpose(0, 2, 1)  # (r, c', C)


def lowres(image, s: int) -> np.ndarray:
    """Reduce ``image`` to ``s``×``s`` worth of information and resize it back.

    The image is area-averaged into an ``s``×``s`` grid and returned at its
    original size as a bilinear surface whose bin averages reproduce that
    grid.  The operation is a projection: applying it twice changes nothing.
    """
    img = _as_image(image)
    H, W, C = img.shape
    if not 1 < s <= min(H, W):
        raise ContractError(f"target size {s} must satisfy 1 < s <= {min(H, W)}")
    if s == H == W:
        return img.copy()
    dh, dw = _consistent_down_matrix(H, s), _consistent_down_matrix(W, s)
    uh, uw = _bilinear_matrix(H, s), _bilinear_matrix(W, s)
    coeff = _separable(dh, img.astype(np.float64), dw)
    np.clip(coeff, 0.0, 1.0, out=coeff)
    out = _separable(uh, coeff, uw)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def area_downsample(image, s: int | tuple[int, int]) -> np.ndarray:
    """Average ``image`` into an ``s``×``s`` (or ``(h, w)``) grid."""
    img = _as_image(image)
    H, W, _ = img.shape
    oh, ow = (s, s) if isinstance(s, (int, np.integer)) else s
    if not (1 <= oh <= H and 1 <= ow <= W):
        raise ContractError(f"cannot area-downsample {H}x{W} to {oh}x{ow}")
    if (oh, ow) == (H, W):
        return img.copy()
    return _separable(_area_matrix(H, oh), img.astype(np.float64), _area_matrix(W, ow)).astype(np.float32)


# ---------------------------------------------------------------------------
# Edges
# ---------------------------------------------------------------------------

def edge_map(image, percentile: float = 99.0) -> np.ndarray:
    """Colourless edge image: central-difference gradient magnitude of the
    channel-mean intensity, scaled by its ``percentile`` value and clipped
    to [0, 1], replicated to every input channel."""
    img = _as_image(image)
    gray = img.astype(np.float64).mean(axis=2)
    p = np.pad(gray, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    scale = np.percentile(mag, percentile)
    if scale <= 1e-12:
        scale = mag.max()
    if scale <= 1e-12:
        out = np.zeros_like(mag)
    else:
        out = np.clip(mag / scale, 0.0, 1.0)
    return np.repeat(out[:, :, None], img.shape[2], axis=2).astype(np.float32)


# ---------------------------------------------------------------------------
# Thin-plate splines
# ---------------------------------------------------------------------------

def _tps_kernel(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        u = r * r * np.log(r)
    return np.where(r > 0, u, 0.0)


@dataclass
class TpsWarp:
    """Thin-plate spline mapping output pixel coordinates to input sample
    coordinates; ``control_src`` map exactly onto ``control_dst``.

    Points are (x, y) pairs in pixels.  ``affine`` is 2×3 acting on (x, y, 1).
    """

    control_src: np.ndarray
    control_dst: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    image_size: tuple[int, int] | None = None

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        d = np.sqrt(((flat[:, None, :] - self.control_src[None, :, :]) ** 2).sum(-1))
        out = _tps_kernel(d) @ self.weights
        out += flat @ self.affine[:, :2].T + self.affine[:, 2]
        return out.reshape(pts.shape)

    def residual(self) -> float:
        return float(np.abs(self(self.control_src) - self.control_dst).max())


def grid_points(grid: int, height: int, width: int) -> np.ndarray:
    """``grid``×``grid`` uniformly spaced (x, y) points spanning the image."""
    if grid < 3:
        raise ContractError(f"control grid must be at least 3x3, got {grid}")
    xs = np.linspace(0.0, width - 1, grid)
    ys = np.linspace(0.0, height - 1, grid)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def tps_solve(src: np.ndarray, dst: np.ndarray, image_size=None) -> TpsWarp:
    """Interpolating thin-plate spline with kernel r² log r (no smoothing)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ContractError(f"control point arrays must both be (N, 2), got {src.shape}, {dst.shape}")
    k = _tps_kernel(np.sqrt(((src[:, None] - src[None]) ** 2).sum(-1)))
    p = np.hstack([np.ones((n, 1)), src])
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as e:
        raise NumericDomainError(f"thin-plate system is singular: {e}") from e
    if not np.isfinite(sol).all():
        raise NumericDomainError("thin-plate solution is not finite")
    w, a = sol[:n], sol[n:]
    affine = np.stack([a[1:, 0].tolist() + [a[0, 0]], a[1:, 1].tolist() + [a[0, 1]]])
    return TpsWarp(src, dst, w, affine, image_size)


def tps_fit(src: np.ndarray, displacement_sigma: float, seed: int, image_size=None) -> TpsWarp:
    """Displace ``src`` by seeded N(0, sigma²) offsets and fit the spline."""
    if displacement_sigma < 0:
        raise ContractError("displacement sigma must be non-negative")
    src = np.asarray(src, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dst = src + rng.normal(0.0, 1.0, size=src.shape) * displacement_sigma
    return tps_solve(src, dst, image_size)


def default_tps_sigma(side: int) -> float:
    """Standard deviation in pixels: variance 4 px² at a 224-pixel side,
    scaled linearly with the side length."""
    return 2.0 * side / 224.0


def tps_distort(image, warp: TpsWarp) -> np.ndarray:
    """Backward-warp: output pixel ``p`` takes the input value at ``warp(p)``."""
    img = _as_image(image)
    H, W, _ = img.shape
    if warp.image_size is not None and tuple(warp.image_size) != (H, W):
        raise ContractError(f"warp fitted for {warp.image_size}, image is {(H, W)}")
    gy, gx = np.mgrid[0:H, 0:W]
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    mapped = warp(pts)
    out = bilinear_sample(img, mapped[:, 1].reshape(H, W), mapped[:, 0].reshape(H, W))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Transform descriptors
# ---------------------------------------------------------------------------

TRANSFORM_KINDS = ("identity", "lowres", "edge", "tps", "localize", "localize_lowres")
BOX_REQUIRED = {"localize", "localize_lowres"}


def transform_descriptor(kind: str, **params) -> dict:
    """Normalised description of a degradation, with defaults filled in."""
    if kind not in TRANSFORM_KINDS:
        raise ContractError(f"unknown transform {kind!r}; expected one of {TRANSFORM_KINDS}")
    d: dict = {"kind": kind}
    if kind in ("lowres", "edge", "tps", "identity"):
        d["crop"] = bool(params.pop("crop", False))
    if kind in ("lowres", "localize_lowres"):
        d["size"] = int(params.pop("size", 16))
    if kind == "edge":
        d["operator"] = EDGE_OPERATOR
    if kind == "tps":
        d["grid"] = int(params.pop("grid", 7))
        d["sigma"] = params.pop("sigma", None)
    out_size = params.pop("out_size", None)
    d["out_size"] = None if out_size is None else int(out_size)
    if kind in ("localize", "localize_lowres"):
        d["stages"] = ["crop_to_box(hq)", "identity(lq)"] if kind == "localize" else \
            ["crop_to_box(hq)", f"lowres(lq, {d['size']})"]
    if params:
        raise ContractError(f"unexpected parameters for {kind!r}: {sorted(params)}")
    return d


def normalize_descriptor(descriptor: dict) -> dict:
    params = {k: v for k, v in descriptor.items() if k not in ("kind", "operator", "stages")}
    return transform_descriptor(descriptor["kind"], **params)


def compound_lowres_noloc(image, box, s: int, out_size: tuple[int, int] | None = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """High-quality view: the box crop at full resolution.  Low-quality view:
    the whole uncropped image at resolution ``s``.  Returns ``(x, z)``."""
    img = _as_image(image)
    target = img.shape[:2] if out_size is None else tuple(out_size)
    return crop_to_box(img, box, target), lowres(area_downsample(img, target), s)


def apply_transform(image, descriptor: dict, seed: int, box=None) -> tuple[np.ndarray, np.ndarray]:
    """Produce ``(x, z)`` for one image under ``descriptor``.

    With ``out_size`` set, both views have that side: box crops are
    resampled directly from the source, whole-image views are area-averaged
    down to it.  Otherwise views keep the source size.
    """
    img = _as_image(image)
    H, W, _ = img.shape
    kind = descriptor["kind"]
    out_size = descriptor.get("out_size")
    target = (H, W) if out_size is None else (int(out_size), int(out_size))
    if target[0] > H or target[1] > W:
        raise ContractError(f"out_size {out_size} exceeds the {H}x{W} source")
    if kind in BOX_REQUIRED and box is None:
        raise ContractError(f"transform {kind!r} requires a bounding box")
    if descriptor.get("crop"):
        if box is None:
            raise ContractError("crop=True requires a bounding box")
        img = crop_to_box(img, box, target)
    elif kind not in BOX_REQUIRED:
        img = area_downsample(img, target)
    if kind == "identity":
        return img, img.copy()
    if kind == "lowres":
        return img, lowres(img, descriptor["size"])
    if kind == "edge":
        return img, edge_map(img)
    if kind == "tps":
        sigma = descriptor["sigma"]
        sigma = default_tps_sigma(min(target)) if sigma is None else float(sigma)
        warp = tps_fit(grid_points(descriptor["grid"], *target), sigma, seed, target)
        return img, tps_distort(img, warp)
    if kind == "localize":
        return crop_to_box(img, box, target), area_downsample(img, target)
    if kind == "localize_lowres":
        return compound_lowres_noloc(img, box, descriptor["size"], target)
    raise ContractError(f"unknown transform {kind!r}")


# ---------------------------------------------------------------------------
# Paired datasets
# ---------------------------------------------------------------------------

def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed derived from the dataset seed and the sample index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def content_hash(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(a.dtype).encode())
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class PairedDataset:
    """Instance-aligned high-quality ``xs`` and low-quality ``zs``.

    ``boxes`` (when present) locate the object in the low-quality view.
    ``provenance[i]`` ties ``zs[i]`` to the source image it came from.
    """

    xs: np.ndarray
    zs: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray | None
    descriptor: dict
    seed: int
    provenance: list[dict] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)
    num_classes: int | None = None

    def __post_init__(self):
        if not (len(self.xs) == len(self.zs) == len(self.labels)):
            raise ContractError("paired views and labels must have equal length")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairedDataset(self.xs[idx], self.zs[idx], self.labels[idx],
                             None if self.boxes is None else self.boxes[idx],
                             self.descriptor, self.seed,
                             [self.provenance[i] for i in idx] if self.provenance else [],
                             [], self.num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.descriptor, sort_keys=True).encode())
        for arr in (self.xs, self.zs, self.labels) + (() if self.boxes is None else (self.boxes,)):
            h.update(content_hash(arr).encode())
        return h.hexdigest()


def make_paired(images: Sequence[np.ndarray] | np.ndarray, labels, descriptor: dict, seed: int,
                boxes=None, num_classes: int | None = None) -> PairedDataset:
    """Apply ``descriptor`` to every image.  Samples that cannot be
    transformed (e.g. a missing box) are skipped and listed in ``skipped``."""
    descriptor = normalize_descriptor(descriptor)
    labels = np.asarray(labels, dtype=np.int64)
    xs, zs, keep, prov, skipped, out_boxes = [], [], [], [], [], []
    for i, img in enumerate(images):
        box = None
        if boxes is not None and boxes[i] is not None and np.all(np.asarray(boxes[i]) >= 0):
            box = Box.of(boxes[i])
        s = sample_seed(seed, i)
        try:
            x, z = apply_transform(img, descriptor, s, box)
        except ContractError as e:
            skipped.append((i, str(e)))
            continue
        xs.append(x)
        zs.append(z)
        keep.append(i)
        out_boxes.append(_lq_box(descriptor, box, np.shape(img)))
        prov.append({"index": i, "sample_seed": s, "source_hash": content_hash(_as_image(img)),
                     "x_hash": content_hash(x), "z_hash": content_hash(z)})
    shape = tuple(np.shape(images[0])) if len(images) else (0, 0, 0)
    if descriptor.get("out_size") is not None and len(shape) == 3:
        shape = (descriptor["out_size"], descriptor["out_size"], shape[2])
    x_arr = np.stack(xs) if xs else np.zeros((0,) + tuple(_as_image(np.zeros(shape)).shape), np.float32)
    z_arr = np.stack(zs) if zs else x_arr.copy()
    box_arr = None
    if any(b is not None for b in out_boxes):
        box_arr = np.array([b if b is not None else (-1, -1, -1, -1) for b in out_boxes], dtype=np.int64)
    return PairedDataset(x_arr, z_arr, labels[keep], box_arr, descriptor, seed, prov, skipped,
                         num_classes if num_classes is not None else
                         (int(labels.max()) + 1 if len(labels) else 0))


def _lq_box(descriptor: dict, box: Box | None, shape) -> tuple | None:
    """Object box in the low-quality view's coordinates."""
    if box is None:
        return None
    h, w = shape[0], shape[1]
    out = descriptor.get("out_size")
    oh, ow = (h, w) if out is None else (out, out)
    if descriptor.get("crop"):
        return (0, 0, ow, oh)
    if (oh, ow) == (h, w):
        return box.as_tuple()
    # smallest integer box covering the rescaled one
    return (int(np.floor(box.x0 * ow / w)), int(np.floor(box.y0 * oh / h)),
            int(np.ceil(box.x1 * ow / w)), int(np.ceil(box.y1 * oh / h)))


# ---------------------------------------------------------------------------
# On-disk layout: manifest.json plus one file per view per sample
# ---------------------------------------------------------------------------

def _write_image(path: Path, img: np.ndarray, fmt: str) -> None:
    if fmt == "f32":
        path.write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
    elif fmt == "png":
        from PIL import Image
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path)
    else:
        raise ContractError(f"unknown image format {fmt!r}")


def _read_image(path: Path, fmt: str, shape) -> np.ndarray:
    if fmt == "f32":
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ContractError(f"{path.name}: expected {int(np.prod(shape))} values, found {raw.size}")
        return raw.reshape(shape).astype(np.float32)
    from PIL import Image
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return _as_image(arr)


def write_manifest_dir(root, views: dict[str, np.ndarray], labels, boxes, meta: dict,
                       fmt: str = "f32") -> Path:
    """Shared writer for labeled and paired datasets."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    table = []
    ext = "f32" if fmt == "f32" else "png"
    for i, y in enumerate(labels):
        row: dict = {"label": int(y), "box": None if boxes is None or boxes[i][0] < 0 else
                     [int(v) for v in boxes[i]], "files": {}, "hashes": {}}
        for view, arr in views.items():
            rel = f"images/{i:06d}_{view}.{ext}"
            _write_image(root / rel, arr[i], fmt)
            row["files"][view] = rel
            row["hashes"][view] = hashlib.sha256((root / rel).read_bytes()).hexdigest()
        table.append(row)
    first = next(iter(views.values()))
    manifest = {"format_version": MANIFEST_VERSION, "image_format": fmt,
                "image_shape": list(first.shape[1:]) if len(first) else None,
                "views": list(views), **meta, "samples": table}
    tmp = root / f"manifest.json.tmp{os.getpid()}"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, root / "manifest.json")
    return root


def read_manifest_dir(root) -> tuple[dict, dict[str, np.ndarray], np.ndarray, np.ndarray | None]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ContractError(f"unsupported manifest version {manifest.get('format_version')}")
    fmt = manifest["image_format"]
    shape = tuple(manifest["image_shape"] or ())
    views: dict[str, list] = {v: [] for v in manifest["views"]}
    labels, boxes = [], []
    for row in manifest["samples"]:
        for v in views:
            path = root / row["files"][v]
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != row["hashes"][v]:
                raise ContractError(f"content hash mismatch for {path}")
            views[v].append(_read_image(path, fmt, shape))
        labels.append(row["label"])
        boxes.append(row["box"] if row["box"] is not None else [-1, -1, -1, -1])
    arrays = {v: (np.stack(a) if a else np.zeros((0,) + shape, np.float32)) for v, a in views.items()}
    box_arr = np.array(boxes, dtype=np.int64) if any(b[0] >= 0 for b in boxes) else None
    return manifest, arrays, np.array(labels, dtype=np.int64), box_arr


def save_paired(ds: PairedDataset, root, fmt: str = "f32") -> Path:
    meta = {"kind": "paired", "descriptor": ds.descriptor, "seed": ds.seed,
            "num_classes": ds.num_classes, "provenance": ds.provenance,
            "skipped": [list(s) for s in ds.skipped]}
    return write_manifest_dir(root, {"x": ds.xs, "z": ds.zs}, ds.labels, ds.boxes, meta, fmt)


def load_paired(root) -> PairedDataset:
    manifest, views, labels, boxes = read_manifest_dir(root)
    if manifest.get("kind") != "paired":
        raise ContractError(f"{root} does not hold a paired dataset")
    return PairedDataset(views["x"], views["z"], labels, boxes, manifest["descriptor"], manifest["seed"],
                         manifest.get("provenance", []), [tuple(s) for s in manifest.get("skipped", [])],
                         manifest.get("num_classes"))
