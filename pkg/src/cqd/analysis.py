"""Input-gradient saliency and the in-box gradient fraction tau.

For a classifier and a labelled image, the saliency of pixel i is the L2
norm across channels of d log p(label | image) / d image at that pixel.
``tau`` is the share of the total saliency that falls inside the object's
bounding box: a model that only ever looks at the object has tau = 1.
"""

from __future__ import annotations

import csv
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .degrade import Box
from .errors import ContractError, NumericDomainError
from .nets import Model

CSV_HEADER = ("image_id", "tau_b", "tau_cqd", "box_x0", "box_y0", "box_x1", "box_y1")


@contextmanager
def _frozen(model: Model) -> Iterator[None]:
    """Stop parameters from recording gradients for the duration."""
    flags = {k: p.requires_grad for k, p in model.params.items()}
    grads = {k: p.grad for k, p in model.params.items()}
    try:
        for p in model.params.values():
            p.requires_grad = False
        yield
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]
            p.grad = grads[k]


def input_gradients(model: Model, images: np.ndarray, labels, batch_size: int = 128,
                    eps: float = T.PROB_EPS) -> np.ndarray:
    """``d log max(softmax(f(x))[y], eps) / dx`` for each image, shape ``(N, H, W, C)``.

    Samples do not interact inside the network, so summing the per-sample
    log-likelihoods of a batch and back-propagating once gives every
    sample's own gradient.  Model parameters and their gradients are left
    untouched.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != len(images):
        raise ContractError("images and labels differ in length")
    if len(labels) and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ContractError(f"labels must lie in [0, {model.num_classes})")
    out = np.empty(images.shape, dtype=np.float32)
    with _frozen(model):
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            x = T.Tensor(images[sl], requires_grad=True)
            logits = model.forward(x).astype(np.float64)
            probs = T.clamp_min(T.softmax(logits), eps)
            onehot = T.one_hot(labels[sl], model.num_classes, dtype=np.float64)
            loglik = T.tsum(T.mul(T.log(probs), onehot))
            T.backward(loglik)
            g = x.grad
            if g is None:
                g = np.zeros_like(x.data)
            if not np.isfinite(g).all():
                raise NumericDomainError("non-finite input gradient")
            out[sl] = g
    return out


def input_gradient(model: Model, image: np.ndarray, label: int) -> np.ndarray:
    """Gradient of the log-likelihood of ``label`` with respect to one ``(H, W, C)`` image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ContractError(f"expected one (H, W, C) image, got shape {image.shape}")
    return input_gradients(model, image[None], [int(label)])[0]


def pixel_grad_norm(grad: np.ndarray) -> np.ndarray:
    """Per-pixel L2 norm across channels; ``(..., H, W, C) -> (..., H, W)``."""
    g = np.asarray(grad, dtype=np.float64)
    return np.sqrt(np.sum(g * g, axis=-1))


def box_mass(saliency: np.ndarray, box) -> tuple[float, float]:
    """(in-box mass, total mass) of a saliency map."""
    s = np.asarray(saliency, dtype=np.float64)
    if s.ndim != 2:
        raise ContractError(f"saliency must be (H, W), got shape {s.shape}")
    if (s < 0).any():
        raise ContractError("saliency must be non-negative")
    H, W = s.shape
    b = Box.of(box).validate(H, W)
    return float(s[b.y0:b.y1, b.x0:b.x1].sum()), float(s.sum())


def tau(saliency: np.ndarray, box) -> float:
    """Fraction of the saliency mass inside ``box``."""
    inside, total = box_mass(saliency, box)
    if not total > 0:
        raise NumericDomainError("saliency has zero total mass; tau is undefined")
    return min(max(inside / total, 0.0), 1.0)


@dataclass
class TauRecord:
    image_id: int
    tau_b: float
    tau_cqd: float
    box: tuple[int, int, int, int]


@dataclass
class TauSummary:
    count: int
    mean_tau_b: float | None
    mean_tau_cqd: float | None
    frac_cqd_greater: float | None
    skipped: list = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return self.count > 0

    def to_dict(self) -> dict:
        return {**asdict(self), "defined": self.defined}


def tau_scatter(model_b: Model, model_cqd: Model, images: np.ndarray, labels, boxes,
                n: int | None = None, ids: Sequence[int] | None = None,
                batch_size: int = 128) -> tuple[list[TauRecord], TauSummary]:
    """tau of both models on the first ``n`` images that carry a usable box.

    Images without a box, or where either model's saliency is identically
    zero, are skipped and listed in the summary.
    """
    if tuple(model_b.arch.input_size) != tuple(model_cqd.arch.input_size):
        raise ContractError("both models must accept the same input shape")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    ids = list(range(len(images))) if ids is None else list(ids)
    skipped: list[tuple[int, str]] = []
    usable = []
    for i in range(len(images)):
        b = None if boxes is None else boxes[i]
        if b is None or np.any(np.asarray(b) < 0):
            skipped.append((ids[i], "missing box"))
        else:
            usable.append(i)
    if n is not None:
        if n < 0:
            raise ContractError("n must be non-negative")
        usable = usable[:n]
    records: list[TauRecord] = []
    if usable:
        idx = np.asarray(usable)
        sal_b = pixel_grad_norm(input_gradients(model_b, images[idx], labels[idx], batch_size))
        sal_c = pixel_grad_norm(input_gradients(model_cqd, images[idx], labels[idx], batch_size))
        for k, i in enumerate(usable):
            box = Box.of(boxes[i]).as_tuple()
            try:
                tb, tc = tau(sal_b[k], box), tau(sal_c[k], box)
            except NumericDomainError as e:
                skipped.append((ids[i], str(e)))
                continue
            records.append(TauRecord(int(ids[i]), tb, tc, tuple(int(v) for v in box)))
    return records, summarize(records, skipped)


def summarize(records: Sequence[TauRecord], skipped=()) -> TauSummary:
    if not records:
        return TauSummary(0, None, None, None, list(skipped))
    tb = np.array([r.tau_b for r in records])
    tc = np.array([r.tau_cqd for r in records])
    return TauSummary(len(records), float(tb.mean()), float(tc.mean()), float(np.mean(tc > tb)),
                      list(skipped))


def write_tau_csv(path, records: Sequence[TauRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.image_id, repr(r.tau_b), repr(r.tau_cqd), *r.box])


def read_tau_csv(path) -> list[TauRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ContractError(f"{path}: not a tau scatter file")
    return [TauRecord(int(r[0]), float(r[1]), float(r[2]), tuple(int(v) for v in r[3:7]))
            for r in rows[1:]]


def write_tau_summary(path, summary: TauSummary) -> None:
    d = summary.to_dict()
    d["skipped"] = [list(s) for s in d["skipped"]]
    for k in ("mean_tau_b", "mean_tau_cqd", "frac_cqd_greater"):
        if d[k] is not None and not math.isfinite(d[k]):
            d[k] = None
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True))
