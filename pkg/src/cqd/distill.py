"""Cross-quality distillation and the four baseline training methods.

The student ``g`` sees the low-quality view ``z`` and minimizes

    mean_i CE(g(z_i), y_i) + lam * mean_i L2(g(z_i), f(x_i))

where ``f`` is a frozen teacher evaluated on the paired high-quality view
``x`` and ``L2`` is the cross-entropy between temperature-smoothed
distributions (or the squared logit difference).  The regularizer on ``g``
is the optimizer's weight decay.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericDomainError
from .nets import ARCHS, ArchSpec, Model, build_model, load_checkpoint
from .optim import SgdState, clip_grad_norm, lr_at, sgd_step

log = logging.getLogger(__name__)

METHODS = ("TrainA", "TrainB", "TrainAB", "Staged", "CQD")
LOSS2_KINDS = ("smoothed_ce", "squared_logits")
REPORT_SCHEMA_VERSION = 1


def _arch(a) -> ArchSpec:
    if isinstance(a, ArchSpec):
        return a
    if isinstance(a, dict):
        return ArchSpec.from_dict(a)
    if a in ARCHS:
        return ARCHS[a]()
    raise ConfigError(f"unknown architecture {a!r}")


@dataclass
class TrainConfig:
    method: str = "CQD"
    lam: float = 50.0
    temperature: float = 10.0
    loss2_kind: str = "smoothed_ce"
    lr_start: float = 0.02
    lr_end: float = 0.002
    schedule_epochs: int = 12
    total_epochs: int = 12
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 64
    seed: int = 0
    teacher_checkpoint: str | None = None
    student_arch: Any = "shallow"
    teacher_arch: Any = "shallow"
    # "auto": CQD and Staged start from the teacher when the architectures match.
    init: str = "auto"
    stage_one_epochs: int = 12
    separate_heads: bool = False
    # Joint gradient-norm ceiling; keeps warm-started fine-tuning from
    # blowing up on its first, very large, gradients.  None disables it.
    grad_clip: float | None = 5.0

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.loss2_kind not in LOSS2_KINDS:
            raise ConfigError(f"unknown distillation loss {self.loss2_kind!r}")
        if self.init not in ("auto", "scratch", "teacher"):
            raise ConfigError(f"unknown init policy {self.init!r}")
        if self.batch_size < 1 or self.total_epochs < 0 or self.stage_one_epochs < 0:
            raise ConfigError("batch size must be positive and epoch counts non-negative")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.method == "Staged" and _arch(self.student_arch) != _arch(self.teacher_arch):
            raise ConfigError("staged training needs identical teacher and student architectures")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.separate_heads and self.method != "TrainAB":
            raise ConfigError("separate_heads only applies to TrainAB")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("student_arch", "teacher_arch"):
            v = getattr(self, k)
            d[k] = v.to_dict() if isinstance(v, ArchSpec) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    method: str
    seed: int
    config: dict
    task_loss: list[float] = field(default_factory=list)
    distill_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    final_accuracy: float | None = None
    wall_time: float = 0.0
    stage_one: dict | None = None

    def to_json(self) -> str:
        return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}, indent=1,
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        d = json.loads(text)
        if d.pop("schema_version", None) != REPORT_SCHEMA_VERSION:
            raise ContractError("unsupported TrainReport schema version")
        return cls(**d)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def smooth(p, temperature: float, eps: float = T.PROB_EPS):
    """Temperature smoothing of probabilities: ``softmax(log(p) / T)`` per row.

    Accepts a :class:`Tensor` (differentiable) or an array (returns an array).
    """
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if isinstance(p, T.Tensor):
        return T.softmax(T.log(T.clamp_min(p, eps)) * (1.0 / temperature))
    p = np.asarray(p, dtype=np.float64)
    return T._softmax_np(np.log(np.maximum(p, eps)) / temperature)


def smoothed_log_probs(logits: T.Tensor, temperature: float) -> T.Tensor:
    """``log smooth(softmax(z), T)`` computed stably from logits."""
    return T.log_softmax(T.log_softmax(logits) * (1.0 / temperature))


def teacher_targets(teacher_logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(teacher_logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return T._softmax_np(logp / temperature)


def distill_loss(student_logits: T.Tensor, teacher_logits, temperature: float,
                 kind: str = "smoothed_ce") -> T.Tensor:
    """Batch mean of ``CE(smooth(softmax(zs)), smooth(softmax(zt)))``.

    Teacher logits are constants.  ``kind="squared_logits"`` returns the
    mean squared logit difference instead.
    """
    zt = teacher_logits.data if isinstance(teacher_logits, T.Tensor) else np.asarray(teacher_logits)
    if zt.shape != student_logits.shape:
        raise ContractError(f"student logits {student_logits.shape} vs teacher logits {zt.shape}")
    if kind == "squared_logits":
        diff = student_logits - T.Tensor(zt.astype(student_logits.dtype))
        return T.mean(diff * diff)
    if kind != "smoothed_ce":
        raise ContractError(f"unknown distillation loss {kind!r}")
    q = teacher_targets(zt, temperature).astype(student_logits.dtype)
    return T.mean(T.neg(T.tsum(T.mul(q, smoothed_log_probs(student_logits, temperature)), axis=1)))


def distill_loss_literal(student_logits: T.Tensor, teacher_logits, temperature: float) -> T.Tensor:
    """The same smoothed cross-entropy composed literally from probabilities."""
    zt = teacher_logits if isinstance(teacher_logits, T.Tensor) else T.Tensor(np.asarray(teacher_logits))
    q = smooth(T.softmax(zt), temperature).data
    return T.cross_entropy(smooth(T.softmax(student_logits), temperature), q)


def task_loss(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    return T.cross_entropy_logits(logits, T.one_hot(labels, logits.shape[1], dtype=logits.dtype))


@dataclass
class Objective:
    total: T.Tensor
    task: float
    distill: float


def cqd_objective(student: Model, z: np.ndarray, y: np.ndarray, teacher_logits: np.ndarray,
                  lam: float, temperature: float, kind: str = "smoothed_ce") -> Objective:
    """Task term on ``z`` plus ``lam`` times the distillation term towards the
    teacher's logits on the paired high-quality inputs.  Both are batch means.
    """
    if not (len(z) == len(y) == len(teacher_logits)):
        raise ContractError("batch is not paired: views, labels and teacher outputs differ in length")
    logits = student.forward(z).astype(np.float64)
    task = task_loss(logits, y)
    dist = distill_loss(logits, teacher_logits, temperature, kind)
    total = task + dist * float(lam)
    return Objective(total, float(task.data), float(dist.data))


def objective_with_teacher(student: Model, teacher: Model, x, z, y, cfg: TrainConfig) -> Objective:
    """:func:`cqd_objective` evaluating the frozen teacher on ``x``."""
    return cqd_objective(student, z, y, teacher.predict_logits(x), cfg.lam, cfg.temperature,
                         cfg.loss2_kind)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _view(ds, view: str) -> np.ndarray:
    if hasattr(ds, "xs"):
        return ds.xs if view == "HQ" else ds.zs
    return ds.images


def evaluate(model: Model, dataset, view: str = "LQ", batch_size: int = 256) -> float:
    """Fraction of samples whose arg-max logit (lowest index on ties) is the label."""
    if view not in ("HQ", "LQ"):
        raise ContractError(f"view must be 'HQ' or 'LQ', got {view!r}")
    images = _view(dataset, view)
    if len(images) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    pred = model.predict_logits(images, batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(dataset.labels)))


def _shuffle_rng(seed: int, stage: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10, stage)))


def _resolve_teacher(cfg: TrainConfig, teacher: Model | None) -> Model | None:
    if teacher is not None:
        return teacher
    if cfg.teacher_checkpoint:
        return load_checkpoint(cfg.teacher_checkpoint)
    return None


def _initial_student(cfg: TrainConfig, num_classes: int, teacher: Model | None) -> Model:
    arch = _arch(cfg.student_arch)
    from_teacher = cfg.init == "teacher" or (
        cfg.init == "auto" and cfg.method in ("CQD", "Staged") and teacher is not None
        and teacher.arch == arch)
    if from_teacher:
        if teacher is None or teacher.arch != arch:
            raise ConfigError("init='teacher' needs a teacher with the student's architecture")
        if teacher.num_classes != num_classes:
            raise ConfigError("teacher and dataset disagree on the number of classes")
        return teacher.copy()
    return build_model(arch, num_classes, cfg.seed)


def _run_epochs(model: Model, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                epochs: int, rng: np.random.Generator, report: TrainReport,
                teacher_logits: np.ndarray | None = None, domain: np.ndarray | None = None,
                eval_fn=None, on_step=None) -> None:
    state = SgdState(lr=cfg.lr_start, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(labels)
    params = model.params
    for epoch in range(epochs):
        state.lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        task_sum = dist_sum = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            if teacher_logits is not None:
                obj = cqd_objective(model, inputs[idx], labels[idx], teacher_logits[idx],
                                    cfg.lam, cfg.temperature, cfg.loss2_kind)
            elif domain is not None:
                obj = _two_head_objective(model, inputs[idx], labels[idx], domain[idx])
            else:
                logits = model.forward(inputs[idx]).astype(np.float64)
                loss = task_loss(logits, labels[idx])
                obj = Objective(loss, float(loss.data), 0.0)
            if not math.isfinite(float(obj.total.data)):
                raise NumericDomainError(
                    f"non-finite loss in {cfg.method} at epoch {epoch}, batch starting {start} "
                    f"(lr={state.lr:g}, task={obj.task}, distill={obj.distill})")
            T.backward(obj.total)
            clip_grad_norm(params, cfg.grad_clip)
            sgd_step(params, state)
            if on_step is not None:
                on_step(model)
            task_sum += obj.task * len(idx)
            dist_sum += obj.distill * len(idx)
            seen += len(idx)
        report.task_loss.append(task_sum / max(seen, 1))
        report.distill_loss.append(dist_sum / max(seen, 1))
        report.lr.append(state.lr)
        if eval_fn is not None:
            report.eval_accuracy.append(eval_fn(model))
        log.debug("%s seed=%d epoch=%d task=%.4f distill=%.4f", cfg.method, cfg.seed, epoch,
                  report.task_loss[-1], report.distill_loss[-1])


HEAD_A = "classifier_a."


def _add_domain_a_head(model: Model, seed: int) -> None:
    from .nets import _classifier_params
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    for k, v in _classifier_params(rng, model.arch.hidden_dim, model.num_classes).items():
        model.params[HEAD_A + k.split(".", 1)[1]] = v


def _two_head_objective(model: Model, x, y, domain) -> Objective:
    h = model.features(x)
    p = model.params
    lb = T.linear(h, p["classifier.weight"], p["classifier.bias"])
    la = T.linear(h, p[HEAD_A + "weight"], p[HEAD_A + "bias"])
    mask = domain.astype(np.float32)[:, None]
    logits = (la * mask + lb * (1.0 - mask)).astype(np.float64)
    loss = task_loss(logits, y)
    return Objective(loss, float(loss.data), 0.0)


def train(config: TrainConfig, paired, teacher: Model | None = None, eval_set=None, on_step=None):
    """Train a model with ``config.method`` on a paired dataset.

    Returns ``(model, report)``.  ``teacher`` (or ``config.teacher_checkpoint``)
    is required for CQD; Staged uses it as its stage-one model when given and
    otherwise trains stage one itself.  ``eval_set`` (paired) is scored after
    every epoch on the view the method targets.  ``on_step(model)`` is
    called after every optimizer step of the final stage.
    """
    cfg = config.validate()
    t0 = time.perf_counter()
    num_classes = int(paired.num_classes or int(np.max(paired.labels)) + 1)
    labels = np.asarray(paired.labels, dtype=np.int64)
    report = TrainReport(cfg.method, cfg.seed, cfg.to_dict())
    teacher = _resolve_teacher(cfg, teacher)
    if teacher is not None and teacher.num_classes != num_classes:
        raise ConfigError("teacher and dataset disagree on the number of classes")
    target_view = "HQ" if cfg.method == "TrainA" else "LQ"
    eval_fn = (lambda m: evaluate(m, eval_set, target_view)) if eval_set is not None else None
    rng = _shuffle_rng(cfg.seed)

    if cfg.method == "CQD":
        if teacher is None:
            raise ConfigError("CQD needs a teacher (teacher_checkpoint or teacher argument)")
        if teacher.arch != _arch(cfg.teacher_arch):
            raise ConfigError("teacher checkpoint does not match teacher_arch")
        model = _initial_student(cfg, num_classes, teacher)
        targets = teacher.predict_logits(paired.xs)
        _run_epochs(model, paired.zs, labels, cfg, cfg.total_epochs, rng, report,
                    teacher_logits=targets, eval_fn=eval_fn, on_step=on_step)
    elif cfg.method == "Staged":
        if teacher is None:
            stage_cfg = replace(cfg, method="TrainA", total_epochs=cfg.stage_one_epochs, init="scratch")
            teacher, stage_report = train(stage_cfg, paired)
            report.stage_one = asdict(stage_report)
        model = _initial_student(replace(cfg, init="teacher") if cfg.init == "auto" else cfg,
                                 num_classes, teacher)
        _run_epochs(model, paired.zs, labels, cfg, cfg.total_epochs, rng, report, eval_fn=eval_fn,
                    on_step=on_step)
    else:
        model = _initial_student(cfg, num_classes, teacher)
        if cfg.method == "TrainA":
            inputs = paired.xs
        elif cfg.method == "TrainB":
            inputs = paired.zs
        else:
            inputs = np.concatenate([paired.xs, paired.zs])
            labels = np.concatenate([labels, labels])
        domain = None
        if cfg.separate_heads:
            _add_domain_a_head(model, cfg.seed)
            domain = np.concatenate([np.ones(len(paired.xs), bool), np.zeros(len(paired.zs), bool)])
        _run_epochs(model, inputs, labels, cfg, cfg.total_epochs, rng, report,
                    domain=domain, eval_fn=eval_fn, on_step=on_step)
        if cfg.separate_heads:
            for k in [k for k in model.params if k.startswith(HEAD_A)]:
                del model.params[k]
    report.final_accuracy = report.eval_accuracy[-1] if report.eval_accuracy else None
    report.wall_time = time.perf_counter() - t0
    return model, report
