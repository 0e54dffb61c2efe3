"""Experiment runner: data, teachers, the five methods across seeds, tables.

An experiment is a JSON document (see :class:`ExperimentConfig`).  Running
it trains, per seed, the high-quality teacher first and then every other
requested method, storing each run under ``<out>/runs/<name>/`` keyed by a
content hash of everything that determines it.  Re-running skips any run
whose key and checkpoint hash already match, so interrupted experiments
resume where they stopped.  All files are written to a temporary name and
renamed into place.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import __version__
from .analysis import read_tau_csv, summarize, tau_scatter, write_tau_csv
from .data import ShapesConfig, gen_shapes, load_image_dir, split
from .degrade import BOX_REQUIRED, PairedDataset, make_paired, normalize_descriptor
from .distill import METHODS, TrainConfig, evaluate, train
from .errors import CQDError, ConfigError
from .nets import ARCHS, ArchSpec, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RUN_FORMAT = 1
TEACHER = "TrainA"
NEEDS_TEACHER = ("CQD", "Staged")

# Table rows in display order: (label, method, trained on, tested on).
ROWS = (
    ("Upper bound", "TrainA", "A", "A"),
    ("No adaptation", "TrainA", "A", "B"),
    ("Fine-tuning", "TrainB", "B", "B"),
    ("Data augment.", "TrainAB", "A+B", "B"),
    ("Staged training", "Staged", "A,B", "B"),
    ("Proposed", "CQD", "CQD", "B"),
)

# Published per-image accuracies (percent) for the same rows, by reference
# dataset and degradation kind.  Display only.
REFERENCE = {
    ("CUB", "localize"): (67.0, 57.4, 60.8, 63.6, 62.4, 64.4),
    ("CUB", "lowres"): (67.0, 39.4, 61.0, 62.2, 62.3, 64.4),
    ("CARS", "lowres"): (59.3, 7.6, 41.6, 47.3, 48.4, 48.8),
    ("CUB", "edge"): (67.0, 1.9, 29.2, 32.5, 30.4, 34.1),
    ("CARS", "edge"): (59.3, 4.2, 45.5, 51.3, 50.1, 51.5),
    ("CUB", "tps"): (67.0, 49.7, 58.4, 61.7, 60.9, 63.0),
    ("CUB", "localize_lowres"): (67.0, 24.9, 46.2, 51.7, 50.4, 52.7),
}
# Deeper teacher distilled into the shallow student, localized -> non-localized.
REFERENCE_COMPRESSION = {("CUB", "localize"): (74.9, None, 60.8, None, None, 64.6)}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def default_dataset() -> dict:
    shapes = asdict(ShapesConfig())
    shapes.pop("seed")
    shapes["scale_range"] = list(shapes["scale_range"])
    return {"source": "synthetic", "shapes": shapes, "base_seed": 0,
            "split": [200 / 320, 20 / 320, 100 / 320]}


@dataclass
class ExperimentConfig:
    """Everything that determines an experiment's results (plus ``out``)."""

    name: str = "lowres"
    dataset: dict = field(default_factory=default_dataset)
    degradation: dict = field(default_factory=lambda: {"kind": "lowres", "size": 16})
    methods: list = field(default_factory=lambda: list(METHODS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    # per-method TrainConfig overrides, e.g. {"CQD": {"init": "scratch"}}
    method_overrides: dict = field(default_factory=dict)
    tau: dict = field(default_factory=lambda: {"enabled": False, "split": "train", "n": 1000})
    reference_dataset: str = "CUB"
    out: str = "results"
    schema_version: int = SCHEMA_VERSION

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported experiment schema version {version}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        base = cls()
        if "train" in d:
            # missing TrainConfig fields fall back to their defaults
            d["train"] = {**base.train, **d["train"]}
        if "tau" in d:
            d["tau"] = {**base.tau, **d["tau"]}
        if "dataset" in d and d["dataset"].get("source", "synthetic") == "synthetic":
            dd = default_dataset()
            d["dataset"] = {**dd, **d["dataset"], "shapes": {**dd["shapes"], **d["dataset"].get("shapes", {})}}
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read experiment config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        return cls.from_dict(d)

    def identity(self) -> dict:
        """The fields that determine results (``out`` excluded)."""
        d = self.to_dict()
        d.pop("out")
        return d

    def digest(self) -> str:
        return _hash_json(self.identity())

    # -- checks ----------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected a subset of {METHODS}")
        if len(set(self.methods)) != len(self.methods) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("methods and seeds must not repeat")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        try:
            self.degradation = normalize_descriptor(self.degradation)
        except (CQDError, KeyError, TypeError) as e:
            raise ConfigError(f"bad degradation descriptor: {e}") from e
        src = self.dataset.get("source")
        if src == "synthetic":
            try:
                self.shapes_config(0)
            except TypeError as e:
                raise ConfigError(f"bad synthetic dataset settings: {e}") from e
        elif src == "directory":
            if "root" not in self.dataset or "label_file" not in self.dataset:
                raise ConfigError("directory datasets need 'root' and 'label_file'")
        else:
            raise ConfigError(f"unknown dataset source {src!r}")
        fr = self.dataset.get("split")
        if fr is None or len(fr) != 3 or abs(sum(fr) - 1) > 1e-9 or min(fr) < 0 or fr[2] <= 0:
            raise ConfigError("dataset split must be three fractions summing to 1 with a test share")
        if self._needs_boxes() and src == "directory" and not self.dataset.get("box_file"):
            raise ConfigError(f"degradation {self.degradation['kind']!r} needs bounding boxes; "
                              "the dataset has no box_file")
        for m, ov in self.method_overrides.items():
            if m not in METHODS:
                raise ConfigError(f"override for unknown method {m!r}")
            if not isinstance(ov, dict) or {"method", "seed"} & set(ov):
                raise ConfigError("overrides must be objects and cannot set method or seed")
        for m in set(self.methods) | ({TEACHER} if set(self.methods) & set(NEEDS_TEACHER) else set()):
            self.train_config(m, 0).validate()
        if self.tau.get("enabled"):
            if not {"TrainB", "CQD"} <= set(self.methods):
                raise ConfigError("tau analysis compares TrainB and CQD; request both methods")
            if self.tau.get("split") not in ("train", "val", "test"):
                raise ConfigError("tau split must be train, val or test")
        if self.reference_dataset not in ("CUB", "CARS"):
            raise ConfigError("reference_dataset must be CUB or CARS")
        return self

    def _needs_boxes(self) -> bool:
        return self.degradation["kind"] in BOX_REQUIRED or bool(self.degradation.get("crop"))

    # -- derived settings ------------------------------------------------
    def image_side(self) -> int:
        out = self.degradation.get("out_size")
        if out:
            return int(out)
        if self.dataset["source"] == "synthetic":
            return int(self.dataset["shapes"]["side"])
        return int(self.dataset.get("size") or 64)

    def shapes_config(self, seed: int) -> ShapesConfig:
        sh = dict(self.dataset["shapes"])
        sh["scale_range"] = tuple(sh["scale_range"])
        return ShapesConfig(**sh, seed=int(self.dataset.get("base_seed", 0)) + seed).validate()

    def _arch_dict(self, a) -> Any:
        if isinstance(a, str):
            if a not in ARCHS:
                raise ConfigError(f"unknown architecture {a!r}")
            return ARCHS[a](self.image_side()).to_dict()
        return a

    def train_config(self, method: str, seed: int) -> TrainConfig:
        d = {**self.train, **self.method_overrides.get(method, {})}
        d.update(method=method, seed=int(seed), teacher_checkpoint=None)
        d["student_arch"] = self._arch_dict(d.get("student_arch", "shallow"))
        d["teacher_arch"] = self._arch_dict(d.get("teacher_arch", "shallow"))
        if method == TEACHER:
            d["student_arch"] = d["teacher_arch"]
        if isinstance(d.get("student_arch"), dict):
            d["student_arch"] = ArchSpec.from_dict(d["student_arch"])
        if isinstance(d.get("teacher_arch"), dict):
            d["teacher_arch"] = ArchSpec.from_dict(d["teacher_arch"])
        try:
            return TrainConfig.from_dict(d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def compression(self) -> bool:
        t = self.train_config("CQD", 0)
        return t.student_arch != t.teacher_arch


def default_experiment() -> ExperimentConfig:
    return ExperimentConfig().validate()


# ---------------------------------------------------------------------------
# Small utilities
# ---------------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, ArchSpec):
        return o.to_dict()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _hash_json(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def versions() -> dict:
    import PIL
    return {"cqd": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pillow": PIL.__version__, "platform": platform.platform()}


def write_provenance(out, command: str, config: dict | None, artifacts: Iterable[Path],
                     extra: dict | None = None) -> Path:
    """``run.json`` in ``out``: config hash, artifact hashes and versions."""
    out = Path(out)
    arts = {}
    for p in sorted(set(Path(a) for a in artifacts)):
        if p.is_file():
            arts[str(p.relative_to(out)) if p.is_relative_to(out) else str(p)] = file_sha256(p)
    record = {"command": command, "argv": sys.argv[1:], "config": config,
              "config_hash": None if config is None else _hash_json(config),
              "artifacts": arts, "versions": versions(),
              "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    if extra:
        record.update(extra)
    path = out / "run.json"
    atomic_write(path, json.dumps(record, indent=1, sort_keys=True, default=_json_default))
    return path


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class SeedData:
    train: PairedDataset
    val: PairedDataset
    test: PairedDataset

    def digest(self) -> str:
        h = hashlib.sha256()
        for ds in (self.train, self.val, self.test):
            h.update(ds.digest().encode())
        return h.hexdigest()

    def get(self, name: str) -> PairedDataset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


_DATA_CACHE: dict[str, SeedData] = {}


def data_key(cfg: ExperimentConfig, seed: int) -> str:
    return _hash_json({"dataset": cfg.dataset, "degradation": cfg.degradation, "seed": seed})


def _pair_seed(seed: int, part: int) -> int:
    return int(np.random.SeedSequence([seed, part, 97]).generate_state(1, np.uint32)[0])


def build_seed_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    """The paired train/val/test splits for one seed (memoized per process)."""
    key = data_key(cfg, seed)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    if cfg.dataset["source"] == "synthetic":
        ds = gen_shapes(cfg.shapes_config(seed))
    else:
        d = cfg.dataset
        ds, errors = load_image_dir(d["root"], d["label_file"], d.get("box_file"), d.get("size", 64))
        for e in errors:
            log.warning("dataset: %s", e)
    parts = split(ds, tuple(cfg.dataset["split"]), seed)
    paired = [make_paired(p.images, p.labels, cfg.degradation, _pair_seed(seed, k), boxes=p.boxes,
                          num_classes=ds.num_classes) for k, p in enumerate(parts)]
    for p, name in zip(paired, ("train", "val", "test")):
        if p.skipped:
            log.warning("%s split: skipped %d samples (%s)", name, len(p.skipped), p.skipped[0][1])
    out = SeedData(*paired)
    _DATA_CACHE.clear()  # keep one seed's data resident at a time
    _DATA_CACHE[key] = out
    return out


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass
class RunSpec:
    method: str
    seed: int
    key: str
    train: dict
    teacher_key: str | None

    @property
    def name(self) -> str:
        return f"{self.method}-s{self.seed}-{self.key[:12]}"


def plan_runs(cfg: ExperimentConfig) -> tuple[list[RunSpec], list[RunSpec]]:
    """(teacher runs, dependent runs) for every seed."""
    teachers, others = [], []
    needs_teacher = TEACHER in cfg.methods or bool(set(cfg.methods) & set(NEEDS_TEACHER))
    for seed in cfg.seeds:
        dkey = data_key(cfg, seed)
        tkey = None
        if needs_teacher:
            tcfg = cfg.train_config(TEACHER, seed).to_dict()
            tkey = _hash_json({"format": RUN_FORMAT, "data": dkey, "train": tcfg, "teacher": None})
            teachers.append(RunSpec(TEACHER, seed, tkey, tcfg, None))
        for m in cfg.methods:
            if m == TEACHER:
                continue
            mcfg = cfg.train_config(m, seed).to_dict()
            dep = tkey if m in NEEDS_TEACHER else None
            key = _hash_json({"format": RUN_FORMAT, "data": dkey, "train": mcfg, "teacher": dep})
            others.append(RunSpec(m, seed, key, mcfg, dep))
    return teachers, others


def _run_dir(out: Path, spec: RunSpec) -> Path:
    return out / "runs" / spec.name


def _completed(out: Path, spec: RunSpec) -> dict | None:
    """The stored result if ``spec`` already ran to completion, else None."""
    d = _run_dir(out, spec)
    try:
        res = json.loads((d / "result.json").read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if res.get("key") != spec.key or res.get("status") != "ok":
        return None
    ckpt = d / "model.ckpt"
    if not ckpt.is_file() or file_sha256(ckpt) != res.get("checkpoint_sha256"):
        return None
    return res


def _teacher_path(out: Path, teacher_key: str, seed: int) -> Path:
    return out / "runs" / f"{TEACHER}-s{seed}-{teacher_key[:12]}" / "model.ckpt"


def execute_run(cfg_dict: dict, out: str, spec_dict: dict) -> dict:
    """Train and evaluate one (method, seed); safe to call in a worker process."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    spec = RunSpec(**spec_dict)
    out_p = Path(out)
    d = _run_dir(out_p, spec)
    t0 = time.perf_counter()
    try:
        teacher = None
        if spec.teacher_key is not None:
            tres = _completed(out_p, RunSpec(TEACHER, spec.seed, spec.teacher_key, {}, None))
            if tres is None:
                raise CQDError(f"teacher run for seed {spec.seed} is missing or its checkpoint "
                               "hash does not match")
            teacher = load_checkpoint(_teacher_path(out_p, spec.teacher_key, spec.seed))
        data = build_seed_data(cfg, spec.seed)
        tc = TrainConfig.from_dict({**spec.train,
                                    "student_arch": ArchSpec.from_dict(spec.train["student_arch"]),
                                    "teacher_arch": ArchSpec.from_dict(spec.train["teacher_arch"])})
        model, report = train(tc, data.train, teacher=teacher)
        acc = {"B": evaluate(model, data.test, "LQ")}
        if spec.method == TEACHER:
            acc["A"] = evaluate(model, data.test, "HQ")
        save_checkpoint(model, d / "model.ckpt", extra={"run_key": spec.key})
        atomic_write(d / "report.json", report.to_json())
        res = {"status": "ok", "key": spec.key, "method": spec.method, "seed": spec.seed,
               "accuracy": acc, "teacher_key": spec.teacher_key, "data_digest": data.digest(),
               "checkpoint_sha256": file_sha256(d / "model.ckpt"),
               "wall_time": time.perf_counter() - t0}
    except CQDError as e:
        log.error("run %s failed: %s", spec.name, e)
        res = {"status": "failed", "key": spec.key, "method": spec.method, "seed": spec.seed,
               "error": f"{type(e).__name__}: {e}"}
    atomic_write(d / "result.json", json.dumps(res, indent=1, sort_keys=True))
    return res


def _execute_all(cfg: ExperimentConfig, out: Path, specs: list[RunSpec], jobs: int) -> list[dict]:
    pending, results = [], {}
    for s in specs:
        done = _completed(out, s)
        if done is not None:
            log.info("skip %s (already complete)", s.name)
            results[s.key] = done
        else:
            pending.append(s)
    cfg_dict = cfg.to_dict()
    if jobs <= 1 or len(pending) <= 1:
        for s in pending:
            log.info("run %s", s.name)
            results[s.key] = execute_run(cfg_dict, str(out), asdict(s))
    else:
        import multiprocessing as mp
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as pool:
            futs = {s.key: pool.submit(execute_run, cfg_dict, str(out), asdict(s)) for s in pending}
            for s in pending:
                try:
                    results[s.key] = futs[s.key].result()
                except Exception as e:  # worker crashed outright
                    results[s.key] = {"status": "failed", "key": s.key, "method": s.method,
                                      "seed": s.seed, "error": f"{type(e).__name__}: {e}"}
    return [results[s.key] for s in specs]


# ---------------------------------------------------------------------------
# Results table
# ---------------------------------------------------------------------------

CSV_FIELDS = ("label", "method", "train", "test", "mean", "std", "n", "seeds", "per_seed",
              "reference", "status")


@dataclass
class TableRow:
    label: str
    method: str
    train: str
    test: str
    mean: float | None
    std: float | None
    n: int
    seeds: tuple
    per_seed: tuple
    reference: float | None
    status: str  # "ok", "partial" or "missing"


@dataclass
class ResultsTable:
    title: str
    rows: list[TableRow]

    def row(self, label: str) -> TableRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def by_method(self, method: str, test: str = "B") -> TableRow:
        for r in self.rows:
            if r.method == method and r.test == test:
                return r
        raise KeyError((method, test))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.label, r.method, r.train, r.test, _fmt(r.mean), _fmt(r.std), r.n,
                        ";".join(str(s) for s in r.seeds), ";".join(repr(a) for a in r.per_seed),
                        _fmt(r.reference), r.status])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, title: str = "") -> "ResultsTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_FIELDS:
            raise ConfigError("not a results table CSV")
        out = []
        for r in rows[1:]:
            out.append(TableRow(r[0], r[1], r[2], r[3], _parse(r[4]), _parse(r[5]), int(r[6]),
                                tuple(int(s) for s in r[7].split(";") if s),
                                tuple(float(a) for a in r[8].split(";") if a), _parse(r[9]), r[10]))
        return cls(title, out)

    def to_text(self) -> str:
        head = ("Description", "Method", "Test", "Accuracy (%)", "Seeds", "Reference")
        lines = []
        for r in self.rows:
            if r.mean is None:
                acc = "missing"
            else:
                acc = f"{100 * r.mean:.1f} ± {100 * (r.std or 0):.1f}"
                if r.status == "partial":
                    acc += " (partial)"
            lines.append((r.label, r.train, r.test, acc, str(r.n),
                          "-" if r.reference is None else f"{r.reference:.1f}"))
        widths = [max(len(x) for x in col) for col in zip(head, *lines)]
        fmt = " | ".join(f"{{:<{w}}}" for w in widths)
        sep = "-+-".join("-" * w for w in widths)
        body = [fmt.format(*head), sep] + [fmt.format(*ln) for ln in lines]
        return f"{self.title}\n" + "\n".join(body) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _parse(s: str):
    return None if s == "" else float(s)


def build_table(cfg: ExperimentConfig, results: list[dict]) -> ResultsTable:
    """Aggregate run results into the display-ordered table."""
    compression = cfg.compression()
    refs = (REFERENCE_COMPRESSION if compression else REFERENCE).get(
        (cfg.reference_dataset, cfg.degradation["kind"]))
    by = {}
    for r in results:
        by.setdefault(r["method"], {})[r["seed"]] = r
    rows = []
    for i, (label, method, tr, te) in enumerate(ROWS):
        if method not in cfg.methods:
            continue
        seeds, accs = [], []
        for s in cfg.seeds:
            r = by.get(method, {}).get(s)
            if r is not None and r.get("status") == "ok":
                seeds.append(s)
                accs.append(float(r["accuracy"][te]))
        if compression and method == "CQD":
            label = "Proposed (deep teacher)"
        if accs:
            mean = float(np.mean(accs))
            std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        else:
            mean = std = None
        status = "ok" if len(accs) == len(cfg.seeds) else ("partial" if accs else "missing")
        rows.append(TableRow(label, method, tr, te, mean, std, len(accs), tuple(seeds),
                             tuple(accs), None if refs is None else refs[i], status))
    kind = cfg.degradation["kind"]
    title = f"{cfg.name}: {kind} ({cfg.reference_dataset} reference column, display only)"
    return ResultsTable(title, rows)


# ---------------------------------------------------------------------------
# tau analysis
# ---------------------------------------------------------------------------

def run_tau(cfg: ExperimentConfig, out: Path, results: list[dict]) -> dict:
    """Per-seed tau scatter for the TrainB and CQD models; returns a summary."""
    split_name = cfg.tau.get("split", "train")
    n = cfg.tau.get("n")
    ok = {(r["method"], r["seed"]): r for r in results if r.get("status") == "ok"}
    per_seed, all_records = {}, []
    for seed in cfg.seeds:
        rb, rc = ok.get(("TrainB", seed)), ok.get(("CQD", seed))
        if rb is None or rc is None:
            per_seed[str(seed)] = {"defined": False, "reason": "missing TrainB or CQD run"}
            continue
        key = _hash_json({"b": rb["checkpoint_sha256"], "c": rc["checkpoint_sha256"],
                          "split": split_name, "n": n, "data": data_key(cfg, seed)})
        sdir = out / "tau"
        csv_path, sum_path = sdir / f"seed{seed}.csv", sdir / f"seed{seed}.json"
        cached = None
        if sum_path.is_file() and csv_path.is_file():
            try:
                cached = json.loads(sum_path.read_text())
            except json.JSONDecodeError:
                cached = None
        if cached is not None and cached.get("key") == key:
            recs = read_tau_csv(csv_path)
            summ = summarize(recs, cached.get("skipped", []))
        else:
            data = build_seed_data(cfg, seed).get(split_name)
            mb = load_checkpoint(out / "runs" / RunSpec("TrainB", seed, rb["key"], {}, None).name / "model.ckpt")
            mc = load_checkpoint(out / "runs" / RunSpec("CQD", seed, rc["key"], {}, None).name / "model.ckpt")
            recs, summ = tau_scatter(mb, mc, data.zs, data.labels, data.boxes, n=n)
            sdir.mkdir(parents=True, exist_ok=True)
            tmp = sdir / f".seed{seed}.csv.tmp"
            write_tau_csv(tmp, recs)
            os.replace(tmp, csv_path)
            d = summ.to_dict()
            d["key"] = key
            d["skipped"] = [list(s) for s in d["skipped"]]
            atomic_write(sum_path, json.dumps(d, indent=1, sort_keys=True))
        all_records.extend(recs)
        per_seed[str(seed)] = summ.to_dict()
    overall = summarize(all_records).to_dict()
    overall["per_seed"] = per_seed
    atomic_write(out / "tau_summary.json", json.dumps(overall, indent=1, sort_keys=True,
                                                     default=_json_default))
    return overall


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    table: ResultsTable
    results: list[dict]
    failures: list[dict]
    tau: dict | None
    out: Path

    @property
    def fully_failed_methods(self) -> list[str]:
        return [r.method for r in self.table.rows if r.status == "missing"]


def run_experiment(cfg: ExperimentConfig, out=None, jobs: int = 1) -> ExperimentResult:
    """Run every (method, seed) in dependency order and write the tables.

    Outputs under ``out`` (default ``cfg.out``): ``runs/`` with one directory
    per run, ``table.csv``, ``table.txt``, ``experiment.json``, optional
    ``tau/`` plus ``tau_summary.json``, and ``run.json``.
    """
    cfg = cfg.validate()
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "experiment.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    teachers, others = plan_runs(cfg)
    results = _execute_all(cfg, out, teachers, jobs)
    results += _execute_all(cfg, out, others, jobs)
    failures = [r for r in results if r.get("status") != "ok"]
    tau = run_tau(cfg, out, results) if cfg.tau.get("enabled") else None
    table = build_table(cfg, results)
    atomic_write(out / "table.csv", table.to_csv())
    atomic_write(out / "table.txt", table.to_text())
    index = [{"name": RunSpec(r["method"], r["seed"], r["key"], {}, None).name, **r} for r in results]
    atomic_write(out / "runs.json", json.dumps(index, indent=1, sort_keys=True))
    arts = [out / "table.csv", out / "table.txt", out / "experiment.json", out / "runs.json"]
    arts += [p for p in (out / "runs").rglob("*") if p.is_file()]
    if tau is not None:
        arts += [out / "tau_summary.json"] + list((out / "tau").glob("*"))
    write_provenance(out, "run", cfg.identity(), arts,
                     {"failures": failures, "config_digest": cfg.digest()})
    return ExperimentResult(table, results, failures, tau, out)


def load_results(out) -> tuple[ExperimentConfig, list[dict]]:
    """Config and run results stored by :func:`run_experiment` in ``out``."""
    out = Path(out)
    try:
        cfg = ExperimentConfig.from_dict(json.loads((out / "experiment.json").read_text()))
        results = json.loads((out / "runs.json").read_text())
    except OSError as e:
        raise ConfigError(f"{out} holds no experiment results: {e}") from e
    for r in results:
        r.pop("name", None)
    return cfg, results


def report(out) -> tuple[ResultsTable, dict | None]:
    """Re-render ``table.csv``/``table.txt`` from stored run results."""
    out = Path(out)
    cfg, results = load_results(out)
    table = build_table(cfg, results)
    atomic_write(out / "table.csv", table.to_csv())
    atomic_write(out / "table.txt", table.to_text())
    tau = None
    if (out / "tau_summary.json").is_file():
        tau = json.loads((out / "tau_summary.json").read_text())
    return table, tau
