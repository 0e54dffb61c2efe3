import json

import pytest

from cqd import harness as H
from cqd.errors import ConfigError

TINY = {
    "name": "tiny",
    "dataset": {"shapes": {"num_classes": 3, "per_class": 12, "side": 32, "clutter": 4}},
    "degradation": {"kind": "lowres", "size": 8},
    "methods": ["TrainA", "TrainB", "TrainAB", "Staged", "CQD"],
    "seeds": [0, 1],
    "train": {"total_epochs": 1, "schedule_epochs": 1, "stage_one_epochs": 1, "batch_size": 16},
}


def tiny(**kw) -> H.ExperimentConfig:
    return H.ExperimentConfig.from_dict({**TINY, **kw})


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    return H.run_experiment(tiny(), out)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_defaults_validate_and_round_trip():
    cfg = H.default_experiment()
    assert cfg.methods == ["TrainA", "TrainB", "TrainAB", "Staged", "CQD"]
    assert cfg.seeds == [0, 1, 2, 3, 4]
    again = H.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.digest() == cfg.digest()


def test_digest_ignores_output_dir():
    assert tiny(out="a").digest() == tiny(out="b").digest()
    assert tiny(seeds=[0]).digest() != tiny().digest()


@pytest.mark.parametrize("bad", [
    {"methods": []}, {"seeds": []}, {"methods": ["TrainX"]}, {"seeds": [0, 0]}, {"seeds": [-1]},
    {"degradation": {"kind": "blur"}}, {"dataset": {"source": "web"}},
    {"dataset": {"source": "directory", "root": "x"}},
    {"dataset": {"source": "directory", "root": "x", "label_file": "l.csv", "split": [0.8, 0.1, 0.1]},
     "degradation": {"kind": "localize"}},
    {"dataset": {"split": [0.5, 0.5, 0.5]}}, {"method_overrides": {"CQD": {"seed": 3}}},
    {"method_overrides": {"Foo": {}}}, {"train": {"lam": -1}}, {"train": {"nonsense": 1}},
    {"tau": {"enabled": True}, "methods": ["TrainB"]}, {"reference_dataset": "IMAGENET"},
    {"schema_version": 7}, {"unknown_field": 1}, {"dataset": {"shapes": {"side": 8}}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        tiny(**bad)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        H.ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "x.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        H.ExperimentConfig.load(tmp_path / "x.json")


def test_train_config_resolution():
    cfg = tiny(methods=["TrainA", "TrainB", "CQD"], train={**TINY["train"], "teacher_arch": "deep"},
               method_overrides={"CQD": {"init": "scratch"}})
    t = cfg.train_config("TrainA", 3)
    assert t.student_arch == t.teacher_arch and t.student_arch.depth_class == "deep" and t.seed == 3
    c = cfg.train_config("CQD", 0)
    assert c.init == "scratch" and c.student_arch.depth_class == "shallow"
    assert c.student_arch.input_size == (32, 32, 3)
    assert cfg.compression() and not tiny().compression()
    # staged training cannot warm-start a shallow student from a deep teacher
    with pytest.raises(ConfigError):
        tiny(train={**TINY["train"], "teacher_arch": "deep"})


def test_plan_puts_teachers_first():
    teachers, others = H.plan_runs(tiny())
    assert [t.method for t in teachers] == ["TrainA", "TrainA"]
    assert all(o.teacher_key == teachers[o.seed].key for o in others if o.method in ("CQD", "Staged"))
    assert all(o.teacher_key is None for o in others if o.method in ("TrainB", "TrainAB"))
    assert len({r.key for r in teachers + others}) == 10


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def test_single_method_run(tmp_path):
    res = H.run_experiment(tiny(methods=["TrainB"], seeds=[0]), tmp_path)
    runs = list((tmp_path / "runs").iterdir())
    assert len(runs) == 1
    assert {p.name for p in runs[0].iterdir()} == {"model.ckpt", "report.json", "result.json"}
    assert [r.label for r in res.table.rows] == ["Fine-tuning"]
    assert res.failures == []
    prov = json.loads((tmp_path / "run.json").read_text())
    assert prov["config_hash"] == H._hash_json(tiny(methods=["TrainB"], seeds=[0]).identity())
    assert "table.csv" in prov["artifacts"] and "numpy" in prov["versions"]


def test_full_table_layout(full_run):
    t = full_run.table
    assert [r.label for r in t.rows] == ["Upper bound", "No adaptation", "Fine-tuning", "Data augment.",
                                         "Staged training", "Proposed"]
    for r in t.rows:
        assert r.status == "ok" and r.n == 2 and r.seeds == (0, 1)
        assert all(0.0 <= a <= 1.0 for a in r.per_seed)
    assert t.row("Upper bound").test == "A" and t.row("No adaptation").test == "B"
    # the reference column for the CUB low-resolution setting
    assert [r.reference for r in t.rows[1:]] == [39.4, 61.0, 62.2, 62.3, 64.4]
    assert "Proposed" in (full_run.out / "table.txt").read_text()


def test_csv_round_trip(full_run):
    text = (full_run.out / "table.csv").read_text()
    back = H.ResultsTable.from_csv(text, full_run.table.title)
    assert back == full_run.table
    with pytest.raises(ConfigError):
        H.ResultsTable.from_csv("a,b\n1,2\n")


def test_resume_skips_completed_runs(full_run, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("a completed run was executed again")
    monkeypatch.setattr(H, "execute_run", boom)
    before = (full_run.out / "table.csv").read_bytes()
    again = H.run_experiment(tiny(), full_run.out)
    assert (full_run.out / "table.csv").read_bytes() == before
    assert again.table == full_run.table


def test_rerun_is_byte_identical(full_run, tmp_path):
    H.run_experiment(tiny(), tmp_path)
    assert (tmp_path / "table.csv").read_bytes() == (full_run.out / "table.csv").read_bytes()


def test_parallel_matches_serial(full_run, tmp_path):
    H.run_experiment(tiny(), tmp_path, jobs=2)
    assert (tmp_path / "table.csv").read_bytes() == (full_run.out / "table.csv").read_bytes()


def test_tampered_teacher_fails_dependents(tmp_path):
    cfg = tiny(methods=["TrainA", "CQD"], seeds=[0])
    H.run_experiment(cfg, tmp_path)
    teacher_dir = next(p for p in (tmp_path / "runs").iterdir() if p.name.startswith("TrainA"))
    cqd_dir = next(p for p in (tmp_path / "runs").iterdir() if p.name.startswith("CQD"))
    # drop the CQD result and corrupt the teacher: the student must not train on it
    (cqd_dir / "result.json").unlink()
    ckpt = teacher_dir / "model.ckpt"
    raw = bytearray(ckpt.read_bytes())
    raw[-1] ^= 0xFF
    ckpt.write_bytes(raw)
    spec = next(s for s in H.plan_runs(cfg)[1] if s.method == "CQD")
    res = H.execute_run(cfg.to_dict(), str(tmp_path), spec.__dict__)
    assert res["status"] == "failed" and "teacher" in res["error"]


def test_partial_results_are_flagged(full_run):
    cfg, results = H.load_results(full_run.out)
    dropped = [r for r in results if not (r["method"] == "CQD" and r["seed"] == 1)]
    table = H.build_table(cfg, dropped)
    assert table.row("Proposed").status == "partial" and table.row("Proposed").n == 1
    assert "(partial)" in table.to_text()
    none = H.build_table(cfg, [r for r in results if r["method"] != "CQD"])
    assert none.row("Proposed").status == "missing" and none.row("Proposed").mean is None


def test_report_rerenders(full_run):
    table, tau = H.report(full_run.out)
    assert table == full_run.table and tau is None
    with pytest.raises(ConfigError):
        H.report(full_run.out / "nowhere")


def test_tau_outputs(tmp_path):
    cfg = tiny(methods=["TrainA", "TrainB", "CQD"], seeds=[0],
               degradation={"kind": "localize"}, tau={"enabled": True, "split": "test", "n": 5})
    res = H.run_experiment(cfg, tmp_path)
    assert res.tau["count"] == 5 and res.tau["per_seed"]["0"]["count"] == 5
    assert (tmp_path / "tau" / "seed0.csv").read_text().startswith("image_id,tau_b,tau_cqd")
    again = H.run_experiment(cfg, tmp_path)
    assert again.tau == res.tau


def test_compression_label(tmp_path):
    cfg = tiny(methods=["TrainA", "CQD"], seeds=[0], degradation={"kind": "localize"},
               train={**TINY["train"], "teacher_arch": "deep"},
               method_overrides={"CQD": {"init": "scratch"}})
    res = H.run_experiment(cfg, tmp_path)
    assert res.table.row("Proposed (deep teacher)").reference == 64.6
    assert res.table.row("Upper bound").reference == 74.9
