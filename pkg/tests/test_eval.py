import copy
import json
import re

import jsonschema
import numpy as np
import pytest

from sewlab.errors import StageError
from sewlab.eval import cda, wacc
from sewlab.eval.experiment import ExperimentConfig, run_experiment, stage
from sewlab.eval.report import (emit_report, read_csv, report_json, sweep_svg, validate)
from sewlab.data import LabeledDataset


class Const:
    def __init__(self, label):
        self.label = label

    def predict(self, x):
        return np.full(len(x), self.label)


class Table:
    """Predicts a fixed label per sample index."""

    def __init__(self, preds):
        self.preds = np.asarray(preds)

    def predict(self, x):
        return self.preds[:len(x)]


def balanced(k, n):
    labels = np.repeat(np.arange(k), n)
    return LabeledDataset(np.zeros((k * n, 1, 2, 2), np.float32), labels, k)


@pytest.mark.parametrize("k", [2, 4, 10])
def test_constant_classifier_cda(k):
    assert cda(Const(1), balanced(k, 7)) == pytest.approx(100.0 / k)


def test_cda_hand_tally():
    labels = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]
    preds = [0, 1, 2, 0, 0, 1, 1, 3, 2, 1, 2, 3, 0, 0, 2, 3, 3, 1, 2, 2]
    right = 0
    for a, b in zip(labels, preds):
        if a == b:
            right += 1
    assert right == 14
    data = LabeledDataset(np.zeros((20, 1, 2, 2), np.float32), np.array(labels), 4)
    assert cda(Table(preds), data) == pytest.approx(70.0)


class Keys:
    def __init__(self, n, target):
        self.images = np.zeros((n, 1, 2, 2), np.float32)
        self.target_labels = np.full(n, target)

    def __len__(self):
        return len(self.images)


def test_wacc_hard_wired_target():
    assert wacc(Const(2), Keys(9, 2)) == 100.0
    assert wacc(Const(1), Keys(9, 2)) == 0.0


def test_empty_sets_rejected():
    empty = LabeledDataset(np.zeros((0, 1, 2, 2), np.float32), np.zeros(0, int), 4)
    with pytest.raises(ValueError):
        cda(Const(0), empty)
    with pytest.raises(ValueError):
        wacc(Const(0), Keys(0, 0))


def test_stage_error_names_stage():
    with pytest.raises(StageError) as info:
        with stage("measure:post"):
            raise ZeroDivisionError("boom")
    assert info.value.stage == "measure:post"
    assert "measure:post" in str(info.value)


def test_failing_stage_reported(monkeypatch, tiny_config):
    import sewlab.eval.experiment as ex

    def broken(*a, **k):
        raise RuntimeError("no trigger")

    monkeypatch.setattr(ex, "reverse_engineer_trigger", broken)
    with pytest.raises(StageError) as info:
        run_experiment(tiny_config)
    assert info.value.stage == "attack:unlearn:pre"


def test_experiment_config_rejects():
    with pytest.raises(ValueError):
        ExperimentConfig(attacks=("distill",))
    with pytest.raises(ValueError):
        ExperimentConfig(target=4)
    with pytest.raises(ValueError):
        ExperimentConfig(sweep_sigmas=(0.1, 0.0))
    with pytest.raises(ValueError):
        ExperimentConfig(attacker_fraction=1.0)


# -- tiny end-to-end runs -------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_report():
    from conftest import TINY

    return run_experiment(ExperimentConfig(run_id="tiny", **TINY))


def test_run_is_byte_identical(tiny_report):
    from conftest import TINY

    again = run_experiment(ExperimentConfig(run_id="tiny", **TINY))
    assert report_json(again) == report_json(tiny_report)


def test_one_row_per_attack_and_model(tiny_report):
    rows = tiny_report.attacks
    cells = [(r["model"], r["attack"], r["param"]) for r in rows]
    assert len(cells) == len(set(cells)) == 2 * 3
    for model in ("pre", "post"):
        for attack in ("finetune", "fineprune", "unlearn"):
            assert len(tiny_report.attack_rows(model, attack)) == 1


def test_attack_subset_respected():
    from conftest import TINY

    cfg = ExperimentConfig(**dict(TINY, attacks=("finetune",), finetune_lrs=(1e-3, 1e-2)))
    rep = run_experiment(cfg)
    assert [(r["model"], r["param"]) for r in rep.attacks] == [
        ("pre", 1e-3), ("pre", 1e-2), ("post", 1e-3), ("post", 1e-2)]


def test_report_percentages_and_config_echo(tiny_report):
    from conftest import TINY

    d = tiny_report.to_dict()
    validate(d)
    assert d["config"]["seed"] == 0 and d["config"]["conv_channels"] == [4]
    assert ExperimentConfig(**d["config"]) == ExperimentConfig(run_id="tiny", **TINY)
    assert d["ablation"][0]["sigma_mode"] == "auto"
    assert [r["sigma"] for r in d["sweeps"]["pre"]] == [0.0, 0.1]


def test_csv_round_trip(tiny_report, tmp_path):
    paths = emit_report(tiny_report, tmp_path, formats=("csv",))
    rows = read_csv(paths[0])
    d = tiny_report.to_dict()
    assert len(rows) == 3 + len(d["attacks"])
    for row, src in zip(rows[3:], d["attacks"]):
        for k in ("param", "cda_before", "cda_after", "wacc_before", "wacc_after"):
            assert row[k] == src[k]
    assert rows[2]["spec"] == d["models"]["post"]["spec"]["spec"]
    sweep = read_csv(paths[1])
    assert [r["wacc"] for r in sweep] == [r["wacc"] for m in ("pre", "post")
                                          for r in d["sweeps"][m]]
    abl = read_csv(paths[2])
    assert [r["spec"] for r in abl] == [r["spec"] for r in d["ablation"]]


def test_sweep_chart_one_polyline_per_metric():
    rows = [{"sigma": s, "cda": 100 - 50 * s, "wacc": 100 - 90 * s} for s in (0, 0.1, 0.3)]
    svg = sweep_svg(rows, "pre")
    metrics = re.findall(r'<polyline data-metric="(\w+)"', svg)
    assert metrics == ["cda", "wacc"]
    assert len(re.findall(r'class="point"', svg)) == 6
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_emit_writes_all_formats(tiny_report, tmp_path):
    paths = emit_report(tiny_report, tmp_path)
    names = sorted(p.rsplit("/", 1)[1] for p in paths)
    assert names == ["tiny_seed0.csv", "tiny_seed0.json", "tiny_seed0_ablation.csv",
                     "tiny_seed0_sweep.csv", "tiny_seed0_sweep_post.svg",
                     "tiny_seed0_sweep_pre.svg"]
    assert json.loads(open(tmp_path / "tiny_seed0.json").read())["integrity_ok"] in (True, False)


def test_emit_to_unwritable_path(tiny_report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(tiny_report, blocker / "sub")


def random_report(rng, base):
    d = copy.deepcopy(base)
    pct = lambda: float(rng.uniform(0, 100))  # noqa: E731
    d["run_id"] = f"r{rng.integers(1000)}"
    d["seed"] = int(rng.integers(0, 2**31))
    d["clean"] = {"cda": pct(), "wacc": pct()}
    for m in d["models"].values():
        m["cda"], m["wacc"] = pct(), pct()
        m["spec"]["spec"] = float(rng.exponential())
        m["spec"]["converged_fraction"] = float(rng.uniform())
    for r in d["attacks"]:
        for k in ("cda_before", "cda_after", "wacc_before", "wacc_after"):
            r[k] = pct()
    for rows in d["sweeps"].values():
        for r in rows:
            r["cda"], r["wacc"] = pct(), pct()
    d["integrity_ok"] = d["clean"]["wacc"] < 35.0
    return d


def test_random_reports_validate(tiny_report):
    base = tiny_report.to_dict()
    rng = np.random.default_rng(0)
    for _ in range(10):
        validate(random_report(rng, base))


def test_schema_rejects_bad_reports(tiny_report):
    base = tiny_report.to_dict()
    bad = copy.deepcopy(base)
    bad["clean"]["cda"] = 101.0
    with pytest.raises(jsonschema.ValidationError):
        validate(bad)
    bad = copy.deepcopy(base)
    bad["models"]["post"]["spec"]["spec"] = -0.1
    with pytest.raises(jsonschema.ValidationError):
        validate(bad)
    bad = copy.deepcopy(base)
    del bad["integrity_ok"]
    with pytest.raises(jsonschema.ValidationError):
        validate(bad)
