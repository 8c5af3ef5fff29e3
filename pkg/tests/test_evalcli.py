"""Eval-set selection, ASR, report export, experiment configs and the ``advlatent`` CLI."""

import json
import math
import threading

import pytest
import torch

from advlatent.attacks import AttackResult
from advlatent.datasets import Dataset
from advlatent.evalcli import (
    ASRCurve,
    EvalError,
    ExperimentError,
    PlotSpec,
    ReportBundle,
    ReportError,
    compute_asr,
    curves_from_rows,
    emit_plots,
    eps_grid,
    export_results,
    resolve_config,
    roster_deltas,
    run_cells,
    select_eval_set,
)
from advlatent.evalcli.cli import CLIError, build_parser, main, parse_args
from advlatent.evalcli.experiments import DEFAULTS, TEMPLATES, Cell
from advlatent.evalcli.report import csv_text


def _result(success, i=0):
    return AttackResult(i, success, 1, 0.0, torch.zeros(1))


class _Oracle(torch.nn.Module):
    """Predicts the stored label for the first ``k`` test samples and a wrong one elsewhere."""

    def __init__(self, labels, wrong_from=None):
        super().__init__()
        self.labels = labels
        self.wrong_from = wrong_from

    def forward(self, x):
        idx = x[:, 0, 0, 0].long()
        pred = self.labels[idx].clone()
        if self.wrong_from is not None:
            pred[idx >= self.wrong_from] = (pred[idx >= self.wrong_from] + 1) % 10
        return torch.nn.functional.one_hot(pred, 10).float()


def _indexed_dataset(n=1024):
    x = torch.zeros(n, 1, 2, 2)
    x[:, 0, 0, 0] = torch.arange(n).float()
    y = torch.randint(0, 10, (n,), generator=torch.Generator().manual_seed(0))
    return Dataset("indexed", x, y, x, y)


class TestEvalSet:
    def test_perfect_classifier_takes_shuffled_prefix(self):
        ds = _indexed_dataset()
        ev = select_eval_set(_Oracle(ds.test_y), ds, 100, seed=3)
        order = torch.randperm(1024, generator=torch.Generator().manual_seed(3))
        assert ev.sample_ids == order[:100].tolist()
        assert torch.equal(ev.labels, ds.test_y[order[:100]])
        assert len(ev) == 100

    def test_only_correct_samples(self):
        ds = _indexed_dataset()
        model = _Oracle(ds.test_y, wrong_from=600)
        ev = select_eval_set(model, ds, 500, seed=1)
        assert max(ev.sample_ids) < 600
        assert torch.equal(model(ev.x).argmax(1), ev.labels)

    def test_not_enough_correct(self):
        ds = _indexed_dataset()
        with pytest.raises(EvalError, match="only 600"):
            select_eval_set(_Oracle(ds.test_y, wrong_from=600), ds, 1000)

    def test_random_model_near_chance(self):
        ds = _indexed_dataset()
        torch.manual_seed(0)
        random_model = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(4, 10))
        with pytest.raises(EvalError):
            select_eval_set(random_model, ds, 1000)


class TestASR:
    def test_all_none_some(self):
        assert compute_asr([_result(True)] * 4) == 1.0
        assert compute_asr([_result(False)] * 4) == 0.0
        assert compute_asr([_result(i < 3) for i in range(10)]) == 0.3

    def test_empty(self):
        with pytest.raises(EvalError):
            compute_asr([])

    def test_curve_validation(self):
        ASRCurve("m", "pgd", "input", "linf", (0.1, 0.2), (0.0, 1.0), (10, 10))
        with pytest.raises(ReportError):
            ASRCurve("m", "pgd", "input", "linf", (0.2, 0.1), (0.0, 1.0), (10, 10))
        with pytest.raises(ReportError):
            ASRCurve("m", "pgd", "input", "linf", (0.1, 0.2), (0.0, 1.5), (10, 10))
        with pytest.raises(ReportError):
            ASRCurve("m", "pgd", "input", "linf", (0.1,), (0.0, 1.0), (10, 10))

    def test_curves_from_rows(self):
        rows = [
            {"algo": "PGD", "space": s, "norm": "linf", "eps": e, "asr": a, "n": 5, "status": "ok"}
            for s, vals in (("input", (0.4, 0.2)), ("latent", (0.1, 0.0)))
            for e, a in zip((0.2, 0.1), vals)
        ]
        rows.append({"algo": "PGD", "space": "input", "norm": "linf", "eps": 0.3, "status": "failed"})
        curves = curves_from_rows(rows, "m")
        assert [c.space for c in curves] == ["input", "latent"]
        assert curves[0].eps == (0.1, 0.2) and curves[0].asr == (0.2, 0.4)

    def test_eps_grid(self):
        assert eps_grid("0.01:0.10:0.01") == [round(0.01 * k, 10) for k in range(1, 11)]
        assert eps_grid("0.003,0.01,0.03") == [0.003, 0.01, 0.03]


def _bundle(rows=None):
    rows = rows if rows is not None else [
        {"algo": "PGD", "eps": 0.1, "space": "input", "asr": 0.25, "n": 4, "status": "ok", "diagnostics": ""},
        {"algo": "PGD", "eps": 0.1, "space": "latent", "asr": 1 / 3, "n": 3, "status": "ok", "diagnostics": ""},
    ]
    columns = ["algo", "eps", "space", "asr", "n", "status", "diagnostics"]
    plots = [PlotSpec("asr", "line", "eps", "asr", ("space",)), PlotSpec("bars", "bar", "space", "asr", ("algo",))]
    return ReportBundle("demo", columns, rows, {"config": {"seed": 0, "grid": [0.1]}}, plots)


class TestReport:
    def test_csv_layout(self):
        text = csv_text(_bundle())
        lines = text.splitlines()
        assert lines[0] == "algo,eps,space,asr,n,status,diagnostics"
        assert lines[2] == "PGD,0.1,latent,0.3333333333,3,ok,"

    def test_reexport_byte_identical(self, tmp_path):
        b = _bundle()
        export_results(b, tmp_path / "a")
        export_results(b, tmp_path / "b")
        for name in ("demo.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_json_export(self, tmp_path):
        path, manifest = export_results(_bundle(), tmp_path, "json")
        data = json.loads(path.read_text())
        assert data["columns"][0] == "algo" and len(data["rows"]) == 2
        assert json.loads(manifest.read_text())["complete"] is True

    def test_empty_bundle(self, tmp_path):
        with pytest.raises(ReportError):
            export_results(_bundle([]), tmp_path)
        with pytest.raises(ReportError):
            emit_plots(_bundle([]), tmp_path)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ReportError):
            export_results(_bundle(), tmp_path, "xlsx")

    def test_quarantined_cell(self, tmp_path):
        def boom():
            raise RuntimeError("diverged")

        rows = run_cells([Cell({"algo": "PGD", "eps": 0.1, "space": "input"}, lambda: {"asr": 0.5, "n": 2}), Cell({"algo": "PGD", "eps": 0.1, "space": "latent"}, boom)])
        b = _bundle(rows)
        assert not b.complete and len(b.failed) == 1
        lines = csv_text(b).splitlines()
        assert lines[1].endswith(",ok,")
        assert lines[2] == "PGD,0.1,latent,,,failed,RuntimeError: diverged"
        export_results(b, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["complete"] is False and manifest["failed_cells"] == 1

    def test_plots_written(self, tmp_path):
        paths = emit_plots(_bundle(), tmp_path)
        assert [p.name for p in paths] == ["asr.png", "bars.png"]
        assert all(p.stat().st_size > 0 for p in paths)

    def test_nan_in_manifest_becomes_null(self, tmp_path):
        b = _bundle()
        b.manifest["summary"] = {"mean": math.nan}
        _, manifest = export_results(b, tmp_path)
        assert json.loads(manifest.read_text())["summary"]["mean"] is None


class TestCells:
    def test_order_preserved_with_pool(self):
        cells = [Cell({"i": i}, (lambda i=i: {"v": i * i})) for i in range(20)]
        rows = run_cells(cells, workers=4)
        assert [r["v"] for r in rows] == [i * i for i in range(20)]

    def test_pool_bounded(self):
        active, peak, lock = [0], [0], threading.Lock()

        def work():
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            threading.Event().wait(0.02)
            with lock:
                active[0] -= 1
            return {}

        run_cells([Cell({}, work) for _ in range(12)], workers=3)
        assert peak[0] <= 3

    def test_multi_row_cells(self):
        rows = run_cells([Cell({"k": 1}, lambda: [{"v": 1}, {"v": 2}])])
        assert [(r["k"], r["v"], r["status"]) for r in rows] == [(1, 1, "ok"), (1, 2, "ok")]


class TestConfig:
    def test_templates_have_defaults(self):
        assert set(TEMPLATES) == set(DEFAULTS)
        assert DEFAULTS["table1"]["eps_grid"] == [round(0.01 * k, 10) for k in range(1, 11)]
        assert DEFAULTS["depth"]["eps_grid"] == [0.003, 0.006, 0.009, 0.012, 0.015]
        assert DEFAULTS["depth"]["features"] == [0, 2, 4]

    def test_merge_and_workers(self):
        cfg = resolve_config("depth", {"n": 50, "model": {"epochs": 2}})
        assert cfg["n"] == 50 and cfg["model"]["epochs"] == 2 and cfg["model"]["arch"] == "vgg-cifar"
        assert cfg["workers"] == 1
        assert DEFAULTS["depth"]["model"]["epochs"] == 6

    def test_rejections(self):
        with pytest.raises(ExperimentError):
            resolve_config("nope")
        with pytest.raises(ExperimentError):
            resolve_config("table1", {"bogus": 1})
        with pytest.raises(ExperimentError):
            resolve_config("table1", {"eps_grid": [0.1, 0.05]})
        with pytest.raises(Exception):
            resolve_config("depth", {"attacks": [{"algo": "SIGNOPT", "norm": "linf"}]})

    def test_roster_deltas(self):
        rows = [
            {"algo": "PGD", "norm": "linf", "eps": 0.01, "space": "input", "asr": 0.9, "status": "ok"},
            {"algo": "PGD", "norm": "linf", "eps": 0.01, "space": "latent", "asr": 0.3, "status": "ok"},
            {"algo": "NES", "norm": "linf", "eps": 0.01, "space": "input", "asr": 0.5, "status": "ok"},
            {"algo": "NES", "norm": "linf", "eps": 0.01, "space": "latent", "asr": 0.4, "status": "ok"},
            {"algo": "MIM", "norm": "linf", "eps": 0.01, "space": "input", "asr": 0.5, "status": "failed"},
        ]
        out = roster_deltas(rows)
        assert out["per_attack_points"] == pytest.approx({"NES-linf@0.01": 10.0, "PGD-linf@0.01": 60.0})
        assert out["unweighted_mean_points"] == pytest.approx(35.0)
        assert "unweighted" in out["convention"]


class TestCLI:
    def test_subcommands_exist(self):
        from advlatent.evalcli.cli import _subcommands

        assert set(_subcommands(build_parser())) == {
            "theory", "split", "train-bottleneck", "attack", "mi-estimate", "serve-edge", "serve-mobile", "intercept", "report"
        }

    def test_config_file_defaults(self, tmp_path):
        cfg = tmp_path / "a.toml"
        cfg.write_text('model = "m.pkg"\nspace = "latent"\nalgo = "pgd"\nnorm = "linf"\neps = 0.02\nout = "r.csv"\n')
        args = parse_args(build_parser(), ["attack", "--config", str(cfg), "--eps", "0.05"])
        assert args.model == "m.pkg" and args.space == "latent" and args.eps == 0.05

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "a.toml"
        cfg.write_text("colour = 3\n")
        with pytest.raises(CLIError):
            parse_args(build_parser(), ["theory", "--config", str(cfg)])

    def test_bad_config_exit_code(self, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("= nope")
        assert main(["theory", "--config", str(cfg)]) == 2

    def test_theory_command(self, tmp_path, capsys):
        out = tmp_path / "dpi.json"
        assert main(["theory", "--campaign", "dpi", "--trials", "50", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["trials"] == 50 and report["violations"] == 0
        manifest = json.loads((tmp_path / "dpi.json.manifest.json").read_text())
        assert manifest["command"] == "theory" and manifest["options"]["max_support"] == 8

    def test_report_unknown_key(self, tmp_path):
        cfg = tmp_path / "r.toml"
        cfg.write_text('template = "depth"\nbogus = 1\n')
        assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
