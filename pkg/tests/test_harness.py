import csv
import json
import logging

import numpy as np
import pytest
from PIL import Image

from pli_lab.errors import ConfigurationError, CorpusError
from pli_lab.harness import pipeline
from pli_lab.harness.cli import main
from pli_lab.harness.config import ExperimentConfig
from pli_lab.harness.selftest import CHECKS, run_selftest

TINY = """
synthetic = true
synthetic_classes = 10
synthetic_per_class = 6
image_size = 32
blur_kernel = 3
num_targets = 4
rounds = 2
epoch_scale = 0.2
inv_epochs = 1
inv_width = 0.25
grad_steps = 20
"""


def _write_config(path, out, seeds="[0]", extra=""):
    path.write_text(TINY + f'corpus = "{out}/corpus/manifest.tsv"\nout_dir = "{out}"\nseeds = {seeds}\n' + extra)
    return str(path)


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("harness")
    cfg = _write_config(root / "tiny.toml", root / "out", seeds="[0, 1]")
    assert main(["prepare-data", "--config", cfg]) == 0
    return root, cfg


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.taus == [3.0] and cfg.gammas == [0.03] and cfg.alpha == 5.0 and cfg.beta == 0.1
        assert cfg.grad_lr == 0.3 and cfg.grad_tv == 0.01 and cfg.image_size == 64

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.toml").write_text("tua = 3.0\n")
        with pytest.raises(ConfigurationError, match="tua"):
            ExperimentConfig.from_file(tmp_path / "c.toml")

    def test_nested_table_rejected(self, tmp_path):
        (tmp_path / "c.toml").write_text("[attack]\ntau = 3.0\n")
        with pytest.raises(ConfigurationError, match="flat"):
            ExperimentConfig.from_file(tmp_path / "c.toml")

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.toml").write_text('scheme = "dsfl"\ntaus = [1.0]\n')
        cfg = ExperimentConfig.from_file(tmp_path / "c.toml").override({"taus": "0.3,5", "num_targets": "7"})
        assert cfg.scheme == "dsfl" and cfg.taus == [0.3, 5.0] and cfg.num_targets == 7

    def test_type_errors(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_mapping({"num_targets": "many"})
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_mapping({"synthetic": "maybe"})

    def test_sweep_grid(self):
        cfg = ExperimentConfig(taus=[0.3, 1, 3, 5], gammas=[0, 0.03, 0.1, 0.3, 1.0])
        grid = {(a.tau, a.gamma) for a in cfg.attack_configs(0)}
        assert len(grid) == 20 and (0.3, 1.0) in grid

    def test_digest_tracks_content(self):
        assert ExperimentConfig().digest() == ExperimentConfig().digest()
        assert ExperimentConfig(seeds=[1]).digest() != ExperimentConfig().digest()


class TestCliValidation:
    def test_unknown_flag_exit_code(self, capsys):
        assert _exit_code(["run", "--no-such-key", "1"]) == 1

    def test_bad_value_exit_code(self, tmp_path):
        assert main(["run", "--scheme", "fedsgd", "--out-dir", str(tmp_path)]) == 1

    def test_missing_corpus(self, tmp_path):
        assert main(["prepare-data", "--corpus", str(tmp_path / "none.tsv")]) == 1

    def test_empty_corpus(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("")
        assert main(["prepare-data", "--corpus", str(tmp_path / "manifest.tsv"),
                     "--out-dir", str(tmp_path / "o")]) == 1

    def test_run_without_split(self, tmp_path):
        assert main(["run", "--out-dir", str(tmp_path)]) == 1

    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert all(name in out for name in CHECKS)
        assert run_selftest(echo=lambda *_: None)


def _exit_code(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


class TestPrepare:
    def test_rerun_identical(self, prepared, tmp_path):
        root, cfg = prepared
        again = tmp_path / "again"
        cfg2 = _write_config(tmp_path / "c.toml", again, seeds="[0, 1]")
        assert main(["prepare-data", "--config", cfg2, "--corpus", str(root / "out/corpus/manifest.tsv")]) == 0
        for seed in (0, 1):
            for name in ("private_0.tsv", "private_1.tsv", "public_clean.tsv", "public_aux.tsv"):
                a = (root / f"out/split_seed{seed}" / name).read_text()
                assert a == (again / f"split_seed{seed}" / name).read_text()

    def test_summary_reconciles(self, prepared):
        root, _ = prepared
        summary = json.loads((root / "out/split_seed0/summary.json").read_text())
        c = summary["counts"]
        assert sum(c["private"]) + c["public_clean"] + c["public_aux"] + c["discarded"] == c["total"] == 60


class TestRun:
    def test_pli_artifacts_and_determinism(self, prepared, tmp_path):
        root, cfg = prepared
        dirs = []
        for name in ("a", "b"):
            out = tmp_path / name
            (out).mkdir()
            (out / "split_seed0").symlink_to(root / "out/split_seed0")
            assert main(["run", "--config", cfg, "--out-dir", str(out), "--seeds", "0",
                         "--q-modes", "full,client_only"]) == 0
            dirs.append(out)
        a, b = (d / "seed0" for d in dirs)
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        rows = _read_rows(a / "metrics.csv")
        assert len(rows) == 2 * 4 and {r["mode"] for r in rows} == {"full", "client_only"}
        assert sorted(p.name for p in (a / "registry").iterdir()) == ["round01.csv", "round02.csv"]
        assert (a / "checkpoints/server.ckpt").is_file() and (a / "checkpoints/client1.ckpt").is_file()
        grid = Image.open(a / "grids/fedmd_tau3_gamma0.03_full.png")
        assert grid.size == (2 + 4 * 34, 2 + 2 * 34)
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["seed"] == 0 and len(manifest["config_sha256"]) == 64
        assert {"python", "numpy"} <= set(manifest["versions"])
        assert len(_read_rows(a / "entropy.csv")) == 2 * 20
        assert set(json.loads((a / "baseline.json").read_text())) == {"noise_accuracy_mean", "noise_accuracy_std"}

    def test_fedavg_routes_to_gradient_attack(self, prepared, tmp_path):
        root, cfg = prepared
        (tmp_path / "split_seed0").symlink_to(root / "out/split_seed0")
        assert main(["run", "--config", cfg, "--out-dir", str(tmp_path), "--seeds", "0", "--scheme", "fedavg",
                     "--rounds", "1"]) == 0
        rows = _read_rows(tmp_path / "seed0/metrics.csv")
        assert {r["mode"] for r in rows} == {"grad"} and len(rows) == 4
        assert (tmp_path / "seed0/grids/fedavg_grad.png").is_file()
        assert not (tmp_path / "seed0/registry/round01.csv").exists()

    def test_sweep_produces_full_grid(self, prepared, tmp_path):
        root, cfg = prepared
        (tmp_path / "split_seed0").symlink_to(root / "out/split_seed0")
        assert main(["run", "--config", cfg, "--out-dir", str(tmp_path), "--seeds", "0", "--rounds", "1",
                     "--taus", "0.3,1,3,5", "--gammas", "0,0.03,0.1,0.3,1.0"]) == 0
        agg = _read_rows(tmp_path / "seed0/aggregate.csv")
        assert {(float(r["tau"]), float(r["gamma"])) for r in agg} == {
            (t, g) for t in (0.3, 1, 3, 5) for g in (0, 0.03, 0.1, 0.3, 1.0)}
        table = pipeline.report([tmp_path], tmp_path / "rep")
        assert len(table) == 20 and (tmp_path / "rep/tradeoff.png").is_file()


@pytest.fixture(scope="module")
def two_runs(prepared, tmp_path_factory):
    """Two run directories holding seed 0 and seed 1, each with a tau in {0.3, 3} sweep."""
    root, cfg = prepared
    outs = []
    for seed in (0, 1):
        out = tmp_path_factory.mktemp(f"run{seed}")
        (out / f"split_seed{seed}").symlink_to(root / f"out/split_seed{seed}")
        assert main(["run", "--config", cfg, "--out-dir", str(out), "--seeds", str(seed),
                     "--rounds", "1", "--taus", "0.3,3"]) == 0
        outs.append(out)
    return outs


class TestReport:
    def test_mean_over_seeds_matches_row_csv(self, two_runs, tmp_path):
        table = pipeline.report(two_runs, tmp_path)
        for t in table:
            per_seed = []
            for run in two_runs:
                rows = [r for r in _read_rows(next(run.glob("seed*/metrics.csv")))
                        if float(r["tau"]) == float(t["tau"])]
                per_seed.append(np.mean([int(r["success"]) for r in rows]))
            assert t["num_seeds"] == 2
            assert t["attack_accuracy"] == pytest.approx(np.mean(per_seed), abs=1e-6)
        assert len(_read_rows(tmp_path / "report.csv")) == 2

    def test_order_invariant(self, two_runs, tmp_path):
        a = pipeline.report(two_runs, tmp_path / "a")
        b = pipeline.report(two_runs[::-1], tmp_path / "b")
        assert a == b

    def test_single_run_single_point(self, two_runs, tmp_path):
        table = pipeline.report([two_runs[0]], tmp_path)
        assert all(t["num_seeds"] == 1 for t in table) and len(table) == 2

    def test_missing_runs_skipped(self, two_runs, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            table = pipeline.report([tmp_path / "nowhere", two_runs[0]], tmp_path / "r")
        assert "nowhere" in caplog.text and len(table) == 2
        with pytest.raises(CorpusError):
            pipeline.report([tmp_path / "nowhere"], tmp_path / "r")
        assert main(["report", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 1


class TestHelpers:
    def test_tile_grid(self):
        imgs = [np.zeros((3, 4, 4)), np.ones((3, 4, 4)) * -1]
        grid = pipeline.tile_grid([imgs, imgs[:1]])
        assert grid.shape == (3, 2 + 2 * 6, 2 + 2 * 6)
        assert grid[0, 0, 0] == 1.0 and grid[0, 2, 8] == -1.0

    def test_tags(self):
        from pli_lab.attack import AttackConfig

        assert pipeline.tag_for("fedavg") == "fedavg_grad"
        assert pipeline.tag_for("dsfl", AttackConfig(tau=0.3, gamma=0)) == "dsfl_tau0.3_gamma0_full"
