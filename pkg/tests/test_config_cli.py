import os

import numpy as np
import pytest

from robustcl import cli, reporting
from robustcl.analysis import CKAMatrix, ProbeResult
from robustcl.config import (ConfigError, DEFAULTS, ExperimentConfig,
                             load_config)

FAST_VECTOR = [
    "dataset.n=300", "dataset.dim=10", "dataset.separation=8.0",
    "model.layer_widths=12,6", "model.head_dim=4",
    "scenario.pretrain_epochs=2", "scenario.finetune_epochs=2",
    "scenario.lr=0.003",
    "attack_eval.epsilons=0.1", "attack_eval.steps=2",
]


def run_cli(tmp_path, command, overrides=(), checkpoint=None):
    argv = [command, "-o", f"experiment.output_dir={tmp_path}"]
    for ov in overrides:
        argv += ["-o", ov]
    if checkpoint:
        argv += ["--checkpoint", checkpoint]
    return cli.main(argv)


class TestConfig:
    def test_defaults_materialized(self):
        cfg = load_config(text="")
        assert set(cfg.sections) == set(DEFAULTS)
        for section in DEFAULTS:
            assert set(cfg.sections[section]) == set(DEFAULTS[section])

    def test_roundtrip_identical(self):
        cfg = load_config(text="[dataset]\nn = 500\n")
        again = load_config(text=cfg.canonical())
        assert again.sections == cfg.sections
        assert again.hash() == cfg.hash()

    def test_hash_sensitive_to_values(self):
        a = load_config(text="")
        b = load_config(text="[experiment]\nseed = 1\n")
        assert a.hash() != b.hash()

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError):
            load_config(text="[optimizer]\nlr = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(text="[dataset]\nnn = 5\n")

    def test_override_applies(self):
        cfg = load_config(text="", overrides=["experiment.seed=9"])
        assert cfg.getint("experiment", "seed") == 9

    def test_bad_override_format(self):
        with pytest.raises(ConfigError):
            load_config(text="", overrides=["seed=9"])
        with pytest.raises(ConfigError):
            load_config(text="", overrides=["experiment.sneed=9"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(path=tmp_path / "absent.ini")

    def test_validate_split(self):
        with pytest.raises(ConfigError):
            load_config(text="[dataset]\nsplit = 0.5,0.5\n")
        with pytest.raises(ConfigError):
            load_config(text="[dataset]\nsplit = 0.5,0.4,0.3\n")

    def test_validate_source_and_model(self):
        with pytest.raises(ConfigError):
            load_config(text="[dataset]\nsource = torrent\n")
        with pytest.raises(ConfigError):
            load_config(text="[model]\nkind = resnet50\n")

    def test_typed_views(self):
        cfg = load_config(text="[loss]\nscheme = SCL\ntemperature = 0.2\n")
        lc = cfg.loss_config()
        assert lc.scheme == "SCL" and lc.temperature == 0.2
        enc = cfg.encoder_config((20,))
        assert enc.layer_widths == (64, 64, 32, 32, 16)

    def test_beta_scl_override(self):
        cfg = load_config(text="[loss]\nbeta = 0.5\nbeta_scl = 1.5\n")
        assert cfg.loss_config("SCL").beta == 1.5
        assert cfg.loss_config("CL").beta == 0.5
        assert cfg.loss_config("SL").beta == 0.5
        cfg = load_config(text="[loss]\nbeta = 0.7\n")
        assert cfg.loss_config("SCL").beta == 0.7

    def test_eval_attacks_tm2(self):
        cfg = load_config(text="[attack_eval]\nepsilons = 0.1\nthreat_models = I,II\n")
        specs = cfg.eval_attacks("SCL", is_image=True)
        tms = {(s.threat_model, s.steps, s.driving_loss) for s in specs}
        assert ("I", 20, "CE") in tms
        assert ("II", 40, "SCL") in tms
        specs_cl = cfg.eval_attacks("CL", is_image=True)
        assert any(s.driving_loss == "CL" for s in specs_cl)


class TestReporting:
    def grid(self, values, mask=None):
        values = np.asarray(values, dtype=float)
        h, w = values.shape
        if mask is None:
            mask = np.zeros((h, w), dtype=bool)
        rows = [f"L{i}" for i in range(h)]
        cols = [f"L{j}" for j in range(w)]
        return CKAMatrix(rows, cols, values, mask, 64, "clean-clean", ("m", "m"))

    def test_pgm_scaling(self, tmp_path):
        m = self.grid([[1.0, 0.0], [0.0, 1.0]])
        p = tmp_path / "g.pgm"
        reporting.write_cka_pgm(m, p)
        blob = p.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert list(blob[-4:]) == [255, 0, 0, 255]

    def test_pgm_deterministic(self, tmp_path):
        m = self.grid(np.random.default_rng(0).random((3, 3)))
        p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
        reporting.write_cka_pgm(m, p1)
        reporting.write_cka_pgm(m, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_pgm_masked_zero(self, tmp_path):
        mask = np.array([[False, True], [False, False]])
        m = self.grid([[0.5, 0.9], [0.2, 1.0]], mask)
        p = tmp_path / "g.pgm"
        reporting.write_cka_pgm(m, p)
        assert p.read_bytes()[-3] == 0  # masked cell renders as black

    def test_svg_cells_and_hatching(self, tmp_path):
        mask = np.array([[False, True], [False, False]])
        m = self.grid([[0.5, 0.9], [0.2, 1.0]], mask)
        p = tmp_path / "g.svg"
        reporting.write_cka_svg(m, p)
        text = p.read_text()
        # one background rect plus one rect per cell
        assert text.count("<rect") == 1 + 4
        assert 'url(#hatch)' in text
        assert text.count("<text") == 4  # axis labels

    def test_cka_csv_roundtrip_with_mask(self, tmp_path):
        mask = np.array([[False, True], [False, False]])
        vals = np.array([[0.5, np.nan], [0.25, 1.0]])
        m = self.grid(vals, mask)
        p = tmp_path / "g.csv"
        reporting.write_cka_csv(m, p)
        rows, cols, loaded, loaded_mask = reporting.read_cka_csv(p)
        assert rows == ["L0", "L1"] and cols == ["L0", "L1"]
        assert np.array_equal(loaded_mask, mask)
        assert np.allclose(loaded, vals, equal_nan=True)

    def test_probe_csv_header_once(self, tmp_path):
        p = tmp_path / "probes.csv"
        reporting.append_probe_csv(ProbeResult("L0", 0.9, 0.8, 100), p)
        reporting.append_probe_csv(ProbeResult("L1", 0.95, 0.85, 100), p)
        lines = p.read_text().splitlines()
        assert lines[0].startswith("layer_id,")
        assert len(lines) == 3

    def test_report_badges_and_svg(self, tmp_path):
        svg = tmp_path / "x.svg"
        svg.write_text("<svg xmlns='http://www.w3.org/2000/svg'></svg>")
        path = reporting.write_report(
            tmp_path,
            results_rows=[{"scenario": "ST", "clean_acc": "0.9"}],
            heatmap_svgs=[("demo", str(svg))],
            badges=[("ordering", True, "CL lowest"), ("gap", False, "margin 2.1")])
        text = open(path).read()
        assert "**[PASS]** ordering" in text
        assert "**[FAIL]** gap" in text
        assert "<svg" in text
        assert "| ST | 0.9 |" in text


class TestCli:
    def test_gen_data_vector(self, tmp_path):
        rc = run_cli(tmp_path, "gen-data", ["dataset.n=50", "dataset.dim=4"])
        assert rc == 0
        files = os.listdir(tmp_path)
        assert "run_manifest.json" in files
        assert "config.canonical.ini" in files
        assert any(f.endswith(".csv") for f in files)

    def test_train_then_evaluate(self, tmp_path):
        assert run_cli(tmp_path, "train", FAST_VECTOR) == 0
        for name in ("model.ckpt", "loss.csv", "train_manifest.json"):
            assert (tmp_path / name).exists()
        assert run_cli(tmp_path, "evaluate", FAST_VECTOR) == 0
        results = tmp_path / "results.csv"
        first = results.read_bytes()
        assert run_cli(tmp_path, "evaluate", FAST_VECTOR) == 0
        assert results.read_bytes() == first

    def test_evaluate_missing_checkpoint(self, tmp_path):
        rc = run_cli(tmp_path, "evaluate", FAST_VECTOR)
        assert rc == 1

    def test_bad_config_exit_code(self, tmp_path):
        rc = run_cli(tmp_path, "train", ["dataset.source=torrent"])
        assert rc == 1

    def test_cka_and_probe_and_report(self, tmp_path):
        assert run_cli(tmp_path, "train", FAST_VECTOR) == 0
        overrides = FAST_VECTOR + ["analysis.n_samples=60"]
        assert run_cli(tmp_path, "cka", overrides) == 0
        for name in ("cka_clean_clean.csv", "cka_clean_clean.pgm",
                     "cka_clean_clean.svg", "cka_clean_adv.csv", "divergence.csv"):
            assert (tmp_path / name).exists()
        assert run_cli(tmp_path, "probe", overrides) == 0
        probes = (tmp_path / "probes.csv").read_text().splitlines()
        assert len(probes) == 3  # header + one row per encoder layer
        assert run_cli(tmp_path, "evaluate", FAST_VECTOR) == 0
        assert run_cli(tmp_path, "report", FAST_VECTOR) == 0
        report = (tmp_path / "report.md").read_text()
        assert "## Results" in report and "## CKA heatmaps" in report

    def test_sweep_rows_and_cache_stability(self, tmp_path):
        overrides = FAST_VECTOR + ["sweep.scenarios=ST", "sweep.schemes=SL,CL",
                                   "sweep.seeds=0"]
        assert run_cli(tmp_path, "sweep", overrides) == 0
        results = tmp_path / "results.csv"
        lines = results.read_text().splitlines()
        assert len(lines) == 1 + 2  # header + one attack row per cell
        first = results.read_bytes()
        assert run_cli(tmp_path, "sweep", overrides) == 0
        assert results.read_bytes() == first

    def test_env_output_dir(self, tmp_path, monkeypatch):
        env_dir = tmp_path / "env_out"
        monkeypatch.setenv("ROBUSTCL_OUTPUT_DIR", str(env_dir))
        rc = cli.main(["gen-data", "-o", "dataset.n=50", "-o", "dataset.dim=4"])
        assert rc == 0
        assert env_dir.exists()
