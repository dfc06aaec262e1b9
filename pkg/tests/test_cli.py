"""End-to-end tests of the command-line pipeline driver."""

import json

import numpy as np
import pytest

from gcrl.cli import (
    ArtifactError,
    load_config,
    main,
    read_dataset,
    write_dataset,
)
from gcrl.gcarl import model_from_json
from gcrl.latent_sampler import mask_confounders
from gcrl.mixing import mixing_from_json
from gcrl import diffnet


def write_config(path, **overrides):
    doc = {
        "regime": "sim1",
        "M": 2,
        "d": 3,
        "L": 1,
        "n": 1024,
        "seeds": [0],
        "train": {"n_iters": 200, "eval_every": 50},
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return str(path)


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestConfigValidation:
    def test_defaults_per_regime(self, tmp_path):
        for regime, n in (("sim1", 65536), ("sim2", 1 << 20), ("grn", 1 << 18)):
            p = tmp_path / f"{regime}.json"
            p.write_text(json.dumps({"regime": regime}))
            cfg = load_config(p)
            assert (cfg.M, cfg.d, cfg.L, cfg.n) == (3, 10, 3, n)
            assert cfg.seeds == [0]
            assert cfg.threshold_pct == 35.0

    def test_regime_pins_families(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"regime": "sim2"}))
        cfg = load_config(p)
        assert cfg.phi.kind == "gauss_relu"
        assert cfg.psi.kind == "maxout_bilinear"

    @pytest.mark.parametrize("doc", [
        {"regime": "sim1", "bogus": 1},
        {"regime": "sim1", "train": {"steps": 5}},
        {"regime": "nope"},
        {},
        {"regime": "sim1", "psi": {"kind": "tanh_mixture"}},
        {"regime": "grn", "phi": {"kind": "laplace_tanh"}},
        {"regime": "sim1", "d": 4, "d_obs": 4},
        {"regime": "sim1", "seeds": [1, 1]},
        {"regime": "sim1", "seeds": []},
        {"regime": "sim1", "threshold_pct": 101},
        {"regime": "sim1", "M": 1},
        {"regime": "sim1", "n": True},
        {"regime": "sim1", "train": {"momentum": 1.0}},
        {"regime": "grn", "grn": {"steps": 10}},
    ])
    def test_rejected_configs_exit_2(self, tmp_path, doc):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        assert main(["generate", "--config", str(p)]) == 2

    def test_malformed_json_exits_2(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert main(["generate", "--config", str(p)]) == 2

    def test_missing_config_exits_4(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "absent.json")]) == 4

    def test_resolved_config_round_trips(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(tmp_path / "out"),
                                seeds=[3, 7], threshold_pct=20.0, rank_corr=True)
        first = load_config(cfg_path)
        assert main(["generate", "--config", cfg_path]) == 0
        resolved = tmp_path / "out" / "config.resolved.json"
        second = load_config(resolved)
        assert first.canonical == second.canonical

    def test_seed_override_restricts_run(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.json", seeds=[0, 1],
                                output_dir=str(tmp_path / "out"))
        assert main(["generate", "--config", cfg_path, "--seed", "1"]) == 0
        assert (tmp_path / "out" / "seed_1" / "dataset.bin").exists()
        assert not (tmp_path / "out" / "seed_0").exists()

    def test_out_override(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(tmp_path / "a"))
        assert main(["generate", "--config", cfg_path, "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "seed_0" / "dataset.bin").exists()
        assert not (tmp_path / "a").exists()


class TestDatasetFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(17, 7))
        path = tmp_path / "d.bin"
        write_dataset(path, values, [3, 4])
        back, dims = read_dataset(path)
        assert dims == [3, 4]
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, values)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(path, np.zeros((2, 5)), [2, 3])
        raw = path.read_bytes()
        assert raw[:4] == b"GCRL"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 2  # group count
        assert len(raw) == 4 + 4 + 4 + 8 + 8 + 2 * 5 * 8

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(path, np.zeros((2, 2)), [2])
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(ArtifactError):
            read_dataset(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "d.bin"
        write_dataset(path, np.ones((4, 3)), [3])
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ArtifactError):
            read_dataset(path)

    def test_width_mismatch_rejected(self, tmp_path):
        with pytest.raises(diffnet.UsageError):
            write_dataset(tmp_path / "d.bin", np.zeros((2, 4)), [2, 3])


class TestPipeline:
    def test_generate_artifacts_consistent(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out),
                                save_latents=True)
        assert main(["generate", "--config", cfg_path]) == 0
        seed_dir = out / "seed_0"

        # the persisted dataset is the persisted mixing applied to the
        # persisted latents with confounders removed
        from gcrl.latent_sampler import LatentSamples
        values, dims = read_dataset(seed_dir / "dataset.bin")
        lat_vals, lat_dims = read_dataset(seed_dir / "latents.bin")
        meta = json.loads((seed_dir / "latents.meta.json").read_text())
        lat = LatentSamples(lat_vals, lat_dims, np.array(meta["confounder_mask"], bool))
        mixer = mixing_from_json((seed_dir / "mixing.json").read_text())
        from gcrl.mixing import mix
        redone = mix(mixer, lat)
        assert redone.dims == dims
        np.testing.assert_array_equal(redone.values, values)

        dmeta = json.loads((seed_dir / "dataset.meta.json").read_text())
        assert dmeta["n"] == values.shape[0]
        assert dmeta["dims"] == dims

    def test_loss_trace_starts_at_chance(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out))
        assert main(["generate", "--config", cfg_path]) == 0
        assert main(["train", "--config", cfg_path]) == 0
        lines = (out / "seed_0" / "loss_trace.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss"
        first_it, first_loss = lines[1].split(",")
        assert int(first_it) == 0
        assert abs(float(first_loss) - np.log(2.0)) < 1e-9

    def test_trained_model_matches_config_family(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out))
        main(["generate", "--config", cfg_path])
        main(["train", "--config", cfg_path])
        model = model_from_json((out / "seed_0" / "model.json").read_text())
        assert model.psi.kind == "abs_mlp"
        assert model.dims == [3, 3]

    def test_eval_writes_report_and_curves(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out))
        assert main(["experiment", "--config", cfg_path]) == 0
        seed_dir = out / "seed_0"
        report = json.loads((seed_dir / "report.json").read_text())
        for key in ("mcc", "f1", "precision", "recall", "assignment", "matched_abs_corr"):
            assert key in report
        assert 0.0 <= report["mcc"] <= 1.0
        assert report["final_loss"] is not None

        roc = (seed_dir / "roc.csv").read_text().splitlines()
        assert roc[0] == "threshold_pct,fpr,tpr"
        assert len(roc) == 22  # header + 21 thresholds
        body = np.array([[float(v) for v in line.split(",")] for line in roc[1:]])
        np.testing.assert_array_equal(body[:, 0], np.arange(0, 101, 5))
        assert (np.diff(body[:, 1]) <= 0).all() and (np.diff(body[:, 2]) <= 0).all()
        assert ((body[:, 1:] >= 0) & (body[:, 1:] <= 1)).all()

        for fig in ("roc.png", "recovery.png", "adjacency.png", "loss_trace.png"):
            assert (seed_dir / fig).stat().st_size > 0

    def test_eval_truth_recompute_equals_persisted(self, tmp_path):
        # one run persists the latents, the other recomputes them at eval;
        # the scores must not depend on which path was taken
        reports = []
        for tag, save in (("a", True), ("b", False)):
            out = tmp_path / tag
            cfg_path = write_config(tmp_path / f"{tag}.json", output_dir=str(out),
                                    save_latents=save)
            assert main(["experiment", "--config", cfg_path]) == 0
            reports.append((out / "seed_0" / "report.json").read_bytes())
        assert reports[0] == reports[1]

    def test_experiment_rerun_is_byte_identical(self, tmp_path):
        trees = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            cfg_path = write_config(tmp_path / f"{tag}.json", output_dir=str(out),
                                    seeds=[0, 1], n=512)
            assert main(["experiment", "--config", cfg_path]) == 0
            trees.append(tree_bytes(out))
        assert trees[0].keys() == trees[1].keys()
        assert all(trees[0][k] == trees[1][k] for k in trees[0])

    def test_resume_skips_and_rebuilds(self, tmp_path, capsys):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out))
        assert main(["experiment", "--config", cfg_path]) == 0
        before = tree_bytes(out)
        capsys.readouterr()

        assert main(["experiment", "--config", cfg_path]) == 0
        stdout = capsys.readouterr().out
        assert stdout.count("up to date") == 3
        assert tree_bytes(out) == before

        (out / "seed_0" / "model.json").unlink()
        assert main(["experiment", "--config", cfg_path]) == 0
        stdout = capsys.readouterr().out
        assert "trained" in stdout
        assert tree_bytes(out) == before

    def test_config_change_invalidates_dependent_stages(self, tmp_path, capsys):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out))
        assert main(["experiment", "--config", cfg_path]) == 0
        capsys.readouterr()
        # a scoring-only change must not retrain, just re-evaluate
        write_config(tmp_path / "c.json", output_dir=str(out), threshold_pct=50.0)
        assert main(["experiment", "--config", cfg_path]) == 0
        stdout = capsys.readouterr().out
        assert "generate up to date" in stdout
        assert "train up to date" in stdout
        assert "eval up to date" not in stdout

    def test_multi_seed_tables(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out),
                                seeds=[0, 1, 2], n=512)
        assert main(["experiment", "--config", cfg_path]) == 0
        summary = (out / "summary.csv").read_text().splitlines()
        assert summary[0] == "seed,mcc,f1,precision,recall"
        assert len(summary) == 4  # one row per seed, no aggregate rows
        doc = json.loads((out / "summary.json").read_text())
        assert doc["n_seeds"] == 3
        mccs = [float(line.split(",")[1]) for line in summary[1:]]
        assert doc["mcc"]["mean"] == pytest.approx(np.mean(mccs))
        assert doc["mcc"]["sd"] == pytest.approx(np.std(mccs, ddof=1))

        assert main(["eval", "--config", cfg_path]) == 0
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert len(metrics) == 6  # header, 3 seeds, mean, sd
        assert metrics[-2].startswith("mean,")
        assert metrics[-1].startswith("sd,")

    def test_check_reports_conditions(self, tmp_path, capsys):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out))
        assert main(["generate", "--config", cfg_path]) == 0
        assert main(["check", "--config", cfg_path]) == 0
        stdout = capsys.readouterr().out
        assert "rank condition PASS" in stdout
        doc = json.loads((out / "seed_0" / "check.json").read_text())
        assert doc["a1_all"] is True
        assert len(doc["groups"]) == 2
        assert len(doc["pairs"]) == 1
        assert set(doc["pairs"][0]) == {"c1", "c1_alt", "pair"}

    def test_roc_command_writes_sweep_only(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(out))
        main(["generate", "--config", cfg_path])
        main(["train", "--config", cfg_path])
        assert main(["roc", "--config", cfg_path]) == 0
        assert (out / "seed_0" / "roc.csv").exists()
        assert not (out / "seed_0" / "report.json").exists()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_training_exits_3(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(
            tmp_path / "c.json", output_dir=str(out),
            train={"n_iters": 4000, "lr": 100.0, "divergence_patience": 20},
        )
        assert main(["generate", "--config", cfg_path]) == 0
        assert main(["train", "--config", cfg_path]) == 3

    def test_missing_artifacts_exit_4(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.json", output_dir=str(tmp_path / "out"))
        assert main(["train", "--config", cfg_path]) == 4
        assert main(["eval", "--config", cfg_path]) == 4
        assert main(["check", "--config", cfg_path]) == 4


class TestOtherRegimes:
    def test_sim2_pipeline(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(
            tmp_path / "c.json", regime="sim2", M=3, d=4, n=512,
            gibbs_sweeps=4, output_dir=str(out),
            train={"n_iters": 80, "eval_every": 40},
        )
        assert main(["experiment", "--config", cfg_path]) == 0
        values, dims = read_dataset(out / "seed_0" / "dataset.bin")
        assert dims == [4, 4, 4]  # confounders never reach the observations
        model = model_from_json((out / "seed_0" / "model.json").read_text())
        assert model.psi.kind == "maxout_bilinear"

    def test_grn_pipeline(self, tmp_path):
        out = tmp_path / "out"
        cfg_path = write_config(
            tmp_path / "c.json", regime="grn", M=2, d=3, n=256,
            grn={"dt": 0.02, "steps": 320}, output_dir=str(out),
            train={"n_iters": 80, "eval_every": 40},
        )
        assert main(["experiment", "--config", cfg_path]) == 0
        values, dims = read_dataset(out / "seed_0" / "dataset.bin")
        assert dims == [3, 3]
        model = model_from_json((out / "seed_0" / "model.json").read_text())
        assert model.psi.kind == "tanh_mixture"
