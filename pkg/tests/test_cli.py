import json

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from iidreid import cli
from iidreid.datasets import load_dataset, read_manifest
from iidreid.iidnet import images_to_tensor, tensor_to_images
from iidreid.experiments import LAMBDA_GRID, VARIANTS, variant_config
from iidreid.illumsynth import luminance_stats
from iidreid.trainer import load_checkpoint, steps_per_epoch

TINY = {
    "toy": {"n_identities": 8, "n_views": 2, "n_instances": 4},
    "model": {"d_z": 16, "encoder_channels": [4, 6, 8], "generator_channels": [12, 10, 8, 6, 4]},
    "train": {
        "P": 4,
        "K": 4,
        "schedules": {
            "I": {"epochs": 2, "decay_every_epochs": 1},
            "II": {"epochs": 2, "decay_every_epochs": 1, "batch_size": 8},
            "III": {"epochs": 1, "decay_every_epochs": 1},
        },
    },
}


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    return d


@pytest.fixture(scope="module")
def config(workdir):
    return workdir / "tiny.yaml"


@pytest.fixture(scope="module")
def synthesized(workdir, config):
    assert run("synthesize", "--config", config, "--out", workdir / "data") == 0
    return workdir / "data"


@pytest.fixture(scope="module")
def trained(workdir, config, synthesized):
    out = workdir / "full"
    assert run("train", "--config", config, "--data", synthesized / "synth", "--out", out) == 0
    return out


class TestSynthesize:
    def test_cardinality_and_histogram(self, synthesized):
        report = read_json(synthesized / "synthesis_report.json")
        n = len(read_manifest(synthesized / "base" / "manifest.csv"))
        assert n == 64 == report["n_input"] == report["n_output"]
        assert len(read_manifest(synthesized / "synth" / "manifest.csv")) == n
        assert sum(report["per_scale_counts"]) == n
        assert report["spec"]["gamma_grid"][4] == 1.0
        assert report["seed"] == 0 and len(report["config_hash"]) == 16

    def test_labels_carried_over(self, synthesized):
        base = read_manifest(synthesized / "base" / "manifest.csv")
        synth = read_manifest(synthesized / "synth" / "manifest.csv")
        assert [(r.identity, r.camera, r.split) for r in base] == [
            (r.identity, r.camera, r.split) for r in synth
        ]

    def test_partial_failures_are_reported(self, synthesized, tmp_path):
        lines = (synthesized / "base" / "manifest.csv").read_text().splitlines()
        lines.insert(3, "missing.png,0,0,4,train")
        (synthesized / "base" / "broken.csv").write_text("\n".join(lines) + "\n")
        out = tmp_path / "s"
        assert run("synthesize", "--manifest", synthesized / "base" / "broken.csv", "--out", out) == 0
        report = read_json(out / "synthesis_report.json")
        assert report["n_input"] == 65 and report["n_output"] == 64
        assert [e["path"] for e in report["errors"]] == ["missing.png"]

    def test_seed_flag_changes_draws(self, config, tmp_path):
        run("synthesize", "--config", config, "--seed", 3, "--out", tmp_path / "a")
        run("synthesize", "--config", config, "--seed", 3, "--out", tmp_path / "b")
        a = read_json(tmp_path / "a" / "synthesis_report.json")
        b = read_json(tmp_path / "b" / "synthesis_report.json")
        assert a == b and a["seed"] == 3

    def test_missing_manifest_fails(self, tmp_path):
        assert run("synthesize", "--manifest", tmp_path / "nope.csv", "--out", tmp_path) != 0


class TestTrain:
    def test_artifacts(self, trained, synthesized):
        state = load_checkpoint(trained / "checkpoint.pt")
        assert state.completed_phases == ["I", "II", "III"]
        n_train = int((load_dataset(synthesized / "synth" / "manifest.csv").split == "train").sum())
        expected = sum(
            steps_per_epoch(n_train, state.config, p) * state.config.schedules[p].epochs
            for p in ("I", "II", "III")
        )
        lines = (trained / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == expected == state.step
        report = read_json(trained / "train_report.json")
        assert report["completed_phases"] == ["I", "II", "III"] and "config_hash" in report

    def test_phase_ordering_error(self, config, synthesized, tmp_path, capsys):
        assert run("train", "--config", config, "--data", synthesized / "synth", "--phases", "II",
                   "--out", tmp_path) != 0
        assert "phase-I checkpoint" in capsys.readouterr().err

    def test_split_runs_compose(self, config, synthesized, tmp_path):
        data = synthesized / "synth"
        run("train", "--config", config, "--data", data, "--phases", "I,II", "--out", tmp_path / "joint")
        run("train", "--config", config, "--data", data, "--phases", "I", "--out", tmp_path / "one")
        run("train", "--config", config, "--data", data, "--phases", "II",
            "--resume", tmp_path / "one" / "checkpoint.pt", "--out", tmp_path / "two")
        a = load_checkpoint(tmp_path / "joint" / "checkpoint.pt").model.state_dict()
        b = load_checkpoint(tmp_path / "two" / "checkpoint.pt").model.state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_rerun_reproduces_log(self, config, synthesized, trained, tmp_path):
        run("train", "--config", config, "--data", synthesized / "synth", "--out", tmp_path)
        assert (tmp_path / "metrics.jsonl").read_text() == (trained / "metrics.jsonl").read_text()

    def test_unknown_phase(self, config, tmp_path):
        assert run("train", "--config", config, "--toy", "--phases", "IV", "--out", tmp_path) != 0


class TestEvaluate:
    def test_standard_schema(self, config, trained, synthesized, tmp_path):
        assert run("evaluate", "--config", config, "--data", synthesized / "synth",
                   "--checkpoint", trained / "checkpoint.pt", "--out", tmp_path) == 0
        report = read_json(tmp_path / "eval_report.json")
        results = report["results"]
        assert {"cmc1", "cmc5", "cmc10", "mAP"} <= set(results)
        assert results["cmc1"] <= results["cmc5"] <= results["cmc10"]
        assert (tmp_path / "cmc.png").stat().st_size > 0
        assert (tmp_path / "per_query.csv").exists()

    def test_reports_reproduce(self, config, trained, synthesized, tmp_path):
        for sub in ("a", "b"):
            run("evaluate", "--config", config, "--data", synthesized / "synth", "--experiment",
                "illum_accuracy", "--checkpoint", trained / "checkpoint.pt", "--out", tmp_path / sub)
        a, b = (read_json(tmp_path / s / "eval_report.json") for s in "ab")
        assert a["results"] == b["results"] and a["config_hash"] == b["config_hash"]

    @pytest.mark.parametrize(
        "experiment,key",
        [
            ("low_light", "sweep"),
            ("intra_inter", "ratio"),
            ("he_baseline", "equalized"),
            ("local_change", "patch"),
            ("ychannel", "ychannel"),
        ],
    )
    def test_single_model_experiments(self, config, trained, synthesized, tmp_path, experiment, key):
        assert run("evaluate", "--config", config, "--toy", "--experiment", experiment,
                   "--checkpoint", trained / "checkpoint.pt", "--out", tmp_path) == 0
        assert key in read_json(tmp_path / "eval_report.json")["results"]

    def test_low_light_identity_entry(self, config, trained, tmp_path):
        run("evaluate", "--config", config, "--toy", "--experiment", "low_light",
            "--checkpoint", trained / "checkpoint.pt", "--out", tmp_path / "ll")
        run("evaluate", "--config", config, "--toy",
            "--checkpoint", trained / "checkpoint.pt", "--out", tmp_path / "std")
        sweep = read_json(tmp_path / "ll" / "eval_report.json")["results"]["sweep"]
        std = read_json(tmp_path / "std" / "eval_report.json")["results"]
        assert [r["gamma"] for r in sweep] == [1.0, 0.6, 0.4, 0.25, 0.15]
        assert sweep[0]["mAP"] == std["mAP"]

    def test_missing_checkpoint(self, config, tmp_path, capsys):
        assert run("evaluate", "--config", config, "--toy", "--experiment", "low_light",
                   "--out", tmp_path) != 0
        assert run("evaluate", "--config", config, "--toy", "--checkpoint", tmp_path / "x.pt",
                   "--out", tmp_path) != 0

    def test_ablation_needs_every_row(self, config, tmp_path, capsys):
        assert run("evaluate", "--config", config, "--toy", "--experiment", "ablation",
                   "--checkpoints", tmp_path, "--out", tmp_path) != 0
        err = capsys.readouterr().err
        assert all(v in err for v in VARIANTS)

    def test_ablation_trains_missing(self, config, tmp_path):
        assert run("evaluate", "--config", config, "--toy", "--experiment", "ablation",
                   "--train-missing", "--out", tmp_path) == 0
        results = read_json(tmp_path / "eval_report.json")["results"]
        assert set(results) == set(VARIANTS)
        assert all((tmp_path / "checkpoints" / f"{v}.pt").exists() for v in VARIANTS)
        no_g = load_checkpoint(tmp_path / "checkpoints" / "no_G.pt")
        assert no_g.config.loss.lambda4 == 0 and not no_g.config.use_generator

    def test_cross_dataset(self, config, tmp_path):
        assert run("evaluate", "--config", config, "--toy", "--experiment", "cross_dataset",
                   "--train-missing", "--out", tmp_path) == 0
        assert set(read_json(tmp_path / "eval_report.json")["results"]) == {"M1", "M2", "M3"}


class TestReconstruct:
    def test_grid_layout(self, config, trained, tmp_path):
        assert run("reconstruct", "--config", config, "--toy", "--checkpoint",
                   trained / "checkpoint.pt", "--n-probes", 3, "--out", tmp_path) == 0
        report = read_json(tmp_path / "reconstruct_report.json")
        assert report["grid_width"] == 9 + 2 and report["n_probes"] == 3
        assert 0 <= report["identity_preservation"] <= 1
        with Image.open(tmp_path / "reconstruction.png") as im:
            assert im.size == (32 * 11, 64 * 3)

    def test_unmodified_code_matches_forward(self, trained):
        model = load_checkpoint(trained / "checkpoint.pt").model
        img = np.random.default_rng(0).integers(0, 256, (64, 32, 3), dtype=np.uint8)
        with torch.no_grad():
            _, _, f_i, x_hat = model.forward_original(images_to_tensor(img))
            strip = cli.reconstruction_strip(model, img, f_i.numpy())
        expected = tensor_to_images(x_hat)[0]
        np.testing.assert_array_equal(strip[1], expected)
        np.testing.assert_array_equal(strip[2], expected)

    def test_needs_generator(self, config, synthesized, tmp_path):
        run("train", "--config", config, "--data", synthesized / "synth", "--phases", "I",
            "--out", tmp_path / "p1")
        assert run("reconstruct", "--config", config, "--toy", "--checkpoint",
                   tmp_path / "p1" / "checkpoint.pt", "--out", tmp_path) != 0


class TestAnalyze:
    def test_two_manifests(self, synthesized, tmp_path):
        assert run("analyze", synthesized / "base", synthesized / "synth", "--out", tmp_path) == 0
        report = read_json(tmp_path / "analysis_report.json")
        base = load_dataset(synthesized / "base" / "manifest.csv")
        assert report["base"]["variance"] == luminance_stats(base.images)["variance"]
        assert report["synth_variance_exceeds_base"] is True
        assert {p.name for p in tmp_path.glob("*.png")} == {
            "luminance_base.png", "luminance_synth.png", "luminance_variance.png"
        }

    def test_data_root_env(self, synthesized, tmp_path, monkeypatch):
        monkeypatch.setenv("IID_DATA_ROOT", str(synthesized))
        assert run("analyze", "base", "--out", tmp_path) == 0

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("path,identity,camera,illumination,split\n")
        assert run("analyze", tmp_path, "--out", tmp_path / "o") != 0


def test_bad_config_file(tmp_path):
    assert run("analyze", "--toy", "--config", tmp_path / "nope.yaml", "--out", tmp_path) != 0


def test_ablation_rows_match_table():
    no_g, phases = variant_config("no_G")
    assert no_g.loss.lambda4 == 0 and not no_g.use_generator and "II" not in phases
    assert variant_config("no_triplet")[0].loss.lambda1 == 0
    assert variant_config("no_softmax")[0].loss.lambda2 == 0
    assert variant_config("no_illum")[0].loss.lambda3 == 0
    base = variant_config("baseline")[0]
    assert base.loss.lambda3 == base.loss.lambda4 == 0


def test_lambda_grid_contains_chosen_point():
    assert (1.0, 2.0) in LAMBDA_GRID
    assert {l3 for l3, l4 in LAMBDA_GRID if l4 == 1.0} == {0.1, 0.5, 1.0, 2.0, 5.0}
