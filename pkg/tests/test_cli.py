import json

import numpy as np
import pytest

from forestseg import checkpoint, cli, data, evaluation as ev, models
from forestseg.data import BandStats, Scene


def files_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_synth_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["synth", "--scenes", "1", "--size", "512x512", "--seed", "7", "--out", str(tmp_path / d)]) == 0
    a, b = files_bytes(tmp_path / "a"), files_bytes(tmp_path / "b")
    assert a == b and "tiles.fnt" in a
    assert len(data.load_tileset(tmp_path / "a" / "tiles.fnt")) == 16


def test_synth_layout_and_holdout(tmp_path):
    assert cli.main(["synth", "--scenes", "3", "--size", "256x128", "--holdout", "1", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in (tmp_path / "train").iterdir()) == ["scene_000.fnc", "scene_001.fnc"]
    assert [p.name for p in (tmp_path / "holdout").iterdir()] == ["scene_002.fnc"]
    assert len(data.load_tileset(tmp_path / "tiles.fnt")) == 4
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "synth" and m["config"]["size"] == [256, 128] and m["n_tiles"] == 4
    assert m["formats"]["tileset"] == "FNT1"


@pytest.mark.parametrize("size", ["500x512", "512", "0x128", "axb"])
def test_synth_bad_size_is_usage_error(tmp_path, size):
    assert cli.main(["synth", "--size", size, "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_water_only_reference_is_empty(tmp_path):
    assert cli.main(["synth", "--scenes", "2", "--holdout", "1", "--size", "256x256", "--archetypes", "water",
                     "--out", str(tmp_path)]) == 0
    for t in data.load_tileset(tmp_path / "tiles.fnt"):
        assert not t.reference.any()
    assert not data.load_scene(tmp_path / "holdout" / "scene_001.fnc").reference.any()


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")
    cli.main(["synth", "--scenes", "1", "--size", "128x128", "--out", str(tmp_path / "env")])
    monkeypatch.delenv(cli.SEED_ENV)
    cli.main(["synth", "--scenes", "1", "--size", "128x128", "--seed", "11", "--out", str(tmp_path / "flag")])
    assert files_bytes(tmp_path / "env") == files_bytes(tmp_path / "flag")
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seeds"] == {"seed": 11}


def test_resolution_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# training setup\nepochs = 7\nlr = 0.001  # faster\nvariant = dense\nwith-l1 = yes\n")
    file_cfg = cli.read_config_file(conf)
    cfg = cli.resolve("train", {"tiles": "t.fnt", "out": "o", "epochs": "3"}, file_cfg, env={})
    assert cfg["epochs"] == 3 and cfg["lr"] == 0.001 and cfg["variant"] == "dense" and cfg["with_l1"] is True
    assert cfg["batch"] == 32 and cfg["init_seed"] == 0
    defaults = cli.resolve("train", {"tiles": "t.fnt", "out": "o"}, env={cli.SEED_ENV: "5"})
    assert (defaults["epochs"], defaults["lr"], defaults["batch"]) == (20, 1e-4, 32)
    assert defaults["shuffle_seed"] == 5
    with pytest.raises(cli.UsageError):
        cli.resolve("train", {"tiles": "t.fnt", "out": "o"}, {"epoch": "3"})
    with pytest.raises(cli.UsageError):
        cli.resolve("train", {"out": "o"}, env={})


def test_config_file_drives_command(tmp_path):
    conf = tmp_path / "synth.conf"
    conf.write_text(f"out = {tmp_path / 'x'}\nscenes = 1\nsize = 128x256\n")
    assert cli.main(["synth", "--config", str(conf)]) == 0
    assert data.load_scene(tmp_path / "x" / "train" / "scene_000.fnc").shape == (256, 128)


@pytest.fixture(scope="module")
def tiny_tiles(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert cli.main(["synth", "--scenes", "2", "--holdout", "1", "--size", "256x256", "--seed", "3",
                     "--out", str(root)]) == 0
    return root


def test_train_defaults_recorded(tiny_tiles, tmp_path):
    # keep the run short but leave epochs/lr/batch at their defaults
    small = tmp_path / "small.fnt"
    data.write_tileset(small, data.load_tileset(tiny_tiles / "tiles.fnt")[:2])
    assert cli.main(["train", "--tiles", str(small), "--out", str(tmp_path / "run")]) == 0
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert (m["config"]["epochs"], m["config"]["lr"], m["config"]["batch"]) == (20, 1e-4, 32)
    assert m["optimizer_steps"] == 20
    for name in ("model.fsm", "stats.fns", "train_log.tsv", "split.json", "calibration.fnt"):
        assert (tmp_path / "run" / name).exists()
    assert len((tmp_path / "run" / "train_log.tsv").read_text().splitlines()) == 21


def test_dense_with_l1_logs_three_terms(tiny_tiles, tmp_path):
    assert cli.main(["train", "--tiles", str(tiny_tiles / "tiles.fnt"), "--out", str(tmp_path),
                     "--variant", "dense", "--with-l1", "--epochs", "1"]) == 0
    header = (tmp_path / "train_log.tsv").read_text().splitlines()[0].split("\t")
    assert [h for h in header if h.startswith("train_") and h != "train_loss"] == [
        "train_bce", "train_jaccard", "train_l1"]
    model, adam = checkpoint.load_checkpoint(tmp_path / "model.fsm")
    assert model.variant == "dense" and adam.t == 1


@pytest.mark.parametrize("args", [["--epochs", "0"], ["--variant", "unet"], ["--batch", "0"], ["--lr", "x"]])
def test_train_usage_errors(tiny_tiles, tmp_path, args):
    assert cli.main(["train", "--tiles", str(tiny_tiles / "tiles.fnt"), "--out", str(tmp_path)] + args) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tiny_tiles, tmp_path):
    code = cli.main(["train", "--tiles", str(tiny_tiles / "tiles.fnt"), "--out", str(tmp_path),
                     "--epochs", "3", "--lr", "1e38"])
    assert code == cli.EXIT_DIVERGED


def test_missing_inputs(tmp_path):
    assert cli.main(["train", "--tiles", str(tmp_path / "nope.fnt"), "--out", str(tmp_path)]) == cli.EXIT_MISSING
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "nope.fsm"), "--scenes", str(tmp_path),
                     "--out", str(tmp_path / "ev")]) == cli.EXIT_MISSING
    assert cli.main(["bogus"]) == cli.EXIT_USAGE


# ---------------------------------------------------------------------------
# evaluation with an oracle network


def oracle_model():
    """Residual network that reads the reference straight from band 1."""
    m = models.build_model("residual", 0)
    for layer in m.layers:
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0
    m.layers[0].weight.data[0, 1, 1, 1] = 10.0
    m.layers[0].bias.data[0] = -5.0
    m.layers[6].weight.data[0, 0, 0, 0] = 2.0
    m.layers[6].bias.data[0] = -5.0
    return m


@pytest.fixture(scope="module")
def oracle_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("oracle")
    checkpoint.save_checkpoint(root / "model.fsm", oracle_model())
    data.write_stats(root / "stats.fns", BandStats(np.zeros(3, np.float32), np.ones(3, np.float32)))
    scenes = root / "scenes"
    scenes.mkdir()
    cal = []
    for k in range(3):
        sc = data.synthesize_scene(256, 128, None, noise_seed=k)
        ref = (sc.reference > 0.5).astype(np.float32)
        bands = sc.bands.copy()
        bands[1] = ref
        scene = Scene(bands, ref)
        if k == 0:
            cal = data.tile_scene(scene)
        else:
            data.write_scene(scenes / f"s{k}.fnc", scene)
    data.write_tileset(root / "calibration.fnt", cal)
    return root


def test_oracle_checkpoint_scores_perfectly(oracle_run):
    out = oracle_run / "ev1"
    assert cli.main(["evaluate", "--checkpoint", str(oracle_run / "model.fsm"),
                     "--scenes", str(oracle_run / "scenes"), "--out", str(out)]) == 0
    rows = ev.read_report(out / "report.tsv")
    assert [r["scene_id"] for r in rows] == ["s1", "s2"]
    for r in rows:
        assert r["acc"] == "1.000000" and r["iou"] == "1.000000"
    header = (out / "report.tsv").read_text().splitlines()[0].split("\t")
    assert tuple(header) == ev.SceneMetrics.REPORT_FIELDS
    mask = ev.read_pgm(out / "s1_mask.pgm")
    ref = data.load_scene(oracle_run / "scenes" / "s1.fnc").reference
    np.testing.assert_array_equal(mask == 255, ref > 0)
    assert set(np.unique(mask).tolist()) <= {0, 255}
    assert ev.read_pgm(out / "s1_prob.pgm").shape == ref.shape


def test_evaluate_rerun_is_byte_identical(oracle_run):
    args = ["evaluate", "--checkpoint", str(oracle_run / "model.fsm"), "--scenes", str(oracle_run / "scenes")]
    cli.main(args + ["--out", str(oracle_run / "r1")])
    cli.main(args + ["--out", str(oracle_run / "r2")])
    assert files_bytes(oracle_run / "r1") == files_bytes(oracle_run / "r2")


def test_baseline_predictors(oracle_run):
    out = oracle_run / "const"
    assert cli.main(["evaluate", "--predictor", "constant", "--calibration", str(oracle_run / "calibration.fnt"),
                     "--scenes", str(oracle_run / "scenes"), "--out", str(out)]) == 0
    ref = data.load_scene(oracle_run / "scenes" / "s1.fnc").reference
    row = ev.read_report(out / "report.tsv")[0]
    # scored as all-forest
    assert int(row["TP"]) + int(row["FP"]) == ref.size
    assert float(row["iou"]) == pytest.approx((ref > 0.5).mean(), abs=1e-6)


def test_predict_and_replay(oracle_run, tmp_path):
    out = tmp_path / "pred"
    assert cli.main(["predict", "--checkpoint", str(oracle_run / "model.fsm"),
                     "--scenes", str(oracle_run / "scenes" / "s2.fnc"), "--out", str(out)]) == 0
    prob = np.load(out / "s2_prob.npy")
    assert prob.shape == (128, 256) and np.all((prob > 0) & (prob < 1))
    assert cli.main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    assert files_bytes(out) == files_bytes(tmp_path / "again")
