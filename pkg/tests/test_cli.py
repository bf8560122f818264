"""Command-line surface: exit codes, manifests, artifact stability.

Commands run in-process through cli.main so coverage tools and monkeypatch
see them; the chain fixtures build each artifact once per module.
"""

import hashlib
import json

import numpy as np
import pytest

import vibegest
from vibegest import accel, cli

TINY_FLAGS = ["--subjects", "1", "--sessions", "3", "--duration", "0.5"]
PRE_FLAGS = ["--split", "ps", "--target", "A", "--downsample-factor", "20",
             "--window-start", "0.05", "--window-dur", "0.4"]


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def roots(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def wav_root(roots):
    out = roots / "synth"
    assert run(["synth-data", "--outdir", out, "--seed", "0",
                "--recordings", "2", *TINY_FLAGS]) == 0
    return out / "wav"


@pytest.fixture(scope="module")
def bundle(roots, wav_root):
    out = roots / "pre"
    assert run(["preprocess", "--data", wav_root, "--outdir", out,
                "--seed", "0", *PRE_FLAGS]) == 0
    return out / "dataset"


@pytest.fixture(scope="module")
def train_dir(roots, bundle):
    out = roots / "train"
    assert run(["train", "--data", bundle, "--outdir", out, "--arch", "cnn",
                "--num-blocks", "2", "--epochs", "12", "--patience", "12",
                "--bs", "16", "--lr", "3e-3", "--bitwidth", "8",
                "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def quant_dir(roots, bundle, train_dir):
    out = roots / "quant"
    assert run(["quantize", "--model", train_dir / "model.json",
                "--data", bundle, "--outdir", out, "--bitwidth", "8",
                "--observers", train_dir / "observers.json"]) == 0
    return out


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--version"])
    assert exc.value.code == 0
    assert vibegest.__version__ in capsys.readouterr().out


def test_synth_data_writes_wavs_and_manifest(roots, wav_root):
    wavs = sorted(wav_root.rglob("*.wav"))
    assert len(wavs) == 1 * 3 * 2 * 4  # subjects x sessions x recs x classes
    manifest = json.loads((roots / "synth" / "manifest.json").read_text())
    assert manifest["command"] == "synth-data"
    assert manifest["seed"] == 0


def test_manifest_hash_matches_canonical_options(roots, bundle):
    manifest = json.loads((roots / "pre" / "manifest.json").read_text())
    assert set(manifest) == {"command", "config_sha256", "options", "seed",
                             "tool_version", "created"}
    canon = json.dumps(manifest["options"], sort_keys=True)
    assert manifest["config_sha256"] == hashlib.sha256(
        canon.encode()).hexdigest()
    assert manifest["tool_version"] == vibegest.__version__
    assert "func" not in manifest["options"]


def test_preprocess_bundle_contents(bundle):
    for key in cli.BUNDLE_KEYS:
        assert (bundle / f"{key}.npy").exists()
    meta = json.loads((bundle / "meta.json").read_text())
    assert meta["split"] == "ps" and meta["target"] == "A"
    x = np.load(bundle / "x_train.npy")
    assert meta["input_len"] == x.shape[1] and meta["input_ch"] == 4
    plan = json.loads((bundle.parent / "split.json").read_text())
    assert plan["method"] == "ps"


def test_train_artifacts(train_dir, capsys):
    assert (train_dir / "model.json").exists()
    assert (train_dir / "observers.json").exists()
    log = (train_dir / "training_log.txt").read_text().splitlines()
    assert log[-1].startswith("best_epoch=")


def test_quantize_is_byte_stable_across_reruns(roots, bundle, train_dir,
                                               quant_dir):
    again = roots / "quant_again"
    assert run(["quantize", "--model", train_dir / "model.json",
                "--data", bundle, "--outdir", again, "--bitwidth", "8",
                "--observers", train_dir / "observers.json"]) == 0
    assert (quant_dir / "quant.json").read_bytes() == \
        (again / "quant.json").read_bytes()


def test_infer_writes_predictions_and_figures(roots, bundle, quant_dir):
    out1, out2 = roots / "infer1", roots / "infer2"
    for out in (out1, out2):
        assert run(["infer", "--model", quant_dir / "quant.json",
                    "--data", bundle, "--outdir", out,
                    "--subset", "test"]) == 0
    pred = (out1 / "predictions.csv").read_text().splitlines()
    assert pred[0] == "index,true,predicted"
    assert len(pred) == 1 + len(np.load(bundle / "y_test.npy"))
    conf = (out1 / "confusion.csv").read_text().splitlines()
    assert conf[0].startswith("true\\pred,")
    svg = (out1 / "confusion.svg").read_bytes()
    assert svg.lstrip().startswith(b"<?xml")
    # rendered figures and tables are byte-stable for a fixed model/data
    for name in ("predictions.csv", "confusion.csv", "confusion.svg"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_simulate_checks_bit_exactness_and_is_stable(roots, bundle, quant_dir,
                                                     capsys):
    out1, out2 = roots / "sim1", roots / "sim2"
    for out in (out1, out2):
        assert run(["simulate", "--model", quant_dir / "quant.json",
                    "--outdir", out, "--data", bundle]) == 0
    text = capsys.readouterr().out
    assert "simulation output matches the integer interpreter" in text
    assert "feasible=True" in text
    report_csv = (out1 / "run_report.csv").read_text()
    assert report_csv.startswith("key,value\n")
    assert "cycles," in report_csv and "energy_mj," in report_csv
    netlist = (out1 / "netlist.txt").read_text()
    assert netlist.startswith("vibegest-netlist v1")
    for name in ("netlist.txt", "run_report.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


# ----------------------------------------------------------------------
# Exit codes
# ----------------------------------------------------------------------


def test_unknown_flag_and_bad_choice_exit_via_argparse(roots):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--data", "x", "--no-such-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run(["quantize", "--model", "m", "--data", "d",
             "--outdir", roots / "q5", "--bitwidth", "5"])
    assert exc.value.code == 2


def test_missing_bundle_is_a_data_error(roots, capsys):
    rc = run(["train", "--data", roots / "nowhere", "--outdir",
              roots / "t_missing"])
    assert rc == cli.EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_unknown_device_is_a_config_error(roots, quant_dir, capsys):
    rc = run(["simulate", "--model", quant_dir / "quant.json",
              "--outdir", roots / "sim_bad", "--device", "xc7s6"])
    assert rc == cli.EXIT_CONFIG
    assert "unknown device" in capsys.readouterr().err


def test_require_feasible_exits_infeasible_on_a_tiny_device(
        roots, quant_dir, monkeypatch, capsys):
    cramped = accel.DeviceProfile("cramped", luts=120, bram_kbits=18.0,
                                  bram_blocks=1, dsps=1, clock_hz=100_000_000)
    monkeypatch.setitem(accel.DEVICES, "cramped", cramped)
    rc = run(["simulate", "--model", quant_dir / "quant.json",
              "--outdir", roots / "sim_cramped", "--device", "cramped",
              "--require-feasible"])
    assert rc == cli.EXIT_INFEASIBLE
    assert "exceeds cramped" in capsys.readouterr().err
    # without the flag the same design reports infeasible but exits 0
    assert run(["simulate", "--model", quant_dir / "quant.json",
                "--outdir", roots / "sim_cramped2",
                "--device", "cramped"]) == 0


def test_unexpected_exceptions_map_to_internal(roots, quant_dir, monkeypatch,
                                               capsys):
    def boom(*a, **kw):
        raise RuntimeError("surprise")
    monkeypatch.setattr(accel, "compile", boom)
    rc = run(["simulate", "--model", quant_dir / "quant.json",
              "--outdir", roots / "sim_boom"])
    assert rc == cli.EXIT_INTERNAL
    assert "internal error" in capsys.readouterr().err


def test_search_space_flags_are_validated_before_training(roots, bundle,
                                                          capsys):
    rc = run(["search", "--data", bundle, "--outdir", roots / "s_bad",
              "--trials", "2", "--population", "2", "--bits", "5"])
    assert rc == cli.EXIT_CONFIG
    rc = run(["search", "--data", bundle, "--outdir", roots / "s_bad2",
              "--trials", "2", "--population", "2",
              "--lr-range", "0.002,0.01"])
    assert rc == cli.EXIT_CONFIG


# ----------------------------------------------------------------------
# Search and report round trip
# ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def search_bundle(roots):
    synth = roots / "synth_search"
    assert run(["synth-data", "--outdir", synth, "--seed", "0",
                "--recordings", "4", *TINY_FLAGS]) == 0
    out = roots / "pre_search"
    assert run(["preprocess", "--data", synth / "wav", "--outdir", out,
                "--seed", "0", *PRE_FLAGS]) == 0
    return out / "dataset"


@pytest.fixture(scope="module")
def search_dir(roots, search_bundle):
    out = roots / "study"
    assert run(["search", "--data", search_bundle, "--outdir", out,
                "--trials", "2", "--population", "2", "--epochs", "25",
                "--patience", "8", "--bits", "8", "--batch-sizes", "16",
                "--blocks", "2", "--lr-range", "0.0005,0.001",
                "--seed", "3"]) == 0
    return out


def test_search_command_artifacts(search_dir):
    study = [json.loads(ln) for ln in
             (search_dir / "study.jsonl").read_text().splitlines()]
    assert [d["trial_index"] for d in study] == [0, 1]
    front = (search_dir / "front.csv").read_text().splitlines()
    assert front[0].startswith("accuracy,energy_mj,")
    assert len(front) >= 2  # at least one complete trial made the front
    detail = json.loads((search_dir / "front_detail.json").read_text())
    assert detail["method"] == "ps"
    assert len(detail["members"]) == len(front) - 1
    assert detail["best_index"] is not None
    member = detail["members"][detail["best_index"]]
    assert 0.0 <= member["quant_test_accuracy"] <= 1.0
    assert np.array(member["confusion"]).shape == (4, 4)
    assert (search_dir / "scatter.svg").read_bytes().lstrip().startswith(
        b"<?xml")


def test_report_renders_tables_and_figures(roots, search_dir):
    out = roots / "report"
    assert run(["report", "--study", search_dir, "--outdir", out]) == 0
    table = (out / "table2.csv").read_text().splitlines()
    assert table[0].split(",")[:6] == ["split", "arch", "num_blocks", "bits",
                                       "batch_size", "lr"]
    assert "accuracy_drop" in table[0]
    assert len(table) == 2
    for name in ("confusion_ps_cnn.csv", "confusion_ps_cnn.svg",
                 "scatter_ps_cnn.svg", "reference_designs.csv",
                 "reference_notes.csv"):
        assert (out / name).exists(), name
    notes = dict(
        line.split(",", 1) for line in
        (out / "reference_notes.csv").read_text().splitlines()[1:])
    assert notes["input_reduction_factor"] == "20.9"


def test_report_requires_existing_study_inputs(roots, capsys):
    rc = run(["report", "--study", roots / "missing_study",
              "--outdir", roots / "report_bad"])
    assert rc == cli.EXIT_DATA


# ----------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------


def pipeline_config(**overrides):
    cfg = {"version": 1, "seed": 0,
           "data": {"subjects": 1, "sessions": 3, "recordings": 2,
                    "duration_s": 0.5},
           "preprocess": {"downsample_factor": 20, "window_start_s": 0.05,
                          "window_dur_s": 0.4},
           "model": {"arch": "cnn", "num_blocks": 2},
           "train": {"epochs": 10, "patience": 10, "batch_size": 16,
                     "lr": 3e-3},
           "quant": {"bitwidth": 8}}
    cfg.update(overrides)
    return cfg


def write_config(path, cfg):
    path.write_text(json.dumps(cfg) + "\n")
    return path


def test_pipeline_end_to_end(roots, capsys):
    cfg_path = write_config(roots / "pipe.json", pipeline_config())
    out = roots / "pipe"
    assert run(["pipeline", "--config", cfg_path, "--outdir", out]) == 0
    assert "pipeline done" in capsys.readouterr().out
    for rel in ("data/dataset/x_train.npy", "data/split.json",
                "train/model.json", "train/training_log.txt",
                "quant/quant.json", "sim/netlist.txt", "sim/run_report.csv",
                "report/table2.csv", "report/confusion.csv",
                "report/confusion.svg", "report/reference_designs.csv",
                "manifest.json"):
        assert (out / rel).exists(), rel
    run_report = (out / "sim" / "run_report.csv").read_text()
    assert "feasible,True" in run_report
    assert "bit_exact_check_cycles," in run_report
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "pipeline"
    assert manifest["options"]["config"]["quant"]["bitwidth"] == 8


def test_pipeline_rejects_bad_configs(roots, capsys):
    bad_bits = pipeline_config(quant={"bitwidth": 5})
    rc = run(["pipeline", "--config",
              write_config(roots / "bad_bits.json", bad_bits),
              "--outdir", roots / "pipe_bad1"])
    assert rc == cli.EXIT_CONFIG
    assert "not in {4, 6, 8}" in capsys.readouterr().err

    unknown = pipeline_config(train={"epochs": 5, "momentum": 0.9})
    rc = run(["pipeline", "--config",
              write_config(roots / "bad_key.json", unknown),
              "--outdir", roots / "pipe_bad2"])
    assert rc == cli.EXIT_CONFIG
    assert "unknown train config keys: momentum" in capsys.readouterr().err

    unversioned = pipeline_config()
    del unversioned["version"]
    rc = run(["pipeline", "--config",
              write_config(roots / "bad_ver.json", unversioned),
              "--outdir", roots / "pipe_bad3"])
    assert rc == cli.EXIT_CONFIG
