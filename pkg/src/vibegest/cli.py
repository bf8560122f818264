"""Command-line workflows tying the library into reproducible runs.

Every command gets an output directory, writes a `manifest.json` recording
the resolved options (hashed), the seed, and the tool version, and exits
with a distinct code per failure class: 0 ok, 2 configuration error,
3 data error, 4 constraint-infeasible design, 5 internal error.

Timestamps live only in the manifest; every other artifact is byte-stable
for a fixed seed, so reruns can be compared with `cmp`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, accel, dataio, nn, quant, report, search, trainer
from .errors import (ConfigError, DataError, InfeasibleError, SimulationError,
                     VibegestError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4
EXIT_INTERNAL = 5

BUNDLE_KEYS = ("x_train", "y_train", "x_val", "y_val", "x_test", "y_test")


# ======================================================================
# Shared plumbing
# ======================================================================


def _outdir(args):
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(outdir, command, options, seed):
    canon = json.dumps(options, sort_keys=True)
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
        "options": options,
        "seed": seed,
        "tool_version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    (Path(outdir) / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _options(args, skip=("func", "command")):
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _save_bundle(outdir, arrays, meta):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for key in BUNDLE_KEYS:
        np.save(outdir / f"{key}.npy", arrays[key])
    (outdir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_bundle(path):
    path = Path(path)
    missing = [str(path / f"{k}.npy") for k in BUNDLE_KEYS
               if not (path / f"{k}.npy").exists()]
    if not (path / "meta.json").exists():
        missing.append(str(path / "meta.json"))
    if missing:
        raise DataError("dataset bundle is missing: " + ", ".join(missing))
    arrays = {k: np.load(path / f"{k}.npy") for k in BUNDLE_KEYS}
    meta = json.loads((path / "meta.json").read_text())
    return arrays, meta


def _save_observers(observers, path):
    docs = [{"initialized": o.initialized, "min": float(o.min).hex(),
             "max": float(o.max).hex()} for o in observers]
    Path(path).write_text(json.dumps(docs, indent=2) + "\n")


def _load_observers(path):
    docs = json.loads(Path(path).read_text())
    observers = []
    for doc in docs:
        o = quant.EmaObserver()
        o.initialized = doc["initialized"]
        o.min = float.fromhex(doc["min"])
        o.max = float.fromhex(doc["max"])
        observers.append(o)
    return observers


def _device(name):
    if name not in accel.DEVICES:
        raise ConfigError(f"unknown device {name!r}; known: "
                          + ", ".join(sorted(accel.DEVICES)))
    return accel.DEVICES[name]


@contextmanager
def _stage(name):
    try:
        yield
    except VibegestError as exc:
        exc.args = (f"[{name}] {exc}",)
        raise


def _check_bit_exact(qm, design, x_sample):
    q = quant.quantize_input(np.asarray(x_sample, dtype=np.float64), qm)
    q = q[None] if q.ndim == 2 else q
    want = quant.int_forward(qm, q)[0]
    got, cycles = accel.simulate(design, q[0])
    if not np.array_equal(got, want):
        raise SimulationError(
            "simulated logits disagree with the integer interpreter",
            [f"simulated={got.tolist()}", f"interpreter={want.tolist()}"])
    return cycles


# ======================================================================
# Commands
# ======================================================================


def cmd_synth_data(args):
    out = _outdir(args)
    records = dataio.synth_dataset(
        args.seed, n_subjects=args.subjects, n_sessions=args.sessions,
        class_separability=args.separability, n_recordings=args.recordings,
        sample_rate=args.sample_rate, duration_s=args.duration)
    root = dataio.write_wav_layout(records, out / "wav")
    _write_manifest(out, "synth-data", _options(args), args.seed)
    print(f"wrote {len(records)} records under {root}")
    return EXIT_OK


def cmd_preprocess(args):
    out = _outdir(args)
    records = dataio.load_wav_sessions(args.data)
    plan = dataio.make_split(records, args.split, args.target,
                             val_fraction=args.val_fraction, seed=args.seed)
    sd = dataio.split_samples(records, plan, d=args.downsample_factor,
                              window=(args.window_start, args.window_dur))
    arrays = {}
    for name, samples in (("train", sd.train), ("val", sd.val),
                          ("test", sd.test)):
        x, y = dataio.stack(samples)
        arrays[f"x_{name}"], arrays[f"y_{name}"] = x, y
    meta = {"split": plan.method, "target": plan.target,
            "downsample_factor": args.downsample_factor,
            "window_start_s": args.window_start,
            "window_dur_s": args.window_dur,
            "val_fraction": args.val_fraction, "seed": args.seed,
            "labels": list(dataio.LABELS),
            "input_len": int(arrays["x_train"].shape[1]),
            "input_ch": int(arrays["x_train"].shape[2])}
    _save_bundle(out / "dataset", arrays, meta)
    (out / "split.json").write_text(plan.to_json() + "\n")
    _write_manifest(out, "preprocess", _options(args), args.seed)
    print(f"train/val/test samples: {len(arrays['y_train'])}/"
          f"{len(arrays['y_val'])}/{len(arrays['y_test'])}")
    return EXIT_OK


def _model_config_from(args, arrays, meta):
    return nn.ModelConfig(arch=args.arch, num_blocks=args.num_blocks,
                          input_len=arrays["x_train"].shape[1],
                          input_ch=arrays["x_train"].shape[2],
                          n_classes=len(meta.get("labels", dataio.LABELS)))


def cmd_train(args):
    out = _outdir(args)
    arrays, meta = _load_bundle(args.data)
    config = _model_config_from(args, arrays, meta)
    graph = nn.build_model(config, args.seed)
    spec = trainer.TrainSpec(epochs_max=args.epochs, patience=args.patience,
                             batch_size=args.bs, lr=args.lr, seed=args.seed,
                             qat_bits=args.bitwidth)
    result = trainer.train(graph, arrays["x_train"], arrays["y_train"],
                           arrays["x_val"], arrays["y_val"], spec)
    nn.save_model(graph, out / "model.json")
    trainer.write_training_log(out / "training_log.txt", result)
    if result.observers is not None:
        _save_observers(result.observers, out / "observers.json")
    _write_manifest(out, "train", _options(args), args.seed)
    mode = f"qat{args.bitwidth}" if args.bitwidth else "fp32"
    print(f"{mode} best val accuracy {result.best_val_accuracy:.4f} "
          f"(epoch {result.best_epoch}/{result.stopped_epoch})")
    return EXIT_OK


def cmd_quantize(args):
    out = _outdir(args)
    arrays, _ = _load_bundle(args.data)
    graph = nn.load_model(args.model)
    observers = _load_observers(args.observers) if args.observers else None
    calib = arrays["x_train"][:args.calib_samples]
    qm = quant.quantize_model(graph, args.bitwidth, calib,
                              observers=observers)
    quant.save_quantized(qm, out / "quant.json")
    acc, _ = trainer.evaluate(qm, arrays["x_val"], arrays["y_val"])
    _write_manifest(out, "quantize", _options(args), args.seed)
    print(f"integer-only val accuracy {acc:.4f} at b={args.bitwidth}")
    return EXIT_OK


def cmd_infer(args):
    out = _outdir(args)
    arrays, _ = _load_bundle(args.data)
    qm = quant.load_quantized(args.model)
    x, y = arrays[f"x_{args.subset}"], arrays[f"y_{args.subset}"]
    acc, conf = trainer.evaluate(qm, x, y)
    q = quant.quantize_input(np.asarray(x, dtype=np.float64), qm)
    pred = quant.int_forward(qm, q).argmax(axis=1)
    with open(out / "predictions.csv", "w") as f:
        f.write("index,true,predicted\n")
        for i, (t, p) in enumerate(zip(y, pred)):
            f.write(f"{i},{dataio.LABELS[t]},{dataio.LABELS[p]}\n")
    report.write_confusion_csv(conf, out / "confusion.csv")
    report.render_confusion_svg(conf, out / "confusion.svg")
    _write_manifest(out, "infer", _options(args), args.seed)
    print(f"{args.subset} accuracy {acc:.4f} over {len(y)} samples")
    return EXIT_OK


def _power_model_from(args):
    if args.calibrate_power:
        rows = []
        text = Path(args.calibrate_power).read_text().strip().splitlines()
        if not text or text[0] != "luts,bram_blocks,dsps,power_mw":
            raise DataError("power calibration csv must start with header "
                            "'luts,bram_blocks,dsps,power_mw'")
        for line in text[1:]:
            lut, bram, dsp, mw = (float(v) for v in line.split(","))
            rows.append(((lut, bram, dsp), mw))
        return accel.calibrate_power(rows)
    return accel.default_power_model()


def cmd_simulate(args):
    out = _outdir(args)
    qm = quant.load_quantized(args.model)
    device = _device(args.device)
    design = accel.compile(qm, device, ping_pong=args.ping_pong)
    cycles = accel.pipeline_cycles(design)
    lat = accel.latency_ms(cycles, device)
    res = accel.estimate_resources(design)
    power_model = _power_model_from(args)
    power = accel.estimate_power(res, power_model)
    energy = accel.energy_mj(lat, power)
    (out / "netlist.txt").write_text(accel.emit_netlist(design))
    metrics = {"cycles": cycles, "latency_ms": f"{lat:.4f}",
               "luts_used": res.luts_used, "lut_pct": f"{res.lut_pct:.2f}",
               "bram_blocks_used": res.bram_blocks_used,
               "bram_pct": f"{res.bram_pct:.2f}",
               "dsps_used": res.dsps_used, "dsp_pct": f"{res.dsp_pct:.2f}",
               "power_mw": f"{power:.2f}", "energy_mj": f"{energy:.4f}",
               "feasible": res.feasible, "device": device.name,
               "ping_pong": args.ping_pong}
    report.write_run_report_csv(metrics, out / "run_report.csv")
    if args.data:
        arrays, _ = _load_bundle(args.data)
        _check_bit_exact(qm, design, arrays["x_test"][0])
        print("simulation output matches the integer interpreter")
    _write_manifest(out, "simulate", _options(args), args.seed)
    print(f"cycles={cycles} latency={lat:.3f} ms power={power:.1f} mW "
          f"energy={energy:.4f} mJ feasible={res.feasible}")
    if args.require_feasible and not res.feasible:
        raise InfeasibleError(
            f"design exceeds {device.name}: lut {res.lut_pct:.1f}% "
            f"bram {res.bram_pct:.1f}% dsp {res.dsp_pct:.1f}%")
    return EXIT_OK


def _front_detail(study, front, ctx, arrays, meta, arch):
    members = []
    for t in front:
        fp32_val, twin = search.fp32_twin_accuracy(t.config, ctx)
        fp32_test, _ = trainer.evaluate(twin, arrays["x_test"],
                                        arrays["y_test"])
        quant_test, conf = trainer.evaluate(t.qm, arrays["x_test"],
                                            arrays["y_test"])
        m = t.metrics
        members.append({
            "config": {"arch": t.config.arch,
                       "num_blocks": t.config.num_blocks,
                       "bits": t.config.bits,
                       "batch_size": t.config.batch_size,
                       "lr": t.config.lr,
                       "trial_index": t.config.trial_index},
            "val_accuracy": m.val_accuracy,
            "quant_val_accuracy": m.quant_accuracy,
            "fp32_val_accuracy": fp32_val,
            "fp32_accuracy": fp32_test,
            "quant_test_accuracy": quant_test,
            "lut_pct": m.resources.lut_pct,
            "bram_pct": m.resources.bram_pct,
            "dsp_pct": m.resources.dsp_pct,
            "latency_ms": m.latency_ms,
            "power_mw": m.power_mw,
            "energy_mj": m.energy_mj,
            "confusion": [[int(v) for v in row] for row in conf],
        })
    best = None
    if members:
        best = max(range(len(members)),
                   key=lambda i: (members[i]["quant_test_accuracy"],
                                  -members[i]["energy_mj"]))
    return {"method": ctx.constraints.method, "target": meta.get("target"),
            "arch": arch, "members": members, "best_index": best}


def cmd_search(args):
    out = _outdir(args)
    arrays, meta = _load_bundle(args.data)
    method = args.split or meta.get("split")
    if method is None:
        raise ConfigError("--split not given and dataset meta carries none")
    constraints = search.ConstraintSet(method=method,
                                       device=_device(args.device))
    ctx = search.StudyContext(
        x_train=arrays["x_train"], y_train=arrays["y_train"],
        x_val=arrays["x_val"], y_val=arrays["y_val"],
        constraints=constraints, epochs_max=args.epochs,
        patience=args.patience, ping_pong=args.ping_pong)
    kw = {"arch": args.arch}
    if args.lr_range:
        lo, hi = (float(v) for v in args.lr_range.split(","))
        if lo <= 0 or hi <= 0:
            raise ConfigError("--lr-range bounds must be positive")
        kw["lr_log_range"] = (np.log10(lo), np.log10(hi))
    if args.bits:
        kw["bits"] = tuple(int(v) for v in args.bits.split(","))
    if args.batch_sizes:
        kw["batch_sizes"] = tuple(int(v) for v in args.batch_sizes.split(","))
    if args.blocks:
        kw["num_blocks"] = tuple(int(v) for v in args.blocks.split(","))
    space = search.SearchSpace(**kw)
    study = search.run_study(space, constraints, ctx, args.trials, args.seed,
                             population=args.population, jobs=args.jobs,
                             log_path=out / "study.jsonl")
    front = search.pareto_front(study)
    search.write_front_csv(front, out / "front.csv")
    detail = _front_detail(study, front, ctx, arrays, meta, args.arch)
    (out / "front_detail.json").write_text(
        json.dumps(detail, indent=2, sort_keys=True) + "\n")
    trial_pts = [(t.metrics.energy_mj, t.metrics.quant_accuracy)
                 for t in study if t.complete]
    front_pts = [(t.metrics.energy_mj, t.metrics.quant_accuracy)
                 for t in front]
    report.render_scatter_svg(trial_pts, front_pts, out / "scatter.svg")
    _write_manifest(out, "search", _options(args), args.seed)
    n_complete = sum(t.complete for t in study)
    print(f"{len(study)} trials, {n_complete} complete, "
          f"front size {len(front)}")
    return EXIT_OK


def cmd_report(args):
    out = _outdir(args)
    table_rows = []
    general_rows = []
    for study_dir in args.study:
        sdir = Path(study_dir)
        detail_path = sdir / "front_detail.json"
        study_path = sdir / "study.jsonl"
        missing = [str(p) for p in (detail_path, study_path)
                   if not p.exists()]
        if missing:
            raise DataError("missing report inputs: " + ", ".join(missing))
        detail = json.loads(detail_path.read_text())
        if detail["best_index"] is None:
            continue
        best = detail["members"][detail["best_index"]]
        row = {"split": detail["method"], "arch": best["config"]["arch"],
               "num_blocks": best["config"]["num_blocks"],
               "bits": best["config"]["bits"],
               "batch_size": best["config"]["batch_size"],
               "lr": best["config"]["lr"],
               "fp32_accuracy": best["fp32_accuracy"],
               "quant_accuracy": best["quant_test_accuracy"],
               "lut_pct": best["lut_pct"], "bram_pct": best["bram_pct"],
               "dsp_pct": best["dsp_pct"],
               "latency_ms": best["latency_ms"],
               "power_mw": best["power_mw"],
               "energy_mj": best["energy_mj"]}
        table_rows.append(row)
        general_rows.append({"method": detail["method"],
                             "target": detail.get("target"),
                             "arch": best["config"]["arch"],
                             "num_blocks": best["config"]["num_blocks"],
                             "bits": best["config"]["bits"],
                             "fp32_accuracy": best["fp32_accuracy"],
                             "quant_accuracy": best["quant_test_accuracy"]})
        tag = f"{detail['method']}_{detail['arch']}"
        conf = np.array(best["confusion"])
        report.write_confusion_csv(conf, out / f"confusion_{tag}.csv")
        report.render_confusion_svg(conf, out / f"confusion_{tag}.svg")
        pts = _scatter_points(study_path)
        front_pts = [(m["energy_mj"], m["quant_val_accuracy"])
                     for m in detail["members"]]
        report.render_scatter_svg(pts, front_pts, out / f"scatter_{tag}.svg")
    if not table_rows:
        raise DataError("no study produced a non-empty front; nothing to "
                        "report")
    report.write_table2_csv(table_rows, out / "table2.csv")
    if len(general_rows) > 1:
        report.write_generalization_csv(general_rows,
                                        out / "generalization.csv")
    report.write_reference_constants(out)
    _write_manifest(out, "report", _options(args), args.seed)
    print(f"report bundle in {out} ({len(table_rows)} selected rows)")
    return EXIT_OK


def _scatter_points(study_path):
    pts = []
    for line in Path(study_path).read_text().splitlines():
        doc = json.loads(line)
        m = doc["metrics"]
        if (doc["pruned_at"] is None and m["energy_mj"] is not None
                and m["quant_accuracy"] is not None):
            pts.append((m["energy_mj"], m["quant_accuracy"]))
    return pts


# ======================================================================
# Pipeline
# ======================================================================

_PIPELINE_DEFAULTS = {
    "data": {"synthetic": True, "separability": 1.0, "subjects": 1,
             "sessions": 9, "recordings": 5, "sample_rate": 44_100,
             "duration_s": 2.0, "wav_root": None},
    "preprocess": {"split": "ps", "target": "A", "downsample_factor": 10,
                   "window_start_s": 0.25, "window_dur_s": 1.0,
                   "val_fraction": 0.2},
    "model": {"arch": "cnn", "num_blocks": 3},
    "train": {"epochs": 30, "patience": 10, "batch_size": 32, "lr": 1e-3},
    "quant": {"bitwidth": 8},
    "accel": {"device": "xc7s25", "ping_pong": True},
}


def _pipeline_config(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise ConfigError("pipeline config must declare version 1")
    cfg = {}
    for section, defaults in _PIPELINE_DEFAULTS.items():
        given = doc.get(section, {})
        unknown = set(given) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {section} config keys: "
                              + ", ".join(sorted(unknown)))
        cfg[section] = {**defaults, **given}
    cfg["seed"] = int(doc.get("seed", 0))
    if cfg["quant"]["bitwidth"] not in (4, 6, 8):
        raise ConfigError(
            f"bitwidth {cfg['quant']['bitwidth']} not in {{4, 6, 8}}")
    if cfg["model"]["arch"] not in (nn.ARCH_CNN, nn.ARCH_SEPCNN):
        raise ConfigError(f"unknown arch {cfg['model']['arch']!r}")
    return cfg


def cmd_pipeline(args):
    out = _outdir(args)
    cfg = _pipeline_config(args.config)
    seed = cfg["seed"]

    with _stage("data"):
        d = cfg["data"]
        if d["synthetic"]:
            records = dataio.synth_dataset(
                seed, n_subjects=d["subjects"], n_sessions=d["sessions"],
                class_separability=d["separability"],
                n_recordings=d["recordings"], sample_rate=d["sample_rate"],
                duration_s=d["duration_s"])
        else:
            if not d["wav_root"]:
                raise ConfigError("data.wav_root required when not synthetic")
            records = dataio.load_wav_sessions(d["wav_root"])

    with _stage("preprocess"):
        p = cfg["preprocess"]
        plan = dataio.make_split(records, p["split"], p["target"],
                                 val_fraction=p["val_fraction"], seed=seed)
        sd = dataio.split_samples(
            records, plan, d=p["downsample_factor"],
            window=(p["window_start_s"], p["window_dur_s"]))
        arrays = {}
        for name, samples in (("train", sd.train), ("val", sd.val),
                              ("test", sd.test)):
            x, y = dataio.stack(samples)
            arrays[f"x_{name}"], arrays[f"y_{name}"] = x, y
        meta = {"split": plan.method, "target": plan.target,
                "labels": list(dataio.LABELS)}
        _save_bundle(out / "data" / "dataset", arrays, meta)
        (out / "data" / "split.json").write_text(plan.to_json() + "\n")

    with _stage("train"):
        t = cfg["train"]
        config = nn.ModelConfig(arch=cfg["model"]["arch"],
                                num_blocks=cfg["model"]["num_blocks"],
                                input_len=arrays["x_train"].shape[1],
                                input_ch=arrays["x_train"].shape[2])
        bits = cfg["quant"]["bitwidth"]
        graph = nn.build_model(config, seed)
        spec = trainer.TrainSpec(epochs_max=t["epochs"],
                                 patience=t["patience"],
                                 batch_size=t["batch_size"], lr=t["lr"],
                                 seed=seed, qat_bits=bits)
        result = trainer.train(graph, arrays["x_train"], arrays["y_train"],
                               arrays["x_val"], arrays["y_val"], spec)
        train_dir = out / "train"
        train_dir.mkdir(parents=True, exist_ok=True)
        nn.save_model(graph, train_dir / "model.json")
        trainer.write_training_log(train_dir / "training_log.txt", result)
        twin_graph = nn.build_model(config, seed)
        twin_spec = trainer.TrainSpec(epochs_max=t["epochs"],
                                      patience=t["patience"],
                                      batch_size=t["batch_size"], lr=t["lr"],
                                      seed=seed, qat_bits=None)
        trainer.train(twin_graph, arrays["x_train"], arrays["y_train"],
                      arrays["x_val"], arrays["y_val"], twin_spec)

    with _stage("quantize"):
        qm = quant.quantize_model(graph, bits, arrays["x_train"][:64],
                                  observers=result.observers)
        quant_dir = out / "quant"
        quant_dir.mkdir(parents=True, exist_ok=True)
        quant.save_quantized(qm, quant_dir / "quant.json")

    with _stage("simulate"):
        device = _device(cfg["accel"]["device"])
        design = accel.compile(qm, device,
                               ping_pong=cfg["accel"]["ping_pong"])
        cycles = _check_bit_exact(qm, design, arrays["x_test"][0])
        full_cycles = accel.pipeline_cycles(design)
        lat = accel.latency_ms(full_cycles, device)
        res = accel.estimate_resources(design)
        power = accel.estimate_power(res, accel.default_power_model())
        energy = accel.energy_mj(lat, power)
        sim_dir = out / "sim"
        sim_dir.mkdir(parents=True, exist_ok=True)
        (sim_dir / "netlist.txt").write_text(accel.emit_netlist(design))
        report.write_run_report_csv(
            {"cycles": full_cycles, "latency_ms": f"{lat:.4f}",
             "power_mw": f"{power:.2f}", "energy_mj": f"{energy:.4f}",
             "lut_pct": f"{res.lut_pct:.2f}",
             "bram_pct": f"{res.bram_pct:.2f}",
             "dsp_pct": f"{res.dsp_pct:.2f}", "feasible": res.feasible,
             "bit_exact_check_cycles": cycles},
            sim_dir / "run_report.csv")

    with _stage("report"):
        fp32_test, _ = trainer.evaluate(twin_graph, arrays["x_test"],
                                        arrays["y_test"])
        quant_test, conf = trainer.evaluate(qm, arrays["x_test"],
                                            arrays["y_test"])
        rep_dir = out / "report"
        rep_dir.mkdir(parents=True, exist_ok=True)
        report.write_table2_csv(
            [{"split": plan.method, "arch": config.arch,
              "num_blocks": config.num_blocks, "bits": bits,
              "batch_size": cfg["train"]["batch_size"],
              "lr": cfg["train"]["lr"], "fp32_accuracy": fp32_test,
              "quant_accuracy": quant_test, "lut_pct": res.lut_pct,
              "bram_pct": res.bram_pct, "dsp_pct": res.dsp_pct,
              "latency_ms": lat, "power_mw": power, "energy_mj": energy}],
            rep_dir / "table2.csv")
        report.write_confusion_csv(conf, rep_dir / "confusion.csv")
        report.render_confusion_svg(conf, rep_dir / "confusion.svg")
        report.write_reference_constants(rep_dir)

    _write_manifest(out, "pipeline", {"config": _pipeline_config_doc(cfg)},
                    seed)
    print(f"pipeline done: fp32 {fp32_test:.4f}, quantized {quant_test:.4f}, "
          f"latency {lat:.3f} ms, energy {energy:.4f} mJ")
    if not res.feasible:
        raise InfeasibleError(
            f"design exceeds {device.name}: lut {res.lut_pct:.1f}% "
            f"bram {res.bram_pct:.1f}% dsp {res.dsp_pct:.1f}%")
    return EXIT_OK


def _pipeline_config_doc(cfg):
    return json.loads(json.dumps(cfg, sort_keys=True))


# ======================================================================
# Parser
# ======================================================================


def build_parser():
    p = argparse.ArgumentParser(
        prog="vibegest",
        description="Train, quantize, simulate, and search tiny gesture "
                    "classifiers for a streaming FPGA-style accelerator.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate a synthetic WAV corpus")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--subjects", type=int, default=2)
    sp.add_argument("--sessions", type=int, default=9)
    sp.add_argument("--recordings", type=int, default=10)
    sp.add_argument("--separability", type=float, default=1.0)
    sp.add_argument("--sample-rate", type=int, default=dataio.SAMPLE_RATE)
    sp.add_argument("--duration", type=float, default=dataio.RECORD_SECONDS)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("preprocess", help="window, decimate, split")
    sp.add_argument("--data", required=True, help="WAV corpus root")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--split", choices=("ps", "loso", "aos"), default="ps")
    sp.add_argument("--target", default="A", help="target subject")
    sp.add_argument("--downsample-factor", type=int,
                    default=dataio.DOWNSAMPLE)
    sp.add_argument("--window-start", type=float,
                    default=dataio.WINDOW_START_S)
    sp.add_argument("--window-dur", type=float, default=dataio.WINDOW_DUR_S)
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train a model (QAT with --bitwidth)")
    sp.add_argument("--data", required=True, help="dataset bundle dir")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--arch", choices=(nn.ARCH_CNN, nn.ARCH_SEPCNN),
                    default=nn.ARCH_CNN)
    sp.add_argument("--num-blocks", type=int, default=3)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--bs", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--bitwidth", type=int, choices=(4, 6, 8), default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("quantize", help="convert a model to integer form")
    sp.add_argument("--model", required=True, help="model.json from train")
    sp.add_argument("--data", required=True, help="dataset bundle dir")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--bitwidth", type=int, choices=(4, 6, 8), required=True)
    sp.add_argument("--observers", default=None,
                    help="observers.json from QAT training")
    sp.add_argument("--calib-samples", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("infer", help="integer-only evaluation")
    sp.add_argument("--model", required=True, help="quant.json")
    sp.add_argument("--data", required=True)
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--subset", choices=("train", "val", "test"),
                    default="test")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("simulate", help="compile and run the accelerator")
    sp.add_argument("--model", required=True, help="quant.json")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--device", default="xc7s25")
    sp.add_argument("--ping-pong", action=argparse.BooleanOptionalAction,
                    default=True)
    sp.add_argument("--calibrate-power", default=None,
                    help="csv of luts,bram_blocks,dsps,power_mw rows")
    sp.add_argument("--data", default=None,
                    help="bundle dir for a bit-exactness check")
    sp.add_argument("--require-feasible", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("search", help="NSGA-II accuracy/energy study")
    sp.add_argument("--data", required=True)
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--arch", choices=(nn.ARCH_CNN, nn.ARCH_SEPCNN),
                    default=nn.ARCH_CNN)
    sp.add_argument("--split", choices=("ps", "loso", "aos"), default=None,
                    help="constraint table; defaults to the bundle's split")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--population", type=int, default=20)
    sp.add_argument("--epochs", type=int, default=40)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--device", default="xc7s25")
    sp.add_argument("--ping-pong", action=argparse.BooleanOptionalAction,
                    default=True)
    sp.add_argument("--lr-range", default=None, metavar="LO,HI",
                    help="learning-rate bounds inside [1e-5, 1e-3]")
    sp.add_argument("--bits", default=None, metavar="B[,B..]",
                    help="bitwidth choices, subset of 4,6,8")
    sp.add_argument("--batch-sizes", default=None, metavar="N[,N..]")
    sp.add_argument("--blocks", default=None, metavar="N[,N..]",
                    help="num_blocks choices, subset of 1..5")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("report", help="render tables and figures")
    sp.add_argument("--study", nargs="+", required=True,
                    help="one or more search output dirs")
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("pipeline", help="end-to-end reproducible run")
    sp.add_argument("--config", required=True, help="json config, version 1")
    sp.add_argument("--outdir", required=True)
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except VibegestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - map anything else to internal
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
