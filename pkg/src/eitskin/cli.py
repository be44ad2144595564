"""Command-line surface: simulate scenarios, train the classifier, fit the
bend model, replay logs through the pipeline, and dump artifacts.

Exit codes are stable: 0 success, 2 malformed/missing input, 3 forward-
solver failure, 4 training divergence, 5 dimension mismatch between
artifacts, 6 insufficient calibration groups. Diagnostics go to stderr as
single lines `code=<n> msg=<text>`. All randomness flows from --seed
(default 0, never wall-clock). EIT_SKIN_THREADS caps internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bend as bend_mod
from . import classifier as cl
from . import fem
from . import phantoms as ph
from . import pipeline as pl
from . import reconstruction as rec
from . import report as report_mod

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4
EXIT_DIMENSION = 5
EXIT_GROUPS = 6


class DimensionMismatch(ValueError):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"code={code} msg={msg}", file=sys.stderr)
    return code


def _apply_thread_cap():
    cap = os.environ.get("EIT_SKIN_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        return
    try:
        import numba
        numba.set_num_threads(n)
    except (ImportError, ValueError):
        pass
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _add_world_args(p: argparse.ArgumentParser):
    p.add_argument("--elem-size", type=float, default=fem.DEFAULT_ELEM_SIZE_MM,
                   help="mesh element size in mm")
    p.add_argument("--electrodes", type=int, default=fem.DEFAULT_ELECTRODE_COUNT)
    p.add_argument("--scheme", choices=["adjacent", "all_pairs"], default="adjacent")
    p.add_argument("--lambda", dest="lam", type=float, default=rec.DEFAULT_LAMBDA,
                   help="reconstruction regularization weight")
    p.add_argument("--seed", type=int, default=0)


def _build_world(args) -> ph.SensorModel:
    return ph.SensorModel.default(target_elem_size=args.elem_size,
                                  scheme=args.scheme,
                                  n_electrodes=args.electrodes)


def _build_reconstructor(model: ph.SensorModel, lam: float) -> rec.Reconstructor:
    sens = fem.compute_jacobian(model.mesh, model.layout, model.protocol,
                                model.sigma0)
    reg = fem.noser_regularizer(sens)
    return rec.build_reconstructor(sens, lam, reg, model.mesh)


def _load_scenario(spec: str, seed: int) -> ph.Scenario:
    if spec in ph.BUILTIN_SCENARIOS:
        return ph.builtin_scenario(spec, seed=seed)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"scenario {spec!r} is neither a builtin "
                                f"({', '.join(sorted(ph.BUILTIN_SCENARIOS))}) nor a file")
    scenario = ph.scenario_from_json(path.read_text())
    if seed != 0:
        scenario = ph.Scenario(name=scenario.name,
                               frame_schedule=scenario.frame_schedule,
                               noise=scenario.noise, seed=seed)
    return scenario


def _read_log(path: str) -> ph.FrameLog:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"frame log not found: {path}")
    return ph.frame_log_from_csv(p.read_text())


def _global_reference(log: ph.FrameLog, model: ph.SensorModel) -> np.ndarray:
    """Mean of the log's leading idle frames; falls back to the clean
    model reference when the log does not start idle."""
    lead = []
    for e in log:
        if e.label != "idle":
            break
        lead.append(e.frame)
    if lead:
        return np.stack([f.voltages for f in lead]).mean(axis=0)
    return model.clean_reference()


def cmd_simulate(args) -> int:
    try:
        scenario = _load_scenario(args.scenario, args.seed)
    except FileNotFoundError as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    except json.JSONDecodeError as exc:
        return _fail(EXIT_BAD_INPUT,
                     f"malformed scenario line {exc.lineno} column {exc.colno}: {exc.msg}")
    except (KeyError, TypeError, ValueError) as exc:
        return _fail(EXIT_BAD_INPUT, f"invalid scenario: {exc}")
    model = _build_world(args)
    try:
        log = ph.run_scenario(scenario, model)
    except fem.SolverError as exc:
        return _fail(EXIT_SOLVER, f"forward solver failed: {exc}")
    Path(args.out).write_text(ph.frame_log_to_csv(log))
    print(f"wrote {len(log)} frames to {args.out} (scenario {scenario.name}, "
          f"seed {scenario.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        log = _read_log(args.log)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    model = _build_world(args)
    if log.n_measurements != model.protocol.n_measurements:
        return _fail(EXIT_DIMENSION,
                     f"log has {log.n_measurements} channels, protocol expects "
                     f"{model.protocol.n_measurements}")
    reconstructor = _build_reconstructor(model, args.lam)
    reference = _global_reference(log, model)
    try:
        images, labels = cl.dataset_from_log(log, reconstructor, reference)
    except ValueError as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    net = cl.init_network(seed=args.seed, dtype=np.float32)
    cfg = cl.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         learning_rate=args.learning_rate, seed=args.seed)
    t0 = time.perf_counter()
    try:
        history, _, test_idx = cl.train(net, images, labels, cfg)
    except cl.TrainingDivergedError as exc:
        return _fail(EXIT_DIVERGED, str(exc))
    wall = time.perf_counter() - t0
    Path(args.model_out).write_bytes(cl.save_weights(net))
    if args.history_out:
        Path(args.history_out).write_text(cl.history_to_csv(history))
    if history:
        final = history[-1].test_acc
    else:  # --epochs 0: untrained weights, chance-level accuracy
        tr_idx, te_idx = cl.stratified_split(labels, cfg.test_fraction, cfg.seed)
        final = (float((cl.predict(net, images[te_idx]) == labels[te_idx]).mean())
                 if len(te_idx) else float("nan"))
    print(f"final test accuracy: {final:.4f} ({len(images)} samples, "
          f"{args.epochs} epochs, {wall:.1f} s)")
    return EXIT_OK


def cmd_fit_bend(args) -> int:
    try:
        log = _read_log(args.log)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_BAD_INPUT, str(exc))
    model = _build_world(args)
    if log.n_measurements != model.protocol.n_measurements:
        return _fail(EXIT_DIMENSION,
                     f"log has {log.n_measurements} channels, protocol expects "
                     f"{model.protocol.n_measurements}")
    reference = _global_reference(log, model)
    rows, angles = [], []
    for e in log:
        bends = e.truth.get("bends", [])
        if e.label == "bend" and bends:
            rows.append(e.frame.voltages - reference)
            angles.append(bends[0]["angle"])
    if not rows:
        return _fail(EXIT_GROUPS, "log contains no bend-labeled frames")
    X = np.array(rows)
    y = np.array(angles)
    try:
        model_b = bend_mod.fit_bend_model(X, y, seed=args.seed)
    except bend_mod.DegenerateGroupingError as exc:
        return _fail(EXIT_GROUPS, str(exc))
    Path(args.model_out).write_text(bend_mod.bend_model_to_text(model_b))
    sel = X[:, list(model_b.selection.selected)]
    pred = np.clip(sel @ model_b.coefficients + model_b.intercept, *bend_mod.ANGLE_RANGE_DEG)
    mae = float(np.abs(pred - y).mean())
    print(f"selected channels: {list(model_b.selection.selected)}")
    print(f"training MAE: {mae:.3f} deg over {len(y)} samples")
    return EXIT_OK


def _run_pipeline_impl(args, write_outputs: bool):
    log = _read_log(args.log)
    model = _build_world(args)
    if log.n_measurements != model.protocol.n_measurements:
        raise DimensionMismatch(
            f"log has {log.n_measurements} channels, protocol expects "
            f"{model.protocol.n_measurements}")
    reconstructor = _build_reconstructor(model, args.lam)

    network = None
    classifier_kind = "baseline"
    if args.model and args.model != "baseline":
        blob = Path(args.model).read_bytes()
        try:
            network = cl.load_weights(blob)
        except ValueError as exc:
            raise DimensionMismatch(f"weights container: {exc}") from exc
        classifier_kind = "network"
    bend_model = None
    if args.bend_model:
        text = Path(args.bend_model).read_text()
        bend_model = bend_mod.bend_model_from_text(text)
        if max(bend_model.selection.selected) >= log.n_measurements:
            raise DimensionMismatch(
                "bend model channel indices exceed log channel count")

    pipe = pl.Pipeline(reconstructor, bend_model=bend_model, network=network,
                       config=pl.PipelineConfig(classifier=classifier_kind))
    state = pl.capture_global_reference(
        _leading_idle_frames(log) or [_clean_frame(model)])
    t0 = time.perf_counter()
    results = pl.run_log(pipe, state, (e.frame for e in log))
    wall = time.perf_counter() - t0

    rep = report_mod.build_report(
        experiment=args.log, seed=args.seed,
        config_echo=(f"elem_size={args.elem_size} electrodes={args.electrodes} "
                     f"scheme={args.scheme} lambda={args.lam} "
                     f"classifier={classifier_kind}"),
        log=log, results=results)

    if write_outputs:
        if args.out_results:
            lines = [pl.result_to_line(r) for r in results]
            Path(args.out_results).write_text("\n".join(lines) + "\n")
        if args.out_images:
            outdir = Path(args.out_images)
            outdir.mkdir(parents=True, exist_ok=True)
            for r in results:
                base = outdir / f"frame_{r.frame_id:04d}"
                base.with_name(base.name + "_pre.pgm").write_bytes(
                    rec.raster_to_pgm(r.pre_image.raster))
                base.with_name(base.name + "_touch.pgm").write_bytes(
                    rec.raster_to_pgm(r.touch_image.raster))
                base.with_name(base.name + "_bend.pgm").write_bytes(
                    rec.raster_to_pgm(r.bend_image.raster))
    if args.report:
        Path(args.report).write_text(report_mod.report_to_text(rep))
    print(f"processed {len(results)} frames in {wall:.2f} s "
          f"({1000.0 * wall / max(1, len(results)):.1f} ms/frame)")
    return EXIT_OK


def _leading_idle_frames(log: ph.FrameLog):
    out = []
    for e in log:
        if e.label != "idle":
            break
        out.append(e.frame)
    return out


def _clean_frame(model: ph.SensorModel) -> fem.MeasurementFrame:
    return fem.MeasurementFrame(voltages=model.clean_reference(), frame_id=-1)


def cmd_run_pipeline(args) -> int:
    try:
        return _run_pipeline_impl(args, write_outputs=True)
    except (FileNotFoundError, ValueError) as exc:
        if isinstance(exc, DimensionMismatch):
            return _fail(EXIT_DIMENSION, str(exc))
        return _fail(EXIT_BAD_INPUT, str(exc))
    except fem.SolverError as exc:
        return _fail(EXIT_SOLVER, str(exc))


def cmd_report(args) -> int:
    args.out_results = None
    args.out_images = None
    try:
        return _run_pipeline_impl(args, write_outputs=False)
    except (FileNotFoundError, ValueError) as exc:
        if isinstance(exc, DimensionMismatch):
            return _fail(EXIT_DIMENSION, str(exc))
        return _fail(EXIT_BAD_INPUT, str(exc))
    except fem.SolverError as exc:
        return _fail(EXIT_SOLVER, str(exc))


def cmd_mesh_dump(args) -> int:
    model = _build_world(args)
    text = fem.mesh_to_text(model.mesh, model.layout)
    Path(args.out).write_text(text)
    print(f"wrote mesh ({model.mesh.n_nodes} nodes, {model.mesh.n_elements} "
          f"elements, {model.layout.n_electrodes} electrodes) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eitskin",
        description="Simulation-backed dual-modal EIT tactile sensing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a frame log from a scenario")
    p.add_argument("--scenario", required=True,
                   help="builtin scenario name or JSON scenario file")
    p.add_argument("--out", required=True, help="output frame log CSV")
    _add_world_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the modality classifier on a log")
    p.add_argument("--log", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--history-out", default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.01)
    _add_world_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-bend", help="fit the bend regressor from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--model-out", required=True)
    _add_world_args(p)
    p.set_defaults(func=cmd_fit_bend)

    p = sub.add_parser("run-pipeline", help="replay a log through the pipeline")
    p.add_argument("--log", required=True)
    p.add_argument("--model", default="baseline",
                   help="EITNN1 weights file or 'baseline'")
    p.add_argument("--bend-model", default=None)
    p.add_argument("--out-results", default=None)
    p.add_argument("--out-images", default=None)
    p.add_argument("--report", default=None)
    _add_world_args(p)
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("report", help="regenerate the run report from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--model", default="baseline")
    p.add_argument("--bend-model", default=None)
    p.add_argument("--report", required=True)
    _add_world_args(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mesh-dump", help="write the mesh/electrode text dump")
    p.add_argument("--out", required=True)
    _add_world_args(p)
    p.set_defaults(func=cmd_mesh_dump)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
