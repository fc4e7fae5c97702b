"""Command-line pipeline: generate, augment, train, evaluate, plus debug
image dumps. Every command is reproducible from (config, seed); the active
config is persisted inside each output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import augment as augment_mod
from . import metrics as metrics_mod
from . import policy as policy_mod
from . import postplan
from .config import VARIANTS, PipelineConfig
from .losses import LossWeights
from .core import Trajectory, VehicleState, trajectory_to_ego_frame
from .dataset import ConcatDataset, Dataset, DatasetWriter
from .io_img import write_pgm, write_ppm
from .planners import GatekeptPolicyPlanner, PolicyPlanner
from .scene import CHANNEL_NAMES, render_input, render_task_masks
from .sim import (PlanningContext, SimConfig, check_rules,
                  generate_demonstrations, run_closed_loop)
from .suite import load_suite

CONFIG_ENV = "BEVPLAN_CONFIG"


def sim_config(cfg: PipelineConfig) -> SimConfig:
    return SimConfig(dt=cfg.dt, n_steps=cfg.n_steps, grid=cfg.grid(),
                     ego_geometry=cfg.geometry(),
                     history_window=cfg.history_window,
                     sample_stride=cfg.sample_stride,
                     max_speed_ref=cfg.max_speed_ref)


def synthesis_config(cfg: PipelineConfig) -> augment_mod.SynthesisConfig:
    return augment_mod.SynthesisConfig(
        max_lateral_offset=cfg.max_lateral_offset, curvature_max=cfg.curvature_max,
        feedback_T=cfg.feedback_T, rejoin_horizon=cfg.rejoin_horizon,
        iterations=cfg.feedback_iterations, seed=cfg.seed,
        frame_stride=cfg.frame_stride, emit_stride=cfg.emit_stride,
        emit_cap=cfg.emit_cap, accel_max=cfg.accel_max, steer_max=cfg.steer_max)


def policy_config(cfg: PipelineConfig, attention: str) -> policy_mod.PolicyConfig:
    return policy_mod.PolicyConfig(
        grid=cfg.grid(), n_steps=cfg.n_steps, dt=cfg.dt, wheelbase=cfg.wheelbase,
        steer_max=cfg.steer_max, accel_max=cfg.accel_max,
        backbone_channels=cfg.backbone_channels, attention_tap=cfg.attention_tap,
        attention_mode=attention, encode_dim=cfg.encode_dim,
        state_embed_dim=cfg.state_embed_dim, hidden_dim=cfg.hidden_dim)


def _save_yaml(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(payload, f, sort_keys=True)


def cmd_generate(cfg: PipelineConfig) -> int:
    worlds = load_suite(cfg.scenario_dir or None)
    scfg = sim_config(cfg)
    out = Path(cfg.workdir) / "d_o"
    writer = DatasetWriter(out, cfg.grid(), cfg.dt)
    _, expert_states, failed, logs = generate_demonstrations(
        worlds, scfg, sink=writer.add,
        on_progress=lambda name, _n: print(f"  expert ok: {name}", flush=True))
    writer.close(extra={"kind": "d_o"})
    tables = {name: np.round(tab, 9).tolist()
              for name, tab in sorted(expert_states.items())}
    with open(out / "expert_states.json", "w", encoding="utf-8") as f:
        json.dump({"dt": cfg.dt, "tables": tables}, f, sort_keys=True,
                  separators=(",", ":"))
    hist = metrics_mod.build_histogram(logs, cfg.wheelbase)
    with open(out / "comfort_histogram.json", "w", encoding="utf-8") as f:
        json.dump(metrics_mod.histogram_to_dict(hist), f, sort_keys=True,
                  separators=(",", ":"))
    cfg.save(out / "config.yaml")
    _save_yaml(out / "generate_report.yaml", {
        "samples": writer.count,
        "scenarios": len(worlds),
        "expert_failed": sorted(failed),
    })
    print(f"wrote {writer.count} samples to {out}"
          + (f"; expert failed: {failed}" if failed else ""))
    return 1 if failed else 0


def _load_expert_states(workdir) -> dict:
    with open(Path(workdir) / "d_o" / "expert_states.json", encoding="utf-8") as f:
        payload = json.load(f)
    return {k: np.asarray(v) for k, v in payload["tables"].items()}


def _frame_rng(seed: int, scenario: str, tick: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{scenario}:{tick}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def cmd_augment_random(cfg: PipelineConfig) -> int:
    d_o = Dataset(Path(cfg.workdir) / "d_o")
    expert_states = _load_expert_states(cfg.workdir)
    worlds = {w.name: w for w in load_suite(cfg.scenario_dir or None)}
    scfg = sim_config(cfg)
    syn = synthesis_config(cfg)
    out = Path(cfg.workdir) / "d_r"
    writer = DatasetWriter(out, cfg.grid(), cfg.dt)
    report = augment_mod.SynthesisReport()
    seen = set()
    n = cfg.n_steps
    for i in range(len(d_o)):
        rec = d_o.record(i)
        world = worlds[rec["scenario"]]
        table = expert_states[rec["scenario"]]
        k0 = int(round(rec["timestamp"] / cfg.dt))
        if k0 + n + n + 1 >= len(table):
            continue
        report.attempted += 1
        window = Trajectory(dt=cfg.dt, states=tuple(
            VehicleState.from_array(row) for row in table[k0:k0 + n + 1]))
        rng = _frame_rng(cfg.seed, rec["scenario"], k0)
        traj = None
        for _try in range(4):  # fresh draws after curvature rejections
            traj, m, offset = augment_mod.random_perturb_detailed(
                window, syn, rng, cfg.wheelbase)
            if traj is not None:
                break
        if traj is None:
            report.skipped_solver += 1
            continue
        dev = float(np.max(np.abs(traj.states_array() - window.states_array())))
        if dev < 1e-6:
            report.skipped_duplicate += 1  # degenerate (e.g. zero offset)
            continue
        t_m = (k0 + m) * cfg.dt
        key = (rec["scenario"], round(t_m, 6), "random")
        if key in seen:
            report.skipped_duplicate += 1
            continue
        # label: the perturbed suffix, extended along the expert path
        ext = [VehicleState.from_array(row)
               for row in table[k0 + n + 1:k0 + n + 1 + m]]
        label_states = list(traj.states[m:]) + ext
        label = Trajectory(dt=cfg.dt, states=tuple(label_states))
        from .kinematics import KinematicsError, controls_from_states
        try:
            controls = controls_from_states(label, cfg.wheelbase)
        except KinematicsError:
            report.skipped_solver += 1
            continue
        label = Trajectory(dt=cfg.dt, states=label.states, controls=controls)
        pose = traj.states[m]
        history = [(j * cfg.dt, VehicleState.from_array(row))
                   for j, row in enumerate(table[:k0 + 1])]
        history += [((k0 + 1 + j) * cfg.dt, s)
                    for j, s in enumerate(traj.states[1:m + 1])]
        stack = render_input(world, t_m, pose, cfg.grid(),
                             history_window=cfg.history_window,
                             horizon=n * cfg.dt, dt=cfg.dt, ego_history=history,
                             ego_geometry=cfg.geometry(),
                             max_speed_ref=cfg.max_speed_ref)
        masks = render_task_masks(world, t_m, cfg.grid(), pose,
                                  horizon=n * cfg.dt, dt=cfg.dt)
        seen.add(key)
        writer.add(augment_mod.Sample(
            scenario=rec["scenario"], timestamp=t_m, provenance="random",
            channels=stack, masks=masks, v0=pose.speed,
            truth=trajectory_to_ego_frame(label, pose), ego_world=pose))
        report.emitted += 1
    writer.close(extra={"kind": "d_r"})
    cfg.save(out / "config.yaml")
    _save_yaml(out / "synthesis_report.yaml", {
        "attempted": report.attempted, "emitted": report.emitted,
        "skipped_solver": report.skipped_solver,
        "skipped_duplicate": report.skipped_duplicate,
        "skip_rate": report.skip_rate,
    })
    print(f"wrote {report.emitted} samples to {out} "
          f"(skip rate {report.skip_rate:.3f})")
    return 0


def cmd_augment_feedback(cfg: PipelineConfig, params_path: str) -> int:
    if cfg.feedback_iterations != 1:
        raise SystemExit("feedback iterations > 1 require retraining between "
                         "passes; run train and augment alternately")
    d_o = Dataset(Path(cfg.workdir) / "d_o")
    expert_states = _load_expert_states(cfg.workdir)
    worlds = {w.name: w for w in load_suite(cfg.scenario_dir or None)}
    params = policy_mod.load_params(params_path)
    syn = synthesis_config(cfg)
    scfg = sim_config(cfg)
    out = Path(cfg.workdir) / "d_f"
    writer = DatasetWriter(out, cfg.grid(), cfg.dt)
    count = 0

    samples, report = augment_mod.feedback_synthesize(
        policy_mod.policy_fn(params), d_o, worlds, expert_states, syn, scfg)
    for s in samples:
        writer.add(s)
        count += 1
    writer.close(extra={"kind": "d_f"})
    cfg.save(out / "config.yaml")
    _save_yaml(out / "synthesis_report.yaml", {
        "attempted": report.attempted, "emitted": count,
        "skipped_solver": report.skipped_solver,
        "skipped_duplicate": report.skipped_duplicate,
        "skip_rate": report.skip_rate,
    })
    print(f"wrote {count} samples to {out} (skip rate {report.skip_rate:.3f})")
    return 0


def cmd_train(cfg: PipelineConfig, verbose: bool = False) -> int:
    spec = cfg.variant_spec()
    if spec.get("params_from"):
        raise SystemExit(f"variant {cfg.variant} reuses {spec['params_from']} "
                         "parameters; train that variant instead")
    parts = [Dataset(Path(cfg.workdir) / name) for name in spec["datasets"]]
    dataset = ConcatDataset(parts)
    pcfg = policy_config(cfg, spec["attention"])
    tcfg = policy_mod.TrainConfig(
        learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
        epochs=cfg.epochs, seed=cfg.seed,
        loss_weights=LossWeights(
            imitation_weights=cfg.imitation_weights, task_weight=cfg.task_weight,
            imitation_dropout_p=cfg.imitation_dropout_p),
        use_task_losses=spec["task_losses"], truncated_raster=spec["truncated"],
        raster_alpha=cfg.raster_alpha, ego_geometry=cfg.geometry())

    def on_epoch(row):
        if verbose:
            print(f"  epoch {row['epoch']}: imit {row['train_imit']:.4f} "
                  f"task {row['train_task']:.4f} val {row['val_total']:.4f}",
                  flush=True)

    result = policy_mod.train(dataset, pcfg, tcfg, on_epoch=on_epoch)
    out = Path(cfg.workdir) / "models" / cfg.variant
    out.mkdir(parents=True, exist_ok=True)
    policy_mod.save_params(result.params, out / "params.bin")
    curve = []
    for row in result.curve:
        kept = dict(row)
        if not spec["task_losses"]:
            kept.pop("train_task", None)
        curve.append(kept)
    _save_yaml(out / "loss_curve.yaml", {
        "variant": cfg.variant, "best_epoch": result.best_epoch,
        "train_samples": len(dataset), "curve": curve,
    })
    cfg.save(out / "config.yaml")
    print(f"trained {cfg.variant} on {len(dataset)} samples; "
          f"best epoch {result.best_epoch}; params at {out / 'params.bin'}")
    return 0


def _planner_for(cfg: PipelineConfig, world, params):
    if cfg.variant_spec()["postplan"]:
        return GatekeptPolicyPlanner(params, world, postplan.PostplanConfig())
    return PolicyPlanner(params)


def _dump_frame_images(out_dir: Path, ctx, params, cfg: PipelineConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = ctx.channels()
    for name in CHANNEL_NAMES:
        write_pgm(out_dir / f"chan_{name}.pgm", stack.channels[name])
    road_rgb = np.stack([stack.channels["road_surface"],
                         stack.channels["routing"],
                         stack.channels["traffic_lights"]], axis=-1)
    write_ppm(out_dir / "overview.ppm", road_rgb)
    output = policy_mod.forward(stack, ctx.ego.speed, params)
    write_pgm(out_dir / "attention.pgm", output.attention_map)
    from . import raster_diff
    field = raster_diff.rasterize(output.states.states[-1], cfg.geometry(),
                                  cfg.grid(), VehicleState(0, 0, 0, 0),
                                  alpha=cfg.raster_alpha)
    write_pgm(out_dir / "raster_final_state.pgm", field.values)


def cmd_evaluate(cfg: PipelineConfig, dump_images: bool = False) -> int:
    spec = cfg.variant_spec()
    source = spec.get("params_from", cfg.variant)
    params = policy_mod.load_params(
        Path(cfg.workdir) / "models" / source / "params.bin")
    worlds = load_suite(cfg.scenario_dir or None)
    scfg = sim_config(cfg)
    hist_path = Path(cfg.workdir) / "d_o" / "comfort_histogram.json"
    hist = None
    if hist_path.exists():
        with open(hist_path, encoding="utf-8") as f:
            hist = metrics_mod.histogram_from_dict(json.load(f))

    verdicts = []
    rows = []
    comfort_vals = []
    jerk_vals = []
    out = Path(cfg.workdir) / "eval" / cfg.variant
    for world in worlds:
        planner = _planner_for(cfg, world, params)
        log = run_closed_loop(planner, world, scfg)
        verdict = check_rules(log, world, scfg)
        verdicts.append(verdict)
        comfort = (metrics_mod.comfort_score(log, hist, cfg.wheelbase)
                   if (hist and log.records) else None)
        if comfort is not None:
            comfort_vals.append(comfort)
        if log.records:
            jerks = np.abs(metrics_mod.frame_values(log, cfg.wheelbase)[:, 1])
            jerk_vals.append(float(jerks.mean()))
        rows.append({
            "scenario": world.name, "category": world.category,
            "status": log.terminal_status, "passed": bool(verdict.passed),
            "failure_reasons": sorted(verdict.failure_reasons),
            "ticks": len(log.records),
            "comfort": comfort,
            "fallback_ticks": sum(1 for r in log.records if r.fallback),
        })
        if dump_images and log.records:
            ctx = PlanningContext(world, log.records[0].time,
                                  log.records[0].ego, scfg, [])
            _dump_frame_images(out / "images" / world.name, ctx, params, cfg)
        print(f"  {world.name}: {'PASS' if verdict.passed else 'FAIL'} "
              f"({log.terminal_status})", flush=True)
    rep = metrics_mod.pass_rate(verdicts)
    payload = {
        "variant": cfg.variant,
        "scenarios": rows,
        "totals": {
            "count": rep.total, "passed": rep.passed, "pass_rate": rep.rate,
            "comfort_mean": (float(np.mean(comfort_vals)) if comfort_vals else None),
            "jerk_mean_abs": (float(np.mean(jerk_vals)) if jerk_vals else None),
            "by_category": {k: {"passed": v[0], "total": v[1]}
                            for k, v in rep.by_category.items()},
            "failures": [{"category": c, "reason": r, "count": n}
                         for (c, r), n in rep.failures.items()],
        },
    }
    _save_yaml(out / "report.yaml", payload)
    cfg.save(out / "config.yaml")
    print(f"{cfg.variant}: pass rate {rep.rate * 100:.2f}% "
          f"({rep.passed}/{rep.total}); report at {out / 'report.yaml'}")
    return 0 if rep.rate >= cfg.pass_rate_floor else 2


def cmd_rasterize_debug(cfg: PipelineConfig, x: float, y: float, heading: float,
                        out_path: str) -> int:
    from . import raster_diff
    field = raster_diff.rasterize(VehicleState(x, y, heading, 0.0),
                                  cfg.geometry(), cfg.grid(),
                                  VehicleState(0, 0, 0, 0),
                                  alpha=cfg.raster_alpha)
    write_pgm(out_path, field.values)
    print(f"max={field.values.max():.6f} argmax kernels="
          f"{np.bincount(field.argmax_kernel.ravel()).tolist()} -> {out_path}")
    return 0


def cmd_plan_one(cfg: PipelineConfig, scenario: str, tick: int) -> int:
    worlds = {w.name: w for w in load_suite(cfg.scenario_dir or None)}
    world = worlds[scenario]
    spec = cfg.variant_spec()
    source = spec.get("params_from", cfg.variant)
    params = policy_mod.load_params(
        Path(cfg.workdir) / "models" / source / "params.bin")
    scfg = sim_config(cfg)
    from .sim import scripted_expert
    expert = scripted_expert(world, scfg)
    log = run_closed_loop(expert, world, scfg)
    if tick >= len(log.records):
        raise SystemExit(f"tick {tick} beyond expert log ({len(log.records)})")
    rec = log.records[tick]
    history = [(r.time, r.ego) for r in log.records[:tick + 1]]
    ctx = PlanningContext(world, rec.time, rec.ego, scfg, history)
    learned = PolicyPlanner(params).plan(ctx)
    ref = postplan.ReferenceLine(world.route_reference())
    traj, diag = postplan.gatekeep(learned, world, rec.ego, ref, now=rec.time,
                                   ego_geometry=cfg.geometry())
    print(f"scenario {scenario} tick {tick} t={rec.time:.1f}s")
    print(f"  learned end: ({learned.states[-1].x:.2f}, {learned.states[-1].y:.2f}) "
          f"v={learned.states[-1].speed:.2f}")
    print(f"  gatekept end: ({traj.states[-1].x:.2f}, {traj.states[-1].y:.2f}) "
          f"v={traj.states[-1].speed:.2f}")
    print(f"  fallback={diag.fallback} reason={diag.reason!r} "
          f"qp_iters={diag.qp_iterations} kkt={diag.kkt_residual:.2e} "
          f"blocking={diag.blocking_station}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevplan",
                                description="BEV imitation planner pipeline")
    p.add_argument("--config", default=os.environ.get(CONFIG_ENV, ""),
                   help=f"config YAML (or ${CONFIG_ENV})")
    p.add_argument("--workdir", default=None)
    p.add_argument("--profile", default=None, choices=["paper", "fast"])
    p.add_argument("--variant", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--scenario-dir", default=None)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="run the expert, write D_o")
    ap = sub.add_parser("augment", help="synthesize D_r or D_f")
    ap.add_argument("mode", choices=["random", "feedback"])
    ap.add_argument("--params", default=None,
                    help="policy file for feedback mode (default: models/M1)")
    tp = sub.add_parser("train", help="train the configured variant")
    tp.add_argument("--verbose", action="store_true")
    ep = sub.add_parser("evaluate", help="closed-loop evaluation")
    ep.add_argument("--dump-images", action="store_true")
    rp = sub.add_parser("rasterize-debug", help="dump one rasterized field")
    rp.add_argument("--x", type=float, default=0.0)
    rp.add_argument("--y", type=float, default=0.0)
    rp.add_argument("--heading", type=float, default=0.0)
    rp.add_argument("--out", default="raster.pgm")
    pp = sub.add_parser("plan-one", help="single-frame gatekeep diagnostics")
    pp.add_argument("scenario")
    pp.add_argument("--tick", type=int, default=0)
    return p


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for key in ("workdir", "profile", "variant", "seed", "epochs"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if args.scenario_dir is not None:
        cfg.scenario_dir = args.scenario_dir
    return PipelineConfig.from_dict(cfg.to_dict())  # re-validate


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args)
    if args.command == "generate":
        return cmd_generate(cfg)
    if args.command == "augment":
        if args.mode == "random":
            return cmd_augment_random(cfg)
        params = args.params or str(Path(cfg.workdir) / "models" / "M1" / "params.bin")
        return cmd_augment_feedback(cfg, params)
    if args.command == "train":
        return cmd_train(cfg, verbose=args.verbose)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, dump_images=args.dump_images)
    if args.command == "rasterize-debug":
        return cmd_rasterize_debug(cfg, args.x, args.y, args.heading, args.out)
    if args.command == "plan-one":
        return cmd_plan_one(cfg, args.scenario, args.tick)
    raise SystemExit(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
