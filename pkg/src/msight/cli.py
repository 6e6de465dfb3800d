"""Command line entry point: ``msight <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .calib import CAMERA_IDS


def _cams(text: str) -> tuple:
    cams = tuple(c.strip().upper() for c in text.split(",") if c.strip())
    bad = [c for c in cams if c not in CAMERA_IDS]
    if bad or not cams:
        raise argparse.ArgumentTypeError(f"cameras must be a comma list of {','.join(CAMERA_IDS)}")
    return cams


def _origin(text: str):
    from .geo import WorldPoint
    try:
        lat, lon = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("origin must be lat,lon") from None
    return WorldPoint(lat, lon)


def _scenario(path, seed):
    """(tracks, noise, config) from a scenario JSON, or the eight-trip default."""
    from .detect import DetectorNoise
    from .sim.pipeline import DEFAULT_NOISE
    from .sim.scenario import ScenarioConfig, generate_scenario, paper_trips
    noise = DEFAULT_NOISE
    if path:
        with open(path) as f:
            d = json.load(f)
        if "noise" in d:
            noise = DetectorNoise(**d.pop("noise"))
        cfg = ScenarioConfig.from_json(d)
    else:
        cfg = ScenarioConfig(trips=paper_trips())
    if seed is not None:
        cfg = ScenarioConfig.from_json({**cfg.to_json(), "seed": seed})
    return generate_scenario(cfg), noise, cfg


def _summary(rep) -> str:
    o = rep.overall
    return (f"{' + '.join(rep.camera_setup)}: FN {o['fn_rate']:.2f}% FP {o['fp_rate']:.2f}% "
            f"lat {o['lat_err']:.2f} m lon {o['lon_err']:.2f} m IDSW {o['id_switch']:.2f} "
            f"longest {o['longest_track']:.1f}% MOTA {o['mota']:.3f}")


def cmd_run(a) -> int:
    from .predictor.model import load_model_file
    from .sim.pipeline import run_pipeline, write_report, write_trajectory_csv
    from .sim.scenario import write_truth
    tracks, noise, cfg = _scenario(a.scenario, a.seed)
    predictor = load_model_file(a.model) if a.model else ("cv" if a.predictor == "cv" else None)
    art = {}
    rep = run_pipeline(tracks, a.cams, noise, seed=cfg.seed, predictor=predictor, artifacts=art)
    write_report(rep, a.out)
    if a.trajectories:
        write_trajectory_csv(art["rows"], a.trajectories)
    if a.truth_out:
        with open(a.truth_out, "w") as f:
            write_truth(tracks, f)
    if a.tracks_out:
        with open(a.tracks_out, "w") as f:
            for t in art["tracks"]:
                f.write(json.dumps(t.to_json()) + "\n")
    print(_summary(rep))
    return 0


def cmd_eval(a) -> int:
    from .sim.pipeline import evaluate_logs, read_ndjson, write_report
    with open(a.truth) as f:
        truth = read_ndjson(f)
    with open(a.tracks) as f:
        tracks = read_ndjson(f)
    rep = evaluate_logs(truth, tracks, a.eval_radius)
    if a.out:
        write_report(rep, a.out)
    else:
        json.dump(rep.to_json(), sys.stdout, indent=2)
        print()
    print(_summary(rep), file=sys.stderr)
    return 0


def cmd_latency(a) -> int:
    from .v2x.latency import run_latency
    rep = run_latency(range(a.frames), transport=a.transport, inject_delay_ms=a.inject_delay_ms,
                      interval_ms=a.interval_ms)
    print(json.dumps(rep.to_json(), indent=2))
    return 0 if rep.records else 1


def cmd_calib(a) -> int:
    from .calib import CalibrationError, calibrate, read_landmarks, write_landmarks
    from .sim.scene import DEFAULT_ORIGIN, default_intrinsics, default_rig, make_landmarks
    origin = a.origin or DEFAULT_ORIGIN
    if a.synthesize:
        rig = default_rig()
        pairs = [p for i, c in enumerate(CAMERA_IDS)
                 for p in make_landmarks(rig[c], a.points, a.noise_px, a.seed + i, origin)]
        with open(a.landmarks, "w", newline="") as f:
            write_landmarks(pairs, f)
        print(f"wrote {len(pairs)} landmarks to {a.landmarks}")
        return 0
    with open(a.landmarks, newline="") as f:
        pairs = read_landmarks(f)
    status = 0
    for cam in CAMERA_IDS:
        mine = [p for p in pairs if p.camera_id == cam]
        if not mine:
            continue
        try:
            c = calibrate(mine, default_intrinsics(cam), origin, gate_m=a.gate)
        except CalibrationError as e:
            print(f"{cam}: FAILED {e}")
            status = 1
            continue
        print(f"{cam}: {len(mine)} landmarks, mean calibration error {c.mean_error_m:.3f} m")
        if a.out_dir:
            os.makedirs(a.out_dir, exist_ok=True)
            with open(os.path.join(a.out_dir, f"{cam}.json"), "w") as f:
                f.write(c.to_json())
    return status


def cmd_forward(a) -> int:
    from .sim.pipeline import PerceptionRun
    from .sim.scenario import truth_frames
    from .v2x.forward import RsuForwarder, UdpTransport, parse_endpoint
    tracks, noise, cfg = _scenario(a.scenario, a.seed)
    frames = truth_frames(tracks)[: a.frames or None]
    run = PerceptionRun(a.cams, noise, cfg.seed, predictor="cv")
    tx = UdpTransport(*parse_endpoint(a.endpoint))
    fwd = RsuForwarder(tx, a.period_ms, a.stale_ms).start()
    try:
        for tf in frames:
            t0 = time.monotonic()
            fwd.publish(run.step(tf).message)
            time.sleep(max(0.0, a.frame_ms / 1000.0 - (time.monotonic() - t0)))
    except KeyboardInterrupt:
        pass
    finally:
        fwd.stop()
        tx.close()
    print(json.dumps(vars(fwd.stats)))
    return 0


def cmd_serve(a) -> int:
    from .cloud import Dispatcher, Gateway, StorageSink
    token = a.token or os.environ.get("MSIGHT_TOKEN")
    if not token:
        print("a token is required (--token or MSIGHT_TOKEN)", file=sys.stderr)
        return 2
    sink = StorageSink(a.root)
    gw = Gateway(Dispatcher(), sink, token, a.host, a.port).start()
    print(f"listening on {gw.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        gw.stop()
        sink.close()
    return 0


def cmd_train(a) -> int:
    from .predictor.model import save_model_file
    from .predictor.train import FAST_CONFIG, constant_position, fde_summary, make_cv_dataset, predict_means, train
    data = make_cv_dataset(a.scenes, a.seed)
    test = make_cv_dataset(max(1, a.scenes // 8), a.seed + 1)
    res = train(data, FAST_CONFIG, a.lr, a.steps, a.batch, a.seed, log_every=a.log_every)
    save_model_file(a.out, res.params, FAST_CONFIG)
    k = FAST_CONFIG.horizon
    model = fde_summary(predict_means(res.params, FAST_CONFIG, test), test, k)
    base = fde_summary(constant_position(test, k), test, k)
    print(f"FDE_{k * 0.4:.1f}s {model.dist:.3f} m (constant position {base.dist:.3f} m); saved {a.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msight", description="Roadside cooperative perception toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the perception stack on a synthetic scenario and score it")
    r.add_argument("--scenario", help="scenario JSON (defaults to the eight test trips)")
    r.add_argument("--seed", type=int)
    r.add_argument("--cams", type=_cams, default=CAMERA_IDS)
    r.add_argument("--model", help="trained predictor file")
    r.add_argument("--predictor", choices=["none", "cv"], default="none")
    r.add_argument("--out", required=True)
    r.add_argument("--trajectories", help="write plot-ready trajectory CSV")
    r.add_argument("--truth-out", help="write 50 Hz truth NDJSON")
    r.add_argument("--tracks-out", help="write confirmed track NDJSON")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="score logged tracks against logged truth")
    e.add_argument("--truth", required=True)
    e.add_argument("--tracks", required=True)
    e.add_argument("--eval-radius", type=float, default=40.0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    lt = sub.add_parser("latency", help="measure encode and transport latency")
    lt.add_argument("--transport", choices=["loopback", "udp"], default="loopback")
    lt.add_argument("--inject-delay-ms", type=float, default=0.0)
    lt.add_argument("--frames", type=int, default=200)
    lt.add_argument("--interval-ms", type=float, default=5.0)
    lt.set_defaults(fn=cmd_latency)

    c = sub.add_parser("calib", help="calibrate cameras from a landmark CSV")
    c.add_argument("--landmarks", required=True)
    c.add_argument("--origin", type=_origin, help="scene origin lat,lon")
    c.add_argument("--gate", type=float, default=1.0, help="reject calibrations above this mean error (m)")
    c.add_argument("--out-dir")
    c.add_argument("--synthesize", action="store_true", help="write synthetic landmarks instead of reading")
    c.add_argument("--points", type=int, default=20)
    c.add_argument("--noise-px", type=float, default=0.5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_calib)

    f = sub.add_parser("forward", help="broadcast perception frames to an OBU endpoint")
    f.add_argument("--endpoint", required=True, help="host:port")
    f.add_argument("--period-ms", type=float, default=100.0)
    f.add_argument("--stale-ms", type=float, default=1000.0)
    f.add_argument("--scenario")
    f.add_argument("--seed", type=int)
    f.add_argument("--cams", type=_cams, default=CAMERA_IDS)
    f.add_argument("--frames", type=int, default=0, help="stop after this many frames (0: all)")
    f.add_argument("--frame-ms", type=float, default=400.0, help="wall-clock pacing between frames")
    f.set_defaults(fn=cmd_forward)

    s = sub.add_parser("serve", help="run the cloud ingestion gateway")
    s.add_argument("--root", required=True, help="storage directory")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--token")
    s.set_defaults(fn=cmd_serve)

    t = sub.add_parser("train", help="train the trajectory predictor on synthetic data")
    t.add_argument("--out", required=True)
    t.add_argument("--scenes", type=int, default=4000)
    t.add_argument("--steps", type=int, default=6000)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except (OSError, ValueError) as e:
        print(f"msight {a.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
