"""``icoreg`` command line: synth, extract, match, register, benchmark, icp, train."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..geom import RigidTransform, icp, voxel_downsample
from ..groupnet.weights_io import save_weights
from ..icosa import get_group
from ..ransac import Correspondences, RansacConfig, run_ransac
from .config import BenchmarkConfig, ConfigError, load_config
from .ply import read_ply, write_ply

log = logging.getLogger("icoreg")


def _transform_to_json(T: RigidTransform) -> dict:
    return {"rotation": T.rotation.tolist(), "translation": T.translation.tolist()}


def _transform_from_json(path: str) -> RigidTransform:
    d = json.loads(Path(path).read_text())
    return RigidTransform(np.array(d["rotation"], float), np.array(d["translation"], float))


def _cfg(args) -> BenchmarkConfig:
    overrides = {
        "seed": args.seed, "threads": args.threads, "voxel": args.voxel, "iterations": args.iterations,
        "tau": args.tau, "tau_c": args.tau_c, "tau_r": args.tau_r,
        "modes": args.mode,
    }  # fmt: skip
    return load_config(args.config, **overrides)


def _weights(cfg: BenchmarkConfig, path: str | None):
    from .assets import default_weights

    return default_weights(path or cfg.weights)


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_pair

    cfg = _cfg(args)
    sc = SynthConfig(
        base_shape=args.shape, point_count=args.points, overlap_fraction=args.overlap, noise_sigma=args.noise,
        dropout_fraction=args.dropout, outlier_fraction=args.outliers, max_angle=np.radians(args.max_angle),
        max_translation=args.max_translation, extent=args.extent, seed=cfg.seed,
    )  # fmt: skip
    P, Q, T = synth_pair(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "P.ply", P, binary=not args.ascii)
    write_ply(out / "Q.ply", Q, binary=not args.ascii)
    (out / "gt.json").write_text(json.dumps(_transform_to_json(T), indent=1))
    print(f"wrote {len(P)} + {len(Q)} points to {out}")
    return 0


def cmd_extract(args) -> int:
    from .benchmark import compute_features, select_keypoints

    cfg = _cfg(args)
    X = voxel_downsample(read_ply(args.cloud), cfg.voxel)
    rng = np.random.default_rng(cfg.seed)
    kp = select_keypoints(X, args.keypoints or cfg.keypoints, cfg.radius, cfg.min_eig, rng)
    f = compute_features(X, kp, cfg.radius, _weights(cfg, args.weights), get_group())
    np.savez(args.out, keypoints=f.keypoints, points=f.points, f0=f.f0, fl=f.fl, desc=f.desc, radius=cfg.radius,
             neighbors=np.array([p.neighbors for p in f.patches], dtype=object))  # fmt: skip
    print(f"{len(X)} points, {len(f.keypoints)} keypoints -> {args.out}")
    return 0


def cmd_match(args) -> int:
    from ..matchrot import (
        GEOMETRIC_STARTS,
        candidate_rotations,
        coarse_rotation,
        mutual_nn_pairs,
        refine_rotation,
        refine_rotation_geometric,
    )

    cfg = _cfg(args)
    a = np.load(args.p, allow_pickle=True)
    b = np.load(args.q, allow_pickle=True)
    group = get_group()
    i, j, d = mutual_nn_pairs(a["desc"], b["desc"])
    coarse = np.atleast_1d(coarse_rotation(a["fl"][i], b["fl"][j], group))
    refined = np.full((len(i), 3, 3), np.nan)
    if args.refine == "regressor":
        refined = refine_rotation(a["f0"][i], a["fl"][i], b["f0"][j], b["fl"][j], coarse,
                                  _weights(cfg, args.weights), group)  # fmt: skip
    elif args.refine == "geometric" and len(i):
        starts = candidate_rotations(a["fl"][i], b["fl"][j], GEOMETRIC_STARTS, group).reshape(len(i), -1)
        refined = np.stack([refine_rotation_geometric(a["neighbors"][x], b["neighbors"][y], group.rotations[c])
                            for x, y, c in zip(i, j, starts)]).reshape(-1, 3, 3)  # fmt: skip
    np.savez(args.out, i=i, j=j, dist=d, p=a["points"][i], q=b["points"][j], coarse=coarse, refined=refined)
    print(f"{len(i)} mutual matches -> {args.out}")
    return 0


def cmd_register(args) -> int:
    cfg = _cfg(args)
    m = np.load(args.matches)
    refined = m["refined"] if not np.isnan(m["refined"]).all() else None
    C = Correspondences(m["p"], m["q"], m["coarse"], refined)
    res = run_ransac(C, RansacConfig(mode=cfg.modes[0], max_iterations=cfg.iterations, inlier_threshold=cfg.tau,
                                     seed=cfg.seed, refit=cfg.refit, distance_check=cfg.distance_check))  # fmt: skip
    out = dict(_transform_to_json(res.transform), inliers=res.inlier_count, hypotheses=res.hypotheses_evaluated,
               mode=res.mode, warnings=res.warnings)  # fmt: skip
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_icp(args) -> int:
    src, dst = read_ply(args.src), read_ply(args.dst)
    init = _transform_from_json(args.init) if args.init else None
    r = icp(src, dst, init, max_iter=args.max_iter, max_distance=args.max_distance)
    out = dict(_transform_to_json(r.transform), rmse=r.rmse, iterations=r.iterations)
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_benchmark(args) -> int:
    from .benchmark import run_benchmark, success_curve_csv, summary_table

    cfg = _cfg(args)
    if args.pairs:
        cfg = cfg.replace(pairs=args.pairs)
    if args.trials:
        cfg = cfg.replace(trials=args.trials)
    weights = _weights(cfg, args.weights)
    report = run_benchmark(cfg, weights, progress=lambda r: log.info("pair %d done%s", r.pair,
                                                                    f" ({r.error})" if r.error else ""))  # fmt: skip
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "summary.txt").write_text(summary_table(report))
    (out / "success_curve.csv").write_text(success_curve_csv(report))
    print(summary_table(report), end="")
    return 0


def cmd_train(args) -> int:
    from ..groupnet.network import init_weights
    from ..groupnet.train import TrainConfig, train_embedder, train_regressor
    from .patches import sample_patch_pairs, training_pairs

    cfg = _cfg(args)
    pairs = training_pairs(sample_patch_pairs(args.pairs, seed=cfg.seed + 1, radius=cfg.radius, voxel=cfg.voxel,
                                              noise_sigma=cfg.noise_sigma))  # fmt: skip
    W = init_weights(cfg.seed)
    W, hist = train_embedder(pairs, W, TrainConfig(epochs=args.epochs, lr=args.lr, decay_epochs=args.decay_epochs,
                                                   seed=cfg.seed))  # fmt: skip
    print("embedder loss per epoch:", " ".join(f"{v:.4f}" for v in hist.epoch_loss))
    if args.regressor_epochs:
        W, rh = train_regressor(pairs, W, TrainConfig(epochs=args.regressor_epochs, lr=1e-3, decay_epochs=3.0,
                                                      seed=cfg.seed))  # fmt: skip
        print("regressor loss per epoch:", " ".join(f"{v:.4f}" for v in rh.epoch_loss))
    save_weights(W, args.out)
    print(f"weights -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icoreg", description="Icosahedral-group point cloud registration toolkit.")
    g = p.add_argument_group("global options (override the config file)")
    g.add_argument("--config", help="key = value configuration file")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="worker processes (env ICOREG_THREADS overrides)")
    g.add_argument("--voxel", type=float, help="voxel size for downsampling (m)")
    g.add_argument("--mode", help="RANSAC mode(s), comma separated: vanilla, crv, ose")
    g.add_argument("--iterations", type=int, help="hypothesis budget")
    g.add_argument("--tau", type=float, help="RANSAC inlier threshold (m)")
    g.add_argument("--tau-c", dest="tau_c", type=float, help="correct-correspondence threshold (m)")
    g.add_argument("--tau-r", dest="tau_r", type=float, help="registration-recall threshold (m)")
    g.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic pair P.ply, Q.ply and gt.json")
    s.add_argument("--out", required=True)
    s.add_argument("--shape", default="terrain")
    s.add_argument("--points", type=int, default=30000)
    s.add_argument("--extent", type=float, default=2.0)
    s.add_argument("--overlap", type=float, default=0.7)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--max-angle", type=float, default=180.0, help="degrees")
    s.add_argument("--max-translation", type=float, default=1.0)
    s.add_argument("--ascii", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="keypoints, group features and descriptors of one cloud")
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--keypoints", type=int)
    s.add_argument("--weights")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("match", help="mutual-NN matching with per-correspondence rotations")
    s.add_argument("--p", required=True, help="features of the source cloud (.npz)")
    s.add_argument("--q", required=True, help="features of the target cloud (.npz)")
    s.add_argument("--out", required=True)
    s.add_argument("--refine", choices=("none", "geometric", "regressor"), default="geometric")
    s.add_argument("--weights")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("register", help="estimate the transform from a match file")
    s.add_argument("--matches", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("benchmark", help="run the synthetic benchmark suite")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--pairs", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--weights")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("icp", help="point-to-point ICP of src onto dst")
    s.add_argument("--src", required=True)
    s.add_argument("--dst", required=True)
    s.add_argument("--init", help="initial transform JSON")
    s.add_argument("--max-iter", type=int, default=50)
    s.add_argument("--max-distance", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_icp)

    s = sub.add_parser("train", help="train embedder (and regressor) on synthetic patch pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int, default=1000)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--decay-epochs", type=float, default=1.8)
    s.add_argument("--regressor-epochs", type=int, default=0)
    s.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as e:
        print(f"icoreg: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
