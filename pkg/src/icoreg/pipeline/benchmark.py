"""End-to-end synthetic registration benchmark.

Per pair: synthesize -> downsample -> keypoints (random sample + planarity filter) ->
group features -> descriptors -> mutual-NN matches -> coarse / refined rotations ->
RANSAC per mode -> optional ICP -> metrics. Features are computed once per pair;
``trials`` repeats estimation with different RANSAC seeds.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .. import __version__
from ..backbone import EmptyPatchError, Patch, extract_patch
from ..evalmetrics import (
    FMR_THRESHOLD,
    PairEvaluation,
    correspondence_eval,
    fmr,
    hypothesis_correct,
    iterations_to_success,
    pose_error,
    rr,
    success_curve,
)
from ..geom import RigidTransform, icp, planarity_filter, voxel_downsample
from ..groupnet.network import NetworkWeights, embed, extract_group_feature, pool_descriptor
from ..icosa import IcosahedralGroup, get_group
from ..matchrot import (
    GEOMETRIC_STARTS,
    candidate_rotations,
    coarse_rotation,
    mutual_nn_pairs,
    refine_rotation,
    refine_rotation_geometric,
)
from ..ransac import Correspondences, InsufficientCorrespondencesError, RansacConfig, generate_hypotheses, run_ransac
from .config import BenchmarkConfig
from .synth import SynthConfig, synth_pair

log = logging.getLogger(__name__)

SCHEMA = "icoreg.benchmark-report"
SCHEMA_VERSION = 1
THREADS_ENV = "ICOREG_THREADS"


# ---------------------------------------------------------------------------
# per-cloud and per-pair stages
# ---------------------------------------------------------------------------


@dataclass
class CloudFeatures:
    """Keypoint indices into the downsampled cloud, their positions, patches and features."""

    keypoints: NDArray
    points: NDArray
    patches: list[Patch]
    f0: NDArray  # (k, 60, n0)
    fl: NDArray  # (k, 60, n_l)
    desc: NDArray  # (k, n_l)


def select_keypoints(X: NDArray, n: int, radius: float, min_eig: float, rng) -> NDArray:
    """Uniform random sample of ``n`` indices (sorted), then the planarity filter."""
    idx = np.sort(rng.choice(len(X), size=min(n, len(X)), replace=False))
    return planarity_filter(X, idx, radius, min_eig)


def compute_features(
    X: NDArray, keypoints: NDArray, radius: float, weights: NetworkWeights, group: IcosahedralGroup
) -> CloudFeatures:
    """Group features, embeddings and descriptors for each keypoint; keypoints with empty patches are dropped."""
    tree = cKDTree(X)
    kept, patches = [], []
    for k in keypoints:
        try:
            patches.append(extract_patch(X, int(k), radius, tree))
            kept.append(int(k))
        except EmptyPatchError:
            continue
    kept = np.asarray(kept, dtype=np.int64)
    if not patches:
        n0, nl = weights.input_dim, weights.output_dim
        return CloudFeatures(kept, np.zeros((0, 3)), [], np.zeros((0, 60, n0)), np.zeros((0, 60, nl)), np.zeros((0, nl)))
    f0 = np.stack([extract_group_feature(p, group) for p in patches])
    fl = embed(f0, weights, group)
    return CloudFeatures(kept, X[kept], patches, f0, fl, pool_descriptor(fl))


def estimate_correspondences(
    fp: CloudFeatures, fq: CloudFeatures, weights: NetworkWeights, refine: str, group: IcosahedralGroup
) -> tuple[Correspondences, NDArray, NDArray]:
    """Mutual-NN matches with coarse and (optionally) refined rotations; also returns matched keypoint rows."""
    i, j, _ = mutual_nn_pairs(fp.desc, fq.desc)
    coarse = coarse_rotation(fp.fl[i], fq.fl[j], group) if len(i) else np.zeros(0, np.int64)
    coarse = np.atleast_1d(np.asarray(coarse, dtype=np.int64))
    refined = None
    if refine == "regressor" and len(i):
        refined = refine_rotation(fp.f0[i], fp.fl[i], fq.f0[j], fq.fl[j], coarse, weights, group)
    elif refine == "geometric" and len(i):
        starts = candidate_rotations(fp.fl[i], fq.fl[j], GEOMETRIC_STARTS, group).reshape(len(i), -1)
        refined = np.stack(
            [
                refine_rotation_geometric(fp.patches[a].neighbors, fq.patches[b].neighbors, group.rotations[c])
                for a, b, c in zip(i, j, starts)
            ]
        )
    return Correspondences(fp.points[i], fq.points[j], coarse, refined), i, j


def resolve_refine(cfg: BenchmarkConfig, weights: NetworkWeights) -> str:
    if cfg.refine != "auto":
        return cfg.refine
    trained = weights.regressor is not None and bool(weights.meta.get("regressor_epochs"))
    return "regressor" if trained else "geometric"


def pair_seeds(seed: int, index: int) -> dict[str, int]:
    """Independent per-pair seeds for the scene, keypoint sampling and RANSAC."""
    s = np.random.SeedSequence([seed, index]).generate_state(3)
    return {"scene": int(s[0]), "keypoints": int(s[1]), "ransac": int(s[2])}


# ---------------------------------------------------------------------------
# records and report
# ---------------------------------------------------------------------------


@dataclass
class ModeOutcome:
    """One mode, one trial: the :class:`PairEvaluation` fields plus estimation bookkeeping."""

    evaluation: PairEvaluation
    hypotheses: int
    inliers: int
    t2: float
    fallback: bool = False
    icp_rmse: float | None = None

    def to_dict(self) -> dict:
        d = self.evaluation.to_dict()
        d.update(hypotheses=self.hypotheses, inliers=self.inliers, t2=self.t2, fallback=self.fallback,
                 icp_rmse=self.icp_rmse)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModeOutcome:
        ev = PairEvaluation(d["inlier_ratio"], d["registration_correct"], d["rotation_error"],
                            d["translation_error"], d["iterations_to_success"])
        return cls(ev, d["hypotheses"], d["inliers"], d["t2"], d["fallback"], d["icp_rmse"])


@dataclass
class PairRecord:
    pair: int
    seeds: dict
    n_points: tuple[int, int] = (0, 0)
    n_keypoints: tuple[int, int] = (0, 0)
    n_matches: int = 0
    inlier_ratio: float = 0.0
    t1: tuple[float, float] = (0.0, 0.0)  # feature extraction time per cloud
    t_match: float = 0.0  # matching + rotation estimation
    refine: str = ""
    trials: list[dict[str, ModeOutcome]] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self) -> dict:
        return {
            "pair": self.pair,
            "seeds": dict(self.seeds),
            "n_points": list(self.n_points),
            "n_keypoints": list(self.n_keypoints),
            "n_matches": self.n_matches,
            "inlier_ratio": self.inlier_ratio,
            "t1": list(self.t1),
            "t_match": self.t_match,
            "refine": self.refine,
            "trials": [{m: o.to_dict() for m, o in t.items()} for t in self.trials],
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PairRecord:
        return cls(
            d["pair"], dict(d["seeds"]), tuple(d["n_points"]), tuple(d["n_keypoints"]), d["n_matches"],
            d["inlier_ratio"], tuple(d["t1"]), d["t_match"], d["refine"],
            [{m: ModeOutcome.from_dict(o) for m, o in t.items()} for t in d["trials"]], d["error"],
        )  # fmt: skip


@dataclass
class BenchmarkReport:
    config: dict
    records: list[PairRecord]
    aggregate: dict
    success_curve: dict
    timing: dict
    tool_version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "config": self.config,
            "aggregate": self.aggregate,
            "success_curve": self.success_curve,
            "timing": self.timing,
            "failures": [{"pair": r.pair, "error": r.error} for r in self.records if r.failed],
            "records": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkReport:
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a benchmark report (schema {d.get('schema')!r})")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')}")
        return cls(
            d["config"], [PairRecord.from_dict(r) for r in d["records"]], d["aggregate"],
            d["success_curve"], d["timing"], d["tool_version"], d["schema_version"],
        )  # fmt: skip

    @classmethod
    def from_json(cls, text: str) -> BenchmarkReport:
        return cls.from_dict(json.loads(text))


def _mean_std(x) -> dict:
    x = np.asarray(list(x), dtype=np.float64)
    if len(x) == 0:
        return {"mean": None, "std": None}
    return {"mean": float(x.mean()), "std": float(x.std())}


def aggregate(records: list[PairRecord], modes, budgets, n_trials: int) -> tuple[dict, dict]:
    """Aggregate metrics and success curves, derived only from ``records``.

    Failed pairs count as unregistered with inlier ratio 0. RR and the rotation errors are
    averaged over pairs within each trial, then mean and std are taken across trials.
    """
    irs = [0.0 if r.failed else r.inlier_ratio for r in records]
    agg = {"pairs": len(records), "failed_pairs": sum(r.failed for r in records),
           "fmr": fmr(irs, FMR_THRESHOLD), "inlier_ratio": _mean_std(irs)["mean"], "modes": {}}  # fmt: skip
    curves = {}
    for m in modes:
        rr_t, rot_t, tr_t, firsts = [], [], [], []
        for t in range(n_trials):
            outs = [None if r.failed or t >= len(r.trials) else r.trials[t].get(m) for r in records]
            rr_t.append(np.mean([bool(o and o.evaluation.registration_correct) for o in outs]) if outs else 0.0)
            ok = [o for o in outs if o is not None]
            rot_t.append(np.median([o.evaluation.rotation_error for o in ok]) if ok else np.nan)
            tr_t.append(np.median([o.evaluation.translation_error for o in ok]) if ok else np.nan)
            firsts.extend(o.evaluation.iterations_to_success if o else None for o in outs)
        its = [f for f in firsts if f is not None]
        agg["modes"][m] = {
            "rr": _mean_std(rr_t),
            "median_rotation_error": _mean_std([v for v in rot_t if np.isfinite(v)]),
            "median_translation_error": _mean_std([v for v in tr_t if np.isfinite(v)]),
            "median_iterations_to_success": float(np.median(its)) if its else None,
            "t2_mean": _mean_std(o.t2 for r in records if not r.failed for tr in r.trials if m in tr
                                 for o in [tr[m]])["mean"],
        }  # fmt: skip
        curves[m] = [list(p) for p in success_curve(firsts, budgets)]
    return agg, curves


def timing_summary(records: list[PairRecord], total: float) -> dict:
    ok = [r for r in records if not r.failed]
    t1 = [t for r in ok for t in r.t1]
    return {"t1_per_cloud": _mean_std(t1)["mean"], "t_match_per_pair": _mean_std(r.t_match for r in ok)["mean"],
            "total": total}  # fmt: skip


def summary_table(report: BenchmarkReport) -> str:
    a = report.aggregate
    lines = [
        f"pairs {a['pairs']}  failed {a['failed_pairs']}  FMR {a['fmr']:.3f}  IR {a['inlier_ratio'] or 0.0:.3f}",
        f"{'mode':<8} {'RR':>7} {'+-':>6} {'rot(deg)':>9} {'trans':>7} {'med.it':>7} {'t2(s)':>7}",
    ]
    for m, d in a["modes"].items():
        rot = d["median_rotation_error"]["mean"]
        tr = d["median_translation_error"]["mean"]
        it = d["median_iterations_to_success"]
        lines.append(
            f"{m:<8} {d['rr']['mean']:7.3f} {d['rr']['std']:6.3f} "
            f"{_fmt(rot, 9, 2)} {_fmt(tr, 7, 3)} {_fmt(it, 7, 0)} {_fmt(d['t2_mean'], 7, 3)}"
        )
    t = report.timing
    lines.append(f"t1/cloud {_fmt(t['t1_per_cloud'], 0, 3)} s  match/pair {_fmt(t['t_match_per_pair'], 0, 3)} s  "
                 f"total {t['total']:.1f} s")  # fmt: skip
    return "\n".join(lines) + "\n"


def _fmt(v, w, p) -> str:
    return f"{'-':>{w}}" if v is None else f"{v:{w}.{p}f}"


def success_curve_csv(report: BenchmarkReport) -> str:
    """Plot-ready ``mode,iterations,fraction`` rows."""
    rows = ["mode,iterations,fraction"]
    for m, curve in report.success_curve.items():
        rows.extend(f"{m},{n},{r:.6f}" for n, r in curve)
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def synth_config_for(cfg: BenchmarkConfig, seed: int) -> SynthConfig:
    return SynthConfig(
        base_shape=cfg.base_shape, point_count=cfg.point_count, overlap_fraction=cfg.overlap,
        noise_sigma=cfg.noise_sigma, dropout_fraction=cfg.dropout, outlier_fraction=cfg.outliers,
        max_angle=cfg.max_angle, max_translation=cfg.max_translation, extent=cfg.extent, seed=seed,
    )  # fmt: skip


def register_modes(
    C: Correspondences, cfg: BenchmarkConfig, seed: int, T_gt: RigidTransform, eval_points: NDArray,
    P: NDArray | None = None, Q: NDArray | None = None, group: IcosahedralGroup | None = None,
) -> dict[str, ModeOutcome]:  # fmt: skip
    """Run every configured mode on one correspondence set and score it against ``T_gt``."""
    ir = correspondence_eval(C.p, C.q, T_gt, cfg.tau_c)
    out = {}
    for m in cfg.modes:
        rc = RansacConfig(mode=m, max_iterations=cfg.iterations, inlier_threshold=cfg.tau, seed=seed,
                          refit=cfg.refit, distance_check=cfg.distance_check)  # fmt: skip
        t0 = time.perf_counter()
        try:
            res = run_ransac(C, rc, group)
        except InsufficientCorrespondencesError:
            ev = PairEvaluation(ir, False, 180.0, float("inf"), None)
            out[m] = ModeOutcome(_finite(ev), 0, 0, time.perf_counter() - t0)
            continue
        T = res.transform
        icp_rmse = None
        if cfg.icp and P is not None and Q is not None:
            r = icp(P, Q, T, max_iter=cfg.icp_max_iter, max_distance=3.0 * cfg.voxel)
            T, icp_rmse = r.transform, r.rmse
        t2 = time.perf_counter() - t0
        H = generate_hypotheses(C, rc, group)
        first = iterations_to_success(
            hypothesis_correct(H.rotations, H.translations, T_gt, eval_points, cfg.tau_r, cfg.rr_use_mean) & H.valid
        )
        rot, tr = pose_error(T, T_gt)
        ok = rr(T, T_gt, eval_points, cfg.tau_r, cfg.rr_use_mean)
        out[m] = ModeOutcome(PairEvaluation(ir, bool(ok), rot, tr, first), len(H), res.inlier_count, t2,
                             res.fallback, icp_rmse)  # fmt: skip
    return out


def _finite(ev: PairEvaluation) -> PairEvaluation:
    # JSON has no infinity; failed estimates report a sentinel large error instead
    if not np.isfinite(ev.translation_error):
        ev.translation_error = 1e9
    return ev


def evaluate_pair(index: int, cfg: BenchmarkConfig, weights: NetworkWeights) -> PairRecord:
    """Full pipeline on pair ``index``; stage failures are recorded, not raised."""
    group = get_group()
    seeds = pair_seeds(cfg.seed, index)
    rec = PairRecord(index, seeds, refine=resolve_refine(cfg, weights))
    try:
        P, Q, T_gt = synth_pair(synth_config_for(cfg, seeds["scene"]))
        P = voxel_downsample(P, cfg.voxel)
        Q = voxel_downsample(Q, cfg.voxel)
        rec.n_points = (len(P), len(Q))
        rng = np.random.default_rng(seeds["keypoints"])
        kp = select_keypoints(P, cfg.keypoints, cfg.radius, cfg.min_eig, rng)
        kq = select_keypoints(Q, cfg.keypoints, cfg.radius, cfg.min_eig, rng)
        t0 = time.perf_counter()
        fp = compute_features(P, kp, cfg.radius, weights, group)
        t1 = time.perf_counter()
        fq = compute_features(Q, kq, cfg.radius, weights, group)
        t2 = time.perf_counter()
        rec.t1 = (t1 - t0, t2 - t1)
        rec.n_keypoints = (len(fp.keypoints), len(fq.keypoints))
        if len(fp.keypoints) == 0 or len(fq.keypoints) == 0:
            raise ValueError("no keypoints survived the planarity filter")
        C, _, _ = estimate_correspondences(fp, fq, weights, rec.refine, group)
        rec.t_match = time.perf_counter() - t2
        rec.n_matches = len(C)
        rec.inlier_ratio = correspondence_eval(C.p, C.q, T_gt, cfg.tau_c)
        for t in range(cfg.trials):
            rec.trials.append(
                register_modes(C, cfg, seeds["ransac"] + t, T_gt, fp.points, P if cfg.icp else None, Q, group)
            )
    except Exception as e:  # noqa: BLE001 - any stage failure is recorded per pair
        log.warning("pair %d failed: %s", index, e)
        rec.error = f"{type(e).__name__}: {e}"
        rec.trials = []
    return rec


def _worker(args):
    index, cfg, weights = args
    return evaluate_pair(index, cfg, weights)


def resolve_threads(cfg_threads: int) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    return max(1, cfg_threads)


def run_benchmark(cfg: BenchmarkConfig, weights: NetworkWeights | None = None, progress=None) -> BenchmarkReport:
    """Run the configured suite. Results are independent of the thread count."""
    from .assets import default_weights

    weights = weights if weights is not None else default_weights(cfg.weights)
    threads = resolve_threads(cfg.threads)
    t0 = time.perf_counter()
    jobs = [(i, cfg, weights) for i in range(cfg.pairs)]
    if threads == 1:
        records = []
        for j in jobs:
            records.append(_worker(j))
            if progress:
                progress(records[-1])
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            records = list(ex.map(_worker, jobs))
    records.sort(key=lambda r: r.pair)
    total = time.perf_counter() - t0
    agg, curves = aggregate(records, cfg.modes, cfg.curve_budgets, cfg.trials)
    return BenchmarkReport(cfg.to_dict(), records, agg, curves, timing_summary(records, total))
