"""Command-line front end: ``hoikit <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error. Every run writes
``run_log.json`` under ``--output`` with the arguments, a configuration hash,
library versions and timings. Set ``HOIKIT_LOG`` (DEBUG, INFO, WARNING) for
log verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__

log = logging.getLogger("hoikit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError("%s: error: %s" % (self.prog, message))


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser():
    p = _Parser(prog="hoikit", description="Metric-scale 4D human-object interaction reconstruction toolkit.")
    p.add_argument("--version", action="version", version="hoikit " + __version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    fmt = _Formatter

    s = sub.add_parser("scale-search", help="metric scale of the object mesh from one frame", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--frame", type=int, default=1, help="1-based frame index")
    s.add_argument("--coarse-scales", type=float, nargs="+", default=None,
                   help="coarse grid (default: 28 log-spaced values in [0.3, 3.0])")
    s.add_argument("--top-k", type=int, default=3)
    s.add_argument("--refine-count", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)

    s = sub.add_parser("select", help="per-frame object pose selection from candidate pools", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--delta-m", type=float, default=0.5, help="minimum occlusion-aware IoU")
    s.add_argument("--delta-R", type=float, default=0.6, help="maximum rotation change (radians)")
    s.add_argument("--skip-S", type=int, default=15, help="forward jump length (frames)")
    s.add_argument("--max-jumps", type=int, default=5)
    s.add_argument("--baseline", choices=("ours", "top1"), default="ours")
    s.add_argument("--output", required=True)

    s = sub.add_parser("align-depth", help="robust scale/shift alignment of a depth map", formatter_class=fmt)
    s.add_argument("--pred", required=True, help="predicted depth (PFM)")
    s.add_argument("--ref", required=True, help="reference depth (PFM)")
    s.add_argument("--mask", required=True, help="alignment region (PNG)")
    s.add_argument("--erosion-radius", type=int, default=2)
    s.add_argument("--sigma-space", type=float, default=3.0)
    s.add_argument("--sigma-range", type=float, default=0.1)
    s.add_argument("--no-preprocess", action="store_true")
    s.add_argument("--output", required=True)

    s = sub.add_parser("align-human", help="scale and z alignment of human points to scene points",
                       formatter_class=fmt)
    s.add_argument("--human", required=True, help="human points (.npy or whitespace text, N x 3)")
    s.add_argument("--scene", required=True, help="scene points (.npy or whitespace text, N x 3)")
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--output", required=True)

    s = sub.add_parser("optimize", help="contact-aware trajectory refinement", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--init", required=True, help="initial trajectory (JSONL)")
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--lr", type=float, default=1e-3, help="initial learning rate, decayed linearly to 0")
    s.add_argument("--penetration-last", type=int, default=1200, help="penetration term active in the last N steps")
    s.add_argument("--penetration-samples", type=int, default=6000)
    s.add_argument("--lambda-c", type=float, default=200.0)
    s.add_argument("--lambda-j2d", type=float, default=0.03)
    s.add_argument("--lambda-m", type=float, default=0.002)
    s.add_argument("--lambda-pen", type=float, default=2.0)
    s.add_argument("--lambda-acc-human", type=float, default=600.0)
    s.add_argument("--lambda-acc-object", type=float, default=1000.0)
    s.add_argument("--no-object-rotation-accel", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)

    s = sub.add_parser("eval", help="CD-h / CD-o / CD-c and acceleration errors", formatter_class=fmt)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", default=None, help="directory for report.json / report.txt")

    s = sub.add_parser("synth", help="generate a synthetic sequence bundle", formatter_class=fmt)
    s.add_argument("--frames", type=int, default=300)
    s.add_argument("--primitive", choices=("box", "cylinder", "composite"), default="box")
    s.add_argument("--motion", choices=("carry", "lift", "swing"), default="carry")
    s.add_argument("--outlier-rate", type=float, default=0.3)
    s.add_argument("--rotation-noise-deg", type=float, default=2.0)
    s.add_argument("--translation-noise-cm", type=float, default=1.0)
    s.add_argument("--depth-affine", type=float, nargs=2, default=(1.0, 0.0), metavar=("A", "B"))
    s.add_argument("--depth-noise-cm", type=float, default=0.0)
    s.add_argument("--occlusion", action="append", default=[], metavar="START:LENGTH")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)

    s = sub.add_parser("bench", help="synthetic benchmark against the top-1 baseline", formatter_class=fmt)
    s.add_argument("--suite", default="default", help="'default' or a suite JSON file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1, help="sequences run in parallel")
    s.add_argument("--output", required=True)
    # the defaults formatter only annotates options that carry help text
    for action in sub.choices.values():
        for a in action._actions:
            if a.help is None:
                a.help = "required" if a.required else "default: %(default)s"
    return p


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def _dump_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_points(path):
    if path.endswith(".npy"):
        pts = np.load(path)
    else:
        pts = np.loadtxt(path, ndmin=2)
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("%s: expected N x 3 points, got shape %s" % (path, pts.shape))
    return pts


def cmd_scale_search(args):
    from .io_ingest import load_manifest
    from .scale_search import ScaleSearch, default_coarse_scales

    b = load_manifest(args.manifest)
    k = args.frame - 1
    if not 0 <= k < b.n_frames or not b.depths:
        raise ValueError("frame %d has no depth in %s" % (args.frame, args.manifest))
    coarse = args.coarse_scales if args.coarse_scales is not None else default_coarse_scales()
    est = ScaleSearch(coarse_scales=coarse, top_k=args.top_k, refine_count=args.refine_count, seed=args.seed)
    est.fit(b.mesh, b.depths[k], b.obj_masks[k], b.intrinsics)
    r = est.result_
    _dump_json(os.path.join(args.output, "scale.json"), {
        "format_version": 1, "frame": args.frame, "scale": r.scale, "score": r.score,
        "pose": {"q": r.pose.rotation.quat.tolist(), "t": r.pose.translation.tolist()},
        "evaluations": [{"stage": s, "scale": sc, "score": (v if np.isfinite(v) else None), "failed": f}
                        for s, sc, v, f in r.per_candidate_scores],
    })


def cmd_select(args):
    from .hypothesis_select import FrameObservation, SelectionConfig, select_sequence, select_top1
    from .io_ingest import load_manifest

    b = load_manifest(args.manifest)
    if b.pools is None:
        raise ValueError("%s lists no candidate pools" % args.manifest)
    if args.baseline == "top1":
        out = select_top1(b.pools)
    else:
        cfg = SelectionConfig(args.delta_m, args.delta_R, args.skip_S, args.max_jumps)
        obs = [FrameObservation(o, h) for o, h in zip(b.obj_masks, b.human_masks)]
        if not b.pools[0].candidates:
            raise ValueError("frame 1 has an empty candidate pool")
        init = b.pools[0].candidates[0].pose
        out = select_sequence(b.pools, init, obs, b.mesh, b.intrinsics, cfg)
    frames = []
    for f, pose, prov, rank in zip(b.frames, out.poses, out.provenance, out.candidate_rank):
        rec = {"frame": f, "provenance": prov, "rank": rank}
        if pose is not None:
            rec.update(q=pose.rotation.quat.tolist(), t=pose.translation.tolist())
        frames.append(rec)
    _dump_json(os.path.join(args.output, "selection.json"),
               {"format_version": 1, "n_jumps": out.n_jumps, "frames": frames})


def cmd_align_depth(args):
    from .depth_align import DepthAligner
    from .io_ingest import read_mask, read_pfm, write_pfm

    pred, ref, mask = read_pfm(args.pred), read_pfm(args.ref), read_mask(args.mask)
    est = DepthAligner(args.erosion_radius, args.sigma_space, args.sigma_range, not args.no_preprocess)
    est.fit(pred, ref, mask)
    write_pfm(os.path.join(args.output, "aligned.pfm"), est.transform(pred))
    _dump_json(os.path.join(args.output, "alignment.json"),
               {"format_version": 1, "s": est.scale_, "t": est.shift_, "stats": est.params_.stats})


def cmd_align_human(args):
    from .depth_align import HumanDepthAligner

    est = HumanDepthAligner(args.max_iters, args.tol).fit(_load_points(args.human), _load_points(args.scene))
    a = est.alignment_
    _dump_json(os.path.join(args.output, "human_alignment.json"), {
        "format_version": 1, "scale": a.scale, "delta_z": a.delta_z, "iterations": a.iterations,
        "final_residual": a.final_residual, "residuals": a.residuals})


def cmd_optimize(args):
    from .contact_opt import LossWeights, OptimizerConfig, OptObservations, optimize_trajectory
    from .io_ingest import load_manifest, read_trajectory, write_trajectory

    b = load_manifest(args.manifest)
    traj = read_trajectory(args.init, b.n_frames)
    weights = LossWeights(args.lambda_c, args.lambda_j2d, args.lambda_m, args.lambda_pen,
                          args.lambda_acc_human, args.lambda_acc_object)
    cfg = OptimizerConfig(steps=args.steps, lr_start=args.lr, penetration_active_last=args.penetration_last,
                          penetration_samples=args.penetration_samples,
                          object_rotation_accel=not args.no_object_rotation_accel, seed=args.seed)
    obs = OptObservations(b.intrinsics, b.joints2d, b.joints2d_conf,
                          np.stack(b.obj_masks), np.stack(b.human_masks))
    res = optimize_trajectory(traj.state, obs, b.contacts, b.skeleton, b.mesh, weights, cfg)
    write_trajectory(os.path.join(args.output, "refined.jsonl"), res.state, b.frames, res.contacts,
                     ["optimized"] * b.n_frames, res.contact_source)
    _dump_json(os.path.join(args.output, "loss_trace.json"),
               {"format_version": 1, "contact_source": res.contact_source,
                "trace": {k: v.tolist() for k, v in res.trace.items()}})


def cmd_eval(args):
    from .io_ingest import load_manifest, read_trajectory
    from .metrics import EvalReport, evaluate_sequence

    b = load_manifest(args.manifest)
    pred = read_trajectory(args.pred, b.n_frames)
    gt = read_trajectory(args.gt, b.n_frames)
    rep = evaluate_sequence(pred.state, gt.state, b.skeleton, b.mesh, b.fps, label="pred", seed=args.seed)
    text = EvalReport.table([rep])
    sys.stdout.write(text)
    if args.output:
        with open(os.path.join(args.output, "report.json"), "w") as fh:
            fh.write(rep.to_json() + "\n")
        with open(os.path.join(args.output, "report.txt"), "w") as fh:
            fh.write(text)


def _parse_windows(items):
    out = []
    for it in items:
        try:
            start, length = (int(x) for x in it.split(":"))
        except ValueError:
            raise UsageError("--occlusion expects START:LENGTH, got %r" % it) from None
        out.append((start, length))
    return out


def cmd_synth(args):
    from .synth_bench import SynthConfig, generate_sequence

    cfg = SynthConfig(n_frames=args.frames, primitive=args.primitive, motion=args.motion,
                      outlier_rate=args.outlier_rate, rotation_noise_deg=args.rotation_noise_deg,
                      translation_noise_cm=args.translation_noise_cm, depth_affine=tuple(args.depth_affine),
                      depth_noise_cm=args.depth_noise_cm, occlusion_windows=_parse_windows(args.occlusion),
                      seed=args.seed)
    generate_sequence(cfg, out_dir=args.output)


def cmd_bench(args):
    from .synth_bench import SuiteConfig, run_benchmark

    if args.suite == "default":
        suite = SuiteConfig.default(seed=args.seed)
    else:
        with open(args.suite) as fh:
            suite = SuiteConfig.from_dict(json.load(fh))
        suite.seed = args.seed
    run_benchmark(suite, args.output, jobs=args.jobs)


COMMANDS = {
    "scale-search": cmd_scale_search, "select": cmd_select, "align-depth": cmd_align_depth,
    "align-human": cmd_align_human, "optimize": cmd_optimize, "eval": cmd_eval, "synth": cmd_synth,
    "bench": cmd_bench,
}


def _versions():
    import scipy
    import sklearn

    return {"hoikit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _config_hash(args):
    doc = json.dumps({k: v for k, v in sorted(vars(args).items())}, sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()


def main(argv=None):
    level = os.environ.get("HOIKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    status, error = EXIT_OK, None
    out = getattr(args, "output", None)
    try:
        if out:
            os.makedirs(out, exist_ok=True)
        COMMANDS[args.command](args)
    except UsageError as exc:
        status, error = EXIT_USAGE, str(exc)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        status, error = EXIT_DATA, "%s: %s" % (type(exc).__name__, exc)
    if error:
        print("hoikit %s: %s" % (args.command, error), file=sys.stderr)
    if out:
        _dump_json(os.path.join(out, "run_log.json"), {
            "command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
            "arguments": {k: v for k, v in vars(args).items()}, "config_hash": _config_hash(args),
            "versions": _versions(), "seconds": time.perf_counter() - t0, "exit_code": status, "error": error,
        })
    return status


if __name__ == "__main__":
    sys.exit(main())
