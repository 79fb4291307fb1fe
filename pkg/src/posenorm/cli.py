"""``posenorm`` command line: synth, train, eval, compactness, roundtrip.

Exit codes: 0 ok, 1 training diverged, 2 config error, 3 data error,
4 property failure.
"""

import os

# BLAS thread pools are sized when numpy loads, so the cap goes in first.
if os.environ.get("POSENORM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["POSENORM_THREADS"])

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402

import numpy as np  # noqa: E402

from .checks import map_roundtrip, run_suites  # noqa: E402
from .config import RunConfig  # noqa: E402
from .errors import ConfigError, DivergenceDetected, ParseError, PoseNormError, SchemaMismatch, TooFewPoints  # noqa: E402
from .geometry import Transform2D  # noqa: E402
from .metrics import compactness, format_rows, pck, relative_positions, write_report  # noqa: E402
from .nnet import init_gaussian, load_net, save_net  # noqa: E402
from .normalize import (PipelineConfig, RefinementNets, body_normalize, body_transform_params,  # noqa: E402
                        global_stage_maps, limb_normalize, limb_transform_params, run_pipeline)
from .refine import build_refine_net, limb_net_from_global, train_refinement  # noqa: E402
from .scoremap import extract_positions, make_groundtruth  # noqa: E402
from .skeleton import canonical_skeleton  # noqa: E402
from .synthdata import Annotation, read_corpus, sample_pose, simulate_detector, write_corpus  # noqa: E402

log = logging.getLogger("posenorm")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_DATA, EXIT_PROPERTY = 0, 1, 2, 3, 4


def _out_dir(args, cfg):
    out = args.out or cfg["paths"]["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _corpus_path(args, cfg):
    path = args.corpus or cfg["paths"]["corpus"]
    if not path:
        raise ConfigError("no corpus given (--corpus or paths.corpus)")
    return path


def _groundtruth(ann, cfg, sk):
    h, w = ann.height, ann.width
    return make_groundtruth(ann.keypoints, sk, cfg.gt_spec(), h, w)


# --- synth -------------------------------------------------------------------


def cmd_synth(args, cfg):
    sk = canonical_skeleton()
    sampler = cfg.sampler_config()
    h, w = sampler.canvas
    rng = np.random.default_rng(cfg.seed)
    anns, maps = [], []
    for i in range(args.n):
        kp = sample_pose(sampler, rng, sk)
        gt = make_groundtruth(kp, sk, cfg.gt_spec(), h, w)
        det = simulate_detector(gt, cfg.noise_spec(), rng, num_joints=sk.num_joints)
        anns.append(Annotation(f"{i:06d}", w, h, kp))
        maps.append(det.astype(np.float32))
    out = _out_dir(args, cfg)
    write_corpus(out, anns, maps, meta={"config": cfg.values, "maps": "simulated detector"})
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


# --- train -------------------------------------------------------------------


def _body_transform(det, sk, normalize):
    if not normalize:
        return Transform2D.identity()
    return body_transform_params(extract_positions(det, sk), sk)[0]


def training_pairs(anns, maps, cfg, sk, stage, normalize=True, global_net=None):
    """(input, target) pairs for ``stage`` built from a corpus of detector maps."""
    K = sk.num_joints
    pairs = []
    for ann, det in zip(anns, maps):
        gt = _groundtruth(ann, cfg, sk)
        t = _body_transform(det, sk, normalize)
        x, target = body_normalize(det, t), body_normalize(gt, t)
        if stage == "global":
            pairs.append((x.astype(np.float32), target[:K].astype(np.float32)))
            continue
        i = int(stage[-1])
        limb = list(sk.limb_defs[i])
        s1 = global_stage_maps(x, sk, global_net)
        tl = Transform2D.identity()
        if normalize:
            tl = limb_transform_params(extract_positions(s1, sk), sk, i)[0]
        pairs.append((limb_normalize(s1, sk, i, tl).astype(np.float32),
                      limb_normalize(target, sk, i, tl)[limb].astype(np.float32)))
    return pairs


def cmd_train(args, cfg):
    sk = canonical_skeleton()
    anns, maps, _ = read_corpus(_corpus_path(args, cfg))
    tc = cfg.train_config()
    if args.steps is not None:
        tc = replace(tc, steps=args.steps, fine_tune_steps=0 if args.steps == 0 else tc.fine_tune_steps)
    global_net = None
    if args.stage != "global":
        if not args.global_net:
            raise ConfigError("limb stages need --global-net")
        global_net = load_net(args.global_net, dtype=np.float32)
    out = _out_dir(args, cfg)
    ckpt = os.path.join(out, f"{args.stage}.tnet")
    trace = os.path.join(out, f"{args.stage}.loss.json")
    start = None
    if global_net is not None:
        # limb nets start from the stage-1 refiner, restricted to the limb's joints
        start = limb_net_from_global(global_net, sk.limb_defs[int(args.stage[-1])])
        start = start.astype(np.dtype(tc.dtype))
    if tc.steps == 0 and tc.fine_tune_steps == 0:
        if start is None:
            start = init_gaussian(build_refine_net(sk.num_joints, sk.num_joints, tc.width, tc.kernels,
                                                   dtype=np.float32), tc.init_variance, seed=tc.seed)
        save_net(ckpt, start)
        print(f"wrote initialization to {ckpt}")
        return EXIT_OK
    pairs = training_pairs(anns, maps, cfg, sk, args.stage, not args.no_normalize, global_net)
    try:
        res = train_refinement(args.stage, pairs, tc, K=sk.num_joints, net=start)
    except DivergenceDetected as exc:
        with open(trace, "w", encoding="utf-8") as f:
            json.dump([float(v) for v in exc.losses], f)
        print(f"error: {exc}; loss trace in {trace}", file=sys.stderr)
        return EXIT_DIVERGED
    save_net(ckpt, res.net)
    with open(trace, "w", encoding="utf-8") as f:
        json.dump([float(v) for v in res.losses], f)
    print(f"wrote {ckpt}; loss {np.mean(res.losses[:50]):.4f} -> {np.mean(res.losses[-50:]):.4f}")
    return EXIT_OK


# --- eval --------------------------------------------------------------------


def cmd_eval(args, cfg):
    sk = canonical_skeleton()
    anns, maps, _ = read_corpus(_corpus_path(args, cfg))
    if args.gt_input:
        maps = [_groundtruth(a, cfg, sk) for a in anns]
    for m in maps:
        if m.shape[0] != sk.num_joints + 1:
            raise SchemaMismatch(f"maps have {m.shape[0]} channels, expected {sk.num_joints + 1}")
    global_net = load_net(args.global_net, dtype=np.float32) if args.global_net else None
    limb_nets = [None] * 4
    if args.limb_nets:
        if len(args.limb_nets) != 4:
            raise ConfigError("--limb-nets takes four checkpoints")
        limb_nets = [load_net(p, dtype=np.float32) for p in args.limb_nets]
    nets = RefinementNets(global_net, limb_nets)
    normalize = not args.no_normalize
    pcfg = PipelineConfig(body_norm=normalize, limb_norm=normalize)
    results = [run_pipeline(m, sk, pcfg, nets) for m in maps]
    gts = [a.keypoints for a in anns]
    ecfg = cfg.eval_config()
    suffix = "norm" if normalize else "raw"
    rows = {"detector": pck([r.stages["detector"] for r in results], gts, sk, ecfg),
            f"stage1_{suffix}": pck([r.stages["stage1"] for r in results], gts, sk, ecfg)}
    if args.limb_nets:
        rows[f"stage2_{suffix}"] = pck([r.stages["stage2"] for r in results], gts, sk, ecfg)
    out = _out_dir(args, cfg)
    write_report(os.path.join(out, "report.json"), rows)
    print(format_rows(rows))
    return EXIT_OK


# --- compactness -------------------------------------------------------------


def cmd_compactness(args, cfg):
    sk = canonical_skeleton()
    anns, _, _ = read_corpus(_corpus_path(args, cfg), load_maps=False)
    cloud = relative_positions([a.keypoints for a in anns], sk, args.joint, args.ref, args.stage)
    stats = compactness(cloud)
    stats.update({"joint": args.joint, "ref": args.ref, "stage": args.stage, "n": len(cloud)})
    out = _out_dir(args, cfg)
    stem = f"{args.joint}_{args.ref}_{args.stage}"
    with open(os.path.join(out, f"{stem}.json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=1)
    with open(os.path.join(out, f"{stem}.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["dx", "dy"])
        writer.writerows(cloud.tolist())
    print(json.dumps(stats))
    return EXIT_OK


# --- roundtrip ---------------------------------------------------------------


def cmd_roundtrip(args, cfg):
    results = run_suites(cfg.seed, faults=args.inject_fault or ())
    info = map_roundtrip(np.random.default_rng(cfg.seed), n=20)
    info.informational = True
    for r in results + [info]:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


# --- entry point -------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="posenorm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (default paths.out)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("-n", type=int, default=100, help="number of samples")

    s = sub.add_parser("train", parents=[common], help="train a refinement stage")
    s.add_argument("--corpus")
    s.add_argument("--stage", default="global", choices=["global", "limb0", "limb1", "limb2", "limb3"])
    s.add_argument("--no-normalize", action="store_true", help="train on un-normalized maps")
    s.add_argument("--steps", type=int)
    s.add_argument("--global-net", help="stage-1 checkpoint (limb stages)")

    s = sub.add_parser("eval", parents=[common], help="evaluate the pipeline on a corpus")
    s.add_argument("--corpus")
    s.add_argument("--global-net")
    s.add_argument("--limb-nets", nargs="+")
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--gt-input", action="store_true", help="use groundtruth maps as detector output")

    s = sub.add_parser("compactness", parents=[common], help="relative-position scatter statistics")
    s.add_argument("--corpus")
    s.add_argument("--joint", default="neck")
    s.add_argument("--ref", default="head-top")
    s.add_argument("--stage", default="raw", choices=["raw", "body_normalized", "limb_normalized"])

    s = sub.add_parser("roundtrip", parents=[common], help="warp and gradient property suites")
    s.add_argument("--inject-fault", action="append", choices=["adjoint", "gradient", "inverse"],
                   help=argparse.SUPPRESS)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "compactness": cmd_compactness, "roundtrip": cmd_roundtrip}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, SchemaMismatch, TooFewPoints, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PoseNormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
