"""Command-line entry point: ``laserseg synth|train|query|eval|bench-attn|gradcheck``.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` on
stderr and exit nonzero (2 for usage and configuration problems, 1 otherwise).
Heavy modules are imported after ``--threads`` has pinned the BLAS pools.
"""
from __future__ import annotations

import argparse
import colorsys
import json
import os
import sys
from importlib import resources
from pathlib import Path

PUBLISHED_FIGURES = {"vanilla_gflops": 26.91, "lrtq_gflops": 1.48, "ratio": 18.18}
BENCH_POINT = {"S": 20480, "s": 256, "D": 32}
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
USAGE_EXIT, FAILURE_EXIT = 2, 1


class UsageError(Exception):
    pass


def palette(num_classes: int) -> list[tuple[int, int, int]]:
    """Class i gets hue i * 360 / N at full saturation and value."""
    out = []
    for i in range(num_classes):
        r, g, b = colorsys.hsv_to_rgb(i / num_classes, 1.0, 1.0)
        out.append((round(r * 255), round(g * 255), round(b * 255)))
    return out


def bundled_scene_spec() -> Path:
    return Path(str(resources.files("laserseg") / "scenes" / "four_objects.json"))


def _emit(doc, stream=None) -> None:
    (stream or sys.stdout).write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- verbs ----------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .dataio import generate_synthetic_scene, load_scene_spec
    spec = load_scene_spec(args.spec or bundled_scene_spec())
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    manifest = generate_synthetic_scene(spec, out)
    _emit({"manifest": str(out / "manifest.json"), "frames": len(manifest.frames),
           "train": len(manifest.split_indices("train")), "test": len(manifest.split_indices("test"))})
    return 0


def _train_config(args):
    from .trainer import TrainConfig, load_config
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.iters is not None:
        overrides["total_iters"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.geometry_iters is not None:
        overrides["geometry_iters"] = args.geometry_iters
    if overrides:
        config = TrainConfig.from_dict({**config.to_dict(), **overrides})
    return config


def cmd_train(args) -> int:
    from .dataio import load_manifest, read_text
    from .trainer import evaluate, load_checkpoint, save_checkpoint, train
    config = _train_config(args)
    manifest = load_manifest(args.manifest)
    if manifest.text is None:
        raise UsageError("manifest names no text feature file")
    text = read_text(manifest.path(manifest.text))
    state = load_checkpoint(args.resume, text.dim) if args.resume else None

    def progress(stage, entry):
        if args.verbose:
            print(json.dumps({"stage": stage, **entry}), file=sys.stderr, flush=True)

    state, report = train(manifest, config, text, state=state, abort_checkpoint=args.out, progress=progress)
    save_checkpoint(state, args.out)
    report.checkpoint = str(args.out)
    has_masks = any(manifest.frames[i].mask for i in manifest.split_indices("test"))
    if has_masks and config.total_iters > 0 and not args.no_eval:
        report.metrics = evaluate(state, manifest, text).to_dict()
    _emit(report.to_dict())
    return 0


def _query_camera(args, manifest):
    import numpy as np
    from .volume import Camera
    if args.pose is not None:
        values = [float(v) for v in args.pose.replace(",", " ").split()]
        if len(values) != 12:
            raise UsageError(f"--pose needs 12 numbers (3x4 camera-to-world), got {len(values)}")
        return Camera(manifest.focal, manifest.cx, manifest.cy, manifest.height, manifest.width,
                      np.asarray(values).reshape(3, 4))
    if not 0 <= args.frame < len(manifest.frames):
        raise UsageError(f"--frame {args.frame} outside [0, {len(manifest.frames)})")
    return manifest.camera(args.frame)


def cmd_query(args) -> int:
    import numpy as np
    from .dataio import load_manifest, read_text, write_pnm
    from .semantics import normalize_relevance
    from .trainer import load_checkpoint, predict_view
    text = read_text(args.text)
    state = load_checkpoint(args.checkpoint, text.dim)
    manifest = load_manifest(args.manifest, check_files=False)
    camera = _query_camera(args, manifest)
    logits, seg = predict_view(state, camera, text, manifest.near, manifest.far)
    colors = np.asarray(palette(text.num_classes), dtype=np.uint8)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pnm(out, colors[seg])
    relevance = normalize_relevance(np.moveaxis(logits, -1, 0))
    written = []
    for k in range(text.num_classes):
        path = out.with_name(f"{out.stem}_relevance_{k}.pgm")
        write_pnm(path, np.round(relevance[k] * 255).astype(np.uint8))
        written.append(str(path))
    counts = np.bincount(seg.ravel(), minlength=text.num_classes)
    _emit({"segmentation": str(out), "relevance": written, "class_names": text.class_names,
           "pixel_counts": counts.tolist(), "palette": [list(c) for c in colors.tolist()]})
    return 0


def cmd_eval(args) -> int:
    from .dataio import load_manifest, read_text
    from .trainer import evaluate, load_checkpoint
    manifest = load_manifest(args.manifest)
    text_path = args.text or (manifest.path(manifest.text) if manifest.text else None)
    if text_path is None:
        raise UsageError("no text feature file given and the manifest names none")
    split = manifest.split_indices(args.split)
    if not any(manifest.frames[i].mask for i in split):
        raise UsageError(f"no '{args.split}' frames in the manifest carry masks")
    text = read_text(text_path)
    state = load_checkpoint(args.checkpoint, text.dim)
    _emit(evaluate(state, manifest, text, args.split).to_dict())
    return 0


def bench_report(sizes, rank: int, dim: int, repeats: int) -> dict:
    from . import attention as attn
    if len(sizes) < 3:
        raise UsageError("bench-attn needs at least three sizes")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise UsageError("sizes must be strictly increasing")
    rows, slopes = [], {}
    for kind in ("vanilla", "lrtq"):
        times = []
        for S in sizes:
            t = attn.time_attention(kind, S, rank, dim, repeats=repeats)
            flops = attn.attention_flops(kind, S, rank, dim)
            rows.append({"kind": kind, "S": S, "s": rank, "D": dim, "flops_total": flops.total,
                         "flops_core": flops.core, "seconds": t})
            times.append(t)
        slopes[kind] = attn.fit_loglog_slope(sizes, times)
    S, s, D = BENCH_POINT["S"], BENCH_POINT["s"], BENCH_POINT["D"]
    vanilla = attn.attention_flops("vanilla", S, s, D).core
    lrtq = attn.attention_flops("lrtq", S, s, D).core
    solved = attn.solve_rank(PUBLISHED_FIGURES["lrtq_gflops"] * 1e9, S, D)
    lrtq_solved = attn.attention_flops("lrtq", S, 1, D).core * solved
    return {
        "measurements": rows,
        "slopes": slopes,
        "flop_model": {
            "S": S, "s": s, "D": D,
            "vanilla_gflops": vanilla / 1e9, "lrtq_gflops": lrtq / 1e9, "ratio": vanilla / lrtq,
            "solved_rank": solved, "ratio_at_solved_rank": vanilla / lrtq_solved,
            "published": dict(PUBLISHED_FIGURES),
        },
    }


def format_bench(report: dict) -> str:
    lines = [f"{'kind':<8} {'S':>6} {'s':>4} {'D':>4} {'core GFLOP':>12} {'seconds':>12}"]
    for r in report["measurements"]:
        lines.append(f"{r['kind']:<8} {r['S']:>6} {r['s']:>4} {r['D']:>4} {r['flops_core'] / 1e9:>12.6f} "
                     f"{r['seconds']:>12.6f}")
    lines.append("")
    for kind, slope in report["slopes"].items():
        lines.append(f"log-log slope {kind:<8} {slope:6.3f}")
    fm = report["flop_model"]
    published = fm["published"]
    lines.append("")
    lines.append(f"FLOP model at S={fm['S']}, s={fm['s']}, D={fm['D']}     this model   published")
    lines.append(f"  vanilla core (GFLOP)              {fm['vanilla_gflops']:10.2f}  {published['vanilla_gflops']:10.2f}")
    lines.append(f"  lrtq core (GFLOP)                 {fm['lrtq_gflops']:10.2f}  {published['lrtq_gflops']:10.2f}")
    lines.append(f"  ratio                             {fm['ratio']:10.2f}  {published['ratio']:10.2f}")
    lines.append(f"  rank matching {published['lrtq_gflops']} GFLOP: s = {fm['solved_rank']:.1f}, "
                 f"ratio {fm['ratio_at_solved_rank']:.2f}")
    return "\n".join(lines)


def cmd_bench_attn(args) -> int:
    sizes = [int(v) for v in args.sizes.split(",") if v.strip()]
    report = bench_report(sizes, args.rank, args.dim, args.repeats)
    print(format_bench(report))
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITE, run_suite
    cases = args.cases.split(",") if args.cases else list(SUITE)
    results = run_suite(seeds=args.seeds, cases=cases, tol=args.tol)
    failed = 0
    for name in cases:
        rows = [r for r in results if r.case == name]
        worst = max(rows, key=lambda r: r.max_rel_error)
        bad = sum(not r.passed for r in rows)
        failed += bad
        status = "PASS" if bad == 0 else "FAIL"
        print(f"{status} {name:<22} seeds={len(rows)} max_rel_error={worst.max_rel_error:.2e} "
              f"(seed {worst.seed}, input {worst.worst_input})")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else FAILURE_EXIT


# -- argument parsing ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="laserseg", description="Language-guided voxel-field segmentation toolkit.")
    parser.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count (1 for determinism)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("spec", nargs="?", help="scene spec JSON (default: bundled four-object scene)")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a scene and write a checkpoint")
    p.add_argument("manifest")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iters", type=int, help="override total_iters")
    p.add_argument("--geometry-iters", type=int, dest="geometry_iters")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-eval", action="store_true", help="skip held-out evaluation")
    p.add_argument("-v", "--verbose", action="store_true", help="log loss intervals to stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("query", help="render a text-queried segmentation")
    p.add_argument("checkpoint")
    p.add_argument("text", help="text feature file (.lsrt)")
    p.add_argument("--manifest", required=True, help="manifest supplying intrinsics and frame poses")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--frame", type=int, help="use the pose of this manifest frame")
    group.add_argument("--pose", help="12 numbers, row-major 3x4 camera-to-world")
    p.add_argument("--out", required=True, help="segmentation PPM path")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="mIoU and accuracy on held-out frames")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--text", help="text feature file (default: the manifest's)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-attn", help="time vanilla vs low-rank attention")
    p.add_argument("--sizes", default="512,1024,2048,4096,8192")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json", help="also write the report JSON here")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--cases", help="comma-separated subset")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), USAGE_EXIT)
    if args.threads is not None:
        if args.threads < 1:
            return _fail("UsageError", "--threads must be at least 1", USAGE_EXIT)
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    from .errors import ConfigError, LaserError
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail(type(exc).__name__, str(exc), USAGE_EXIT)
    except (LaserError, OSError, ValueError, IndexError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), FAILURE_EXIT)


if __name__ == "__main__":
    sys.exit(main())
