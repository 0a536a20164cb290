"""``srnkit`` command line.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import anchors as anchors_mod
from . import augment as aug
from . import backbone
from .config import ConfigError, RunConfig, load_config
from .data_io import (
    FormatError,
    GroundTruthFace,
    SceneError,
    SceneSpec,
    format_number,
    gt_boxes,
    parse_detections,
    parse_gt,
    place_faces,
    read_ppm,
    read_scores,
    synth_scores,
    write_detections,
    write_gt,
    write_ppm,
    write_scores,
)
from .evaluation import (
    SUBSET_NAMES,
    UnknownImageError,
    evaluate,
    format_ap_line,
    height_band_subsets,
    load_subset_lists,
)
from .geometry import BoxXYXY, as_boxes
from .matching import class_balance_stats, match_anchors
from .refine import Detections, merge_multiscale, nms, run_inference

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _map(fn, items, jobs: int):
    """``map`` that keeps input order, threaded when ``jobs > 1``."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _emit(rows, out=None):
    out = out or sys.stdout
    for row in rows:
        out.write("\t".join(str(c) for c in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_anchors(args, cfg: RunConfig) -> int:
    pc = cfg.pyramid()
    stats = anchors_mod.anchor_count_stats(pc)
    rows = [("level", "stride", "grid", "scales", "anchors")]
    for k, count in enumerate(stats.per_level):
        cols, grid_rows = pc.grid_size(k)
        scales = ",".join(f"{s:.2f}" for s in pc.level_scales(k))
        rows.append((k + 1, pc.strides[k], f"{cols}x{grid_rows}", scales, count))
    rows.append(("total", "", "", "", stats.total))
    rows.append(("low_level_fraction", "", "", "", f"{stats.low_level_fraction:.4f}"))
    _emit(rows)
    return EXIT_OK


def cmd_shapes(args, cfg: RunConfig) -> int:
    stem = backbone.build_stem(args.variant)
    rows = [("layer", "kind", "height", "width", "channels", "cum_stride", "params")]
    for layer, r in zip(stem.layers, backbone.trace_shapes(stem, args.height or cfg.input_height,
                                                          args.width or cfg.input_width)):
        rows.append((r.name, r.kind, r.height, r.width, r.channels, r.cumulative_stride,
                     backbone.layer_params(layer)))
    rows.append(("total_params", "", "", "", "", "", backbone.param_count(stem)))
    _emit(rows)
    levels = backbone.pyramid_strides(args.variant)
    _emit([("pyramid_strides", ",".join(f"{n}:{s}" for n, s in levels))])
    return EXIT_OK


def cmd_match_stats(args, cfg: RunConfig) -> int:
    gt = parse_gt(args.gt)
    anchor_set = anchors_mod.generate_pyramid_anchors(cfg.pyramid())
    steps = ((cfg.step1_pos_iou, cfg.step1_neg_iou), (cfg.step2_pos_iou, cfg.step2_neg_iou))

    def one(key):
        boxes = gt_boxes(gt[key])
        return [class_balance_stats(match_anchors(anchor_set, boxes, p, n)) for p, n in steps]

    keys = list(gt)
    results = _map(one, keys, args.jobs)
    header = ["image"]
    for s in (1, 2):
        header += [f"step{s}_pos", f"step{s}_neg", f"step{s}_ign", f"step{s}_ratio", f"step{s}_unmatched_gt"]
    rows = [header]
    totals = np.zeros((2, 4), dtype=np.int64)
    for key, per_step in zip(keys, results):
        row = [key]
        for s, st in enumerate(per_step):
            row += [st.num_positive, st.num_negative, st.num_ignored, st.ratio_text(), st.unmatched_gts]
            totals[s] += [st.num_positive, st.num_negative, st.num_ignored, st.unmatched_gts]
        rows.append(row)
    agg = ["TOTAL"]
    for pos, neg, ign, unmatched in totals:
        ratio = "inf" if neg == 0 else ("0:%d" % neg if pos == 0 else f"1:{neg / pos:.0f}")
        agg += [pos, neg, ign, ratio, unmatched]
    rows.append(agg)
    _emit(rows)
    return EXIT_OK


def _scene_spec(args, cfg: RunConfig, width: int, height: int, num_faces: int = 0) -> SceneSpec:
    return SceneSpec(
        image_width=width,
        image_height=height,
        num_faces=num_faces,
        score_model=args.score_model,
        delta_sigma=args.sigma,
    )


class _AnchorCache:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._sets = {}

    def get(self, scale: float):
        if scale not in self._sets:
            self._sets[scale] = anchors_mod.generate_pyramid_anchors(self.cfg.pyramid(scale))
        return self._sets[scale]


def _simulate_image(index: int, key: str, faces, args, cfg: RunConfig, cache: _AnchorCache) -> Detections:
    boxes = gt_boxes(faces)
    if args.scores:
        scores = read_scores(Path(args.scores) / (os.path.splitext(key)[0] + args.score_suffix))
        anchor_set = cache.get(1.0)
        return run_inference(anchor_set, scores, theta=cfg.stc_threshold, top_k=cfg.top_k,
                             nms_iou=cfg.nms_iou, cap=cfg.cap)
    per_scale = []
    for j, scale in enumerate(cfg.test_scales):
        anchor_set = cache.get(scale)
        pc = anchor_set.config
        spec = _scene_spec(args, cfg, pc.input_width, pc.input_height)
        rng = np.random.default_rng([cfg.seed, index, j])
        scores = synth_scores(anchor_set, boxes * scale, spec, rng)
        dets = run_inference(anchor_set, scores, theta=cfg.stc_threshold, top_k=cfg.top_k,
                             nms_iou=cfg.nms_iou, cap=cfg.cap)
        per_scale.append((scale, dets))
    return merge_multiscale(per_scale, cfg.nms_iou, cfg.cap)


def cmd_simulate(args, cfg: RunConfig) -> int:
    gt = parse_gt(args.gt)
    if args.scores and args.scales:
        raise UsageError("--scales only applies to synthetic scores")
    cache = _AnchorCache(cfg)
    items = list(enumerate(gt.items()))
    results = _map(lambda it: _simulate_image(it[0], it[1][0], it[1][1], args, cfg, cache), items, args.jobs)
    write_detections(dict(zip(gt, results)), args.out)
    print(f"wrote detections for {len(results)} images to {args.out}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    pc = cfg.pyramid()
    anchor_set = anchors_mod.generate_pyramid_anchors(pc) if args.scores_dir or args.detectable else None
    gt = {}
    for i in range(args.num_images):
        key = f"{args.prefix}/synth_{i:05d}.jpg"
        spec = _scene_spec(args, cfg, pc.input_width, pc.input_height, args.faces)
        rng = np.random.default_rng([cfg.seed, i])
        faces = place_faces(spec, anchor_set if args.detectable else None, rng)
        gt[key] = [GroundTruthFace(BoxXYXY(*map(float, f))) for f in faces]
        if args.scores_dir:
            target = Path(args.scores_dir) / f"{args.prefix}/synth_{i:05d}{args.score_suffix}"
            target.parent.mkdir(parents=True, exist_ok=True)
            write_scores(synth_scores(anchor_set, faces, spec, rng), target)
    write_gt(gt, args.out_gt)
    print(f"wrote {len(gt)} synthetic images to {args.out_gt}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    img = read_ppm(args.image)
    gt = parse_gt(args.gt)
    key = args.key
    if key is None:
        if len(gt) != 1:
            raise UsageError("ground-truth file holds several images; pick one with --key")
        key = next(iter(gt))
    if key not in gt:
        raise FormatError(f"image {key!r} not in {args.gt}")
    rng = aug.rng_for(cfg.seed, args.image_id)
    result = aug.augment_pipeline(img, gt_boxes(gt[key]), rng, cfg.augment())
    write_ppm(result.image, args.out)
    faces = [GroundTruthFace(BoxXYXY(*map(float, b))) for b in result.boxes]
    write_gt({key: faces}, args.out_gt)
    branch = "data-anchor-sampling" if result.das else "expand+crop"
    print(f"{branch}\t{len(faces)} boxes\t{args.out}")
    return EXIT_OK


def cmd_nms(args, cfg: RunConfig) -> int:
    dets = parse_detections(args.dets)
    out = {k: nms(d, cfg.nms_iou).take(slice(0, cfg.cap)) for k, d in dets.items()}
    write_detections(out, args.out)
    print(f"suppressed {sum(map(len, dets.values())) - sum(map(len, out.values()))} detections")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    gt = parse_gt(args.gt)
    dets = parse_detections(args.dets)
    subsets = load_subset_lists(args.subset_lists, gt) if args.subset_lists else height_band_subsets(gt)
    curves = evaluate(dets, gt, subsets)
    print(format_ap_line(curves))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subset", "threshold", "precision", "recall"])
            for name in SUBSET_NAMES:
                c = curves[name]
                for t, p, r in zip(c.thresholds, c.precision, c.recall):
                    w.writerow([name, f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file overriding the defaults")
    p.add_argument("--seed", type=int, help="global seed for every random draw")
    p.add_argument("--print-config", action="store_true", help="echo the resolved config and exit")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for per-image work")
    p.add_argument("--input", type=int, help="square input size (sets width and height)")


def _scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--score-model", choices=("beta", "oracle"), default="beta")
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian noise on synthetic deltas")
    p.add_argument("--score-suffix", default=".bin", help="score file extension (.bin or .txt)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srnkit", description="Selective two-step face detection toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("anchors", help="per-level anchor counts and scales")
    _common(p)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("shapes", help="shape/stride/parameter trace of a stem variant")
    _common(p)
    p.add_argument("--variant", choices=backbone.STEM_NAMES, default="new_resnet")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("match-stats", help="anchor label counts per image for both steps")
    _common(p)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_match_stats)

    p = sub.add_parser("simulate", help="run the inference chain on score files or synthetic scores")
    _common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="output directory for submission files")
    p.add_argument("--scores", help="directory of per-image score files (else synthetic)")
    p.add_argument("--scales", type=_csv_floats, help="test scales for synthetic runs")
    p.add_argument("--theta", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--nms-iou", type=float)
    p.add_argument("--cap", type=int)
    _scene_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth file (and score files)")
    _common(p)
    p.add_argument("--num-images", type=int, default=10)
    p.add_argument("--faces", type=int, default=10)
    p.add_argument("--out-gt", required=True)
    p.add_argument("--scores-dir")
    p.add_argument("--prefix", default="synth")
    p.add_argument("--detectable", action="store_true",
                   help="only place faces that some anchor overlaps by more than 0.5")
    _scene_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="augment one PPM image and its boxes")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--key")
    p.add_argument("--image-id", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--out-gt", required=True)
    p.add_argument("--das-prob", type=float)
    p.add_argument("--out-size", type=int)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("nms", help="re-run NMS and the per-image cap over submission files")
    _common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float)
    p.add_argument("--cap", type=int)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("eval", help="WIDER-protocol AP for easy/medium/hard")
    _common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--subset-lists", help="directory with easy.txt, medium.txt, hard.txt")
    p.add_argument("--out", help="CSV of curve points")
    p.set_defaults(func=cmd_eval)
    return parser


def _flag_overrides(args) -> dict:
    ov = {"seed": args.seed}
    if args.input is not None:
        ov["input_width"] = ov["input_height"] = args.input
    if args.command == "anchors":
        ov["input_width"] = args.width or ov.get("input_width")
        ov["input_height"] = args.height or ov.get("input_height")
    if args.command == "simulate":
        ov.update(test_scales=args.scales, stc_threshold=args.theta, top_k=args.top_k,
                  nms_iou=args.nms_iou, cap=args.cap)
    if args.command == "augment":
        ov.update(das_probability=args.das_prob, output_size=args.out_size)
    if args.command == "nms":
        ov.update(nms_iou=args.iou, cap=args.cap)
    return ov


def _locale_guard() -> None:
    if os.environ.get("SRNKIT_LOCALE_GUARD") != "1":
        return
    import locale

    locale.setlocale(locale.LC_ALL, "")
    if format_number(0.5) != "0.5" or f"{0.5:.6f}" != "0.500000":
        raise RuntimeError("number formatting is not locale independent")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _locale_guard()
        cfg = load_config(args.config, _flag_overrides(args))
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"srnkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, UnknownImageError, SceneError, OSError, ValueError, RuntimeError) as exc:
        print(f"srnkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
