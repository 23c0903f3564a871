"""Command line front end.

Subcommands cover the full pipeline: ``synth`` builds a synthetic capture,
``orient`` extracts 2D orientation maps, ``coarse`` fits the volumetric
stage, ``fit`` optimizes strands against the coarse fields, ``render``
rasterizes a strand file over a view, ``eval`` scores a prediction against
ground truth, and ``bake`` encodes strands into a geometry texture.

Every subcommand takes ``--config`` (JSON with one section per subcommand;
explicit flags win over config values, config values win over defaults),
``--seed``, ``--threads``, and ``--precision``.  Exit status is 0 on
success, 1 for invalid input (the message names the offending path or
option), 2 for unexpected runtime failures.

Only the standard library is imported at module level; numeric imports
happen inside the command handlers so the thread caps from ``--threads``
are in place before the first numpy import.
"""

import argparse
import json
import os
import sys

# Per-command option vocabularies with built-in defaults.  Config sections
# are validated against these; None means "no default, optional input".
DEFAULTS = {
    "synth": {
        "out": None, "strands": 200, "cameras": 8, "size": 128,
        "resolution": 48, "curliness": 0.3, "fields": None,
    },
    "orient": {"image": None, "out": None},
    "coarse": {
        "scene": None, "out": None, "iterations": 1500, "resolution": 48,
        "rays": 512, "lr": 5e-3, "log": None,
    },
    "fit": {
        "scene": None, "fields": None, "out": None, "iterations": 3000,
        "texture_size": 256, "strands": 512, "surface_samples": 2048,
        "length": 32, "code_dim": 64, "lambda_render": 1e-3, "log": None,
    },
    "render": {
        "scene": None, "strands": None, "out": None, "view": 0,
        "width": 0.0025, "sigma": 1e-4, "gamma": 1e-4, "blur": 1e-3,
        "fields": None,
    },
    "eval": {
        "pred": None, "gt": None, "out": None, "directed": False,
        "max_strands": 50_000, "thresholds": None, "scalp_radius": None,
    },
    "bake": {
        "scene": None, "strands": None, "out": None, "texture_size": 256,
        "length": 32, "code_dim": 64,
    },
}

REQUIRED = {
    "synth": ("out",),
    "orient": ("image", "out"),
    "coarse": ("scene", "out"),
    "fit": ("scene", "fields", "out"),
    "render": ("scene", "strands", "out"),
    "eval": ("pred", "gt"),
    "bake": ("scene", "strands", "out"),
}


def _load_config(path):
    if not os.path.isfile(path):
        raise ValueError(f"missing config file: {path}")
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"config is not valid JSON: {path} ({e})")
    if not isinstance(cfg, dict):
        raise ValueError(f"config must be a JSON object: {path}")
    for section in cfg:
        if section not in DEFAULTS:
            raise ValueError(f"unknown config section: {section!r}")
        if not isinstance(cfg[section], dict):
            raise ValueError(f"config section {section!r} must be an object")
        for key in cfg[section]:
            if key not in DEFAULTS[section]:
                raise ValueError(
                    f"unknown config key {key!r} in section {section!r}")
    return cfg


def _resolve(command, args):
    """defaults < config section < explicit flags -> one options dict."""
    opt = dict(DEFAULTS[command])
    if args.config is not None:
        opt.update(_load_config(args.config).get(command, {}))
    for key in DEFAULTS[command]:
        val = getattr(args, key, None)
        if val is not None:
            opt[key] = val
    for key in REQUIRED[command]:
        if opt[key] is None:
            raise ValueError(f"missing required option: --{key.replace('_', '-')}")
    return opt


def _cast(a, precision):
    """Round inputs through f32 when asked; compute stays in f64 either way."""
    import numpy as np
    a = np.asarray(a, dtype=np.float64)
    if precision == "f32":
        return a.astype(np.float32).astype(np.float64)
    return a


def _cast_scene(bundle, precision):
    if precision == "f64":
        return bundle
    bundle.images = [_cast(a, precision) for a in bundle.images]
    bundle.hair_masks = [_cast(a, precision) for a in bundle.hair_masks]
    bundle.bust_masks = [_cast(a, precision) for a in bundle.bust_masks]
    return bundle


def _read_field_grids(fields_dir, precision):
    from .fields import OrientGrid, SdfGrid
    from .formats import read_orng, read_sdfg
    grids = []
    for name, reader, cls in (("hair.sdfg", read_sdfg, SdfGrid),
                              ("bust.sdfg", read_sdfg, SdfGrid),
                              ("direction.orng", read_orng, OrientGrid)):
        path = os.path.join(fields_dir, name)
        if not os.path.isfile(path):
            raise ValueError(f"missing field grid: {path}")
        lo, hi, values = reader(path)
        grids.append(cls(lo, hi, _cast(values, precision)))
    return grids


def _read_hairstyle(path, allow_empty=False):
    from .formats import read_strd
    from .strands import Hairstyle, Strand
    if not os.path.isfile(path):
        raise ValueError(f"missing strand file: {path}")
    pts, roots = read_strd(path)
    if not pts and not allow_empty:
        raise ValueError(f"strand file is empty: {path}")
    return Hairstyle([Strand(p) for p in pts], roots)


def cmd_synth(args, opt):
    from .formats import write_orng, write_sdfg
    from .scene import save_scene
    from .synth import SynthSpec, synth_scene

    spec = SynthSpec(strand_count=opt["strands"], camera_count=opt["cameras"],
                     image_size=opt["size"], grid_resolution=opt["resolution"],
                     curliness=opt["curliness"])
    bundle, hair, bust, beta = synth_scene(spec, seed=args.seed)
    save_scene(opt["out"], bundle)
    if opt["fields"] is not None:
        os.makedirs(opt["fields"], exist_ok=True)
        write_sdfg(os.path.join(opt["fields"], "hair.sdfg"),
                   hair.bbox_min, hair.bbox_max, hair.values)
        write_sdfg(os.path.join(opt["fields"], "bust.sdfg"),
                   bust.bbox_min, bust.bbox_max, bust.values)
        write_orng(os.path.join(opt["fields"], "direction.orng"),
                   beta.bbox_min, beta.bbox_max, beta.values)
    print(f"wrote scene with {len(bundle.cameras)} views to {opt['out']}")
    return 0


def cmd_orient(args, opt):
    from .formats import write_ornt
    from .orient2d import orientation_map
    from .scene import read_png

    if not os.path.isfile(opt["image"]):
        raise ValueError(f"missing image: {opt['image']}")
    img = read_png(opt["image"])
    gray = img.mean(axis=2) if img.ndim == 3 else img
    angle, variance = orientation_map(_cast(gray, args.precision))
    write_ornt(opt["out"], angle, variance)
    print(f"wrote {angle.shape[1]}x{angle.shape[0]} orientation map "
          f"to {opt['out']}")
    return 0


def cmd_coarse(args, opt):
    from .coarse import CoarseConfig, fit_coarse
    from .scene import load_scene

    bundle = _cast_scene(load_scene(opt["scene"], need_orient=True),
                         args.precision)
    cfg = CoarseConfig(iterations=opt["iterations"],
                       resolution=opt["resolution"],
                       rays_per_batch=opt["rays"], lr=opt["lr"],
                       seed=args.seed)
    result = fit_coarse(bundle, cfg, log_path=opt["log"])
    result.save(opt["out"])
    print(f"wrote coarse fields to {opt['out']} "
          f"(final loss {result.history[-1]['total']:.4f})")
    return 0


def cmd_fit(args, opt):
    from .fit import CoarseFields, FitConfig, StrandPriors, fit_strands
    from .priors import SinusoidalStrandCodec
    from .scene import load_scene

    bundle = _cast_scene(load_scene(opt["scene"]), args.precision)
    hair, bust, beta = _read_field_grids(opt["fields"], args.precision)
    # No trained denoiser ships with the CLI, so the prior weight stays 0;
    # enable it programmatically via fit_strands.
    cfg = FitConfig(iterations=opt["iterations"],
                    texture_size=opt["texture_size"],
                    strands_per_iter=opt["strands"],
                    surface_samples=opt["surface_samples"],
                    lambda_render=opt["lambda_render"],
                    lambda_prior=0.0, seed=args.seed)
    codec = SinusoidalStrandCodec(opt["length"], opt["code_dim"])
    result = fit_strands(bundle, CoarseFields(hair, bust, beta),
                         StrandPriors(codec), cfg, log_path=opt["log"])
    result.save(opt["out"])
    print(f"wrote {len(result.hairstyle)} strands to {opt['out']}")
    return 0


def cmd_render(args, opt):
    import numpy as np

    from .fields import marching_cubes, raster_depth_ids
    from .scene import load_scene, write_png
    from .softras import SoftRasterSettings, soft_render, strand_segments
    from .strands import resample

    bundle = _cast_scene(load_scene(opt["scene"]), args.precision)
    style = _read_hairstyle(opt["strands"])
    if not 0 <= opt["view"] < len(bundle.cameras):
        raise ValueError(f"view index out of range: {opt['view']}")
    cam = bundle.cameras[opt["view"]]

    lengths = {s.length for s in style.strands}
    L = max(lengths)
    pts = [s.points if s.length == L else resample(s.points, L).points
           for s in style.strands]
    points = np.concatenate(pts, axis=0)
    seg, owner = strand_segments(len(pts), L)

    view = bundle.images[opt["view"]]
    mask = bundle.hair_masks[opt["view"]] > 0.5
    albedo = view[mask].mean(axis=0) if mask.any() else np.full(3, 0.3)
    colors = np.tile(albedo, (len(points), 1))

    bust_depth = None
    if opt["fields"] is not None:
        _, bust, _ = _read_field_grids(opt["fields"], args.precision)
        mesh = marching_cubes(bust)
        bust_depth, _ = raster_depth_ids(mesh.vertices, mesh.faces, cam)

    settings = SoftRasterSettings(sigma=opt["sigma"], gamma=opt["gamma"],
                                  blur=opt["blur"])
    out = soft_render(points, colors, seg, owner, cam, opt["width"],
                      image_size=bundle.image_size, settings=settings,
                      bust_depth=bust_depth, background=view.reshape(-1, 3))
    write_png(opt["out"], np.clip(out["image"].value, 0.0, 1.0))
    print(f"rendered view {opt['view']} to {opt['out']}")
    return 0


def cmd_eval(args, opt):
    from .metrics import (METRIC_CSV_COLUMNS, MetricThresholds, evaluate,
                          write_metric_csv)

    # An empty prediction is a legitimate (bad) result: flagged, not fatal.
    pred = _read_hairstyle(opt["pred"], allow_empty=True)
    gt = _read_hairstyle(opt["gt"])
    if opt["thresholds"] is not None:
        pairs = tuple((float(d), float(a)) for d, a in opt["thresholds"])
        thresholds = MetricThresholds(pairs)
    else:
        thresholds = MetricThresholds()
    if opt["scalp_radius"] is not None:
        thresholds = thresholds.scaled(opt["scalp_radius"])
    report = evaluate(pred, gt, thresholds=thresholds,
                      max_strands=opt["max_strands"], seed=args.seed,
                      directed=opt["directed"])
    if report.empty_prediction:
        print("warning: empty prediction, all metrics zero", file=sys.stderr)
    print(",".join(METRIC_CSV_COLUMNS))
    for i in range(len(report.thresholds)):
        row = report.row(i)
        print(f"{row['threshold_mm']:g},{row['threshold_deg']:g},"
              f"{row['precision']:.4f},{row['recall']:.4f},"
              f"{row['fscore']:.4f}")
    if opt["out"] is not None:
        write_metric_csv(opt["out"], report)
    return 0


def cmd_bake(args, opt):
    from .priors import SinusoidalStrandCodec, bake_texture, localize_hairstyle
    from .scene import load_scene
    from .strands import Hairstyle, resample

    bundle = load_scene(opt["scene"])
    style = _read_hairstyle(opt["strands"])
    if style.roots is None:
        raise ValueError(f"strand file carries no root UVs: {opt['strands']}")
    local, _ = localize_hairstyle(style, bundle.scalp)
    L = opt["length"]
    local = Hairstyle(
        [s if s.length == L else
         type(s)(resample(s.points, L).points, frame=s.frame)
         for s in local.strands],
        roots=local.roots)
    codec = SinusoidalStrandCodec(L, opt["code_dim"])
    texture = bake_texture(local, codec, H=opt["texture_size"],
                           W=opt["texture_size"])
    texture.save(opt["out"])
    print(f"baked {len(style)} strands into {opt['out']}")
    return 0


HANDLERS = {
    "synth": cmd_synth, "orient": cmd_orient, "coarse": cmd_coarse,
    "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval, "bake": cmd_bake,
}


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with per-command sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread cap (set before numpy loads)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f64",
                        help="round loaded images and grids through f32")

    p = argparse.ArgumentParser(
        prog="hairrecon",
        description="Strand-based hair reconstruction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic capture scene")
    s.add_argument("--out", help="scene directory to create")
    s.add_argument("--strands", type=int, help="ground-truth strand count")
    s.add_argument("--cameras", type=int)
    s.add_argument("--size", type=int, help="image side length in pixels")
    s.add_argument("--resolution", type=int, help="field grid resolution")
    s.add_argument("--curliness", type=float)
    s.add_argument("--fields", help="also write analytic field grids here")

    s = sub.add_parser("orient", parents=[common],
                       help="2D orientation map from one image")
    s.add_argument("--image", help="input PNG")
    s.add_argument("--out", help="output .ornt path")

    s = sub.add_parser("coarse", parents=[common],
                       help="fit volumetric fields to a scene")
    s.add_argument("--scene", help="scene directory")
    s.add_argument("--out", help="output directory for field grids")
    s.add_argument("--iterations", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--rays", type=int, help="rays per batch")
    s.add_argument("--lr", type=float)
    s.add_argument("--log", help="loss history CSV path")

    s = sub.add_parser("fit", parents=[common],
                       help="fit strands against coarse fields")
    s.add_argument("--scene", help="scene directory")
    s.add_argument("--fields", help="directory with hair.sdfg/bust.sdfg/direction.orng")
    s.add_argument("--out", help="output directory")
    s.add_argument("--iterations", type=int)
    s.add_argument("--texture-size", type=int, dest="texture_size")
    s.add_argument("--strands", type=int, help="strands sampled per iteration")
    s.add_argument("--surface-samples", type=int, dest="surface_samples")
    s.add_argument("--length", type=int, help="points per decoded strand")
    s.add_argument("--code-dim", type=int, dest="code_dim")
    s.add_argument("--lambda-render", type=float, dest="lambda_render")
    s.add_argument("--log", help="loss history CSV path")

    s = sub.add_parser("render", parents=[common],
                       help="soft-rasterize a strand file over a view")
    s.add_argument("--scene", help="scene directory")
    s.add_argument("--strands", help="input .strd path")
    s.add_argument("--out", help="output PNG path")
    s.add_argument("--view", type=int, help="camera index")
    s.add_argument("--width", type=float, help="strand width in world units")
    s.add_argument("--sigma", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--blur", type=float)
    s.add_argument("--fields", help="field directory for bust occlusion")

    s = sub.add_parser("eval", parents=[common],
                       help="precision/recall/F-score of predicted strands")
    s.add_argument("--pred", help="predicted .strd path")
    s.add_argument("--gt", help="ground-truth .strd path")
    s.add_argument("--out", help="metrics CSV path")
    s.add_argument("--directed", action="store_const", const=True,
                   help="distinguish opposite segment directions")
    s.add_argument("--max-strands", type=int, dest="max_strands")
    s.add_argument("--scalp-radius", type=float, dest="scalp_radius",
                   help="scale distance thresholds to this scalp size")

    s = sub.add_parser("bake", parents=[common],
                       help="encode a strand file into a geometry texture")
    s.add_argument("--scene", help="scene directory (for the scalp chart)")
    s.add_argument("--strands", help="input .strd with root UVs")
    s.add_argument("--out", help="output .gtex path")
    s.add_argument("--texture-size", type=int, dest="texture_size")
    s.add_argument("--length", type=int, help="codec strand length")
    s.add_argument("--code-dim", type=int, dest="code_dim")
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    # Pin the numeric backends before anything imports numpy.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    try:
        opt = _resolve(args.command, args)
        return HANDLERS[args.command](args, opt)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
