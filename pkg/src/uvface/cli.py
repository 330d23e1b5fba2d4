"""Command-line front end.

Subcommands: ``template``, ``uv encode``, ``uv decode``, ``align``,
``eval``, ``synth``, ``fit``. Every flag can also be supplied through a
flat ``key=value`` config file (``--config``); command-line flags override
file values and unknown keys are rejected. Outputs are written to a
temporary file and renamed on success, so no subcommand leaves partial
output behind. Report-producing subcommands render a matplotlib figure
next to their delimited output.

Exit codes: 0 success, 2 empty input, 3 numerical degeneracy, 4 I/O or
parse failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import fitting, metrics, plots
from .align import DegenerateConfigurationError, self_align
from .mesh import (
    DegenerateFacetError,
    MeshError,
    TemplateSpec,
    build_mean_template,
    landmark_sidecar_path,
    read_landmarks,
    read_obj,
    write_landmarks,
    write_obj,
    write_regions,
)
from .metrics import MetricInputError
from .pose import write_pose
from .uvmap import (
    MappingError,
    compute_uv_mapping,
    decode_uv_map,
    encode_uv_map,
    read_uvpm,
    write_uvpm,
)
from .visibility import OcclusionSpec, write_pgm

EXIT_OK = 0
EXIT_EMPTY = 2
EXIT_DEGENERATE = 3
EXIT_IO = 4

_DEGENERACY = (
    DegenerateConfigurationError,
    DegenerateFacetError,
    MappingError,
    MeshError,
    MetricInputError,
    fitting.FitDivergenceError,
)


class EmptyInputError(Exception):
    pass


# ---------------------------------------------------------------------------
# atomic output helpers
# ---------------------------------------------------------------------------

def _atomic(path, writer) -> None:
    """Run ``writer`` against a temp path, then rename over the target."""
    tmp = str(path) + ".tmp"
    writer(tmp)
    os.replace(tmp, path)


def _atomic_text(path, text: str) -> None:
    def writer(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)

    _atomic(path, writer)


def _figure_path(out_path) -> str:
    base, _ = os.path.splitext(str(out_path))
    return base + ".png"


# ---------------------------------------------------------------------------
# config file support: key=value lines, flags override, unknown keys rejected
# ---------------------------------------------------------------------------

def _parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, raw = stripped.partition("=")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


class _Registry:
    """Remembers option strings and converters so config values can be typed."""

    def __init__(self):
        self.entries: dict[str, tuple[list[str], object, object]] = {}

    def record(self, action: argparse.Action) -> None:
        if not action.option_strings or action.dest in ("help", "config"):
            return
        self.entries[action.dest] = (list(action.option_strings), action.type, action.nargs)

    def convert(self, dest: str, raw: str):
        options, typ, nargs = self.entries[dest]
        del options
        if typ is None:  # store_true style flag
            return raw.lower() in ("1", "true", "yes", "on")
        if nargs in (2, "+", "*"):
            parts = raw.split()
            if nargs == 2 and len(parts) != 2:
                raise ValueError(f"config key {dest} needs 2 values")
            return [typ(p) for p in parts]
        return typ(raw)


def _apply_config(args: argparse.Namespace, registry: _Registry, argv: list[str]) -> None:
    if not getattr(args, "config", None):
        return
    file_values = _parse_config_file(args.config)
    supplied = set()
    for dest, (options, _, _) in registry.entries.items():
        if any(opt in argv for opt in options):
            supplied.add(dest)
    for key, raw in file_values.items():
        if key not in registry.entries:
            raise ValueError(f"unknown config key {key!r} for this subcommand")
        if key not in supplied:
            setattr(args, key, registry.convert(key, raw))


def _add(parser: argparse.ArgumentParser, registry: _Registry, *names, **kwargs):
    action = parser.add_argument(*names, **kwargs)
    registry.record(action)
    return action


# ---------------------------------------------------------------------------
# shared input parsing
# ---------------------------------------------------------------------------

def _read_points(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            rows.append([float(t) for t in tokens])
    if not rows:
        raise EmptyInputError(f"no points in {path}")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or widths.pop() not in (2, 3):
        raise ValueError(f"{path}: expected 2 or 3 columns per line")
    return np.array(rows, dtype=np.float64)


def _read_floats(path) -> np.ndarray:
    with open(path) as fh:
        values = [float(line.split()[0]) for line in fh if line.strip() and not line.startswith("#")]
    return np.array(values, dtype=np.float64)


def _read_angle_rows(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if len(tokens) != 3:
                raise ValueError(f"{path}: expected 'yaw pitch roll' per line")
            rows.append([float(t) for t in tokens])
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _write_key_values(path, pairs: dict) -> None:
    text = "".join(f"{k}={v}\n" for k, v in pairs.items())
    _atomic_text(path, text)


def _read_key_values(path) -> dict[str, str]:
    return _parse_config_file(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_template(args) -> int:
    template = build_mean_template(TemplateSpec(rows=args.rows, cols=args.cols))
    _atomic(args.out, lambda tmp: write_obj(tmp, template))
    _atomic(landmark_sidecar_path(args.out),
            lambda tmp: write_landmarks(tmp, template.landmark_indices))
    base, _ = os.path.splitext(str(args.out))
    _atomic(base + ".regions.txt", lambda tmp: write_regions(tmp, template.regions))
    return EXIT_OK


def _mapping_from_args(args):
    template = build_mean_template(TemplateSpec(rows=args.rows, cols=args.cols))
    mapping = compute_uv_mapping(template, (args.height, args.width))
    return template, mapping


def cmd_uv_encode(args) -> int:
    template, mapping = _mapping_from_args(args)
    mesh = read_obj(args.mesh)
    if mesh.n_vertices != template.n_vertices:
        raise ValueError(
            f"{args.mesh} has {mesh.n_vertices} vertices; template grid "
            f"{args.rows}x{args.cols} has {template.n_vertices}"
        )
    uv_map = encode_uv_map(mesh.vertices, mapping)
    _atomic(args.out, lambda tmp: write_uvpm(tmp, uv_map))
    if args.preview:
        plots.save_uv_preview(args.preview, uv_map)
    return EXIT_OK


def cmd_uv_decode(args) -> int:
    uv_map = read_uvpm(args.map)
    template = build_mean_template(TemplateSpec(rows=args.rows, cols=args.cols))
    mapping = compute_uv_mapping(template, uv_map.resolution)
    positions = decode_uv_map(uv_map, mapping)
    mesh = template.with_vertices(positions)
    _atomic(args.out, lambda tmp: write_obj(tmp, mesh))
    _atomic(landmark_sidecar_path(args.out),
            lambda tmp: write_landmarks(tmp, template.landmark_indices))
    return EXIT_OK


def cmd_align(args) -> int:
    s_mesh = read_obj(args.shape)
    p_mesh = read_obj(args.posed)
    landmarks_path = args.landmarks or landmark_sidecar_path(args.shape)
    indices = read_landmarks(landmarks_path)
    s_mesh.landmark_indices = indices
    p_mesh.landmark_indices = indices
    vis = _read_floats(args.visibility)
    pose = self_align(p_mesh, s_mesh, vis, eps=args.eps, weighted_scale=args.weighted_scale)
    _atomic(args.out, lambda tmp: write_pose(tmp, pose))
    return EXIT_OK


def _collect_eval_pairs(pred_path, gt_path):
    if os.path.isdir(pred_path) != os.path.isdir(gt_path):
        raise ValueError("--pred and --gt must both be files or both directories")
    if os.path.isdir(pred_path):
        names = sorted(fn for fn in os.listdir(pred_path) if not fn.startswith("."))
        if not names:
            raise EmptyInputError(f"no prediction files in {pred_path}")
        pairs = []
        for name in names:
            gt_file = os.path.join(gt_path, name)
            if not os.path.exists(gt_file):
                raise FileNotFoundError(f"missing ground-truth file {gt_file}")
            pairs.append((_read_points(os.path.join(pred_path, name)), _read_points(gt_file)))
        return pairs
    return [(_read_points(pred_path), _read_points(gt_path))]


def cmd_eval(args) -> int:
    pairs = _collect_eval_pairs(args.pred, args.gt)
    pred_angles = _read_angle_rows(args.pred_angles) if args.pred_angles else None
    gt_angles = _read_angle_rows(args.gt_angles) if args.gt_angles else None
    for name, angles in (("--pred-angles", pred_angles), ("--gt-angles", gt_angles)):
        if angles is not None and len(angles) != len(pairs):
            raise ValueError(f"{name}: {len(angles)} rows for {len(pairs)} samples")

    keep = np.arange(len(pairs))
    dropped = None
    if args.fix_filter:
        if pred_angles is None or gt_angles is None:
            raise ValueError("--fix-filter needs both angle files")
        errors = metrics.angle_errors(pred_angles, gt_angles)
        keep, dropped_idx = metrics.gimbal_fix_filter(errors)
        dropped = len(dropped_idx)
        if keep.size == 0:
            raise EmptyInputError("gimbal fix filter dropped every sample")

    samples = [
        metrics.MetricSample(
            pred_points=pairs[i][0],
            gt_points=pairs[i][1],
            pred_angles=None if pred_angles is None else pred_angles[i],
            gt_angles=None if gt_angles is None else gt_angles[i],
        )
        for i in keep
    ]
    report, mae = metrics.samples_report(
        samples, normalizer=args.normalizer, dims=args.dims,
        left_outer_idx=args.left_eye, right_outer_idx=args.right_eye, seed=args.seed,
    )
    for notice in report.notices:
        print(f"notice: {notice}", file=sys.stderr)

    text = metrics.report_to_text(
        report, mae=mae, mae_count=int(keep.size),
        dropped=dropped, total=len(pairs) if dropped is not None else None,
    )
    sys.stdout.write(text)
    if args.out:
        _atomic_text(args.out, text)
        plots.save_eval_figure(_figure_path(args.out), report=report, mae=mae)
    return EXIT_OK


def cmd_synth(args) -> int:
    template, mapping, _, _ = fitting.standard_assets(
        rows=args.density, cols=args.density, uv_resolution=(args.resolution, args.resolution)
    )
    occlusion = OcclusionSpec(
        seed=0,
        count_range=(args.occluders[0], args.occluders[1]),
        size_range=(args.occluder_size[0], args.occluder_size[1]),
    )
    samples = fitting.synth_dataset(
        seed=args.seed,
        count=args.count,
        pose_ranges=fitting.PoseRanges(
            yaw=tuple(args.yaw), pitch=tuple(args.pitch), roll=tuple(args.roll),
            scale=tuple(args.scale),
        ),
        deformation_magnitude=args.deformation,
        occlusion=occlusion,
        template=template,
        mapping=mapping,
        mask_dims=(args.mask_size, args.mask_size),
    )
    if not samples:
        raise EmptyInputError("no samples requested")
    os.makedirs(args.out, exist_ok=True)
    for index, sample in enumerate(samples):
        directory = os.path.join(args.out, f"sample_{index:03d}")
        os.makedirs(directory, exist_ok=True)

        def path(name):
            return os.path.join(directory, name)

        _atomic(path("posed.obj"), lambda tmp: write_obj(tmp, sample.posed_mesh))
        _atomic(path("posed.landmarks.txt"),
                lambda tmp: write_landmarks(tmp, template.landmark_indices))
        _atomic_text(path("visibility.txt"),
                     "".join(f"{v:.17g}\n" for v in sample.landmark_visibility))
        _atomic(path("face_mask.pgm"), lambda tmp: write_pgm(tmp, sample.face_mask))
        _atomic(path("occluder.pgm"), lambda tmp: write_pgm(tmp, sample.occluder))
        _atomic(path("attention.pgm"), lambda tmp: write_pgm(tmp, sample.attention))
        _atomic(path("gt_pose.txt"), lambda tmp: write_pose(tmp, sample.pose))
        _atomic(path("gt_shape.obj"), lambda tmp: write_obj(tmp, sample.shape_mesh))
        _atomic_text(path("gt_deformation.txt"),
                     "".join(f"{dx:.17g} {dy:.17g} {dz:.17g}\n" for dx, dy, dz in sample.deformation))
        _write_key_values(path("meta.cfg"), {
            "rows": args.density, "cols": args.density,
            "uv_height": args.resolution, "uv_width": args.resolution,
            "mask_height": args.mask_size, "mask_width": args.mask_size,
            "seed": args.seed, "index": index,
        })
    return EXIT_OK


def cmd_fit(args) -> int:
    meta = _read_key_values(os.path.join(args.sample, "meta.cfg"))
    rows, cols = int(meta["rows"]), int(meta["cols"])
    uv_res = (int(meta["uv_height"]), int(meta["uv_width"]))
    template, mapping, weight_mask, edges = fitting.standard_assets(
        rows=rows, cols=cols, uv_resolution=uv_res
    )
    posed = read_obj(os.path.join(args.sample, "posed.obj"))
    posed.landmark_indices = template.landmark_indices
    vis = _read_floats(os.path.join(args.sample, "visibility.txt"))
    cfg = fitting.FitConfig(
        step_size=args.step, max_iterations=args.iterations, tolerance=args.tolerance,
        eps=args.eps,
    )
    result = fitting.fit_sample(posed, vis, cfg, template, mapping, weight_mask, edges)
    os.makedirs(args.out, exist_ok=True)
    recovered = template.with_vertices(template.vertices + result.deformation)
    _atomic(os.path.join(args.out, "recovered.obj"), lambda tmp: write_obj(tmp, recovered))
    _atomic(os.path.join(args.out, "recovered.landmarks.txt"),
            lambda tmp: write_landmarks(tmp, template.landmark_indices))
    _atomic(os.path.join(args.out, "pose.txt"), lambda tmp: write_pose(tmp, result.pose))
    trace_path = os.path.join(args.out, "trace.csv")
    _atomic(trace_path, lambda tmp: fitting.write_trace_csv(tmp, result.trace))
    plots.save_trace_figure(_figure_path(trace_path), result.trace, fitting.TRACE_HEADER)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Registry]]:
    parser = argparse.ArgumentParser(
        prog="uvface",
        description="UV position-map face toolkit: templates, alignment, "
                    "synthesis, fitting, and evaluation.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    registries: dict[str, _Registry] = {}

    def new_sub(name, help_text, func):
        sub = subparsers.add_parser(name, help=help_text)
        reg = _Registry()
        registries[name] = reg
        sub.set_defaults(func=func)
        _add(sub, reg, "--config", help="flat key=value config file; flags override")
        return sub, reg

    sub, reg = new_sub("template", "write the procedural mean-face template", cmd_template)
    _add(sub, reg, "--rows", type=int, default=64, help="template grid rows")
    _add(sub, reg, "--cols", type=int, default=64, help="template grid cols")
    _add(sub, reg, "--out", required=True, help="output OBJ path")

    uv = subparsers.add_parser("uv", help="encode/decode UV position maps")
    uv_sub = uv.add_subparsers(dest="uv_command", required=True)

    enc = uv_sub.add_parser("encode", help="mesh OBJ to binary position map")
    reg = _Registry()
    registries["encode"] = reg
    enc.set_defaults(func=cmd_uv_encode)
    _add(enc, reg, "--config", help="flat key=value config file; flags override")
    _add(enc, reg, "--mesh", required=True, help="input OBJ (template topology)")
    _add(enc, reg, "--out", required=True, help="output .uvpm path")
    _add(enc, reg, "--rows", type=int, default=64)
    _add(enc, reg, "--cols", type=int, default=64)
    _add(enc, reg, "--height", type=int, default=256, help="map rows")
    _add(enc, reg, "--width", type=int, default=256, help="map cols")
    _add(enc, reg, "--preview", help="also render the map to this PNG")

    dec = uv_sub.add_parser("decode", help="binary position map to mesh OBJ")
    reg = _Registry()
    registries["decode"] = reg
    dec.set_defaults(func=cmd_uv_decode)
    _add(dec, reg, "--config", help="flat key=value config file; flags override")
    _add(dec, reg, "--map", required=True, help="input .uvpm path")
    _add(dec, reg, "--out", required=True, help="output OBJ path")
    _add(dec, reg, "--rows", type=int, default=64)
    _add(dec, reg, "--cols", type=int, default=64)

    sub, reg = new_sub("align", "estimate the pose between two registered meshes", cmd_align)
    _add(sub, reg, "shape", help="pose-independent mesh OBJ")
    _add(sub, reg, "posed", help="pose-dependent mesh OBJ")
    _add(sub, reg, "visibility", help="per-landmark (or per-vertex) visibility file")
    _add(sub, reg, "--out", required=True, help="output pose text file")
    _add(sub, reg, "--landmarks", help="landmark sidecar (default: next to the shape OBJ)")
    _add(sub, reg, "--eps", type=float, default=0.1, help="visibility weight floor")
    _add(sub, reg, "--weighted-scale", action="store_true",
         help="weight the scale sums by visibility too")

    sub, reg = new_sub("eval", "landmark/pose metrics report", cmd_eval)
    _add(sub, reg, "--pred", required=True, help="prediction point file or directory")
    _add(sub, reg, "--gt", required=True, help="ground-truth point file or directory")
    _add(sub, reg, "--pred-angles", help="predicted 'yaw pitch roll' rows, one per sample")
    _add(sub, reg, "--gt-angles", help="ground-truth 'yaw pitch roll' rows, one per sample")
    _add(sub, reg, "--normalizer", choices=("bbox", "interocular"), default="bbox")
    _add(sub, reg, "--dims", type=int, choices=(2, 3), default=2,
         help="distance dimensionality for the bbox normalizer")
    _add(sub, reg, "--left-eye", type=int, default=36, help="left outer eye landmark index")
    _add(sub, reg, "--right-eye", type=int, default=45, help="right outer eye landmark index")
    _add(sub, reg, "--fix-filter", action="store_true",
         help="drop gimbal-artifact samples (pitch/roll err > 20, yaw err < 5)")
    _add(sub, reg, "--seed", type=int, default=0, help="balanced-subset sampling seed")
    _add(sub, reg, "--out", help="write the report here (figure rendered alongside)")

    sub, reg = new_sub("synth", "generate synthetic posed samples", cmd_synth)
    _add(sub, reg, "--out", required=True, help="output directory")
    _add(sub, reg, "--seed", type=int, required=True)
    _add(sub, reg, "--count", type=int, default=1)
    _add(sub, reg, "--density", type=int, default=32, help="template grid rows=cols")
    _add(sub, reg, "--resolution", type=int, default=64, help="UV map rows=cols")
    _add(sub, reg, "--mask-size", type=int, default=128, help="attention mask rows=cols")
    _add(sub, reg, "--yaw", type=float, nargs=2, default=[-90.0, 90.0])
    _add(sub, reg, "--pitch", type=float, nargs=2, default=[-25.0, 25.0])
    _add(sub, reg, "--roll", type=float, nargs=2, default=[-25.0, 25.0])
    _add(sub, reg, "--scale", type=float, nargs=2, default=[0.9, 1.1])
    _add(sub, reg, "--deformation", type=float, default=0.08,
         help="max deformation offset in model units")
    _add(sub, reg, "--occluders", type=int, nargs=2, default=[1, 3],
         help="occluder count range")
    _add(sub, reg, "--occluder-size", type=float, nargs=2, default=[0.15, 0.4],
         help="occluder size range as a fraction of the mask")

    sub, reg = new_sub("fit", "recover deformation and pose from a sample directory", cmd_fit)
    _add(sub, reg, "--sample", required=True, help="sample directory from 'synth'")
    _add(sub, reg, "--out", required=True, help="output directory")
    _add(sub, reg, "--step", type=float, default=0.5)
    _add(sub, reg, "--iterations", type=int, default=200)
    _add(sub, reg, "--tolerance", type=float, default=1e-10)
    _add(sub, reg, "--eps", type=float, default=0.1)

    return parser, registries


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registries = build_parser()
    args = parser.parse_args(argv)
    registry = registries.get(getattr(args, "uv_command", None) or args.command)
    try:
        if registry is not None:
            _apply_config(args, registry, argv)
        return args.func(args)
    except EmptyInputError as exc:
        print(f"uvface: empty input: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except _DEGENERACY as exc:
        print(f"uvface: degenerate configuration: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, ValueError) as exc:
        print(f"uvface: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
