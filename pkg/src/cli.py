"""Command line: fit, compare, synth and eval subcommands."""

import argparse
import json
import logging
import tomllib
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from PIL import UnidentifiedImageError

from src.camera import sop
from src.config import Settings
from src.contour import occluding_boundary, rasterize_depth, save_depth_pgm
from src.edgemap import (
    build_cost_surface,
    canny_edges,
    kappa_for_scale,
    load_image,
    save_edges_pgm,
    save_surface_pgm,
)
from src.errors import (
    DegenerateConfigurationError,
    DegenerateViewError,
    MissingFileError,
    ModelFormatError,
    NoEdgesError,
    SolverError,
)
from src.evaluation import (
    METHOD_ORDER,
    fit_methods,
    normalize_methods,
    run_protocol,
    surface_error,
    write_results_csv,
    write_summaries,
)
from src.fit_hard import icef_correspond
from src.landmark_fit import load_landmarks
from src.models import FitResult, GrayImage, LandmarkSet, ShapeModel, SyntheticScene
from src.overlay import draw_correspondences, draw_points
from src.shape_model import export_obj, instantiate, load_model, save_model
from src.synth import (
    add_landmark_noise,
    generate_scenes,
    load_scene,
    make_synthetic_model,
    save_scene,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_DEGENERATE = 5

DEGENERATE_ERRORS = (
    DegenerateConfigurationError,
    DegenerateViewError,
    NoEdgesError,
    SolverError,
)


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file mirroring the settings")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    weights = argparse.ArgumentParser(add_help=False)
    weights.add_argument("--w1", type=float, help="landmark weight (default 0.15)")
    weights.add_argument("--w2", type=float, help="edge weight (default 0.45)")
    weights.add_argument("--w3", type=float, help="prior weight (default 0.40)")
    weights.add_argument("--icef-iters", type=int, help="ICEF iterations (default 10)")

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--model", type=Path, required=True, help="model file (.e3dm or .json)")
    inputs.add_argument("--scene", type=Path, help="scene bundle directory written by synth")
    inputs.add_argument("--image", type=Path, help="PGM or PNG image")
    inputs.add_argument("--landmarks", type=Path, help="vertexIndex,x,y CSV")

    protocol = argparse.ArgumentParser(add_help=False)
    protocol.add_argument("--subjects", type=int, help="number of subjects")
    protocol.add_argument("--angles", type=_float_list, help="comma-separated yaw angles")
    protocol.add_argument("--n-vertices", type=int, help="synthetic model vertex count")
    protocol.add_argument("--n-components", type=int, help="synthetic model components")
    protocol.add_argument("--image-size", type=int, help="render width and height")

    parser = argparse.ArgumentParser(
        prog="edgefit", description="Fit a PCA shape model to landmarks and image edges."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", parents=[common, weights, inputs], help="fit one image")
    fit.add_argument(
        "--method",
        default="hard",
        choices=list(METHOD_ORDER) + ["landmarks-only"],
        help="fitting method (default hard)",
    )
    sub.add_parser(
        "compare", parents=[common, weights, inputs], help="hard vs soft on one image"
    )

    synth = sub.add_parser("synth", parents=[common, protocol], help="write scene bundles")
    synth.add_argument("--sigma", type=float, default=0.0, help="landmark noise (px)")

    evaluate = sub.add_parser(
        "eval", parents=[common, weights, protocol], help="run the synthetic protocol"
    )
    evaluate.add_argument("--sigmas", type=_float_list, help="comma-separated noise levels")
    evaluate.add_argument("--methods", type=_str_list, help="comma-separated methods")
    evaluate.add_argument("--jobs", type=int, help="worker processes")
    evaluate.add_argument("--walltime", action="store_true", help="record wall time")
    return parser


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    def given(name: str) -> Optional[Any]:
        return getattr(args, name, None)

    overrides: Dict[str, Any] = {}
    weights = {k: given(k) for k in ("w1", "w2", "w3") if given(k) is not None}
    if weights:
        overrides["hard"] = {"weights": weights}
        overrides["soft"] = {"weights": dict(weights)}
    if given("icef_iters") is not None:
        overrides.setdefault("hard", {})["icef_iters"] = given("icef_iters")

    protocol = {
        field: given(flag)
        for flag, field in (
            ("seed", "seed"),
            ("subjects", "subjects"),
            ("angles", "yaw_angles"),
            ("sigmas", "noise_sigmas"),
            ("n_vertices", "n_vertices"),
            ("n_components", "n_components"),
            ("image_size", "image_size"),
        )
        if given(flag) is not None
    }
    if protocol:
        overrides["protocol"] = protocol
    if given("methods") is not None:
        overrides["methods"] = given("methods")
    if given("jobs") is not None:
        overrides["jobs"] = given("jobs")
    if given("walltime"):
        overrides["record_walltime"] = True
    return overrides


def load_settings(args: argparse.Namespace) -> Settings:
    """Flags override the config file, which overrides the environment and defaults."""
    values: Dict[str, Any] = {}
    if args.config is not None:
        with open(args.config, "rb") as f:
            values = tomllib.load(f)
    merged = _merge(Settings(**values).model_dump(), _flag_overrides(args))
    return Settings(**merged)


def _read_inputs(
    args: argparse.Namespace,
) -> Tuple[ShapeModel, GrayImage, LandmarkSet, Optional[SyntheticScene]]:
    model = load_model(args.model)
    scene = load_scene(args.scene) if args.scene is not None else None
    if args.image is not None:
        image = load_image(args.image)
    elif scene is not None:
        image = scene.image
    else:
        raise ValueError("either --image or --scene is required")
    if args.landmarks is not None:
        landmarks = load_landmarks(args.landmarks)
    elif scene is not None:
        landmarks = scene.landmarks
    else:
        raise ValueError("either --landmarks or --scene is required")
    return model, image, landmarks, scene


def _write_result(
    out: Path,
    suffix: str,
    model: ShapeModel,
    result: FitResult,
    image: GrayImage,
    settings: Settings,
) -> None:
    """result JSON, OBJ mesh and debug images for one fitted method."""
    alpha, pose = result.alpha_array(), result.pose()
    mesh = instantiate(model, alpha)
    (out / f"result{suffix}.json").write_text(result.model_dump_json(indent=2))
    export_obj(mesh, out / f"mesh{suffix}.obj")

    depth = rasterize_depth(mesh, pose, image.size)
    save_depth_pgm(depth, out / f"depth{suffix}.pgm")
    boundary = occluding_boundary(mesh, pose, image.size, depth)
    edges = canny_edges(image, settings.canny_low, settings.canny_high, settings.canny_sigma)
    contour = sop(mesh.vertices[boundary.indices], pose)
    draw_points(image, edges, contour, out / f"contour{suffix}.png")

    if result.method in ("icef", "hard") and not edges.empty:
        correspondences = icef_correspond(
            model,
            alpha,
            pose,
            edges,
            image.size,
            settings.hard.percentile_cut,
            settings.hard.dist_thresh_ratio,
        )
        draw_correspondences(
            image, edges, correspondences, out / f"correspondences{suffix}.png"
        )
        save_edges_pgm(edges, out / f"edges{suffix}.pgm")
    if result.method == "soft":
        surface = build_cost_surface(
            image,
            settings.soft.thresholds,
            settings.soft.scales,
            kappa_for_scale(model, pose.scale, settings.soft.kappa_fraction),
            settings.soft.detector_sigma,
        )
        save_surface_pgm(surface, out / f"cost_surface{suffix}.pgm")


def _report(
    model: ShapeModel, result: FitResult, scene: Optional[SyntheticScene]
) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"energy": result.energy, "warnings": result.warnings}
    if scene is not None:
        entry["mean_vertex_error"] = surface_error(
            model, result.alpha_array(), scene.ground_truth_alpha
        )
    return entry


def cmd_fit(args: argparse.Namespace) -> int:
    settings = load_settings(args)
    model, image, landmarks, scene = _read_inputs(args)
    method = normalize_methods([args.method])[0]
    args.out.mkdir(parents=True, exist_ok=True)

    run = fit_methods(model, landmarks, image, [method], settings)
    if method in run.failures:
        raise run.failures[method]
    result = run.results[method]
    _write_result(args.out, "", model, result, image, settings)
    report = _report(model, result, scene)
    (args.out / "summary.json").write_text(
        json.dumps({method: report}, indent=2, sort_keys=True)
    )
    logger.info(f"Fit with {method}: E={result.energy:.6g}, written to {args.out}")
    if "mean_vertex_error" in report:
        logger.info(f"Mean vertex error vs ground truth: {report['mean_vertex_error']:.4f}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    settings = load_settings(args)
    model, image, landmarks, scene = _read_inputs(args)
    args.out.mkdir(parents=True, exist_ok=True)

    run = fit_methods(model, landmarks, image, ["hard", "soft"], settings)
    if not run.results:
        raise next(iter(run.failures.values()))
    summary = {}
    for method, error in run.failures.items():
        summary[method] = {"failed": f"{type(error).__name__}: {error}"}
    for method, result in run.results.items():
        _write_result(args.out, f"_{method}", model, result, image, settings)
        summary[method] = _report(model, result, scene)
        logger.info(f"{method}: {summary[method]}")
    (args.out / "compare.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    settings = load_settings(args)
    config = settings.protocol
    args.out.mkdir(parents=True, exist_ok=True)

    model = make_synthetic_model(config.n_vertices, config.n_components, config.seed)
    save_model(model, args.out / "model.e3dm")
    count = 0
    for scene in generate_scenes(model, config):
        if args.sigma > 0:
            noisy = add_landmark_noise(scene.landmarks, args.sigma, config.seed + count)
            scene = scene.model_copy(update={"landmarks": noisy, "sigma": args.sigma})
        save_scene(scene, args.out / "scenes" / scene.scene_id)
        count += 1
    logger.info(f"Wrote model and {count} scene bundles to {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    settings = load_settings(args)
    args.out.mkdir(parents=True, exist_ok=True)

    table = run_protocol(settings)
    write_results_csv(table, args.out / "results.csv", settings.record_walltime)
    write_summaries(table, args.out)
    for row in table.methods:
        logger.info(f"{row}: mean error {table.cell(row, sigma=table.sigmas[0]):.4f}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "fit": cmd_fit,
    "compare": cmd_compare,
    "synth": cmd_synth,
    "eval": cmd_eval,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch, and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return COMMANDS[args.command](args)
    except UnidentifiedImageError as e:
        logger.error(f"Could not parse image: {e}")
        return EXIT_PARSE
    except (MissingFileError, OSError) as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_IO
    except DEGENERATE_ERRORS as e:
        logger.error(f"Fit degenerated: {e}")
        return EXIT_DEGENERATE
    except (ModelFormatError, tomllib.TOMLDecodeError, json.JSONDecodeError, ValueError) as e:
        logger.error(f"Could not parse input: {e}")
        return EXIT_PARSE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
