"""Procrustes-aligned surface error and the synthetic evaluation protocol."""

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import Settings
from src.edgemap import canny_edges
from src.errors import DegenerateConfigurationError, DimensionMismatchError
from src.fit_hard import hybrid_fit_hard, icef_fit
from src.fit_soft import hybrid_fit_soft
from src.landmark_fit import estimate_pose_pos, fit_landmarks, landmark_energy
from src.models import (
    ExperimentRecord,
    FitResult,
    GrayImage,
    LandmarkSet,
    Mesh,
    ProtocolConfig,
    ResultsTable,
    ShapeModel,
    SimilarityTransform,
    SyntheticScene,
)
from src.shape_model import instantiate
from src.synth import (
    add_landmark_noise,
    make_synthetic_model,
    render_scene,
    sample_subject,
    subject_seed,
)

logger = logging.getLogger(__name__)

METHOD_ORDER = ("mean-shape", "landmarks", "icef", "hard", "soft")
METHOD_ALIASES = {"landmarks-only": "landmarks"}


def normalize_methods(methods: Iterable[str]) -> List[str]:
    """Canonical names in pipeline order; unknown names raise ValueError."""
    names = {METHOD_ALIASES.get(m, m) for m in methods}
    unknown = names - set(METHOD_ORDER)
    if unknown:
        raise ValueError(f"unknown method(s): {', '.join(sorted(unknown))}")
    return [m for m in METHOD_ORDER if m in names]


def procrustes_align(source: Mesh, target: Mesh) -> Tuple[Mesh, SimilarityTransform]:
    """Similarity transform of ``source`` onto ``target`` minimising squared vertex distances."""
    src, dst = source.vertices, target.vertices
    if src.shape != dst.shape:
        raise DimensionMismatchError(
            f"meshes have {src.shape[0]} and {dst.shape[0]} vertices"
        )
    mu_src, mu_dst = src.mean(axis=0), dst.mean(axis=0)
    x, y = src - mu_src, dst - mu_dst
    var_src = float(np.mean(np.sum(x**2, axis=1)))
    if var_src <= np.finfo(float).tiny:
        raise DegenerateConfigurationError("source vertices are all coincident")

    u, d, vt = np.linalg.svd(y.T @ x / src.shape[0])
    signs = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        signs[2] = -1.0
    rotation = u @ np.diag(signs) @ vt
    scale = float(np.sum(d * signs) / var_src)
    transform = SimilarityTransform(
        rotation=rotation, translation=mu_dst - scale * rotation @ mu_src, scale=scale
    )
    return Mesh(vertices=transform.apply(src), topology=source.topology), transform


def mean_vertex_error(aligned: Mesh, truth: Mesh) -> float:
    """Mean per-vertex Euclidean distance (not RMS)."""
    if aligned.vertices.shape != truth.vertices.shape:
        raise DimensionMismatchError(
            f"meshes have {aligned.vertices.shape[0]} and {truth.vertices.shape[0]} vertices"
        )
    return float(np.mean(np.linalg.norm(aligned.vertices - truth.vertices, axis=1)))


def surface_error(model: ShapeModel, alpha: np.ndarray, truth_alpha: np.ndarray) -> float:
    truth = instantiate(model, truth_alpha)
    aligned, _ = procrustes_align(instantiate(model, alpha), truth)
    return mean_vertex_error(aligned, truth)


class MethodRun(NamedTuple):
    """Per-method fits and cumulative times; failed methods appear only in ``failures``."""

    results: Dict[str, FitResult]
    times: Dict[str, float]
    failures: Dict[str, Exception]


# Methods whose starting point comes from the keyed method.
DOWNSTREAM = {
    "landmarks": ("icef", "hard", "soft"),
    "icef": ("hard",),
}


def fit_methods(
    model: ShapeModel,
    landmarks: LandmarkSet,
    image: GrayImage,
    methods: Sequence[str],
    settings: Settings,
) -> MethodRun:
    """Run the requested methods, sharing the landmarks -> icef -> hard chain.

    Soft starts from the landmark-only fit. Times are cumulative along the chain.
    A failing stage is recorded against its own method and every method
    chained after it; the others still run.
    """
    methods = normalize_methods(methods)
    wanted = set(methods)
    results: Dict[str, FitResult] = {}
    times: Dict[str, float] = {}
    failures: Dict[str, Exception] = {}

    def fail(method: str, error: Exception) -> None:
        logger.error(f"{method} fit failed: {type(error).__name__}: {error}")
        for name in (method,) + DOWNSTREAM.get(method, ()):
            failures.setdefault(name, error)

    def run() -> MethodRun:
        return MethodRun(
            {m: results[m] for m in methods if m in results},
            {m: times[m] for m in methods if m in results},
            {m: failures[m] for m in methods if m in failures},
        )

    if "mean-shape" in wanted:
        start = time.perf_counter()
        try:
            mean = np.zeros(model.n_components)
            pose = estimate_pose_pos(model.mean_vertices[landmarks.vertex_ids], landmarks.points)
            results["mean-shape"] = FitResult.from_estimate(
                "mean-shape", mean, pose, landmark_energy(model, landmarks, mean, pose)
            )
            times["mean-shape"] = time.perf_counter() - start
        except Exception as e:
            fail("mean-shape", e)

    if not wanted & {"landmarks", "icef", "hard", "soft"}:
        return run()

    start = time.perf_counter()
    try:
        base = fit_landmarks(model, landmarks, settings.landmark_fit)
        results["landmarks"] = FitResult.from_estimate(
            "landmarks", base.alpha, base.pose, base.energy, stages=base.stages
        )
        times["landmarks"] = time.perf_counter() - start
    except Exception as e:
        fail("landmarks", e)
        return run()

    if wanted & {"icef", "hard"}:
        try:
            edges = canny_edges(
                image, settings.canny_low, settings.canny_high, settings.canny_sigma
            )
            icef = icef_fit(
                model,
                landmarks,
                edges,
                (base.alpha, base.pose),
                settings.hard.icef_iters,
                settings.hard,
                settings.landmark_fit.model_copy(update={"hyperbox_k": settings.hard.hyperbox_k}),
            )
            energy = icef.stages[-1].energy if icef.stages else base.energy
            results["icef"] = FitResult.from_estimate(
                "icef",
                icef.alpha,
                icef.pose,
                energy,
                stages=base.stages + icef.stages,
                correspondence_counts=icef.kept_counts,
                warnings=icef.warnings,
            )
            times["icef"] = time.perf_counter() - start
        except Exception as e:
            fail("icef", e)
        else:
            if "hard" in wanted:
                try:
                    hard = hybrid_fit_hard(
                        model, landmarks, edges, (icef.alpha, icef.pose), settings.hard
                    )
                    results["hard"] = hard.model_copy(
                        update={
                            "stages": results["icef"].stages + hard.stages,
                            "warnings": icef.warnings + hard.warnings,
                        }
                    )
                    times["hard"] = time.perf_counter() - start
                except Exception as e:
                    fail("hard", e)

    if "soft" in wanted:
        soft_start = time.perf_counter()
        try:
            soft = hybrid_fit_soft(model, landmarks, image, (base.alpha, base.pose), settings.soft)
            results["soft"] = soft.model_copy(update={"stages": base.stages + soft.stages})
            times["soft"] = times["landmarks"] + time.perf_counter() - soft_start
        except Exception as e:
            fail("soft", e)

    return run()


def evaluate_scene(
    model: ShapeModel,
    scene: SyntheticScene,
    landmarks: LandmarkSet,
    sigma: float,
    methods: Sequence[str],
    settings: Settings,
) -> List[ExperimentRecord]:
    """Fit one scene with every method; failures become records without an error value."""
    methods = normalize_methods(methods)

    def record(method: str, **kwargs) -> ExperimentRecord:
        return ExperimentRecord(
            scene_id=scene.scene_id,
            subject=scene.subject,
            yaw=scene.yaw,
            sigma=sigma,
            method=method,
            **kwargs,
        )

    try:
        run = fit_methods(model, landmarks, scene.image, methods, settings)
    except Exception as e:
        logger.error(f"Scene {scene.scene_id} (sigma={sigma}) failed: {e}")
        return [record(m, status=f"failed: {type(e).__name__}: {e}") for m in methods]

    records = []
    for method in methods:
        if method in run.failures:
            e = run.failures[method]
            logger.warning(f"{method} on {scene.scene_id} (sigma={sigma}) left blank")
            records.append(record(method, status=f"failed: {type(e).__name__}: {e}"))
            continue
        result = run.results[method]
        try:
            error = surface_error(model, result.alpha_array(), scene.ground_truth_alpha)
            records.append(
                record(
                    method,
                    error=error,
                    wall_time=run.times[method],
                    diagnostics={
                        "energy": result.energy,
                        "stages": len(result.stages),
                        "warnings": len(result.warnings),
                    },
                )
            )
        except Exception as e:
            logger.error(f"Scoring {method} on {scene.scene_id} failed: {e}")
            records.append(record(method, status=f"failed: {type(e).__name__}: {e}"))
    return records


def _scene_task(
    task: Tuple[ShapeModel, Settings, List[str], int, float]
) -> List[ExperimentRecord]:
    """One (subject, yaw) render evaluated at every noise level."""
    model, settings, methods, subject, yaw = task
    config = settings.protocol
    alpha = sample_subject(model, np.random.default_rng(subject_seed(config.seed, subject)))
    scene = render_scene(model, alpha, yaw, config.image_size, config.seed, subject)

    records = []
    for k, sigma in enumerate(config.noise_sigmas):
        noise_seed = np.random.SeedSequence(
            [config.seed, subject, config.yaw_angles.index(yaw), k]
        )
        landmarks = add_landmark_noise(
            scene.landmarks, sigma, int(noise_seed.generate_state(1)[0])
        )
        records += evaluate_scene(model, scene, landmarks, sigma, methods, settings)
    return records


class ProtocolRunner:
    """Generates the synthetic suite, fits every scene and aggregates the errors."""

    def __init__(self, settings: Settings, methods: Optional[Iterable[str]] = None):
        self.settings = settings
        self.config = settings.protocol
        self.methods = normalize_methods(methods or settings.methods)
        self.model: Optional[ShapeModel] = None

    def build_model(self) -> ShapeModel:
        if self.model is None:
            self.model = make_synthetic_model(
                self.config.n_vertices, self.config.n_components, self.config.seed
            )
        return self.model

    def run(self) -> ResultsTable:
        model = self.build_model()
        tasks = [
            (model, self.settings, self.methods, subject, yaw)
            for subject in range(self.config.subjects)
            for yaw in self.config.yaw_angles
        ]
        logger.info(
            f"Running protocol: {len(tasks)} scenes x {len(self.config.noise_sigmas)} "
            f"noise levels, methods {', '.join(self.methods)}, jobs={self.settings.jobs}"
        )

        records: List[ExperimentRecord] = []
        if self.settings.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.settings.jobs) as pool:
                for i, batch in enumerate(pool.map(_scene_task, tasks), start=1):
                    records += batch
                    logger.info(f"Protocol progress: {i}/{len(tasks)} scenes")
        else:
            for i, task in enumerate(tasks, start=1):
                records += _scene_task(task)
                logger.info(f"Protocol progress: {i}/{len(tasks)} scenes")

        failed = sum(1 for r in records if r.status != "ok")
        if failed:
            logger.warning(f"{failed} of {len(records)} fits failed and are left blank")
        return ResultsTable(
            methods=self.methods,
            angles=list(self.config.yaw_angles),
            sigmas=list(self.config.noise_sigmas),
            records=_sorted_records(records, self.methods, self.config),
        )


def _sorted_records(
    records: List[ExperimentRecord], methods: List[str], config: ProtocolConfig
) -> List[ExperimentRecord]:
    def key(r: ExperimentRecord):
        return (
            methods.index(r.method),
            config.noise_sigmas.index(r.sigma),
            config.yaw_angles.index(r.yaw),
            r.subject,
        )

    return sorted(records, key=key)


def run_protocol(settings: Settings, methods: Optional[Iterable[str]] = None) -> ResultsTable:
    return ProtocolRunner(settings, methods).run()


def _fmt(value: Optional[float]) -> str:
    return "" if value is None or not np.isfinite(value) else f"{value:.6f}"


def write_results_csv(
    table: ResultsTable, path: Union[str, Path], record_walltime: bool = False
) -> None:
    """One row per fit; wall time is left blank unless requested so reruns are byte-identical."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "angle", "sigma", "subject", "error", "walltime", "status"])
        for r in table.records:
            writer.writerow(
                [
                    r.method,
                    f"{r.yaw:g}",
                    f"{r.sigma:g}",
                    r.subject,
                    _fmt(r.error),
                    _fmt(r.wall_time) if record_walltime else "",
                    r.status,
                ]
            )


def summary_by_angle(table: ResultsTable, sigma: Optional[float] = None) -> List[List[str]]:
    """Rows per method, one column per yaw angle plus the overall mean."""
    sigma = table.sigmas[0] if sigma is None else sigma
    rows = [["method"] + [f"{a:g}" for a in table.angles] + ["mean"]]
    for method in table.methods:
        cells = [table.cell(method, angle=a, sigma=sigma) for a in table.angles]
        rows.append([method] + [_fmt(c) for c in cells] + [_fmt(table.cell(method, sigma=sigma))])
    return rows


def summary_by_sigma(table: ResultsTable) -> List[List[str]]:
    """Rows per method, one column per landmark noise level plus the overall mean."""
    rows = [["method"] + [f"{s:g}" for s in table.sigmas] + ["mean"]]
    for method in table.methods:
        cells = [table.cell(method, sigma=s) for s in table.sigmas]
        rows.append([method] + [_fmt(c) for c in cells] + [_fmt(table.cell(method))])
    return rows


def write_summaries(table: ResultsTable, directory: Union[str, Path]) -> None:
    """summary_angle.csv, summary_sigma.csv and a gnuplot-ready results.dat."""
    directory = Path(directory)
    for name, rows in (
        ("summary_angle.csv", summary_by_angle(table)),
        ("summary_sigma.csv", summary_by_sigma(table)),
    ):
        with open(directory / name, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)

    lines = ["# angle " + " ".join(table.methods)]
    for angle in table.angles:
        cells = [table.cell(m, angle=angle, sigma=table.sigmas[0]) for m in table.methods]
        lines.append(f"{angle:g} " + " ".join(_fmt(c) or "NaN" for c in cells))
    (directory / "results.dat").write_text("\n".join(lines) + "\n")
