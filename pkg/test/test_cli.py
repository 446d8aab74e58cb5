import json

import pytest

from src.cli import EXIT_IO, EXIT_OK, EXIT_PARSE, build_parser, load_settings, run

SCENE = "subject00_yaw+000_seed0"
PROTOCOL = [
    "--subjects", "1",
    "--angles", "0,30",
    "--n-vertices", "128",
    "--n-components", "6",
    "--image-size", "64",
]


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--out", str(out)] + PROTOCOL) == EXIT_OK
    return out


def test_synth_writes_model_and_scenes(bundle):
    assert (bundle / "model.e3dm").is_file()
    scenes = sorted(p.name for p in (bundle / "scenes").iterdir())
    assert scenes == [SCENE, "subject00_yaw+030_seed0"]
    for name in ("image.pgm", "landmarks.csv", "ground_truth.json", "scene_meta.json"):
        assert (bundle / "scenes" / SCENE / name).is_file()


def test_synth_is_byte_identical(bundle, tmp_path):
    assert run(["synth", "--out", str(tmp_path)] + PROTOCOL) == EXIT_OK
    for path in sorted(bundle.rglob("*")):
        if path.is_file():
            twin = tmp_path / path.relative_to(bundle)
            assert twin.read_bytes() == path.read_bytes(), path.name


def test_fit_landmarks_only(bundle, tmp_path):
    code = run([
        "fit", "--method", "landmarks-only",
        "--model", str(bundle / "model.e3dm"),
        "--scene", str(bundle / "scenes" / SCENE),
        "--out", str(tmp_path),
    ])
    assert code == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["landmarks"]["mean_vertex_error"] >= 0
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["method"] == "landmarks"
    for name in ("mesh.obj", "depth.pgm", "contour.png"):
        assert (tmp_path / name).is_file()


def test_fit_hard_with_explicit_inputs(bundle, tmp_path):
    scene = bundle / "scenes" / SCENE
    code = run([
        "fit", "--method", "hard", "--icef-iters", "2",
        "--model", str(bundle / "model.e3dm"),
        "--image", str(scene / "image.pgm"),
        "--landmarks", str(scene / "landmarks.csv"),
        "--out", str(tmp_path),
    ])
    assert code == EXIT_OK
    result = json.loads((tmp_path / "result.json").read_text())
    assert result["method"] == "hard"
    assert any(stage["name"] == "final_boundary" for stage in result["stages"])
    assert "mean_vertex_error" not in json.loads((tmp_path / "summary.json").read_text())["hard"]


def test_missing_landmarks_is_io_error(bundle, tmp_path):
    code = run([
        "fit", "--method", "landmarks",
        "--model", str(bundle / "model.e3dm"),
        "--image", str(bundle / "scenes" / SCENE / "image.pgm"),
        "--landmarks", str(tmp_path / "absent.csv"),
        "--out", str(tmp_path / "out"),
    ])
    assert code == EXIT_IO


def test_malformed_model_is_parse_error(bundle, tmp_path):
    model = tmp_path / "broken.e3dm"
    model.write_bytes(b"NOPE" + bytes(40))
    code = run([
        "fit", "--model", str(model),
        "--scene", str(bundle / "scenes" / SCENE),
        "--out", str(tmp_path / "out"),
    ])
    assert code == EXIT_PARSE


def test_eval_mean_shape(tmp_path):
    code = run(["eval", "--out", str(tmp_path), "--methods", "mean-shape"] + PROTOCOL)
    assert code == EXIT_OK
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert len(rows) == 3
    assert all(row.startswith("mean-shape,") for row in rows[1:])
    for name in ("summary_angle.csv", "summary_sigma.csv", "results.dat"):
        assert (tmp_path / name).is_file()


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "edgefit.toml"
    config.write_text(
        "canny_sigma = 2.0\n"
        "[hard]\nicef_iters = 3\n"
        "[hard.weights]\nw1 = 0.5\n"
        "[protocol]\nsubjects = 4\nimage_size = 96\n"
    )
    args = build_parser().parse_args(
        ["eval", "--out", str(tmp_path), "--config", str(config), "--subjects", "2", "--w2", "0.3"]
    )
    settings = load_settings(args)

    assert settings.canny_sigma == 2.0
    assert settings.hard.icef_iters == 3
    assert settings.protocol.subjects == 2
    assert settings.protocol.image_size == 96
    assert settings.hard.weights.w1 == 0.5
    assert settings.hard.weights.w2 == 0.3
    assert settings.soft.weights.w2 == 0.3


def test_unknown_method_rejected(tmp_path):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["fit", "--method", "magic", "--model", "m", "--out", str(tmp_path)])
