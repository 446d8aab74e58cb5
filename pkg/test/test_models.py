import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import DimensionMismatchError, InvalidArgumentError, ModelValidationError
from src.models import HardFitConfig, HybridWeights, LandmarkSet, Pose, ShapeModel

REFLECTION = np.diag([1.0, 1.0, -1.0])


def test_negative_variance_raises_model_error(toy_model):
    with pytest.raises(ModelValidationError) as exc:
        ShapeModel(
            mean_shape=toy_model.mean_shape,
            components=toy_model.components,
            variances=[4.0, -1.0],
            topology=toy_model.topology,
        )
    assert exc.value.field == "variances"


def test_component_rows_raise_dimension_error(toy_model):
    with pytest.raises(DimensionMismatchError):
        ShapeModel(
            mean_shape=toy_model.mean_shape,
            components=toy_model.components[:6],
            variances=toy_model.variances,
            topology=toy_model.topology,
        )


def test_reflection_pose_rejected():
    with pytest.raises(InvalidArgumentError, match="determinant"):
        Pose(rotation=REFLECTION, translation=[0.0, 0.0], scale=1.0)


def test_field_constraint_raises_domain_error():
    with pytest.raises(InvalidArgumentError):
        Pose(rotation=np.eye(3), translation=[0.0, 0.0], scale=0.0)


def test_landmark_length_mismatch():
    with pytest.raises(DimensionMismatchError):
        LandmarkSet(vertex_ids=[0, 1, 2], points=[[0.0, 0.0], [1.0, 1.0]])


def test_duplicate_landmark_ids():
    with pytest.raises(InvalidArgumentError, match="distinct"):
        LandmarkSet(vertex_ids=[0, 0], points=[[0.0, 0.0], [1.0, 1.0]])


def test_all_zero_weights_rejected():
    with pytest.raises(InvalidArgumentError):
        HybridWeights(w1=0.0, w2=0.0, w3=0.0)


def test_nested_weights_surface_inner_error():
    with pytest.raises(InvalidArgumentError, match="weight"):
        HardFitConfig(weights={"w1": 0.0, "w2": 0.0, "w3": 0.0})


def test_model_validate_keeps_pydantic_error():
    with pytest.raises(ValidationError):
        Pose.model_validate({"rotation": REFLECTION, "translation": [0.0, 0.0], "scale": 1.0})
    with pytest.raises(ValidationError):
        HardFitConfig.model_validate({"weights": {"w1": 0.0, "w2": 0.0, "w3": 0.0}})
