import numpy as np
import pytest
import torch

from dadet.detector import BoxAnnotation, Detector, DetectorConfig

torch.set_num_threads(1)

CATEGORIES = ("circle", "square", "triangle")


@pytest.fixture
def small_config() -> DetectorConfig:
    return DetectorConfig(categories=CATEGORIES, channels=(4, 8, 8, 16))


@pytest.fixture
def detector(small_config) -> Detector:
    return Detector(small_config, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def sample_image(rng) -> np.ndarray:
    return rng.random((64, 96, 3)).astype(np.float32)


@pytest.fixture
def sample_annotations() -> tuple[BoxAnnotation, ...]:
    return (
        BoxAnnotation("circle", (10.0, 10.0, 40.0, 40.0)),
        BoxAnnotation("square", (50.0, 20.0, 90.0, 60.0)),
    )
