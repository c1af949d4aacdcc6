import pytest
import torch

from stagevqa import ModelConfig, SynthSpec, generate_synthetic_dataset


SMALL_SPEC = SynthSpec(
    n_examples=4,
    frames_range=(8, 10),
    span_length_range=(2, 4),
    objects_range=(3, 4),
    d_vis=16,
    d_txt=24,
)


@pytest.fixture
def small_config() -> ModelConfig:
    return ModelConfig(
        d=16, d_vis=16, d_txt=24, max_objects=8, batch_size=2, seed=7
    )


@pytest.fixture
def small_examples():
    return generate_synthetic_dataset(SMALL_SPEC, seed=42)


@pytest.fixture
def example(small_examples):
    return small_examples[0]


@pytest.fixture
def model(small_config):
    torch.manual_seed(small_config.seed)
    from stagevqa import STAGE

    return STAGE(small_config)


@pytest.fixture
def double_model(small_config):
    torch.manual_seed(small_config.seed)
    from stagevqa import STAGE

    return STAGE(small_config).double()


def central_difference(f, param: torch.Tensor, index: tuple, eps: float = 1e-6) -> float:
    """Two-sided finite difference of scalar f() along one parameter entry."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + eps
        f_plus = float(f())
        param[index] = orig - eps
        f_minus = float(f())
        param[index] = orig
    return (f_plus - f_minus) / (2 * eps)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)
