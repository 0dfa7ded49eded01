import numpy as np
import pytest
import torch

from erdet.errors import ConfigurationError
from erdet.tinydet.model import (
    HeadConfig,
    TinyDetector,
    forward,
    grid_centers,
    images_to_tensor,
)


def test_forward_shapes(small_head):
    torch.manual_seed(0)
    model = TinyDetector(small_head).eval()
    responses = forward(model, torch.rand(2, 3, 32, 32))

    assert responses.batch_size == 2
    assert responses.num_categories == 4
    assert responses.num_bins == 8
    assert [lvl.stride for lvl in responses.levels] == [8, 16]
    assert [lvl.grid_shape for lvl in responses.levels] == [(4, 4), (2, 2)]
    assert responses.num_locations == 20
    assert responses.levels[0].reg_logits.shape == (2, 4, 4, 4, 8)
    assert responses.levels[1].features.shape == (2, 16, 2, 2)
    assert responses.is_finite()


def test_forward_single_image(small_head):
    model = TinyDetector(small_head).eval()
    responses = forward(model, torch.rand(3, 32, 32))
    assert responses.batch_size == 1


def test_forward_rejects_wrong_size(small_head):
    model = TinyDetector(small_head)
    with pytest.raises(ConfigurationError):
        forward(model, torch.rand(1, 3, 48, 48))


def test_forward_is_deterministic(small_head):
    torch.manual_seed(1)
    model = TinyDetector(small_head).eval()
    images = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        a = forward(model, images)
        b = forward(model, images)
    for la, lb in zip(a.levels, b.levels):
        assert torch.equal(la.cls_logits, lb.cls_logits)
        assert torch.equal(la.reg_logits, lb.reg_logits)


def test_zeroed_parameters_give_zero_logits(small_head):
    model = TinyDetector(small_head).eval()
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
        responses = forward(model, torch.rand(2, 3, 32, 32))
    for lvl in responses.levels:
        assert torch.count_nonzero(lvl.cls_logits) == 0
        assert torch.count_nonzero(lvl.reg_logits) == 0


def test_initial_scores_near_prior(small_head):
    model = TinyDetector(small_head).eval()
    with torch.no_grad():
        responses = forward(model, torch.rand(1, 3, 32, 32))
    scores = torch.sigmoid(responses.levels[0].cls_logits)
    assert scores.max() < 0.05


def test_image_slices_batch(small_head):
    model = TinyDetector(small_head).eval()
    with torch.no_grad():
        responses = forward(model, torch.rand(3, 3, 32, 32))
    one = responses.image(2)
    assert one.batch_size == 1
    assert torch.equal(one.levels[0].cls_logits[0], responses.levels[0].cls_logits[2])


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_bins": 1},
        {"pyramid_strides": (16, 8)},
        {"pyramid_strides": (32,)},
        {"channels": 10},
        {"image_size": 40},
    ],
)
def test_invalid_head_config(kwargs):
    with pytest.raises(ConfigurationError):
        HeadConfig(num_categories_total=4, **kwargs).validate()


def test_head_config_dict():
    config = HeadConfig(num_categories_total=4, pyramid_strides=[4, 8])
    assert config.pyramid_strides == (4, 8)
    assert HeadConfig.from_dict(config.to_dict()) == config


def test_grid_centers():
    centers = grid_centers(2, 3, 8, torch.empty(0))
    assert centers.shape == (6, 2)
    assert centers[0].tolist() == [4.0, 4.0]
    assert centers[2].tolist() == [20.0, 4.0]
    assert centers[3].tolist() == [4.0, 12.0]


def test_images_to_tensor():
    image = np.full((4, 4, 3), 255, dtype=np.uint8)
    batch = images_to_tensor([image, image])
    assert batch.shape == (2, 3, 4, 4)
    assert batch.dtype == torch.float32
    assert batch.max() == 1.0
