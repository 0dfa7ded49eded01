import boto3
import moto
import pytest
import torch

from erdet.synthshapes import SceneSpec, generate_dataset
from erdet.tinydet.model import HeadConfig, LevelResponse, ResponseSet


def make_responses(
    batch: int = 1,
    grids=((4, 4), (2, 2)),
    strides=(8, 16),
    num_categories: int = 4,
    num_bins: int = 8,
    seed: int = 0,
    scale: float = 1.0,
    channels: int = 0,
    dtype=torch.float32,
    requires_grad: bool = False,
) -> ResponseSet:
    """A random ResponseSet; channels > 0 also fills the feature maps."""
    generator = torch.Generator().manual_seed(seed)
    levels = []
    for (h, w), stride in zip(grids, strides):
        cls = torch.randn(batch, h, w, num_categories, generator=generator, dtype=dtype) * scale
        reg = torch.randn(batch, h, w, 4, num_bins, generator=generator, dtype=dtype) * scale
        feats = None
        if channels:
            feats = torch.randn(batch, channels, h, w, generator=generator, dtype=dtype)
        if requires_grad:
            cls.requires_grad_(True)
            reg.requires_grad_(True)
            if feats is not None:
                feats.requires_grad_(True)
        levels.append(LevelResponse(stride, cls, reg, feats))
    return ResponseSet(levels=tuple(levels), image_size=grids[0][0] * strides[0])


def clone_responses(responses: ResponseSet, requires_grad: bool = False) -> ResponseSet:
    levels = []
    for lvl in responses.levels:
        cls = lvl.cls_logits.detach().clone().requires_grad_(requires_grad)
        reg = lvl.reg_logits.detach().clone().requires_grad_(requires_grad)
        feats = None
        if lvl.features is not None:
            feats = lvl.features.detach().clone().requires_grad_(requires_grad)
        levels.append(LevelResponse(lvl.stride, cls, reg, feats))
    return ResponseSet(levels=tuple(levels), image_size=responses.image_size)


@pytest.fixture
def small_head():
    return HeadConfig(
        num_categories_total=4, num_bins=8, pyramid_strides=(8, 16), channels=16, image_size=32
    )


@pytest.fixture(scope="session")
def tiny_spec():
    return SceneSpec(
        image_size=64, num_categories=4, objects_per_image=(1, 3), min_box_side=12, seed=3
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_spec):
    return generate_dataset(tiny_spec, 16, 8, tmp_path_factory.mktemp("shapes"))


@pytest.fixture
def tiny_head(tiny_spec):
    return HeadConfig(
        num_categories_total=tiny_spec.num_categories,
        num_bins=8,
        pyramid_strides=(8, 16),
        channels=16,
        image_size=tiny_spec.image_size,
    )


@pytest.fixture(autouse=True)
def aws_credentials(monkeypatch):
    """Fake credentials so that no test can reach a real AWS account."""
    monkeypatch.setenv("AWS_ACCESS_KEY_ID", "testing")
    monkeypatch.setenv("AWS_SECRET_ACCESS_KEY", "testing")
    monkeypatch.setenv("AWS_SECURITY_TOKEN", "testing")
    monkeypatch.setenv("AWS_SESSION_TOKEN", "testing")
    monkeypatch.setenv("AWS_DEFAULT_REGION", "eu-west-2")


@pytest.fixture
def s3_client():
    # Must be a context manager that yields, so the mock stays active for the whole test.
    with moto.mock_aws():
        client = boto3.client("s3")
        client.create_bucket(
            Bucket="testbucket", CreateBucketConfiguration={"LocationConstraint": "eu-west-2"}
        )
        yield client
