import logging

import boto3
import botocore.exceptions
import pytest
from botocore.stub import Stubber

from erdet.aws.s3 import is_boto_error_temporary, s3_key, upload_file_s3
from erdet.errors import TemporaryFailure


@pytest.fixture
def mock_bucket_name():
    return "testbucket"


@pytest.mark.parametrize(
    "prefix,relpath,expected",
    [
        ("", "step_0/metrics.json", "step_0/metrics.json"),
        ("runs/exp", "config.json", "runs/exp/config.json"),
        ("runs/exp/", "/config.json", "runs/exp/config.json"),
    ],
)
def test_s3_key(prefix, relpath, expected):
    assert s3_key(prefix, relpath) == expected


def test_upload_file_s3__success(s3_client, mock_bucket_name):
    body = "file contents"
    upload_file_s3(
        body=body,
        bucket=mock_bucket_name,
        key="exp/losses.csv",
        s3_client=s3_client,
        content_type="text/plain",
    )

    s3_files = s3_client.list_objects_v2(Bucket=mock_bucket_name)["Contents"]
    assert len(s3_files) == 1

    response = s3_client.get_object(Bucket=mock_bucket_name, Key="exp/losses.csv")
    assert response["Body"].read().decode("utf-8") == body
    assert response["ContentType"] == "text/plain"


def test_upload_file_s3__error(caplog, mock_bucket_name):
    s3 = boto3.client("s3")
    stubber = Stubber(s3)

    stubber.add_client_error(
        "put_object", service_error_code="500", service_message="Internal Server Error"
    )

    with stubber, caplog.at_level(logging.WARNING):
        with pytest.raises(botocore.exceptions.ClientError):
            upload_file_s3(s3_client=s3, body="test_data", bucket=mock_bucket_name, key="k")
        assert "File upload failed" in caplog.text


def test_upload_file_s3__temporary_error(caplog, mock_bucket_name):
    s3 = boto3.client("s3")
    stubber = Stubber(s3)

    stubber.add_client_error(
        "put_object", service_error_code="503", service_message="Slow Down", http_status_code=503
    )

    with stubber, caplog.at_level(logging.WARNING):
        with pytest.raises(TemporaryFailure):
            upload_file_s3(s3_client=s3, body="test_data", bucket=mock_bucket_name, key="k")
        assert "File upload failed" in caplog.text


def test_upload_file_s3__missing_bucket(s3_client):
    with pytest.raises(botocore.exceptions.ClientError) as e:
        upload_file_s3(s3_client=s3_client, body="x", bucket="nonexistent", key="k")
    assert not isinstance(e.value, TemporaryFailure)


def client_error(status: int) -> botocore.exceptions.ClientError:
    return botocore.exceptions.ClientError({"ResponseMetadata": {"HTTPStatusCode": status}}, "op")


@pytest.mark.parametrize(
    "exc,temporary",
    [
        (botocore.exceptions.ConnectTimeoutError(endpoint_url=""), True),
        (botocore.exceptions.NoCredentialsError(), True),
        (botocore.exceptions.ParamValidationError(report="bad"), False),
        (client_error(500), True),
        (client_error(403), False),
    ],
)
def test_is_boto_error_temporary(exc, temporary):
    assert is_boto_error_temporary(exc) is temporary
