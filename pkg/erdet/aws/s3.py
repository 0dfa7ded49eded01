import logging
from typing import Union

import boto3
import botocore.exceptions
from botocore.exceptions import BotoCoreError, ClientError

from erdet.errors import TemporaryFailure


def is_boto_error_temporary(exc: Union[BotoCoreError, ClientError]) -> bool:
    temp_excepts = (
        botocore.exceptions.ConnectionError,
        botocore.exceptions.HTTPClientError,
        botocore.exceptions.NoCredentialsError,
        botocore.exceptions.ChecksumError,
        botocore.exceptions.IncompleteReadError,
        botocore.exceptions.CapacityNotAvailableError,
    )

    if isinstance(exc, ClientError):
        return exc.response["ResponseMetadata"]["HTTPStatusCode"] >= 500

    return isinstance(exc, temp_excepts)


def s3_key(prefix: str, relpath: str) -> str:
    """Joins a key prefix and a run-relative path, tolerating a missing trailing slash."""
    if prefix and not prefix.endswith("/"):
        prefix += "/"
    return prefix + relpath.lstrip("/")


def upload_file_s3(
    body: bytes | str,
    bucket: str,
    key: str,
    s3_client: boto3.client,
    content_type: str = "application/octet-stream",
):
    """
    Upload data to an S3 bucket. Errors worth retrying (connection problems, 5xx responses) are
    raised as TemporaryFailure, anything else is re-raised as is.
    """
    try:
        s3_client.put_object(Body=body, Bucket=bucket, Key=key, ContentType=content_type)
    except (BotoCoreError, ClientError) as e:
        logging.error(f"File upload failed: {e}")
        if is_boto_error_temporary(e):
            raise TemporaryFailure(f"Upload of {key} to {bucket} failed: {e}") from e
        raise
