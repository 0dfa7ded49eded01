import dataclasses
import errno
import logging
from abc import ABC
from pathlib import Path
from typing import Iterable

from botocore.exceptions import BotoCoreError, ClientError

from erdet.aws.s3 import s3_key, upload_file_s3
from erdet.errors import TemporaryFailure
from erdet.tinydet.snapshot import DetectorSnapshot

_TEMPORARY_ERRNOS = (errno.ENOSPC, errno.EAGAIN, errno.EBUSY, errno.EINTR, errno.EDQUOT)


def _is_os_error_temporary(exc: OSError) -> bool:
    return exc.errno in _TEMPORARY_ERRNOS


class ArtifactWriter:
    """
    Persists everything a run produces: configs, snapshots, metrics, loss curves and selection
    dumps. Code that produces artifacts returns a list of actions instead of touching the disk:
      * WriteFileAction:
          Write text or bytes to a path relative to the run directory.
      * SnapshotAction:
          Serialize a DetectorSnapshot to a path relative to the run directory.

    Every file written locally is mirrored to s3://<bucket>/<prefix><relative path> when the
    writer was given an S3 client and a bucket. write() never raises: it returns a Failures
    record and the caller decides whether to abort.
    """

    def __init__(self, run_dir: Path | str, s3_client=None, bucket: str = None, prefix: str = ""):
        """
        s3_client should be an authenticated boto3 S3 client, such as the result of
        boto3.client("s3"), or None to keep artifacts local only.
        """
        self.run_dir = Path(run_dir)
        self.s3_client = s3_client
        self.bucket = bucket
        self.prefix = prefix

    @property
    def mirrors_to_s3(self) -> bool:
        return self.s3_client is not None and bool(self.bucket)

    class Action(ABC):  # noqa: B024
        """An Action is something the writer does on behalf of the code producing artifacts."""

        pass

    @dataclasses.dataclass(kw_only=True)
    class WriteFileAction(Action):
        path: str
        body: bytes | str
        mime_type: str = "text/plain"

    @dataclasses.dataclass(kw_only=True)
    class SnapshotAction(Action):
        path: str
        snapshot: DetectorSnapshot

    @dataclasses.dataclass(kw_only=True)
    class Failures:
        """
        If 'permanent' is True then an error occured which will definitely not be resolved
        through retries. If 'temporary' is True then an error which is potentially resolvable
        this way occured. Both can be set.

        `path_permanent` and `path_temporary` list the artifact paths that failed.
        """

        path_permanent: list[str] = dataclasses.field(default_factory=list)
        path_temporary: list[str] = dataclasses.field(default_factory=list)
        permanent: bool = False
        temporary: bool = False

        def any_permanent(self):
            return self.permanent or bool(self.path_permanent)

        def any_temporary(self):
            return self.temporary or bool(self.path_temporary)

        def __bool__(self):
            return self.any_permanent() or self.any_temporary()

        def add(self, f):
            return ArtifactWriter.Failures(
                path_permanent=self.path_permanent + f.path_permanent,
                path_temporary=self.path_temporary + f.path_temporary,
                permanent=self.permanent or f.permanent,
                temporary=self.temporary or f.temporary,
            )

    def _record(self, failures: Failures, path: str, temporary: bool):
        (failures.path_temporary if temporary else failures.path_permanent).append(path)

    def _mirror(self, path: str, body: bytes | str, mime_type: str, failures: Failures):
        if not self.mirrors_to_s3:
            return
        key = s3_key(self.prefix, path)
        try:
            upload_file_s3(body, self.bucket, key, self.s3_client, content_type=mime_type)
            logging.info(f"Updated/created {key} in {self.bucket}")
        except TemporaryFailure:
            self._record(failures, path, temporary=True)
        except (BotoCoreError, ClientError):
            self._record(failures, path, temporary=False)

    def _runaction(self, action: Action, failures: Failures):
        """
        Runs a single action, adding anything that went wrong to failures. Exceptions may still
        be thrown due to bugs.
        """
        if isinstance(action, ArtifactWriter.SnapshotAction):
            body, mime_type = action.snapshot.to_bytes(), "application/octet-stream"
        elif isinstance(action, ArtifactWriter.WriteFileAction):
            body, mime_type = action.body, action.mime_type
        else:
            raise AssertionError(f"BUG: Saw unknown action type {action}")

        target = self.run_dir / action.path
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(body, str):
                target.write_text(body, encoding="utf-8")
            else:
                target.write_bytes(body)
            logging.debug(f"Wrote {target}")
        except OSError as e:
            logging.error(f"Writing {target} failed: {e}")
            self._record(failures, action.path, _is_os_error_temporary(e))
            return

        self._mirror(action.path, body, mime_type, failures)

    def write(self, actions: Iterable[Action]) -> Failures:
        """
        Runs every action. Unexpected exceptions stop the remaining actions and are recorded
        as a permanent failure rather than propagated.
        """
        failures = ArtifactWriter.Failures()
        try:
            for action in actions:
                self._runaction(action, failures)
        except Exception:
            logging.exception("Permanent failure writing artifacts")
            failures.permanent = True

        return failures
