import dataclasses
import io
import logging
from pathlib import Path
from typing import Iterable

import torch

from erdet.errors import SnapshotError
from erdet.tinydet.model import HeadConfig, TinyDetector

SNAPSHOT_FORMAT = "tinydet-snapshot"
SNAPSHOT_VERSION = 1


@dataclasses.dataclass(frozen=True, kw_only=True)
class DetectorSnapshot:
    """Full parameter state of a detector after a protocol step."""

    head_config: HeadConfig
    state_dict: dict[str, torch.Tensor]
    step_index: int
    categories_seen: frozenset[int]

    @classmethod
    def from_model(
        cls, model: TinyDetector, step_index: int, categories_seen: Iterable[int]
    ) -> "DetectorSnapshot":
        return cls(
            head_config=model.config,
            state_dict={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
            step_index=step_index,
            categories_seen=frozenset(categories_seen),
        )

    def build(self, device: str | torch.device = "cpu") -> TinyDetector:
        """A fresh detector in eval mode holding a copy of this snapshot's parameters."""
        model = TinyDetector(self.head_config)
        model.load_state_dict(self.state_dict)
        return model.to(device).eval()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(
            {
                "format": SNAPSHOT_FORMAT,
                "version": SNAPSHOT_VERSION,
                "head_config": self.head_config.to_dict(),
                "step_index": self.step_index,
                "categories_seen": sorted(self.categories_seen),
                "state_dict": self.state_dict,
            },
            buf,
        )
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, expected_config: HeadConfig | None = None):
        try:
            payload = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
        except Exception as e:
            raise SnapshotError(f"Unreadable snapshot: {e}") from e

        if not isinstance(payload, dict) or payload.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotError("Not a tinydet snapshot")
        if payload.get("version") != SNAPSHOT_VERSION:
            raise SnapshotError(f"Unsupported snapshot version {payload.get('version')}")

        head_config = HeadConfig.from_dict(payload["head_config"])
        if expected_config is not None and head_config != expected_config:
            raise SnapshotError(
                f"Snapshot head config {head_config} does not match expected {expected_config}"
            )
        return cls(
            head_config=head_config,
            state_dict=payload["state_dict"],
            step_index=int(payload["step_index"]),
            categories_seen=frozenset(payload["categories_seen"]),
        )


def save_snapshot(snapshot: DetectorSnapshot, path: Path | str):
    Path(path).write_bytes(snapshot.to_bytes())
    logging.debug(f"Saved step {snapshot.step_index} snapshot to {path}")


def load_snapshot(path: Path | str, expected_config: HeadConfig | None = None) -> DetectorSnapshot:
    """Loads a snapshot file, rejecting it when its HeadConfig differs from expected_config."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise SnapshotError(f"Cannot read snapshot {path}: {e}") from e
    return DetectorSnapshot.from_bytes(data, expected_config)
