"""Visit-sequence records and the JSONL manifest format.

One JSON object per line, keys in this fixed order::

    eye_id, patient_id, eye, visits, prediction_time, prediction_image, label

``visits`` is a list of ``{"image", "time", "stage"}`` objects for the
observed visits, oldest first.  Image paths are relative to the manifest's
directory.  Times are in years.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

EARLY = "early"
ADVANCED = "advanced"
STAGES = (EARLY, ADVANCED)
EYES = ("left", "right")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Visit:
    image: str
    time: float
    stage: str = EARLY


@dataclass(frozen=True)
class VisitSequence:
    """One eye's observed visits plus the visit we want to predict."""

    patient_id: str
    eye: str
    visits: tuple[Visit, ...]
    prediction_time: float
    label: int
    prediction_image: str | None = None
    eye_id: str = field(default="")

    def __post_init__(self):
        if not self.eye_id:
            object.__setattr__(self, "eye_id", f"{self.patient_id}-{self.eye[:1].upper()}")
        if self.eye not in EYES:
            raise ManifestError(f"{self.eye_id}: eye must be one of {EYES}, got {self.eye!r}")
        if self.label not in (0, 1):
            raise ManifestError(f"{self.eye_id}: label must be 0 or 1, got {self.label!r}")
        times = [v.time for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ManifestError(f"{self.eye_id}: visit times must be strictly increasing: {times}")
        if times and self.prediction_time <= times[-1]:
            raise ManifestError(
                f"{self.eye_id}: prediction time {self.prediction_time} is not after last visit {times[-1]}"
            )

    @property
    def times(self) -> list[float]:
        return [v.time for v in self.visits]

    def to_json(self) -> str:
        row = {
            "eye_id": self.eye_id,
            "patient_id": self.patient_id,
            "eye": self.eye,
            "visits": [{"image": v.image, "time": v.time, "stage": v.stage} for v in self.visits],
            "prediction_time": self.prediction_time,
            "prediction_image": self.prediction_image,
            "label": self.label,
        }
        return json.dumps(row, separators=(",", ":"))

    @classmethod
    def from_dict(cls, row: dict) -> "VisitSequence":
        try:
            visits = tuple(Visit(v["image"], float(v["time"]), v.get("stage", EARLY)) for v in row["visits"])
            return cls(
                patient_id=str(row["patient_id"]),
                eye=row["eye"],
                visits=visits,
                prediction_time=float(row["prediction_time"]),
                label=int(row["label"]),
                prediction_image=row.get("prediction_image"),
                eye_id=row.get("eye_id", ""),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest row missing field {exc}") from None


def write_manifest(path: str | os.PathLike, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path: str | os.PathLike) -> list[VisitSequence]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            records.append(VisitSequence.from_dict(row))
    return records


def resolve(manifest_path: str | os.PathLike, rel: str) -> Path:
    return Path(manifest_path).parent / rel
