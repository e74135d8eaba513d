"""Night records: binary container, validation, normalization, subject splits.

A record file holds one night, little-endian throughout:

    bytes 0-3   magic "RSP1"
    bytes 4-7   unsigned 32-bit header length H
    H bytes     UTF-8 JSON {subject_id, dataset_id, fb, fo, duration_s,
                            gender, vars{...}}
    fb*T floats     breathing (32-bit)
    fo*T floats     spo2 (32-bit, percentage points in [0, 100])
    fo*T bytes      stages (0 awake, 1 REM, 2 non-REM, 255 missing)

File size must equal 8 + H + 4*fb*T + 4*fo*T + fo*T exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"RSP1"
QUANTUM_S = 24
STAGE_AWAKE, STAGE_REM, STAGE_NONREM, STAGE_MISSING = 0, 1, 2, 255
NORM_VAR_FLOOR = 1e-8


class RecordError(ValueError):
    """Base class for record validation and file-format failures."""


class BadMagicError(RecordError):
    pass


class TruncatedRecordError(RecordError):
    pass


class LengthMismatchError(RecordError):
    pass


class ValueRangeError(RecordError):
    pass


class RecordTooShortError(RecordError):
    pass


@dataclass
class Record:
    subject_id: str
    dataset_id: str
    fb: int
    fo: int
    breathing: np.ndarray  # float32, length fb*T
    spo2: np.ndarray       # float32 in [0, 100], length fo*T
    stages: np.ndarray     # uint8 in {0, 1, 2, 255}, length fo*T
    gender: int
    vars: dict = field(default_factory=dict)

    @property
    def duration_s(self) -> int:
        return len(self.spo2) // self.fo

    def validate(self) -> "Record":
        if self.fb <= 0 or self.fo <= 0:
            raise ValueRangeError(f"{self.subject_id}: rates must be positive, got fb={self.fb} fo={self.fo}")
        if self.fo and len(self.spo2) % self.fo != 0:
            raise LengthMismatchError(f"{self.subject_id}: spo2 length {len(self.spo2)} not a multiple of fo={self.fo}")
        t = self.duration_s
        if t <= 0:
            raise LengthMismatchError(f"{self.subject_id}: empty record")
        if len(self.breathing) != self.fb * t:
            raise LengthMismatchError(
                f"{self.subject_id}: breathing length {len(self.breathing)} != fb*T = {self.fb * t}"
            )
        if len(self.stages) != self.fo * t:
            raise LengthMismatchError(
                f"{self.subject_id}: stages length {len(self.stages)} != fo*T = {self.fo * t}"
            )
        if self.spo2.size and (np.min(self.spo2) < 0.0 or np.max(self.spo2) > 100.0):
            raise ValueRangeError(
                f"{self.subject_id}: spo2 outside [0, 100] (range [{np.min(self.spo2)}, {np.max(self.spo2)}])"
            )
        bad = ~np.isin(self.stages, (STAGE_AWAKE, STAGE_REM, STAGE_NONREM, STAGE_MISSING))
        if np.any(bad):
            raise ValueRangeError(
                f"{self.subject_id}: stage values outside {{0, 1, 2, 255}}: {sorted(set(self.stages[bad].tolist()))}"
            )
        if self.gender not in (0, 1):
            raise ValueRangeError(f"{self.subject_id}: gender must be 0 or 1, got {self.gender}")
        for key, value in self.vars.items():
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueRangeError(f"{self.subject_id}: var {key!r} must be a small int, got {value!r}")
        return self


def write_record(record: Record, path) -> None:
    record.validate()
    header = json.dumps(
        {
            "subject_id": record.subject_id,
            "dataset_id": record.dataset_id,
            "fb": record.fb,
            "fo": record.fo,
            "duration_s": record.duration_s,
            "gender": record.gender,
            "vars": record.vars,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(record.breathing.astype("<f4", copy=False).tobytes())
        fh.write(record.spo2.astype("<f4", copy=False).tobytes())
        fh.write(record.stages.astype(np.uint8, copy=False).tobytes())


def record_file_size(header_len: int, fb: int, fo: int, duration_s: int) -> int:
    return 8 + header_len + 4 * fb * duration_s + 4 * fo * duration_s + fo * duration_s


def read_record(path) -> Record:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a record file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise TruncatedRecordError(f"{path}: truncated header ({len(raw) - 8} of {header_len} bytes)")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RecordError(f"{path}: header is not valid JSON ({exc})") from exc
    missing = [k for k in ("subject_id", "dataset_id", "fb", "fo", "duration_s", "gender", "vars") if k not in header]
    if missing:
        raise RecordError(f"{path}: header missing {missing}")
    fb, fo, t = int(header["fb"]), int(header["fo"]), int(header["duration_s"])
    if fb <= 0 or fo <= 0 or t <= 0:
        raise ValueRangeError(f"{path}: fb/fo/duration_s must be positive, got {fb}/{fo}/{t}")
    expected = record_file_size(header_len, fb, fo, t)
    if len(raw) < expected:
        raise TruncatedRecordError(f"{path}: {len(raw)} bytes, header declares {expected}")
    if len(raw) > expected:
        raise LengthMismatchError(f"{path}: {len(raw)} bytes, header declares {expected} (trailing data)")

    pos = 8 + header_len
    breathing = np.frombuffer(raw, dtype="<f4", count=fb * t, offset=pos).copy()
    pos += 4 * fb * t
    spo2 = np.frombuffer(raw, dtype="<f4", count=fo * t, offset=pos).copy()
    pos += 4 * fo * t
    stages = np.frombuffer(raw, dtype=np.uint8, count=fo * t, offset=pos).copy()

    return Record(
        subject_id=str(header["subject_id"]),
        dataset_id=str(header["dataset_id"]),
        fb=fb,
        fo=fo,
        breathing=breathing,
        spo2=spo2,
        stages=stages,
        gender=int(header["gender"]),
        vars={str(k): int(v) for k, v in header["vars"].items()},
    ).validate()


def normalize_breathing(record: Record) -> np.ndarray:
    """Per-night z-score of the breathing series; near-constant nights map to zeros."""
    x = record.breathing.astype(np.float64)
    if x.size == 0:
        raise RecordError(f"{record.subject_id}: empty breathing series")
    var = float(x.var())
    if var < NORM_VAR_FLOOR:
        return np.zeros_like(x)
    return (x - x.mean()) / np.sqrt(var)


def crop_to_multiple(record: Record, quantum: int = QUANTUM_S) -> Record:
    """Drop trailing seconds so the duration divides the model's time quantum."""
    t = record.duration_s
    if t < quantum:
        raise RecordTooShortError(
            f"{record.subject_id}: {t} s is shorter than the {quantum} s quantum"
        )
    kept = (t // quantum) * quantum
    if kept == t:
        return record
    return replace(
        record,
        breathing=record.breathing[: record.fb * kept],
        spo2=record.spo2[: record.fo * kept],
        stages=record.stages[: record.fo * kept],
    )


def split_subjects(subject_ids, ratio: float = 0.7, seed: int = 0) -> tuple[list, list]:
    """Deterministic subject-level split; sorts before shuffling so input order is irrelevant."""
    unique = sorted(set(subject_ids))
    if len(unique) < 2:
        raise RecordError(f"need at least 2 subjects to split, got {len(unique)}")
    if not 0.0 < ratio < 1.0:
        raise RecordError(f"split ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(unique))
    n_train = min(max(int(len(unique) * ratio), 1), len(unique) - 1)
    train = sorted(unique[i] for i in order[:n_train])
    test = sorted(unique[i] for i in order[n_train:])
    return train, test


def load_dataset(directory) -> list:
    """Read every record file in a directory, sorted by filename."""
    root = Path(directory)
    if not root.is_dir():
        raise RecordError(f"{directory}: not a directory")
    paths = sorted(root.glob("*.rsp"))
    if not paths:
        raise RecordError(f"{directory}: no .rsp record files found")
    return [read_record(p) for p in paths]


def filter_split(records, split: str, ratio: float = 0.7, seed: int = 0) -> list:
    """Restrict records to the train or test side of the subject split."""
    if split == "all":
        return list(records)
    if split not in ("train", "test"):
        raise RecordError(f"split must be train, test, or all, got {split!r}")
    train, test = split_subjects([r.subject_id for r in records], ratio=ratio, seed=seed)
    wanted = set(train if split == "train" else test)
    return [r for r in records if r.subject_id in wanted]
