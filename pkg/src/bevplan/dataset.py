"""On-disk sample storage: a JSON index plus checksummed binary blobs.

Layout of a dataset directory:

    index.json            one record per sample (scenario, tick, provenance,
                          v0, ego pose, label table row) + blob checksums
    chan_<name>.bin       per-channel blob: header then row-major float32
                          images, one slot per sample
    mask_<name>.bin       per-mask blob: header then row-major uint8 images

Blob header: magic "BEVBLOB1", dtype code (u1: f4/u1), height, width, count
(little-endian u4 each). Readers verify the recorded sha256 of every blob
before use and raise naming the file on mismatch.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .augment import Sample
from .core import Control, GridSpec, Trajectory, VehicleState
from .scene import CHANNEL_NAMES, ChannelStack, TaskMasks

BLOB_MAGIC = b"BEVBLOB1"
MASK_NAMES = ("obstacle", "route", "road", "signal")
INDEX_VERSION = 1
_DTYPES = {"f4": np.float32, "u1": np.uint8}


class DatasetError(RuntimeError):
    pass


def _blob_header(dtype: str, h: int, w: int, count: int) -> bytes:
    return BLOB_MAGIC + dtype.encode("ascii").ljust(4, b"\0") + \
        struct.pack("<III", h, w, count)


def _read_blob_header(f) -> tuple[str, int, int, int]:
    magic = f.read(8)
    if magic != BLOB_MAGIC:
        raise DatasetError("bad blob magic")
    dtype = f.read(4).rstrip(b"\0").decode("ascii")
    h, w, count = struct.unpack("<III", f.read(12))
    return dtype, h, w, count


class DatasetWriter:
    """Streams samples to disk; finalizes index + checksums on close."""

    def __init__(self, path, grid: GridSpec, dt: float):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.grid = grid
        self.dt = dt
        self.count = 0
        self.records = []
        self._files = {}
        for name in CHANNEL_NAMES:
            f = open(self.path / f"chan_{name}.bin", "wb")
            f.write(_blob_header("f4", grid.height_px, grid.width_px, 0))
            self._files[f"chan_{name}"] = f
        for name in MASK_NAMES:
            f = open(self.path / f"mask_{name}.bin", "wb")
            f.write(_blob_header("u1", grid.height_px, grid.width_px, 0))
            self._files[f"mask_{name}"] = f

    def add(self, sample: Sample) -> None:
        if sample.channels.grid != self.grid:
            raise DatasetError("sample grid mismatches dataset grid")
        for name in CHANNEL_NAMES:
            arr = np.ascontiguousarray(sample.channels.channels[name],
                                       dtype=np.float32)
            self._files[f"chan_{name}"].write(arr.tobytes())
        for name in MASK_NAMES:
            arr = np.ascontiguousarray(getattr(sample.masks, name) > 0.5,
                                       dtype=np.uint8)
            self._files[f"mask_{name}"].write(arr.tobytes())
        self.records.append({
            "scenario": sample.scenario,
            "timestamp": round(float(sample.timestamp), 6),
            "provenance": sample.provenance,
            "v0": float(sample.v0),
            "ego_world": [float(v) for v in sample.ego_world.as_array()],
            "states": np.round(sample.truth.states_array(), 9).tolist(),
            "controls": (np.round(sample.truth.controls_array(), 9).tolist()
                         if sample.truth.controls is not None else None),
        })
        self.count += 1

    def close(self, extra: Optional[dict] = None) -> None:
        checksums = {}
        for key, f in self._files.items():
            f.seek(0)
            f.write(_blob_header("f4" if key.startswith("chan") else "u1",
                                 self.grid.height_px, self.grid.width_px,
                                 self.count))
            f.close()
            fname = f"{key}.bin"
            checksums[fname] = hashlib.sha256(
                (self.path / fname).read_bytes()).hexdigest()
        index = {
            "index_version": INDEX_VERSION,
            "grid": {"width_px": self.grid.width_px, "height_px": self.grid.height_px,
                     "resolution": self.grid.resolution,
                     "anchor_px": list(self.grid.anchor_px)},
            "dt": self.dt,
            "count": self.count,
            "channel_names": list(CHANNEL_NAMES),
            "mask_names": list(MASK_NAMES),
            "checksums": checksums,
            "records": self.records,
        }
        if extra:
            index.update(extra)
        with open(self.path / "index.json", "w", encoding="utf-8") as f:
            json.dump(index, f, sort_keys=True, separators=(",", ":"))


class Dataset:
    """Read-only indexed view; images are materialized lazily via memmap."""

    def __init__(self, path, verify: bool = True):
        self.path = Path(path)
        with open(self.path / "index.json", "r", encoding="utf-8") as f:
            self.index = json.load(f)
        if self.index.get("index_version") != INDEX_VERSION:
            raise DatasetError(
                f"unsupported index version {self.index.get('index_version')!r}")
        g = self.index["grid"]
        self.grid = GridSpec(g["width_px"], g["height_px"], g["resolution"],
                             tuple(g["anchor_px"]))
        self.dt = float(self.index["dt"])
        if verify:
            for fname, want in sorted(self.index["checksums"].items()):
                got = hashlib.sha256((self.path / fname).read_bytes()).hexdigest()
                if got != want:
                    raise DatasetError(f"checksum mismatch in {fname}")
        self._maps = {}
        header = 8 + 4 + 12
        hh, ww = self.grid.height_px, self.grid.width_px
        n = int(self.index["count"])
        for name in self.index["channel_names"]:
            self._maps[f"chan_{name}"] = np.memmap(
                self.path / f"chan_{name}.bin", dtype=np.float32, mode="r",
                offset=header, shape=(n, hh, ww))
        for name in self.index["mask_names"]:
            self._maps[f"mask_{name}"] = np.memmap(
                self.path / f"mask_{name}.bin", dtype=np.uint8, mode="r",
                offset=header, shape=(n, hh, ww))

    def __len__(self) -> int:
        return int(self.index["count"])

    def record(self, i: int) -> dict:
        return self.index["records"][i]

    def __getitem__(self, i: int) -> Sample:
        rec = self.index["records"][i]
        channels = {name: np.array(self._maps[f"chan_{name}"][i])
                    for name in self.index["channel_names"]}
        masks = TaskMasks(*(self._maps[f"mask_{name}"][i].astype(np.float32)
                            for name in self.index["mask_names"]))
        states = tuple(VehicleState.from_array(r) for r in rec["states"])
        controls = (tuple(Control(*c) for c in rec["controls"])
                    if rec["controls"] is not None else None)
        truth = Trajectory(dt=self.dt, states=states, controls=controls)
        return Sample(scenario=rec["scenario"], timestamp=rec["timestamp"],
                      provenance=rec["provenance"],
                      channels=ChannelStack(grid=self.grid, channels=channels),
                      masks=masks, v0=rec["v0"],
                      truth=truth,
                      ego_world=VehicleState.from_array(rec["ego_world"]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]


class ConcatDataset:
    """Indexable concatenation of datasets (train-time aggregate view)."""

    def __init__(self, parts):
        self.parts = list(parts)
        self._offsets = []
        total = 0
        keys = set()
        for p in self.parts:
            self._offsets.append(total)
            total += len(p)
            for rec in (p.index["records"] if isinstance(p, Dataset) else []):
                key = (rec["scenario"], rec["timestamp"], rec["provenance"])
                if key in keys:
                    raise DatasetError(f"duplicate sample key {key}")
                keys.add(key)
        self._total = total

    def __len__(self) -> int:
        return self._total

    def __getitem__(self, i: int):
        for part, off in zip(reversed(self.parts), reversed(self._offsets)):
            if i >= off:
                return part[i - off]
        raise IndexError(i)
