"""Distillation dataset files: one record per hero per frame, read through a memmap.

File layout (little-endian)::

    b"PDDS" | u32 version | u32 record count | u32 extent count | u32 extents[...]
    records: u8 hero | u8 position | f32 obs[per-hero total]
             | packed mask bits (button, move, offset_x, offset_z, 13x39 target)
             | f32 logits[161] | f32 value

Mask bits are packed little-endian bit order, one byte string per head.
Records of a frame group are stored consecutively (heroes 0, 1, 2).
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env
from .env import EPISODE_LEN, HEAD_NAMES, HEAD_SIZES, N_HEROES, Frames, MaskSet

log = logging.getLogger(__name__)

MAGIC = b"PDDS"
VERSION = 1
N_LOGITS = sum(HEAD_SIZES)
_MASK_BITS = {"button": 13, "move": 25, "offset_x": 42, "offset_z": 42,
              "target": 13 * env.N_TARGETS}
PRESETS = {"paper": (2_000_000, 20_000), "desk": (51_200, 5_120)}


class DatasetFormatError(ValueError):
    pass


def schema_from_extents(ext: list[int], scale: float) -> env.ObservationSchema:
    if len(ext) != 13:
        raise DatasetFormatError(f"expected 13 schema extents, got {len(ext)}")
    return env.schema_from_extents(ext, scale)


def _nbytes(bits: int) -> int:
    return -(-bits // 8)


def record_dtype(obs_size: int) -> np.dtype:
    fields = [("hero", "u1"), ("position", "u1"), ("obs", "<f4", (obs_size,))]
    fields += [(name, "u1", (_nbytes(bits),)) for name, bits in _MASK_BITS.items()]
    fields += [("logits", "<f4", (N_LOGITS,)), ("value", "<f4")]
    return np.dtype(fields)


def _header(schema: env.ObservationSchema, count: int) -> bytes:
    ext = schema.extents()
    return MAGIC + struct.pack(f"<III{len(ext)}I", VERSION, count, len(ext), *ext)


def pack_records(frames: Frames, logits: dict, masks: MaskSet | None = None) -> np.ndarray:
    """Structured record array (n*3,) for a batch of frame groups."""
    n = len(frames)
    masks = masks if masks is not None else env.derive_masks(frames)
    obs = frames.flat()
    rec = np.zeros((n, N_HEROES), dtype=record_dtype(obs.shape[-1]))
    rec["hero"] = np.arange(N_HEROES)
    rec["position"] = np.asarray(frames.position)[:, None]
    rec["obs"] = obs
    for name in _MASK_BITS:
        bits = getattr(masks, name).reshape(n, N_HEROES, -1)
        rec[name] = np.packbits(bits, axis=-1, bitorder="little")
    rec["logits"] = np.concatenate([logits[h] for h in HEAD_NAMES], axis=-1)
    rec["value"] = logits["value"]
    return rec.reshape(-1)


def write_records(path: Path, schema: env.ObservationSchema, chunks) -> int:
    """Stream record arrays from ``chunks`` into ``path``; returns the record count."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(_header(schema, 0))
        for rec in chunks:
            fh.write(rec.tobytes())
            count += rec.shape[0]
        fh.seek(0)
        fh.write(_header(schema, count))
    return count


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 22), b""):
            h.update(block)
    return h.hexdigest()


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_manifest(path: Path, items: dict) -> None:
    text = "".join(f"{k}={v}\n" for k, v in items.items())
    Path(path).write_text(text, encoding="utf-8")


@dataclass
class Batch:
    frames: Frames
    masks: MaskSet
    logits: list[np.ndarray]  # per head, (b, 3, size)
    value: np.ndarray


class Dataset:
    """Read-only view of one PDDS file."""

    def __init__(self, path, scale: float | None = None):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"dataset file not found: {self.path}")
        with open(self.path, "rb") as fh:
            head = fh.read(16)
            if len(head) < 16 or head[:4] != MAGIC:
                raise DatasetFormatError(f"{self.path}: not a PDDS file")
            version, count, n_ext = struct.unpack("<III", head[4:16])
            if version != VERSION:
                raise DatasetFormatError(f"{self.path}: unsupported version {version}")
            ext = list(struct.unpack(f"<{n_ext}I", fh.read(4 * n_ext)))
        if scale is None:
            manifest = self.path.parent / "manifest.txt"
            scale = float(read_manifest(manifest).get("scale", "nan")) if manifest.exists() else float("nan")
        self.schema = schema_from_extents(ext, scale)
        self.dtype = record_dtype(self.schema.per_hero_total)
        offset = 16 + 4 * n_ext
        expected = offset + count * self.dtype.itemsize
        if os.path.getsize(self.path) != expected:
            raise DatasetFormatError(f"{self.path}: truncated or oversized file")
        if count % N_HEROES:
            raise DatasetFormatError(f"{self.path}: record count not a multiple of 3")
        self.records = np.memmap(self.path, dtype=self.dtype, mode="r", offset=offset,
                                 shape=(count,))

    @property
    def n_records(self) -> int:
        return self.records.shape[0]

    @property
    def n_samples(self) -> int:
        """Frame groups (three hero records each)."""
        return self.n_records // N_HEROES

    def batch(self, samples) -> Batch:
        samples = np.asarray(samples)
        idx = (samples[:, None] * N_HEROES + np.arange(N_HEROES)).reshape(-1)
        rec = self.records[idx]
        b = samples.shape[0]
        obs = np.asarray(rec["obs"]).reshape(b, N_HEROES, -1)
        frames = Frames.from_flat(obs, self.schema, rec["position"].reshape(b, N_HEROES)[:, 0])
        unpacked = {}
        for name, bits in _MASK_BITS.items():
            raw = np.asarray(rec[name]).reshape(b, N_HEROES, -1)
            unpacked[name] = np.unpackbits(raw, axis=-1, count=bits, bitorder="little").astype(bool)
        unpacked["target"] = unpacked["target"].reshape(b, N_HEROES, 13, env.N_TARGETS)
        masks = MaskSet(**unpacked)
        flat = np.asarray(rec["logits"]).reshape(b, N_HEROES, -1)
        cuts = np.cumsum(HEAD_SIZES)[:-1]
        logits = np.split(flat, cuts, axis=-1)
        return Batch(frames, masks, logits, np.asarray(rec["value"]).reshape(b, N_HEROES))

    def all(self) -> Batch:
        return self.batch(np.arange(self.n_samples))


def generate_dataset(net, schema: env.ObservationSchema, seed: int, n_train: int, n_val: int,
                     path, episodes_per_chunk: int = 32) -> dict:
    """Write train.pdds, val.pdds and manifest.txt under ``path``.

    ``n_train`` and ``n_val`` count frame groups and must be multiples of 16.
    Train frames come from generator stream 0 and validation frames from stream 1.
    """
    for label, n in (("n-train", n_train), ("n-val", n_val)):
        if n < EPISODE_LEN or n % EPISODE_LEN:
            raise ValueError(f"{label} must be a positive multiple of {EPISODE_LEN}, got {n}")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "PDDS", "format_version": VERSION, "scale": repr(schema.scale),
        "extents": ",".join(map(str, schema.extents())), "seed": seed,
        "teacher_seed": net.seed, "n_train": n_train, "n_val": n_val,
    }
    for split, n, stream in (("train", n_train, 0), ("val", n_val, 1)):
        n_ep = n // EPISODE_LEN

        def chunks(n_ep=n_ep, stream=stream):
            for first in range(0, n_ep, episodes_per_chunk):
                count = min(episodes_per_chunk, n_ep - first)
                frames = env.generate_frames(schema, seed, count * EPISODE_LEN, stream=stream,
                                             first_episode=first)
                yield pack_records(frames, net.forward_episodes(frames))

        file = out / f"{split}.pdds"
        records = write_records(file, schema, chunks())
        manifest[f"records_{split}"] = records
        manifest[f"digest_{split}"] = file_digest(file)
        log.info("wrote %s (%d records)", file, records)
    write_manifest(out / "manifest.txt", manifest)
    return manifest
