"""Self-describing binary containers for models and subject embeddings.

Byte layout (all integers little-endian)::

    0   8 bytes   magic  b"SAGCKPT\\n"
    8   uint32    format version
    12  uint32    header length H in bytes (a multiple of 8)
    16  H bytes   UTF-8 JSON header, space padded
    16+H          float64 little-endian payload

The header holds ``kind``, ``dims``, ``arch``, ``schedule``, ``world``,
``meta``, the code version and a manifest of named segments, each with an
offset and shape counted in float64 elements from the payload start.
JSON keys are sorted and nothing time-dependent is stored, so equal inputs
give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sag.diffusion import NoiseSchedule, schedule_from_description
from sag.model import ArchSpec, Denoiser
from sag.tables import code_version
from sag.train import SubjectEmbedding, SubjectEncoder
from sag.world import WorldSpec

MAGIC = b"SAGCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, kind: str, header: dict, segments: list[tuple[str, np.ndarray]]) -> None:
    manifest, offset = [], 0
    for name, arr in segments:
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        offset += arr.size
    full = dict(header, kind=kind, manifest=manifest, code_version=code_version())
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in segments)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob + payload)


def read_container(path, kind: str | None = None) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} file, found {header.get('kind')!r}")
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    arrays, end = {}, 0
    for seg in header["manifest"]:
        size = int(np.prod(seg["shape"])) if seg["shape"] else 1
        if seg["offset"] != end or end + size > payload.size:
            raise CheckpointError(f"{path}: manifest does not match payload at {seg['name']!r}")
        arrays[seg["name"]] = payload[end:end + size].reshape(seg["shape"]).astype(np.float64)
        end += size
    if end != payload.size:
        raise CheckpointError(f"{path}: {payload.size - end} trailing payload values")
    return header, arrays


def _world_dict(world: WorldSpec) -> dict:
    return asdict(world)


def _world_from(d: dict) -> WorldSpec:
    return WorldSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelBundle:
    """A trained denoiser with its schedule and world, plus the optional subject encoder."""

    model: Denoiser
    sched: NoiseSchedule
    world: WorldSpec
    encoder: SubjectEncoder | None = None
    meta: dict = field(default_factory=dict)


def save_model(path, bundle: ModelBundle) -> None:
    m = bundle.model
    segs = [("denoiser." + name, m.view(name)) for name, _, _ in m.manifest]
    header = {
        "dims": {"x_dim": m.arch.x_dim, "content_dim": m.arch.content_dim, "subject_dim": m.arch.subject_dim},
        "arch": m.arch.to_dict(),
        "schedule": bundle.sched.describe(),
        "world": _world_dict(bundle.world),
        "encoder": None,
        "meta": bundle.meta,
    }
    if bundle.encoder is not None:
        enc = bundle.encoder
        header["encoder"] = enc.describe()
        segs += [("encoder." + name, enc.view(name)) for name, _ in enc.shapes]
    write_container(path, "model", header, segs)


def load_model(path) -> ModelBundle:
    header, arrays = read_container(path, "model")
    arch = ArchSpec(**header["arch"])
    model = Denoiser(arch)
    for name, _, shape in model.manifest:
        key = "denoiser." + name
        if key not in arrays or arrays[key].shape != tuple(shape):
            raise CheckpointError(f"{path}: segment {key!r} missing or mis-shaped")
        model.view(name)[...] = arrays[key]
    encoder = None
    if header.get("encoder"):
        encoder = SubjectEncoder(**header["encoder"])
        for name, shape in encoder.shapes:
            encoder.view(name)[...] = arrays["encoder." + name]
    return ModelBundle(model, schedule_from_description(header["schedule"]), _world_from(header["world"]),
                       encoder, header.get("meta", {}))


def save_subject(path, emb: SubjectEmbedding, meta: dict | None = None) -> None:
    header = {
        "dims": {"subject_dim": int(emb.s.size)},
        "provenance": emb.provenance,
        "reference_ids": list(emb.reference_ids),
        "norm": emb.norm,
        "trace": [list(t) for t in emb.trace],
        "meta": meta or {},
    }
    write_container(path, "subject", header, [("s", emb.s)])


def load_subject(path) -> tuple[SubjectEmbedding, dict]:
    header, arrays = read_container(path, "subject")
    emb = SubjectEmbedding(arrays["s"], header["provenance"], tuple(header["reference_ids"]),
                           [tuple(t) for t in header["trace"]])
    return emb, header.get("meta", {})
