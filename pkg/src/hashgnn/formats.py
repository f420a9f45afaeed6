"""Binary and text file formats: checkpoints, code/embedding files, id maps, TSV/CSV reports.

Code file (``.hgnc``)::

    b"HGNC" | u8 version | <u32 n | <u32 k | n * ceil(k/64) little-endian u64 words

Embedding file (``.hgne``)::

    b"HGNE" | u8 version | <u32 n | <u32 k | n * k little-endian float32

Checkpoint (``.ckpt``)::

    b"HGNK" | u8 version | <u32 header length | JSON header | float32 tensor data

The JSON header holds the training config, seed, iteration count and an
ordered list of ``{"name", "shape"}`` tensor descriptors.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .retrieval import CodeMatrix, EmbeddingMatrix
from .trainer import ModelParams, TrainConfig, TrainedModel

CODE_MAGIC = b"HGNC"
EMB_MAGIC = b"HGNE"
CKPT_MAGIC = b"HGNK"
VERSION = 1
_HEAD = struct.Struct("<4sBII")


class FormatError(ValueError):
    pass


def _read_head(data: bytes, magic: bytes, path) -> tuple[int, int]:
    if len(data) < _HEAD.size:
        raise FormatError(f"{path}: file too short")
    got, version, n, k = _HEAD.unpack_from(data)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return n, k


def write_codes(path, codes: CodeMatrix) -> None:
    with open(path, "wb") as f:
        f.write(_HEAD.pack(CODE_MAGIC, VERSION, codes.n, codes.bits))
        f.write(np.ascontiguousarray(codes.packed, dtype="<u8").tobytes())


def read_codes(path) -> CodeMatrix:
    data = Path(path).read_bytes()
    n, k = _read_head(data, CODE_MAGIC, path)
    w = (k + 63) // 64
    body = np.frombuffer(data, dtype="<u8", offset=_HEAD.size)
    if body.size != n * w:
        raise FormatError(f"{path}: expected {n * w} words, found {body.size}")
    return CodeMatrix(body.reshape(n, w).astype(np.uint64), k)


def write_embeddings(path, embs: EmbeddingMatrix) -> None:
    with open(path, "wb") as f:
        f.write(_HEAD.pack(EMB_MAGIC, VERSION, embs.n, embs.k))
        f.write(np.ascontiguousarray(embs.values, dtype="<f4").tobytes())


def read_embeddings(path) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    n, k = _read_head(data, EMB_MAGIC, path)
    body = np.frombuffer(data, dtype="<f4", offset=_HEAD.size)
    if body.size != n * k:
        raise FormatError(f"{path}: expected {n * k} floats, found {body.size}")
    return EmbeddingMatrix(body.reshape(n, k).astype(np.float32))


def write_checkpoint(path, model: TrainedModel) -> None:
    tensors = model.params.tensors()
    header = {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "iteration": model.iteration,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sBI", CKPT_MAGIC, VERSION, len(raw)))
        f.write(raw)
        for v in tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_checkpoint(path) -> TrainedModel:
    data = Path(path).read_bytes()
    pre = struct.calcsize("<4sBI")
    if len(data) < pre:
        raise FormatError(f"{path}: file too short")
    magic, version, hlen = struct.unpack_from("<4sBI", data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[pre:pre + hlen].decode("utf-8"))
    offset = pre + hlen
    tensors = {}
    for desc in header["tensors"]:
        if desc["name"] in tensors:
            raise FormatError(f"{path}: duplicate tensor {desc['name']!r}")
        shape = tuple(desc["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[desc["name"]] = arr.reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    cfg = TrainConfig.from_dict(header["config"])
    return TrainedModel(ModelParams.from_tensors(tensors), cfg, header["iteration"])


def write_id_map(path, ids) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, name in enumerate(ids):
            f.write(f"{i}\t{name}\n")


def read_id_map(path) -> list[str]:
    ids = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            idx, name = line.rstrip("\n").split("\t", 1)
            if int(idx) != len(ids):
                raise FormatError(f"{path}:{line_no}: expected index {len(ids)}, got {idx}")
            ids.append(name)
    return ids


def write_rows(path, rows: list[dict], columns, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), delimiter=delimiter, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_rows(path, delimiter: str = ",") -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f, delimiter=delimiter))


RANKED_COLUMNS = ("user_id", "rank", "item_id", "score")


def write_ranked(path, results, user_ids, item_ids) -> None:
    """``results`` maps user index -> RetrievalResult; ranks are 1-based."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(RANKED_COLUMNS) + "\n")
        for u in sorted(results):
            r = results[u]
            for rank, (i, s) in enumerate(zip(r.indices.tolist(), r.scores.tolist()), start=1):
                score = f"{int(s)}" if r.mode == "hamr" else f"{s:.9g}"
                f.write(f"{user_ids[u]}\t{rank}\t{item_ids[i]}\t{score}\n")


def read_ranked(path) -> dict[str, list[str]]:
    """User id -> item ids in rank order."""
    out: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if tuple(header) != RANKED_COLUMNS:
            raise FormatError(f"{path}: unexpected header {header}")
        for line_no, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{line_no}: expected 4 columns")
            out.setdefault(parts[0], []).append((int(parts[1]), parts[2]))
    return {u: [i for _, i in sorted(v)] for u, v in out.items()}
