"""Persistence: the ".tns" tensor format, checkpoints, and sidecars.

Tensor file layout (all little-endian):

    magic "IDTN" | version u16 | rank u8 | dims u32 x rank | payload f64 C-order

Version 1 is a plain tensor.  Version 2 is a parameter checkpoint: the
payload is a flat rank-1 vector followed by a named-slice table
(count u32, then per slice: name length u16, UTF-8 name, element offset u64,
element length u64).

Sidecars are line-oriented ``key=value`` text files carrying artifact
metadata; values are stored as strings and typed by the reader.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .cloak import Cloak
from .embedder import IdentityEmbedder
from .errors import DataError
from .identity import AnchorSet, IdentitySubspace
from .model import DenoiserArch, DenoiserModel
from .textenc import TextEncoderStub, Vocabulary

MAGIC = b"IDTN"
VERSION_TENSOR = 1
VERSION_CHECKPOINT = 2


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    # np.ascontiguousarray would promote rank 0 to rank 1; asarray keeps it
    arr = np.asarray(arr, dtype=np.float64, order="C")
    if arr.ndim > 255:
        raise ValueError("tensor rank exceeds format limit of 255")
    header = MAGIC + struct.pack("<HB", VERSION_TENSOR, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f8").tobytes())


def _parse_header(raw: bytes, path: Path) -> tuple[int, tuple[int, ...], int]:
    """Returns (version, dims, payload offset); raises DataError on corruption."""

    if len(raw) < 7 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a .tns file (bad magic bytes)")
    version, rank = struct.unpack_from("<HB", raw, 4)
    if version not in (VERSION_TENSOR, VERSION_CHECKPOINT):
        raise DataError(f"{path}: unsupported .tns version {version}")
    offset = 7
    if len(raw) < offset + 4 * rank:
        raise DataError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", raw, offset)
    return version, tuple(int(d) for d in dims), offset + 4 * rank


def _read_payload(raw: bytes, dims: tuple[int, ...], offset: int, path: Path) -> tuple[np.ndarray, int]:
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    nbytes = count * 8
    if len(raw) < offset + nbytes:
        raise DataError(f"{path}: truncated payload (expected {nbytes} bytes)")
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return arr.reshape(dims), offset + nbytes


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    version, dims, offset = _parse_header(raw, path)
    if version != VERSION_TENSOR:
        raise DataError(f"{path}: expected a plain tensor, found version {version}")
    arr, end = _read_payload(raw, dims, offset, path)
    if end != len(raw):
        raise DataError(f"{path}: {len(raw) - end} trailing bytes after payload")
    return arr


def write_checkpoint(path: str | Path, params: np.ndarray, slices: dict[str, tuple[int, int]]) -> None:
    """Persist a flat parameter vector with its named-slice table."""

    params = np.ascontiguousarray(np.asarray(params, dtype=np.float64))
    if params.ndim != 1:
        raise ValueError("checkpoint parameters must be a flat vector")
    blob = MAGIC + struct.pack("<HB", VERSION_CHECKPOINT, 1)
    blob += struct.pack("<I", params.size)
    blob += params.astype("<f8").tobytes()
    blob += struct.pack("<I", len(slices))
    for name, (off, length) in slices.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"slice name too long: {name!r}")
        if off < 0 or length < 0 or off + length > params.size:
            raise ValueError(f"slice {name!r} out of bounds: ({off}, {length})")
        blob += struct.pack("<H", len(encoded)) + encoded + struct.pack("<QQ", off, length)
    Path(path).write_bytes(blob)


def read_checkpoint(path: str | Path) -> tuple[np.ndarray, dict[str, tuple[int, int]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    version, dims, offset = _parse_header(raw, path)
    if version != VERSION_CHECKPOINT:
        raise DataError(f"{path}: expected a checkpoint, found version {version}")
    if len(dims) != 1:
        raise DataError(f"{path}: checkpoint payload must be rank 1, found rank {len(dims)}")
    params, offset = _read_payload(raw, dims, offset, path)
    try:
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        slices: dict[str, tuple[int, int]] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            off, length = struct.unpack_from("<QQ", raw, offset)
            offset += 16
            if off + length > params.size:
                raise DataError(f"{path}: slice {name!r} exceeds payload")
            slices[name] = (int(off), int(length))
    except struct.error as exc:
        raise DataError(f"{path}: truncated slice table") from exc
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes after slice table")
    return params, slices


def write_sidecar(path: str | Path, mapping: dict[str, object]) -> None:
    lines = []
    for key, value in mapping.items():
        if not key or any(ch in key for ch in "=\n") or key != key.strip():
            raise ValueError(f"bad sidecar key: {key!r}")
        text = str(value)
        if "\n" in text:
            raise ValueError(f"sidecar value for {key!r} contains a newline")
        lines.append(f"{key}={text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _meta_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta")


def save_denoiser(path: str | Path, model: DenoiserModel) -> None:
    slices = {name: (model.slice_bounds(name)[0], int(np.prod(model.slice(name).shape)))
              for name in model.slice_names()}
    write_checkpoint(path, model.params, slices)
    write_sidecar(_meta_path(path), {
        "kind": "denoiser",
        "input_dim": model.arch.input_dim,
        "cond_dim": model.arch.cond_dim,
        "time_dim": model.arch.time_dim,
        "widths": ",".join(str(w) for w in model.arch.widths),
        "feat_dim": model.arch.feat_dim,
        "feat_scale": repr(model.arch.feat_scale),
        "feat_seed": model.arch.feat_seed,
        "params_hash": model.params_hash(),
    })


def load_denoiser(path: str | Path) -> DenoiserModel:
    params, _ = read_checkpoint(path)
    meta = read_sidecar(_meta_path(path))
    if meta.get("kind") != "denoiser":
        raise DataError(f"{_meta_path(path)}: expected kind=denoiser, got {meta.get('kind')!r}")
    try:
        arch = DenoiserArch(
            input_dim=int(meta["input_dim"]),
            cond_dim=int(meta["cond_dim"]),
            time_dim=int(meta["time_dim"]),
            widths=tuple(int(w) for w in meta["widths"].split(",")),
            feat_dim=int(meta.get("feat_dim", 0)),
            feat_scale=float(meta.get("feat_scale", 6.0)),
            feat_seed=int(meta.get("feat_seed", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{_meta_path(path)}: bad denoiser metadata ({exc})") from exc
    model = DenoiserModel(arch, params)
    if meta.get("params_hash") and model.params_hash() != meta["params_hash"]:
        raise DataError(f"{path}: checkpoint hash mismatch; file corrupted or edited")
    return model


def save_encoder(path: str | Path, encoder: TextEncoderStub, vocab: Vocabulary) -> None:
    write_tensor(path, encoder.table)
    write_sidecar(_meta_path(path), {
        "kind": "encoder",
        "tokens": ",".join(vocab.tokens),
        "params_hash": encoder.params_hash(),
    })


def load_encoder(path: str | Path) -> tuple[TextEncoderStub, Vocabulary]:
    table = read_tensor(path)
    if table.ndim != 2:
        raise DataError(f"{path}: encoder table must be rank 2")
    meta = read_sidecar(_meta_path(path))
    if meta.get("kind") != "encoder":
        raise DataError(f"{_meta_path(path)}: expected kind=encoder, got {meta.get('kind')!r}")
    vocab = Vocabulary(tokens=tuple(meta.get("tokens", "").split(",")))
    if len(vocab.tokens) != table.shape[0]:
        raise DataError(
            f"{path}: vocab has {len(vocab.tokens)} tokens, table has {table.shape[0]} rows"
        )
    return TextEncoderStub(table), vocab


def save_embedder(path: str | Path, emb: IdentityEmbedder) -> None:
    write_checkpoint(path, emb.params, {"all": (0, emb.params.size)})
    meta: dict[str, object] = {
        "kind": "embedder",
        "input_dim": emb.input_dim,
        "hidden": emb.hidden,
        "feat_dim": emb.feat_dim,
        "n_classes": emb.n_classes,
        "scale": repr(emb.scale),
    }
    for key, value in emb.metadata.items():
        meta[f"stat.{key}"] = repr(value)
    write_sidecar(_meta_path(path), meta)


def load_embedder(path: str | Path) -> IdentityEmbedder:
    params, _ = read_checkpoint(path)
    meta = read_sidecar(_meta_path(path))
    if meta.get("kind") != "embedder":
        raise DataError(f"{_meta_path(path)}: expected kind=embedder, got {meta.get('kind')!r}")
    try:
        emb = IdentityEmbedder(
            input_dim=int(meta["input_dim"]),
            hidden=int(meta["hidden"]),
            feat_dim=int(meta["feat_dim"]),
            n_classes=int(meta["n_classes"]),
            params=params,
            scale=float(meta["scale"]),
            metadata={k[len("stat."):]: float(v) for k, v in meta.items() if k.startswith("stat.")},
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{_meta_path(path)}: bad embedder metadata ({exc})") from exc
    return emb


def save_cloak(path: str | Path, cloak: Cloak) -> None:
    write_tensor(path, cloak.delta)
    write_sidecar(_meta_path(path), {
        "kind": "cloak",
        "eta": repr(cloak.eta),
        "alpha": repr(cloak.alpha),
        "iterations": cloak.iterations,
        "model_hash": cloak.model_hash,
        "subspace_hash": cloak.subspace_hash,
        "seed": cloak.seed,
        "norm_history": ",".join(repr(v) for v in cloak.norm_history),
    })


def load_cloak(path: str | Path) -> Cloak:
    delta = read_tensor(path)
    meta = read_sidecar(_meta_path(path))
    if meta.get("kind") != "cloak":
        raise DataError(f"{_meta_path(path)}: expected kind=cloak, got {meta.get('kind')!r}")
    try:
        history = [float(v) for v in meta.get("norm_history", "").split(",") if v]
        return Cloak(
            delta=delta,
            eta=float(meta["eta"]),
            alpha=float(meta["alpha"]),
            iterations=int(meta["iterations"]),
            model_hash=meta.get("model_hash", ""),
            subspace_hash=meta.get("subspace_hash", ""),
            seed=int(meta.get("seed", 0)),
            norm_history=history,
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{_meta_path(path)}: bad cloak metadata ({exc})") from exc


def save_subspace(path: str | Path, sub: IdentitySubspace) -> None:
    write_tensor(path, np.stack([sub.mu, sub.sigma]))
    write_sidecar(_meta_path(path), {
        "kind": "subspace",
        "n_anchors": sub.n_anchors,
        "ddof": sub.ddof,
    })


def load_subspace(path: str | Path) -> IdentitySubspace:
    arr = read_tensor(path)
    meta = read_sidecar(_meta_path(path))
    if meta.get("kind") != "subspace":
        raise DataError(f"{_meta_path(path)}: expected kind=subspace, got {meta.get('kind')!r}")
    if arr.ndim != 2 or arr.shape[0] != 2:
        raise DataError(f"{path}: subspace tensor must have shape (2, dim)")
    try:
        return IdentitySubspace(
            mu=arr[0], sigma=arr[1],
            n_anchors=int(meta["n_anchors"]), ddof=int(meta["ddof"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{_meta_path(path)}: bad subspace metadata ({exc})") from exc


def save_anchors(path: str | Path, anchors: AnchorSet) -> None:
    write_tensor(path, anchors.anchors)
    write_sidecar(_meta_path(path), {
        "kind": "anchors",
        "image_ids": ",".join(str(i) for i in anchors.image_ids),
    })


def load_anchors(path: str | Path) -> AnchorSet:
    arr = read_tensor(path)
    meta = read_sidecar(_meta_path(path))
    if meta.get("kind") != "anchors":
        raise DataError(f"{_meta_path(path)}: expected kind=anchors, got {meta.get('kind')!r}")
    if arr.ndim != 2:
        raise DataError(f"{path}: anchors tensor must be rank 2")
    raw_ids = meta.get("image_ids", "")
    try:
        ids = tuple(int(i) for i in raw_ids.split(",")) if raw_ids else ()
    except ValueError as exc:
        raise DataError(f"{_meta_path(path)}: bad image_ids {raw_ids!r}") from exc
    if len(ids) != arr.shape[0]:
        raise DataError(f"{path}: {len(ids)} image ids for {arr.shape[0]} anchors")
    return AnchorSet(anchors=arr, image_ids=ids)
