"""On-disk formats: sequence archives, checkpoints and flat config files.

Sequence archive layout (little-endian throughout)::

    OCCSTEP-ARCHIVE v1
    key=value            one per line, see ``_manifest_lines``
    END
    <frames>             uint8, one byte per voxel, raster order, -1 stored as 255
    <poses>              float64, 16 per frame, row-major 4x4
    <relatives>          float64, 16 per relative
    <view masks>         optional, np.packbits of each frame's boolean mask

Frame times and geometry ranges are written with ``repr`` so every float
survives the round trip exactly.
"""

from __future__ import annotations

import ast
import dataclasses
import json
import os
import typing
from pathlib import Path

import numpy as np

from .grid import IGNORE, GridGeometry, SemanticOccGrid
from .sequence import OccSequence

MAGIC = "OCCSTEP-ARCHIVE"
VERSION = 1
SUFFIX = ".occ"


class ArchiveError(ValueError):
    pass


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")] if text else []


def _manifest_lines(seq: OccSequence) -> list[str]:
    g = seq.geometry
    return [
        f"{MAGIC} v{VERSION}",
        "dims=" + ",".join(str(d) for d in g.dims),
        f"K={seq.num_classes}",
        "ranges=" + _floats(g.ranges),
        f"flip_y={int(g.flip_y)}",
        f"frames={len(seq)}",
        "times=" + _floats(seq.frame_times),
        f"view_masks={int(seq.view_masks is not None)}",
        "meta=" + json.dumps(seq.meta, sort_keys=True, separators=(",", ":"), default=_json_default),
        "END",
    ]


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__} in sequence metadata")


def encode_archive(seq: OccSequence) -> bytes:
    head = ("\n".join(_manifest_lines(seq)) + "\n").encode("utf-8")
    parts = [head]
    for f in seq.frames:
        lab = f.labels
        if lab.min() < IGNORE or lab.max() > 254:
            raise ArchiveError("labels must lie in [-1, 254] to fit one byte")
        parts.append(np.where(lab == IGNORE, 255, lab).astype(np.uint8).tobytes())
    for p in seq.poses:
        parts.append(np.asarray(p, dtype="<f8").tobytes())
    for r in seq.relatives:
        parts.append(np.asarray(r, dtype="<f8").tobytes())
    if seq.view_masks is not None:
        for m in seq.view_masks:
            parts.append(np.packbits(np.asarray(m, bool).reshape(-1)).tobytes())
    return b"".join(parts)


def decode_archive(blob: bytes) -> OccSequence:
    end = blob.find(b"\nEND\n")
    if end < 0:
        raise ArchiveError("manifest terminator END not found")
    lines = blob[:end].decode("utf-8").split("\n")
    if lines[0] != f"{MAGIC} v{VERSION}":
        raise ArchiveError(f"unsupported archive header {lines[0]!r}")
    kv = {}
    for line in lines[1:]:
        key, sep, val = line.partition("=")
        if not sep:
            raise ArchiveError(f"malformed manifest line {line!r}")
        kv[key] = val
    try:
        dims = tuple(int(v) for v in kv["dims"].split(","))
        K = int(kv["K"])
        g = GridGeometry(dims, tuple(_parse_floats(kv["ranges"])), bool(int(kv["flip_y"])))
        n = int(kv["frames"])
        times = np.array(_parse_floats(kv["times"]), dtype=np.float64)
        has_masks = bool(int(kv["view_masks"]))
        meta = json.loads(kv["meta"])
    except (KeyError, ValueError) as e:
        raise ArchiveError(f"bad manifest: {e}") from None
    payload = memoryview(blob)[end + len(b"\nEND\n"):]
    nv = g.num_voxels
    mask_bytes = (nv + 7) // 8
    expected = n * nv + n * 128 + max(n - 1, 0) * 128 + (n * mask_bytes if has_masks else 0)
    if len(payload) != expected:
        raise ArchiveError(f"payload is {len(payload)} bytes, manifest implies {expected}")
    off = 0
    frames = []
    for _ in range(n):
        raw = np.frombuffer(payload, np.uint8, nv, off).astype(np.int16)
        raw[raw == 255] = IGNORE
        frames.append(SemanticOccGrid(raw.reshape(dims), K, g))
        off += nv

    def mats(count):
        nonlocal off
        out = []
        for _ in range(count):
            out.append(np.frombuffer(payload, "<f8", 16, off).reshape(4, 4).astype(np.float64))
            off += 128
        return out

    poses = mats(n)
    rel = mats(n - 1)
    masks = None
    if has_masks:
        masks = []
        for _ in range(n):
            bits = np.frombuffer(payload, np.uint8, mask_bytes, off)
            masks.append(np.unpackbits(bits, count=nv).astype(bool).reshape(dims))
            off += mask_bytes
    return OccSequence(frames, poses, rel, times, masks, meta)


def write_archive(seq: OccSequence, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_archive(seq))
    return path


def read_archive(path) -> OccSequence:
    return decode_archive(Path(path).read_bytes())


def list_archives(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    return sorted(d.glob(f"*{SUFFIX}"))


# ------------------------------------------------------------------ checkpoints


def _config_echo(cfg) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=_json_default)


def save_checkpoint(path, model, seed: int, step: int, optimizer=None, state=None,
                    extra: dict | None = None):
    """npz with ``param/<name>`` arrays, a JSON config echo, seed, step, Adam moments
    and the recurrent state carried by the training loop."""
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["config"] = np.array(_config_echo(model.cfg))
    arrays["seed"] = np.array(int(seed))
    arrays["step"] = np.array(int(step))
    if optimizer is not None:
        st = optimizer.state()
        arrays["adam/t"] = np.array(st["t"])
        names = list(model.params)
        for name, m, v in zip(names, st["m"], st["v"]):
            arrays[f"adam/m/{name}"] = m
            arrays[f"adam/v/{name}"] = v
    if state is not None:
        arrays["train/state"] = state.S.data
        arrays["train/frame_index"] = np.array(int(state.frame_index))
    if extra:
        arrays["extra"] = np.array(json.dumps(extra, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, cfg=None):
    """Returns (model, info) where info holds seed, step, config and Adam state (or None)."""
    from .model import OccWorldModel

    with np.load(Path(path), allow_pickle=False) as z:
        files = dict((k, z[k]) for k in z.files)
    echo = json.loads(str(files["config"]))
    stored = model_config_from_dict(echo)
    if cfg is not None and _config_echo(cfg) != _config_echo(stored):
        raise ValueError("checkpoint was written for a different model configuration")
    params = {k[len("param/"):]: v for k, v in files.items() if k.startswith("param/")}
    model = OccWorldModel(stored, params, dtype=next(iter(params.values())).dtype)
    adam = None
    if "adam/t" in files:
        names = list(model.params)
        adam = {"t": int(files["adam/t"]), "m": [files[f"adam/m/{n}"] for n in names],
                "v": [files[f"adam/v/{n}"] for n in names]}
    state = None
    if "train/state" in files:
        from .model import PersistentState
        from .tensor import Tensor

        state = PersistentState(Tensor(files["train/state"]), int(files["train/frame_index"]))
    info = {"seed": int(files["seed"]), "step": int(files["step"]), "config": echo, "adam": adam,
            "state": state,
            "extra": json.loads(str(files["extra"])) if "extra" in files else {}}
    return model, info


def model_config_from_dict(d: dict):
    from .model import ModelConfig

    d = dict(d)
    g = d.pop("grid")
    grid = GridGeometry(tuple(g["dims"]), tuple(g["ranges"]), bool(g["flip_y"]))
    d["srd_widths"] = tuple(d["srd_widths"])
    return ModelConfig(grid=grid, **d)


# ------------------------------------------------------------------ flat config files


def _coerce(raw: str, annotation):
    text = raw.strip()
    origin = typing.get_origin(annotation)
    if annotation in (bool, "bool"):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if annotation in (int, "int"):
        return int(text)
    if annotation in (float, "float"):
        return float(text)
    if annotation in (str, "str"):
        return text
    value = ast.literal_eval(text if text.startswith(("(", "[")) else f"({text},)")
    if origin is tuple or str(annotation).startswith("tuple"):
        return tuple(value)
    return value


def parse_config_text(text: str, sections: dict[str, type]) -> dict[str, dict]:
    """Parse ``section.field = value`` lines into per-section override dicts.

    Blank lines and ``#`` comments are skipped.  An unknown section or field is
    an error, so a typo cannot silently fall back to a default.
    """
    out: dict[str, dict] = {name: {} for name in sections}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        section, dot, name = key.strip().partition(".")
        if not dot or section not in sections:
            raise ValueError(f"line {lineno}: unknown config key {key.strip()!r}")
        fields = {f.name: f for f in dataclasses.fields(sections[section])}
        if name not in fields or name == "grid":
            raise ValueError(f"line {lineno}: unknown config key {key.strip()!r}")
        hints = typing.get_type_hints(sections[section])
        try:
            out[section][name] = _coerce(value, hints.get(name, fields[name].type))
        except (ValueError, SyntaxError) as e:
            raise ValueError(f"line {lineno}: bad value for {key.strip()}: {e}") from None
    return out


def read_config(path, sections: dict[str, type]) -> dict[str, dict]:
    return parse_config_text(Path(path).read_text(), sections)


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get("OCCSTEP_THREADS")
    if raw is None or raw == "":
        return default
    n = int(raw)
    if n < 1:
        raise ValueError("OCCSTEP_THREADS must be >= 1")
    return n
