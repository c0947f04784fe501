"""File formats: the matrix bundle container, checkpoints, key=value configs,
and text exports (CSV, DOT, SVG).

Bundle layout (all integers little-endian)::

    magic          8 bytes   b"RICAMB01" (data) or b"RICACP01" (checkpoint)
    n_arrays       u32
    per array:     u16 name_len, name (UTF-8), u8 ndim, ndim x u64 dims,
                   prod(dims) x float64 payload, row-major
    n_meta         u32
    per entry:     u16 key_len, key (UTF-8), u32 val_len, value (UTF-8)
"""
from __future__ import annotations

import ast
import json
import struct
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (BadMagic, ConfigError, ConfigMismatch, ConfigTypeError, DataFormatError,
                     DimOverflow, DuplicateName, MissingRequired, TruncatedFile, UnknownKey)
from .model import PARAM_NAMES, ModelParams
from .synth import SimConfig
from .train import OptimizerState, TrainConfig, TrainState

BUNDLE_MAGIC = b"RICAMB01"
CHECKPOINT_MAGIC = b"RICACP01"
MAX_ELEMENTS = 2**60


@dataclass
class MatrixBundle:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name, array):
        if name in self.arrays:
            raise DuplicateName(f"array {name!r} already present")
        self.arrays[name] = np.ascontiguousarray(array, dtype=np.float64)

    def __getitem__(self, name):
        try:
            return self.arrays[name]
        except KeyError:
            raise DataFormatError(f"bundle has no array named {name!r}") from None

    def __contains__(self, name):
        return name in self.arrays

    def names(self, prefix=""):
        return [n for n in self.arrays if n.startswith(prefix)]

    def series(self, prefix):
        """Arrays named ``prefix + index`` in index order (e.g. ``obs/000``)."""
        return [self.arrays[n] for n in sorted(self.names(prefix))]


def encode_bundle(bundle: MatrixBundle, magic=BUNDLE_MAGIC) -> bytes:
    out = [magic, struct.pack("<I", len(bundle.arrays))]
    for name, arr in bundle.arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype("<f8").tobytes(order="C"))
    out.append(struct.pack("<I", len(bundle.metadata)))
    for key, value in bundle.metadata.items():
        k, v = str(key).encode("utf-8"), str(value).encode("utf-8")
        out.append(struct.pack("<H", len(k)) + k + struct.pack("<I", len(v)) + v)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_bundle(data: bytes, magic=BUNDLE_MAGIC) -> MatrixBundle:
    r = _Reader(data)
    head = data[:8]
    if len(head) < 8 or head != magic:
        raise BadMagic(f"expected magic {magic!r}, found {head!r}")
    r.take(8)
    bundle = MatrixBundle()
    (count,) = r.unpack("<I")
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}Q")
        size = 1
        for d in dims:
            size *= d
            if size > MAX_ELEMENTS:
                raise DimOverflow(f"array {name!r} declares {dims}")
        if size * 8 > len(data) - r.pos:
            raise TruncatedFile(f"array {name!r} payload runs past end of file")
        payload = np.frombuffer(r.take(size * 8), dtype="<f8").astype(np.float64)
        if name in bundle.arrays:
            raise DuplicateName(f"array {name!r} appears twice")
        bundle.arrays[name] = payload.reshape(dims)
    (meta_count,) = r.unpack("<I")
    for _ in range(meta_count):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<I")
        bundle.metadata[key] = r.take(vlen).decode("utf-8")
    if r.pos != len(data):
        raise DataFormatError(f"{len(data) - r.pos} trailing bytes after bundle")
    return bundle


def write_bundle(path, bundle: MatrixBundle, magic=BUNDLE_MAGIC):
    Path(path).write_bytes(encode_bundle(bundle, magic))


def read_bundle(path, magic=BUNDLE_MAGIC) -> MatrixBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror}") from None
    return decode_bundle(data, magic)


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    state: TrainState
    config: TrainConfig

    @property
    def params(self):
        return self.state.params


def checkpoint_bundle(state: TrainState, cfg: TrainConfig) -> MatrixBundle:
    b = MatrixBundle()
    for name in PARAM_NAMES:
        b.add(f"param/{name}", getattr(state.params, name))
    for name in PARAM_NAMES:
        b.add(f"opt/{name}", getattr(state.opt.accum, name))
    b.add("history", np.asarray(state.history, dtype=np.float64))
    b.metadata.update({
        "kind": "checkpoint",
        "epoch": str(state.opt.epoch),
        "step": str(state.opt.step),
        "rng": f"philox seed={cfg.seed} next_epoch={state.opt.epoch + 1}",
        "config": json.dumps(cfg.to_dict(), sort_keys=True),
    })
    return b


def write_checkpoint(path, state: TrainState, cfg: TrainConfig):
    write_bundle(path, checkpoint_bundle(state, cfg), CHECKPOINT_MAGIC)
    return str(path)


def read_checkpoint(path, expect: TrainConfig | None = None) -> Checkpoint:
    b = read_bundle(path, CHECKPOINT_MAGIC)
    try:
        cfg = TrainConfig(**json.loads(b.metadata["config"]))
        epoch = int(b.metadata["epoch"])
        step = int(b.metadata["step"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed checkpoint metadata ({exc})") from None
    hyper = dict(sigma_floor=cfg.sigma_floor, leaky_first_step=cfg.leaky_first_step,
                 dropout_keep=cfg.dropout_keep)
    params = ModelParams(**{n: np.array(b[f"param/{n}"]) for n in PARAM_NAMES}, **hyper)
    accum = ModelParams(**{n: np.array(b[f"opt/{n}"]) for n in PARAM_NAMES}, **hyper)
    params.check_shapes()
    if expect is not None:
        for key in ("n_components", "hidden_units", "mlp_units"):
            if getattr(expect, key) != getattr(cfg, key):
                raise ConfigMismatch(f"checkpoint has {key}={getattr(cfg, key)}, "
                                     f"config asks for {getattr(expect, key)}")
    state = TrainState(params, OptimizerState(accum, epoch, step), [float(v) for v in b["history"]])
    return Checkpoint(state, cfg)


# -- key = value configs ------------------------------------------------------------

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _convert(key, raw, type_name):
    t = type_name.replace(" ", "")
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            return _BOOL[raw.lower()]
        if t == "str":
            return raw[1:-1] if raw[:1] in "\"'" and raw[-1:] == raw[:1] else raw
        if t.startswith("list"):
            if raw.lower() == "none" and "None" in t:
                return None
            value = ast.literal_eval(raw)
            if not isinstance(value, (list, tuple)):
                raise ValueError("expected a bracketed list")
            return _to_lists(value)
    except (ValueError, KeyError, SyntaxError) as exc:
        raise ConfigTypeError(f"{key}: cannot read {raw!r} as {type_name} ({exc})") from None
    raise ConfigTypeError(f"{key}: unsupported field type {type_name}")


def _to_lists(value):
    if isinstance(value, (list, tuple)):
        return [_to_lists(v) for v in value]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"non-numeric entry {value!r}")
    return float(value)


def parse_config(text, kind="train"):
    """Parse ``key = value`` lines into a :class:`TrainConfig` or :class:`SimConfig`.

    ``#`` starts a comment. Matrices are bracketed row lists such as
    ``[[0.9, 0.1], [0.1, 0.9]]``. Unknown keys and malformed values are errors.
    """
    cls = {"train": TrainConfig, "sim": SimConfig}[kind]
    types = {f.name: f.type for f in fields(cls)}
    required = {f.name for f in fields(cls) if f.default is MISSING and f.default_factory is MISSING}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise UnknownKey(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        values[key] = _convert(key, raw, str(types[key]))
    missing = sorted(required - set(values))
    if missing:
        raise MissingRequired(f"missing required key(s): {', '.join(missing)}")
    return cls(**values)


def load_config(path, kind="train"):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, kind)


def format_config(cfg) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            text = json.dumps(value)
        else:
            text = repr(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# -- CSV -----------------------------------------------------------------------------

def format_number(x):
    return "nan" if np.isnan(x) else f"{x:.17g}"


def csv_text(matrix, header=None):
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    rows = [",".join(header)] if header else []
    rows += [",".join(format_number(v) for v in row) for row in m]
    return "\n".join(rows) + "\n"


def write_csv(path, matrix, header=None):
    Path(path).write_text(csv_text(matrix, header), encoding="utf-8")


def read_csv(path, header=False):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if header:
        lines = lines[1:]
    try:
        return np.array([[float(v) for v in line.split(",")] for line in lines if line.strip()])
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


# -- DOT / SVG -------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def export_dot(graph, threshold=0.0):
    """Directed graph text; edges with |weight| >= threshold, sorted by (i, j)."""
    lines = ["digraph rica {"]
    for node, label in zip(graph.nodes, graph.labels):
        attrs = [f'label="{label}"']
        if graph.communities is not None:
            c = int(graph.communities[node])
            attrs.append(f'color="{PALETTE[c % len(PALETTE)]}"')
            attrs.append(f'group="c{c}"')
        lines.append(f"  {node} [{', '.join(attrs)}];")
    kept = sorted((i, j, w) for i, j, w in graph.edges if abs(w) >= threshold)
    top = max((abs(w) for _, _, w in kept), default=0.0)
    for i, j, w in kept:
        pen = 1.0 + 4.0 * abs(w) / top if top > 0 else 1.0
        lines.append(f"  {i} -> {j} [weight={w:.6g}, penwidth={pen:.3g}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _diverging(v, vmin, vmax):
    mid = 0.5 * (vmin + vmax)
    if np.isnan(v):
        return "#cccccc"
    if v >= mid:
        f = min(1.0, (v - mid) / max(vmax - mid, 1e-300))
        r, g, b = 255, round(255 * (1 - f)), round(255 * (1 - f))
    else:
        f = min(1.0, (mid - v) / max(mid - vmin, 1e-300))
        r, g, b = round(255 * (1 - f)), round(255 * (1 - f)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def svg_heatmap(matrix, labels=None, vmin=-1.0, vmax=1.0, cell=16):
    """Heatmap with a blue-white-red scale; one ``rect`` per cell."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    margin = 40 if labels is not None else 0
    width, height = margin + cols * cell, margin + rows * cell
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    if labels is not None:
        for i, lab in enumerate(labels[:rows]):
            y = margin + i * cell + cell * 0.7
            out.append(f'<text x="{margin - 2}" y="{y:g}" font-size="{cell * 0.6:g}" '
                       f'text-anchor="end">{lab}</text>')
    for i in range(rows):
        for j in range(cols):
            out.append(f'<rect x="{margin + j * cell}" y="{margin + i * cell}" width="{cell}" '
                       f'height="{cell}" fill="{_diverging(m[i, j], vmin, vmax)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg_heatmap(path, matrix, labels=None, vmin=-1.0, vmax=1.0, cell=16):
    Path(path).write_text(svg_heatmap(matrix, labels, vmin, vmax, cell), encoding="utf-8")
