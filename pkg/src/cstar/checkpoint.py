"""Model checkpoints: a text manifest followed by raw little-endian float64 arrays.

Layout::

    cstar-checkpoint 1
    input_shape 3,12,12
    num_classes 10
    compressible block1.conv,block2.conv
    layer <name> <kind> [key=value ...]
    array <layer> <param|buffer> <key> <offset> <d0,d1,...>
    ...
    payload <nbytes>
    end
    <payload bytes>

``layer`` lines appear in model order, each followed by its ``array`` lines.
Array offsets are relative to the first payload byte and must tile the
payload contiguously. Factorized convolutions store ``u1``, ``u2``, ``g`` and
carry ``ranks=r1,r2`` on their layer line.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import (AvgPoolGlobal, BatchNorm, ConvDense, ConvFactorized, Flatten, Layer, Linear,
                 MaxPool, Model, ReLU)
from .tucker import Tucker2Factors

MAGIC_LINE = "cstar-checkpoint 1"
_DTYPE = np.dtype("<f8")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",")) if s else ()


def _fmt_ints(t) -> str:
    return ",".join(str(int(v)) for v in t)


def _layer_options(layer: Layer) -> dict[str, str]:
    opts = {k: repr(v) if isinstance(v, float) else str(v) for k, v in layer.config().items()}
    if isinstance(layer, ConvFactorized):
        opts["ranks"] = _fmt_ints(layer.ranks)
    return opts


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Write ``model`` atomically (temp file, then rename)."""
    lines = [
        MAGIC_LINE,
        f"input_shape {_fmt_ints(model.input_shape)}",
        f"num_classes {model.num_classes}",
        f"compressible {','.join(model.compressible)}",
    ]
    chunks, offset = [], 0
    for layer in model.layers:
        opts = " ".join(f"{k}={v}" for k, v in _layer_options(layer).items())
        lines.append(f"layer {layer.name} {layer.kind}" + (f" {opts}" if opts else ""))
        for group, arrays in (("param", layer.params), ("buffer", layer.buffers)):
            for key, a in arrays.items():
                data = np.ascontiguousarray(a, dtype=_DTYPE).tobytes()
                lines.append(f"array {layer.name} {group} {key} {offset} {_fmt_ints(a.shape)}")
                chunks.append(data)
                offset += len(data)
    lines += [f"payload {offset}", "end"]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def _build(name: str, kind: str, opts: dict, params: dict, buffers: dict) -> Layer:
    stride, padding = int(opts.get("stride", 1)), int(opts.get("padding", 0))
    if kind == "conv":
        layer = ConvDense(params["weight"], params["bias"], stride, padding, name)
    elif kind == "conv_tucker2":
        f = Tucker2Factors(params["u1"], params["u2"], params["g"])
        if "ranks" in opts and _ints(opts["ranks"]) != f.ranks:
            raise FormatError(f"layer {name}: ranks {opts['ranks']} disagree with core {f.g.shape}")
        layer = ConvFactorized(f, params["bias"], stride, padding, name)
    elif kind == "linear":
        layer = Linear(params["weight"], params["bias"], name)
    elif kind == "relu":
        layer = ReLU(name)
    elif kind == "maxpool":
        layer = MaxPool(int(opts["window"]), int(opts["stride"]), name)
    elif kind == "avgpool_global":
        layer = AvgPoolGlobal(name)
    elif kind == "flatten":
        layer = Flatten(name)
    elif kind == "batchnorm":
        layer = BatchNorm(len(params["scale"]), float(opts["momentum"]), float(opts["eps"]), name)
        layer.params.update(params)
        layer.buffers.update(buffers)
    else:
        raise FormatError(f"layer {name}: unknown kind {kind!r}")
    expected = set(layer.params) | set(layer.buffers)
    if expected != set(params) | set(buffers):
        raise FormatError(f"layer {name}: arrays {sorted(set(params) | set(buffers))}, "
                          f"expected {sorted(expected)}")
    return layer


def load_checkpoint(path: str | Path) -> Model:
    """Read a checkpoint; any inconsistency raises :class:`FormatError`, never a partial model."""
    blob = Path(path).read_bytes()
    end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC_LINE.encode() + b"\n"):
        raise FormatError(f"{path}: missing checkpoint header at offset 0")
    if end < 0:
        raise FormatError(f"{path}: manifest terminator not found (file is {len(blob)} bytes)")
    start = end + len(b"\nend\n")
    header = {}
    layers: list[tuple[str, str, dict, dict, dict]] = []
    payload_size = None
    expect = 0
    pos = 0
    for lineno, line in enumerate(blob[:end].decode("ascii", "replace").split("\n")[1:], start=2):
        pos = blob.find(line.encode("ascii", "replace"), pos)
        parts = line.split()

        def fail(msg):
            raise FormatError(f"{path}: line {lineno} (offset {pos}): {msg}")

        try:
            if not parts:
                fail("empty line")
            tag = parts[0]
            if tag in ("input_shape", "num_classes", "compressible"):
                header[tag] = parts[1] if len(parts) > 1 else ""
            elif tag == "layer":
                opts = dict(p.split("=", 1) for p in parts[3:])
                layers.append((parts[1], parts[2], opts, {}, {}))
            elif tag == "array":
                lname, group, key, off, shape = parts[1:6]
                if not layers or layers[-1][0] != lname:
                    fail(f"array for {lname} outside its layer block")
                shape = _ints(shape)
                off = int(off)
                if off != expect:
                    fail(f"array {lname}.{key} at offset {off}, expected {expect}")
                n = int(np.prod(shape, dtype=np.int64))
                if start + off + 8 * n > len(blob):
                    fail(f"array {lname}.{key} runs past end of file "
                         f"(needs byte {start + off + 8 * n}, file has {len(blob)})")
                a = np.frombuffer(blob, _DTYPE, n, start + off).reshape(shape).astype(np.float64)
                layers[-1][3 if group == "param" else 4][key] = a
                expect = off + 8 * n
            elif tag == "payload":
                payload_size = int(parts[1])
            else:
                fail(f"unknown record {tag!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            fail(f"malformed record: {exc}")
    if payload_size is None or payload_size != expect:
        raise FormatError(f"{path}: payload size {payload_size} does not match arrays ({expect} bytes)")
    if len(blob) - start != payload_size:
        raise FormatError(f"{path}: payload at offset {start} should be {payload_size} bytes, "
                          f"found {len(blob) - start}")
    missing = {"input_shape", "num_classes", "compressible"} - set(header)
    if missing:
        raise FormatError(f"{path}: manifest lacks {sorted(missing)}")
    try:
        built = [_build(*entry) for entry in layers]
        comp = [c for c in header["compressible"].split(",") if c]
        return Model(built, _ints(header["input_shape"]), int(header["num_classes"]), comp)
    except FormatError:
        raise
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint: {exc}") from exc
