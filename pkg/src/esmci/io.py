"""Binary model files.

Both formats are an 8-byte magic, a little-endian uint32 header length, a
UTF-8 JSON header, then payload.  A network payload is every weight matrix
(row-major, fan_out x fan_in) followed by every bias vector, all as
little-endian float64.  An ensemble payload is B length-prefixed (uint64)
network records.  Subsample index lists are stored as runs of consecutive
indices, [[start, length], ...].
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from esmci.ensemble import EnsembleModel, SubsampleDesign
from esmci.errors import FormatError
from esmci.expfam import FamilySpec
from esmci.net import Network, NetworkConfig

NET_MAGIC = b"ESMNET1\n"
ENS_MAGIC = b"ESMENS1\n"
_F8 = np.dtype("<f8")


def _check_magic(data: bytes, magic: bytes, what: str) -> None:
    head = data[:8]
    if head == magic:
        return
    if head[:6] == magic[:6]:
        raise FormatError(f"unsupported {what} format version {head[6:7].decode(errors='replace')!r}; "
                          f"this build reads version {magic[6:7].decode()}")
    raise FormatError(f"not an {what} file (bad magic)")


def _pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", len(h)) + h + payload


def _unpack(data: bytes, magic: bytes, what: str) -> tuple[dict, memoryview]:
    _check_magic(data, magic, what)
    if len(data) < 12:
        raise FormatError(f"truncated {what} file")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(bytes(data[12:12 + hlen]).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt {what} header: {exc}") from None
    return header, memoryview(data)[12 + hlen:]


def network_to_bytes(net: Network) -> bytes:
    header = {
        "config": net.config.to_dict(),
        "final_train_loss": net.final_train_loss,
    }
    payload = b"".join(np.ascontiguousarray(W, dtype=_F8).tobytes() for W in net.weights)
    payload += b"".join(np.ascontiguousarray(b, dtype=_F8).tobytes() for b in net.biases)
    return _pack(NET_MAGIC, header, payload)


def network_from_bytes(data: bytes) -> Network:
    header, payload = _unpack(data, NET_MAGIC, "ESMNET")
    config = NetworkConfig.from_dict(header["config"])
    w = config.widths
    shapes = [(w[l + 1], w[l]) for l in range(len(w) - 1)] + [(w[l + 1],) for l in range(len(w) - 1)]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(payload) != need:
        raise FormatError(f"network payload has {len(payload)} bytes, expected {need}")
    arrays, off = [], 0
    for s in shapes:
        k = int(np.prod(s))
        arrays.append(np.frombuffer(payload, dtype=_F8, count=k, offset=off).reshape(s).astype(np.float64))
        off += 8 * k
    L = len(w) - 1
    return Network(config, arrays[:L], arrays[L:], float(header["final_train_loss"]))


def encode_runs(indices) -> list[list[int]]:
    runs: list[list[int]] = []
    for i in map(int, indices):
        if runs and runs[-1][0] + runs[-1][1] == i:
            runs[-1][1] += 1
        else:
            runs.append([i, 1])
    return runs


def decode_runs(runs) -> list[int]:
    return [s + k for s, n in runs for k in range(n)]


def ensemble_to_bytes(model: EnsembleModel, feature_names: list[str] | None = None) -> bytes:
    d = model.design
    header = {
        "format_version": 1,
        "family": model.spec.to_dict(),
        "design": {"n": d.n, "r": d.r, "B": d.B, "complete": d.complete,
                   "indices": [encode_runs(row) for row in d.indices]},
        "master_seed": model.master_seed,
        "config": model.config.to_dict(),
        "center": None if model.center is None else [float(v) for v in model.center],
        "scale": None if model.scale is None else [float(v) for v in model.scale],
        "feature_names": feature_names if feature_names is not None else getattr(model, "feature_names", None),
    }
    blobs = [network_to_bytes(net) for net in model.networks]
    payload = b"".join(struct.pack("<Q", len(b)) + b for b in blobs)
    return _pack(ENS_MAGIC, header, payload)


def ensemble_from_bytes(data: bytes) -> EnsembleModel:
    header, payload = _unpack(data, ENS_MAGIC, "ESMENS")
    if header.get("format_version") != 1:
        raise FormatError(f"unsupported ensemble format_version {header.get('format_version')!r}")
    dd = header["design"]
    idx = np.array([decode_runs(runs) for runs in dd["indices"]], dtype=np.int64).reshape(dd["B"], dd["r"])
    design = SubsampleDesign(dd["n"], dd["r"], dd["B"], idx, dd["complete"])
    nets, off = [], 0
    buf = bytes(payload)
    for _ in range(dd["B"]):
        if off + 8 > len(buf):
            raise FormatError("truncated ensemble payload")
        (k,) = struct.unpack_from("<Q", buf, off)
        nets.append(network_from_bytes(buf[off + 8:off + 8 + k]))
        off += 8 + k
    if off != len(buf):
        raise FormatError("trailing bytes after the last network")
    center = None if header["center"] is None else np.array(header["center"])
    scale = None if header["scale"] is None else np.array(header["scale"])
    model = EnsembleModel(FamilySpec.from_dict(header["family"]), design, nets,
                          int(header["master_seed"]), NetworkConfig.from_dict(header["config"]),
                          center, scale)
    model.feature_names = header.get("feature_names")
    return model


def save_ensemble(model: EnsembleModel, path: str | os.PathLike, feature_names: list[str] | None = None) -> None:
    data = ensemble_to_bytes(model, feature_names)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_ensemble(path: str | os.PathLike) -> EnsembleModel:
    with open(path, "rb") as fh:
        return ensemble_from_bytes(fh.read())
