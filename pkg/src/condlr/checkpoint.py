"""Network checkpoints as zip archives of ``.npy`` arrays plus a JSON header.

Container (format version 1), readable with ``numpy.load``:

    meta.npy          0-d unicode array holding the JSON header below
    layer<i>.<name>.npy   float64 payload arrays, row-major

Header::

    {"format": "condlr-checkpoint", "version": 1, "num_classes": 10,
     "layers": [{"kind": "dense" | "factorized" | "uv",
                 "activation": "<tag>",           # e.g. "leaky_relu(0.01)"
                 "shape": [out, in],
                 "rank": r,                       # factorized and uv only
                 "arrays": ["W", "bias"],         # payload names present
                 "tau": 0.1, "s_band": ..., "eps_band": ...}],   # factorized only
     "extra": {...}}                              # free-form run metadata

``tau`` is null for the noband variant, ``eps_band`` may be "inf". Zip
entries carry a fixed timestamp so equal networks give equal bytes.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from pathlib import Path

import numpy as np

from .errors import DataError
from .lowrank import FactorizedLayer, UVLayer
from .nn import Activation, DenseLayer, Network

FORMAT = "condlr-checkpoint"
VERSION = 1
_ARRAYS = {"dense": ("W",), "factorized": ("U", "S", "V"), "uv": ("U", "V")}
_STAMP = (1980, 1, 1, 0, 0, 0)


def _encode_float(x):
    if x is None:
        return None
    return "inf" if math.isinf(x) else float(x)


def _decode_float(x):
    if x is None:
        return None
    return float("inf") if x == "inf" else float(x)


def _npy_bytes(array):
    buf = io.BytesIO()
    # ascontiguousarray would promote the 0-d metadata string to 1-d
    array = np.asarray(array)
    np.lib.format.write_array(buf, array if array.ndim == 0 else np.ascontiguousarray(array),
                              allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(net, path, extra=None):
    layers, payload = [], {}
    for i, layer in enumerate(net.layers):
        kind = getattr(layer, "kind", "dense")
        names = list(_ARRAYS[kind])
        entry = {"kind": kind, "activation": layer.activation.tag,
                 "shape": [layer.out_features, layer.in_features]}
        if kind != "dense":
            entry["rank"] = layer.rank
        if kind == "factorized":
            entry.update(tau=layer.tau, s_band=float(layer.s_band),
                         eps_band=_encode_float(layer.eps_band))
        if layer.bias is not None:
            names.append("bias")
        entry["arrays"] = names
        for name in names:
            payload[f"layer{i}.{name}"] = np.asarray(getattr(layer, name), dtype=np.float64)
        layers.append(entry)
    meta = {"format": FORMAT, "version": VERSION, "num_classes": net.num_classes,
            "layers": layers, "extra": extra or {}}
    entries = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    entries.update(payload)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, array in entries.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_STAMP)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, _npy_bytes(array))
    return Path(path)


def load_checkpoint(path):
    """Return (network, extra metadata)."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"].reshape(-1)[0]))
            arrays = {k: data[k] for k in data.files if k != "meta"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise DataError(f"{path}: not a version-{VERSION} {FORMAT} file")
    layers = []
    for i, entry in enumerate(meta["layers"]):
        get = {name: arrays[f"layer{i}.{name}"] for name in entry["arrays"]}
        act = Activation.parse(entry["activation"])
        bias = get.get("bias")
        kind = entry["kind"]
        if kind == "dense":
            layers.append(DenseLayer(get["W"], bias, act))
        elif kind == "factorized":
            layers.append(FactorizedLayer(get["U"], get["S"], get["V"], bias, act, entry["tau"],
                                          entry["s_band"], _decode_float(entry["eps_band"])))
        elif kind == "uv":
            layers.append(UVLayer(get["U"], get["V"], bias, act))
        else:
            raise DataError(f"{path}: unknown layer kind {kind!r}")
    return Network(layers, meta["num_classes"]), meta.get("extra", {})
