"""Weight manifests, dataset files and CSV output.

Manifest format (JSON, ``version: "specbound-manifest/1"``)::

    {
      "version": "specbound-manifest/1",
      "input_shape": [32, 32, 3],            # optional (H, W, C)
      "num_classes": 10,                     # optional
      "layers": [
        {"name": "conv1", "kind": "conv2d", "a": 3, "b": 32, "q": 3, "N": 32,
         "padding": "same", "pool": 2,
         "dtype": "f32le", "blob": "weights.bin", "offset": 0, "count": 864,
         "layout": "row-major [b][a][q][q]",
         "bias": {"blob": "weights.bin", "offset": 3456, "count": 32}},   # optional
        {"name": "fc", "kind": "fully_connected", "rows": 10, "cols": 4096,
         "dtype": "f32le", "blob": "weights.bin", "offset": 3584, "count": 40960,
         "layout": "row-major [rows][cols]"}
      ]
    }

Blob paths are relative to the manifest; ``offset`` is in bytes, ``count``
in elements.  ``N`` is the feature-map side length after the layer.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .bounds import LayerSpec, NetworkSpec
from .data import LabeledDataset
from .errors import FormatError, InputError
from .network import Layer, Network, conv_output_hw

MANIFEST_VERSION = "specbound-manifest/1"
DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Manifest:
    """Loaded manifest: architecture plus float64 weights.

    ``dtypes`` remembers the on-disk element type of each layer so that
    :func:`save_manifest` reproduces the original blobs.
    """

    layers: list  # per-layer metadata dicts (without blob fields)
    weights: list
    biases: list
    dtypes: list = field(default_factory=list)
    input_shape: tuple | None = None
    num_classes: int | None = None

    def spec(self, B: float = 1.0, m: int = 0) -> NetworkSpec:
        specs = []
        for meta in self.layers:
            if meta["kind"] == "conv2d":
                specs.append(LayerSpec("conv2d", a=meta["a"], b=meta["b"], q=meta["q"], N=meta["N"], name=meta["name"]))
            else:
                specs.append(LayerSpec("fully_connected", rows=meta["rows"], cols=meta["cols"], name=meta["name"]))
        return NetworkSpec(tuple(specs), B=B, k=self.num_classes or 0, m=m)

    def to_network(self) -> Network:
        layers = []
        for meta, w, b in zip(self.layers, self.weights, self.biases):
            kind = "conv2d" if meta["kind"] == "conv2d" else "fc"
            layers.append(Layer(kind, w, b, pool=meta.get("pool", 1), padding=meta.get("padding", "same"), name=meta["name"]))
        shape = self.input_shape or _infer_input_shape(self.layers[0])
        return Network(layers, shape, self.num_classes or 0)


def _infer_input_shape(meta) -> tuple:
    if meta["kind"] == "conv2d":
        pad = meta.get("padding", "same")
        n_in = meta["N"] if pad == "same" else meta["N"] + meta["q"] - 1
        return (n_in, n_in, meta["a"])
    return (1, 1, meta["cols"])


def _expected_shape(meta) -> tuple:
    name = meta.get("name", "?")
    try:
        if meta["kind"] == "conv2d":
            return (int(meta["b"]), int(meta["a"]), int(meta["q"]), int(meta["q"]))
        if meta["kind"] == "fully_connected":
            return (int(meta["rows"]), int(meta["cols"]))
    except KeyError as exc:
        raise FormatError(f"layer {name!r}: missing field {exc}", layer=name) from None
    raise FormatError(f"layer {name!r}: unknown kind {meta.get('kind')!r}", layer=name)


def _read_blob(base: Path, ref: dict, dtype: np.dtype, name: str, cache: dict) -> np.ndarray:
    for key in ("blob", "offset", "count"):
        if key not in ref:
            raise FormatError(f"layer {name!r}: missing field {key!r}", layer=name)
    path = base / ref["blob"]
    if path not in cache:
        try:
            cache[path] = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"layer {name!r}: cannot read blob {path}: {exc}", layer=name) from None
    raw = cache[path]
    offset, count = int(ref["offset"]), int(ref["count"])
    if offset < 0 or count < 0:
        raise FormatError(f"layer {name!r}: negative offset or count", layer=name)
    end = offset + count * dtype.itemsize
    if end > len(raw):
        raise FormatError(
            f"layer {name!r}: blob {ref['blob']} holds {len(raw)} bytes, need {end} (size mismatch)", layer=name
        )
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset)


def load_manifest(path) -> Manifest:
    """Parse a manifest and its blobs; weights are widened to float64."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot parse manifest {path}: {exc}") from None
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('version')!r}")
    cache: dict = {}
    metas, weights, biases, dtypes = [], [], [], []
    for i, entry in enumerate(doc.get("layers", [])):
        name = entry.get("name") or f"layer{i}"
        dt_name = entry.get("dtype")
        if dt_name not in DTYPES:
            raise FormatError(f"layer {name!r}: unknown dtype {dt_name!r}", layer=name)
        dtype = DTYPES[dt_name]
        shape = _expected_shape({**entry, "name": name})
        if int(entry.get("count", -1)) != math.prod(shape):
            raise FormatError(f"layer {name!r}: count {entry.get('count')} does not match shape {shape}", layer=name)
        w = _read_blob(path.parent, entry, dtype, name, cache).reshape(shape).astype(np.float64)
        b = None
        if entry.get("bias"):
            b = _read_blob(path.parent, entry["bias"], dtype, name, cache).astype(np.float64)
            if b.size != shape[0]:
                raise FormatError(f"layer {name!r}: bias length {b.size} != {shape[0]}", layer=name)
        meta = {k: entry[k] for k in ("kind", "a", "b", "q", "N", "rows", "cols", "padding", "pool") if k in entry}
        meta["name"] = name
        metas.append(meta)
        weights.append(w)
        biases.append(b)
        dtypes.append(dt_name)
    if not metas:
        raise FormatError("manifest has no layers")
    shape = tuple(doc["input_shape"]) if doc.get("input_shape") else None
    return Manifest(metas, weights, biases, dtypes, shape, doc.get("num_classes"))


def manifest_from_network(net: Network) -> Manifest:
    metas = []
    shapes = net.layer_input_shapes()
    for i, layer in enumerate(net.layers):
        name = layer.name or f"layer{i}"
        if layer.kind == "conv2d":
            b, a, q, _ = layer.weight.shape
            n_out = conv_output_hw(shapes[i][1:], q, layer.padding)[0]
            metas.append(
                {"name": name, "kind": "conv2d", "a": a, "b": b, "q": q, "N": n_out, "padding": layer.padding, "pool": layer.pool}
            )
        else:
            rows, cols = layer.weight.shape
            metas.append({"name": name, "kind": "fully_connected", "rows": rows, "cols": cols})
    dtypes = ["f32le" if layer.weight.dtype == np.float32 else "f64le" for layer in net.layers]
    return Manifest(
        metas, [l.weight for l in net.layers], [l.bias for l in net.layers], dtypes, net.input_shape, net.num_classes
    )


def save_manifest(path, model, dtype: str | None = None, blob_name: str | None = None) -> Path:
    """Write ``model`` (a :class:`Manifest` or :class:`Network`) as manifest + one blob file."""
    if isinstance(model, Network):
        model = manifest_from_network(model)
    path = Path(path)
    blob_name = blob_name or path.with_suffix(".bin").name
    chunks, entries, offset = [], [], 0
    for i, (meta, w, b) in enumerate(zip(model.layers, model.weights, model.biases)):
        dt_name = dtype or (model.dtypes[i] if model.dtypes else "f64le")
        if dt_name not in DTYPES:
            raise InputError(f"unknown dtype {dt_name!r}")
        raw = np.ascontiguousarray(w, dtype=DTYPES[dt_name]).tobytes()
        layout = "row-major [b][a][q][q]" if meta["kind"] == "conv2d" else "row-major [rows][cols]"
        entry = {**meta, "dtype": dt_name, "blob": blob_name, "offset": offset, "count": int(np.size(w)), "layout": layout}
        chunks.append(raw)
        offset += len(raw)
        if b is not None:
            braw = np.ascontiguousarray(b, dtype=DTYPES[dt_name]).tobytes()
            entry["bias"] = {"blob": blob_name, "offset": offset, "count": int(np.size(b))}
            chunks.append(braw)
            offset += len(braw)
        entries.append(entry)
    doc = {"version": MANIFEST_VERSION, "layers": entries}
    if model.input_shape:
        doc["input_shape"] = list(model.input_shape)
    if model.num_classes:
        doc["num_classes"] = int(model.num_classes)
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / blob_name).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# --- datasets ----------------------------------------------------------------


def load_cifar10_binary(path) -> LabeledDataset:
    """CIFAR-10 binary batch: per record one label byte then 3072 channel-major pixel bytes."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    m = len(raw) // CIFAR_RECORD
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(m, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]} has label {labels[bad[0]]}", record=int(bad[0]))
    images = rec[:, 1:].reshape(m, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(images, labels, 10)


def write_cifar10_binary(path, data: LabeledDataset) -> None:
    """Quantize to bytes (round(x*255)) and write in CIFAR-10 binary layout."""
    if data.image_shape != (32, 32, 3):
        raise InputError("CIFAR-10 binary needs 32x32x3 images")
    pix = np.clip(np.rint(np.asarray(data.images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    rec = np.empty((len(data), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = data.labels
    rec[:, 1:] = pix.transpose(0, 3, 1, 2).reshape(len(data), -1)
    Path(path).write_bytes(rec.tobytes())


def save_dataset_npz(path, data: LabeledDataset) -> None:
    np.savez(
        path,
        images=data.images,
        labels=data.labels,
        num_classes=data.num_classes,
        provenance=data.provenance,
        source=data.source,
    )


def load_dataset(path) -> LabeledDataset:
    """Load ``.npz`` (exact) or CIFAR-10 binary (any other extension)."""
    path = Path(path)
    if path.suffix == ".npz":
        try:
            with np.load(path) as z:
                return LabeledDataset(z["images"], z["labels"], int(z["num_classes"]), z["provenance"], z["source"])
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}") from None
    return load_cifar10_binary(path)


def save_dataset(path, data: LabeledDataset) -> None:
    if Path(path).suffix == ".npz":
        save_dataset_npz(path, data)
    else:
        write_cifar10_binary(path, data)


# --- CSV ---------------------------------------------------------------------


def fmt(x) -> str:
    """17 significant digits, '.' decimal point regardless of locale."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(stream, header, rows) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])


# --- built-in architectures ----------------------------------------------------


def load_architectures() -> dict:
    """Built-in LeNet-5 / AlexNet / VGG-16 tables as ``{key: NetworkSpec}``."""
    text = resources.files("specbound").joinpath("data/architectures.json").read_text()
    doc = json.loads(text)
    out = {}
    for key, arch in doc["architectures"].items():
        layers = []
        for layer in arch["layers"]:
            fields = {k: v for k, v in layer.items() if k in LayerSpec.__dataclass_fields__}
            layers.append(LayerSpec(**fields))
        out[key] = NetworkSpec(tuple(layers), name=arch["name"], k=arch.get("classes", 0))
    return out


def widest_layer(net: NetworkSpec) -> int:
    """Largest layer output size: ``b*N^2`` for conv, ``rows`` for FC."""
    return max(l.b * l.N**2 if l.is_conv else l.rows for l in net.layers)
