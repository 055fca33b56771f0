"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"WMLA" | u32 version | u64 header_length | header (UTF-8 JSON) | payload

The header lists every tensor as ``{name, dtype, shape, offset, nbytes}``
with offsets relative to the start of the payload, and embeds the model
spec and, for converted models, the conversion record. Floats are stored as
32-bit by default and widened to float64 on load; saving a loaded container
reproduces the original bytes.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, MlaError
from .model import ModelSpec, Seq2SeqModel
from .selection import SubspaceSelection

MAGIC = b"WMLA"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4")}
SELECTION_SUFFIX = ".selection"


@dataclass
class Checkpoint:
    """In-memory view of a checkpoint file.

    Attributes
    ----------
    model_spec : dict
    tensors : dict of str -> ndarray
        float64 or int64 arrays, in file order.
    conversion : dict or None
    float_dtype : {"f32", "f64"}
        On-disk element type for floating tensors.
    """

    model_spec: dict
    tensors: dict
    conversion: dict = None
    float_dtype: str = "f32"
    _disk_dtypes: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_model(cls, model, float_dtype="f32"):
        tensors = {name: np.asarray(arr, dtype=np.float64) for name, arr in model.params.items()}
        for site, sel in model.selections.items():
            tensors[site + SELECTION_SUFFIX] = sel.subspaces.astype(np.int64)
        conversion = None if model.conversion is None else dict(model.conversion)
        return cls(model.spec.to_dict(), tensors, conversion, float_dtype)

    def to_model(self):
        try:
            spec = ModelSpec.from_dict(self.model_spec)
            params, selections = {}, {}
            for name, arr in self.tensors.items():
                if name.endswith(SELECTION_SUFFIX):
                    site = name[: -len(SELECTION_SUFFIX)]
                    selections[site] = SubspaceSelection(spec.d_head, arr)
                else:
                    params[name] = arr
            return Seq2SeqModel(spec, params, selections, self.conversion)
        except (MlaError, TypeError, KeyError) as exc:
            raise CheckpointFormatError("model_spec", str(exc)) from exc

    def site_variants(self):
        spec = ModelSpec.from_dict(self.model_spec)
        return {site: spec.site_config(site).variant for site in spec.site_names()}

    def _dtype_of(self, name, arr):
        if np.issubdtype(arr.dtype, np.integer):
            return "i32"
        return self._disk_dtypes.get(name, self.float_dtype)

    def to_bytes(self):
        entries, chunks, offset = [], [], 0
        for name, arr in self.tensors.items():
            tag = self._dtype_of(name, arr)
            data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
            entries.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        header = {"model_spec": self.model_spec, "conversion": self.conversion,
                  "tensors": entries}
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREAMBLE.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw):
        if len(raw) < _PREAMBLE.size:
            raise CheckpointFormatError("magic", "file shorter than the preamble")
        magic, version, header_len = _PREAMBLE.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointFormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
        if version != VERSION:
            raise CheckpointFormatError("version", f"unsupported version {version}")
        start = _PREAMBLE.size
        if start + header_len > len(raw):
            raise CheckpointFormatError("header_length", "header runs past end of file")
        try:
            header = json.loads(raw[start : start + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError("header", f"not valid JSON: {exc}") from exc
        payload = memoryview(raw)[start + header_len :]
        entries = _validate_header(header, len(payload))

        tensors, disk = {}, {}
        for e in entries:
            dt = _DTYPES[e["dtype"]]
            arr = np.frombuffer(payload, dtype=dt, count=e["nbytes"] // dt.itemsize,
                                offset=e["offset"]).reshape(e["shape"])
            if e["dtype"] == "i32":
                arr = arr.astype(np.int64)
            else:
                if not np.all(np.isfinite(arr)):
                    raise CheckpointFormatError("payload", f"tensor {e['name']} is not finite")
                arr = arr.astype(np.float64)
                disk[e["name"]] = e["dtype"]
            tensors[e["name"]] = arr
        floats = set(disk.values())
        float_dtype = floats.pop() if len(floats) == 1 else "f32"
        return cls(header["model_spec"], tensors, header["conversion"], float_dtype, disk)

    @classmethod
    def load(cls, path):
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointFormatError("path", str(exc)) from exc
        return cls.from_bytes(raw)


def _validate_header(header, payload_len):
    if not isinstance(header, dict):
        raise CheckpointFormatError("header", "must be a JSON object")
    for key in ("model_spec", "conversion", "tensors"):
        if key not in header:
            raise CheckpointFormatError(key, "missing from header")
    if not isinstance(header["model_spec"], dict):
        raise CheckpointFormatError("model_spec", "must be an object")
    if header["conversion"] is not None and not isinstance(header["conversion"], dict):
        raise CheckpointFormatError("conversion", "must be an object or null")
    entries = header["tensors"]
    if not isinstance(entries, list):
        raise CheckpointFormatError("tensors", "must be a list")
    names = set()
    for e in entries:
        if not isinstance(e, dict) or set(e) != {"name", "dtype", "shape", "offset", "nbytes"}:
            raise CheckpointFormatError("tensors", f"malformed entry {e!r}")
        name = e["name"]
        if not isinstance(name, str) or name in names:
            raise CheckpointFormatError("name", f"missing or duplicate tensor name {name!r}")
        names.add(name)
        if e["dtype"] not in _DTYPES:
            raise CheckpointFormatError("dtype", f"{name}: unknown element type {e['dtype']!r}")
        shape = e["shape"]
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise CheckpointFormatError("shape", f"{name}: invalid shape {shape!r}")
        for key in ("offset", "nbytes"):
            if not isinstance(e[key], int) or e[key] < 0:
                raise CheckpointFormatError(key, f"{name}: must be a non-negative integer")
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[e["dtype"]].itemsize
        if e["nbytes"] != expected:
            raise CheckpointFormatError("nbytes", f"{name}: {e['nbytes']} != {expected}")
        if e["offset"] + e["nbytes"] > payload_len:
            raise CheckpointFormatError("payload", f"{name}: truncated payload")
    spans = sorted((e["offset"], e["offset"] + e["nbytes"], e["name"]) for e in entries)
    for (_, end, a), (begin, _, b) in zip(spans, spans[1:]):
        if begin < end:
            raise CheckpointFormatError("offset", f"tensors {a} and {b} overlap")
    used = spans[-1][1] if spans else 0
    if used != payload_len:
        raise CheckpointFormatError("payload", f"{payload_len - used} trailing bytes")
    return entries


def save_checkpoint(model, path, float_dtype="f32"):
    ckpt = Checkpoint.from_model(model, float_dtype)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path):
    """Load a file and build the model it describes."""
    return Checkpoint.load(path).to_model()
