"""Binary model files, patch dataset files and run configuration."""

import configparser
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dict_learn import Model, PatchPairSet, TrainConfig
from .errors import CorruptModelError, InvalidInputError, NumericError

MODEL_MAGIC = b"SDLMODEL"
MODEL_VERSION = 1
DATA_MAGIC = b"SDLPATCH"
DATA_VERSION = 1

_F8 = np.dtype("<f8")
_F4 = np.dtype("<f4")


# -- model files ------------------------------------------------------------
#
# layout: magic(8) | version u32 | header length u32 | JSON header (utf-8)
#         | W | Db | Ds [| W_linear] (row-major <f8) | sha256 of everything before it

def model_header(model, metadata=None):
    header = {
        "m_s": model.patch_size_sharp,
        "m_b": model.patch_size_blurry,
        "k": model.k,
        "lambda": model.lam,
        "linear_baseline": model.linear_baseline is not None,
    }
    header.update(metadata or {})
    return header


def encode_model(model, metadata=None):
    header = json.dumps(model_header(model, metadata), sort_keys=True).encode()
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(header)), header]
    arrays = [model.linear_predictor, model.dict_blurry, model.dict_sharp]
    if model.linear_baseline is not None:
        arrays.append(model.linear_baseline)
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype=_F8).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_model(blob):
    """Inverse of :func:`encode_model`; returns ``(model, header)``."""
    if len(blob) < 16 + 32 or blob[:8] != MODEL_MAGIC:
        raise CorruptModelError("not a model file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptModelError("model checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 8)
    if version != MODEL_VERSION:
        raise CorruptModelError(f"unsupported model version {version}")
    try:
        header = json.loads(body[16:16 + hlen].decode())
        ms, mb, k, lam = header["m_s"], header["m_b"], header["k"], header["lambda"]
    except (ValueError, KeyError) as exc:
        raise CorruptModelError(f"unreadable model header: {exc}") from exc
    shapes = [(ms * ms, mb * mb), (mb * mb, k), (ms * ms, k)]
    if header.get("linear_baseline"):
        shapes.append(shapes[0])
    need = sum(r * c for r, c in shapes) * 8
    payload = body[16 + hlen:]
    if len(payload) != need:
        raise CorruptModelError(f"payload has {len(payload)} bytes, header implies {need}")
    arrays, off = [], 0
    for r, c in shapes:
        arrays.append(np.frombuffer(payload, _F8, r * c, off).reshape(r, c).astype(np.float64))
        off += r * c * 8
    W, Db, Ds = arrays[:3]
    try:
        model = Model(dict_blurry=Db, dict_sharp=Ds, linear_predictor=W, lam=float(lam),
                      patch_size_sharp=int(ms), patch_size_blurry=int(mb),
                      linear_baseline=arrays[3] if len(arrays) > 3 else None)
    except (InvalidInputError, NumericError) as exc:
        raise CorruptModelError(f"model file holds an invalid model: {exc}") from exc
    return model, header


def save_model(path, model, metadata=None):
    with open(path, "wb") as fh:
        fh.write(encode_model(model, metadata))


def load_model(path):
    with open(path, "rb") as fh:
        return decode_model(fh.read())


# -- patch datasets ---------------------------------------------------------
#
# layout: magic(8) | version u32 | n u64 | m_s u32 | m_b u32
#         | n records of (b, bt, s) as <f4

_DATA_HEADER = struct.Struct("<8sIQII")


def _record_dtype(m_s, m_b):
    return np.dtype([("b", _F4, (m_b * m_b,)), ("bt", _F4, (m_b * m_b,)),
                     ("s", _F4, (m_s * m_s,))])


def write_dataset(path, pairs):
    m_b = int(round(np.sqrt(pairs.blurry.shape[1])))
    m_s = int(round(np.sqrt(pairs.sharp.shape[1])))
    rec = np.empty(pairs.n, dtype=_record_dtype(m_s, m_b))
    rec["b"] = pairs.blurry
    rec["bt"] = pairs.blurry_denoised
    rec["s"] = pairs.sharp
    with open(path, "wb") as fh:
        fh.write(_DATA_HEADER.pack(DATA_MAGIC, DATA_VERSION, pairs.n, m_s, m_b))
        fh.write(rec.tobytes())


def read_dataset(path):
    """Load a dataset written by :func:`write_dataset` as float32 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DATA_HEADER.size:
        raise InvalidInputError(f"{path}: truncated dataset header")
    magic, version, n, m_s, m_b = _DATA_HEADER.unpack_from(raw)
    if magic != DATA_MAGIC or version != DATA_VERSION:
        raise InvalidInputError(f"{path}: not a patch dataset")
    dt = _record_dtype(m_s, m_b)
    if len(raw) - _DATA_HEADER.size != n * dt.itemsize:
        raise InvalidInputError(f"{path}: size does not match {n} records")
    rec = np.frombuffer(raw, dt, n, _DATA_HEADER.size)
    return PatchPairSet(rec["b"].copy(), rec["bt"].copy(), rec["s"].copy())


# -- run configuration ------------------------------------------------------

@dataclass
class RunConfig:
    """Everything a command needs besides its positional arguments."""

    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str = "data/corpus"
    kernel: str = "binomial"
    noise_var: float = 49.0
    zoom_factor: int = 0
    denoiser: str = "passthrough"
    patch_limit: int = 10_000_000
    patch_size_sharp: int = 7
    patch_size_blurry: int = 11
    stride: int = 1
    dataset: str = "patches.bin"
    model: str = "model.sdl"
    lambda_grid: tuple = ()

    @property
    def mode(self):
        return "zoom" if self.zoom_factor else "deblur"

    def metadata(self):
        meta = {"mode": self.mode, "denoiser": self.denoiser}
        if self.zoom_factor:
            meta["zoom_factor"] = self.zoom_factor
        else:
            meta["kernel"] = self.kernel
            meta["noise_var"] = self.noise_var
        return meta


def _coerce(value, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    if like is None or isinstance(like, float):
        return None if value.strip().lower() in ("", "none", "auto") else float(value)
    if isinstance(like, int):
        return int(value)
    return value.strip()


_TRAIN_OPTIONAL = {"rho", "t0", "dict_rate"}


def load_config(path=None):
    """Read an INI file with ``[data]`` and ``[train]`` sections."""
    run = RunConfig()
    if path is None:
        return run
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
    known_run = {f.name for f in fields(RunConfig)} - {"train"}
    known_train = {f.name for f in fields(TrainConfig)}
    tc = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            name = "lam" if key == "lambda" else key
            in_train = section == "train" and name in known_train
            if not (in_train or (section == "data" and name in known_run)):
                raise InvalidInputError(f"unknown config key [{section}] {key}")
            try:
                if in_train:
                    like = None if name in _TRAIN_OPTIONAL else getattr(run.train, name)
                    tc[name] = _coerce(value, like)
                else:
                    setattr(run, name, _coerce(value, getattr(run, name)))
            except ValueError as exc:
                raise InvalidInputError(f"bad value for {key}: {value!r}") from exc
    if tc:
        run.train = replace(run.train, **tc)
    return run


def dump_config(run):
    """INI text that :func:`load_config` reads back to the same values."""
    parser = configparser.ConfigParser()
    parser["data"] = {}
    for f in fields(RunConfig):
        if f.name == "train":
            continue
        v = getattr(run, f.name)
        parser["data"][f.name] = " ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
    parser["train"] = {}
    for f in fields(TrainConfig):
        v = getattr(run.train, f.name)
        parser["train"]["lambda" if f.name == "lam" else f.name] = "auto" if v is None else str(v)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
