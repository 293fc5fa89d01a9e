"""On-disk formats: frame streams, run configuration, initial state, reports.

Frame stream (JSONL). Line 1 is the header::

    {"format": "calibkit-frames", "version": 1,
     "units": {"length": "m", "angle": "rad", "pixel": "px"},
     "intrinsics": {"fx":..., "fy":..., "cx":..., "cy":...},
     "image_size": [W, H], "T_init": [[4x4 row-major]], "n_joints": 6,
     "model": {...inline model...} | "model_ref": "default" | "<path>",
     "meta": {...free-form...}}

followed by one object per frame::

    {"t": 0, "q": [...], "obs": [[u, v], ...],
     "labels": ["rf", null, ...],          # optional, simulator only
     "true_state": [6 values],             # optional
     "estimate_kick": [6 values]}          # optional

Run report (CSV). The first line is ``# calibkit-report v1``; the column row
follows (see :data:`REPORT_COLUMNS`). Empty cells mean "not available". A run
that fails after writing rows ends with a ``# ERROR: ...`` line.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from .camera import CameraIntrinsics
from .geometry import InstrumentModel, Transform, default_instrument_model, load_model, model_from_dict, model_to_dict
from .simulator import DEFAULT_IMAGE_SIZE, FrameRecord

STREAM_FORMAT = "calibkit-frames"
STREAM_VERSION = 1
UNITS = {"length": "m", "angle": "rad", "pixel": "px"}

REPORT_VERSION = 1
REPORT_MAGIC = f"# calibkit-report v{REPORT_VERSION}"
REPORT_COLUMNS = (
    "frame",
    "n_obs",
    "n_matched",
    "n_mismatched",
    "d2",
    "l",
    "dt_mm",
    "dr_rad",
    "assoc_time_ms",
    "filter_time_ms",
    "n_pred",
    "n_pred_total",
)
TIMING_COLUMNS = ("assoc_time_ms", "filter_time_ms")
TRACE_COLUMNS = ("frame", "alpha", "beta", "gamma", "tx", "ty", "tz", "true_alpha", "true_beta", "true_gamma", "true_tx", "true_ty", "true_tz")
STATE_VERSION = 1


class SchemaError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | os.PathLike | None = None):
        self.message = message
        self.line = line
        self.path = None if path is None else str(path)
        where = ""
        if self.path:
            where += f"{self.path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


def as_floats(value, shape, what, line=None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{what} must be numeric", line) from None
    if shape is not None:
        if len(shape) == 2 and shape[0] is None:
            if arr.size == 0:
                arr = arr.reshape(0, shape[1])
            if arr.ndim != 2 or arr.shape[1] != shape[1]:
                raise SchemaError(f"{what} must be a list of {shape[1]}-vectors", line)
        elif arr.shape != tuple(shape):
            raise SchemaError(f"{what} must have shape {tuple(shape)}, got {arr.shape}", line)
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{what} contains non-finite values", line)
    return arr


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


# --------------------------------------------------------------------------
# frame stream


@dataclass
class StreamHeader:
    intrinsics: CameraIntrinsics
    T_init: Transform
    model: InstrumentModel
    model_ref: str | None = None
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    meta: dict = field(default_factory=dict)

    @property
    def n_joints(self) -> int:
        return self.model.chain.n_joints

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "format": STREAM_FORMAT,
            "version": STREAM_VERSION,
            "units": dict(UNITS),
            "intrinsics": self.intrinsics.to_dict(),
            "image_size": [int(v) for v in self.image_size],
            "T_init": self.T_init.matrix().tolist(),
            "n_joints": self.n_joints,
        }
        if self.model_ref is not None:
            d["model_ref"] = self.model_ref
        else:
            d["model"] = model_to_dict(self.model)
        d["meta"] = self.meta
        return d


def resolve_model(ref: str, base_dir: str | os.PathLike | None = None) -> InstrumentModel:
    """``"default"`` is the bundled surrogate; anything else is a model JSON path."""
    if ref == "default":
        return default_instrument_model()
    p = Path(ref)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return load_model(p)


def header_from_dict(doc: dict, base_dir=None, line: int = 1) -> StreamHeader:
    if not isinstance(doc, dict):
        raise SchemaError("header must be a JSON object", line)
    if doc.get("format") != STREAM_FORMAT:
        raise SchemaError(f"not a frame stream (format {doc.get('format')!r})", line)
    if doc.get("version") != STREAM_VERSION:
        raise SchemaError(f"unsupported stream version {doc.get('version')!r}", line)
    if doc.get("units", UNITS) != UNITS:
        raise SchemaError(f"units must be {UNITS}", line)
    try:
        k = CameraIntrinsics.from_dict(doc["intrinsics"])
        T = Transform.from_matrix(as_floats(doc["T_init"], (4, 4), "T_init", line))
    except KeyError as exc:
        raise SchemaError(f"header is missing {exc}", line) from None
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad header: {exc}", line) from None
    if not T.is_rigid(1e-6):
        raise SchemaError("T_init is not a rigid transform", line)
    ref = doc.get("model_ref")
    try:
        if "model" in doc:
            model = model_from_dict(doc["model"])
        elif ref is not None:
            model = resolve_model(ref, base_dir)
        else:
            raise SchemaError("header needs 'model' or 'model_ref'", line)
    except (OSError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"cannot load instrument model: {exc}", line) from None
    n = doc.get("n_joints", model.chain.n_joints)
    if n != model.chain.n_joints:
        raise SchemaError(f"n_joints {n} does not match the model ({model.chain.n_joints})", line)
    size = doc.get("image_size", list(DEFAULT_IMAGE_SIZE))
    if not (isinstance(size, list) and len(size) == 2):
        raise SchemaError("image_size must be [width, height]", line)
    return StreamHeader(k, T, model, ref if "model" not in doc else None, (int(size[0]), int(size[1])), dict(doc.get("meta", {})))


def frame_to_dict(frame: FrameRecord) -> dict:
    d: dict[str, Any] = {
        "t": int(frame.index),
        "q": np.asarray(frame.q, dtype=float).tolist(),
        "obs": np.asarray(frame.observations, dtype=float).reshape(-1, 2).tolist(),
    }
    if frame.labels is not None:
        d["labels"] = list(frame.labels)
    if frame.true_state is not None:
        d["true_state"] = np.asarray(frame.true_state, dtype=float).tolist()
    if frame.estimate_kick is not None:
        d["estimate_kick"] = np.asarray(frame.estimate_kick, dtype=float).tolist()
    return d


def frame_from_dict(doc, n_joints: int, line: int) -> FrameRecord:
    if not isinstance(doc, dict):
        raise SchemaError("frame must be a JSON object", line)
    for key in ("t", "q", "obs"):
        if key not in doc:
            raise SchemaError(f"frame is missing '{key}'", line)
    t = doc["t"]
    if not isinstance(t, int) or isinstance(t, bool) or t < 0:
        raise SchemaError("'t' must be a non-negative integer", line)
    q = as_floats(doc["q"], None, "q", line)
    if q.ndim != 1 or len(q) != n_joints:
        raise SchemaError(f"q must have {n_joints} values, got {q.size}", line)
    obs = as_floats(doc["obs"], (None, 2), "obs", line)
    labels = doc.get("labels")
    if labels is not None:
        if not isinstance(labels, list) or len(labels) != len(obs):
            raise SchemaError("labels must be a list as long as obs", line)
        if not all(lb is None or isinstance(lb, str) for lb in labels):
            raise SchemaError("labels must be strings or null", line)
        labels = tuple(labels)
    truth = doc.get("true_state")
    truth = None if truth is None else as_floats(truth, (6,), "true_state", line)
    kick = doc.get("estimate_kick")
    kick = None if kick is None else as_floats(kick, (6,), "estimate_kick", line)
    return FrameRecord(t, q, obs, labels, truth, kick)


def write_stream(path, header: StreamHeader, frames: Iterable[FrameRecord]) -> int:
    """Write header and frames; returns the number of frames written."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header.to_dict()) + "\n")
        for fr in frames:
            fh.write(_dumps(frame_to_dict(fr)) + "\n")
            n += 1
    return n


class FrameStream:
    """Streaming reader. Iterating yields :class:`FrameRecord` in file order."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, encoding="utf-8")
        first = self._fh.readline()
        if not first.strip():
            self._fh.close()
            raise SchemaError("empty stream, header expected", 1, self.path)
        try:
            doc = json.loads(first)
        except json.JSONDecodeError as exc:
            self._fh.close()
            raise SchemaError(f"invalid JSON: {exc.msg}", 1, self.path) from None
        try:
            self.header = header_from_dict(doc, self.path.parent, 1)
        except SchemaError as exc:
            self._fh.close()
            raise SchemaError(exc.message, 1, self.path) from None

    def __iter__(self) -> Iterator[FrameRecord]:
        n = self.header.n_joints
        last_t = -1
        try:
            for lineno, raw in enumerate(self._fh, start=2):
                if not raw.strip():
                    continue
                try:
                    doc = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"invalid JSON: {exc.msg}", lineno, self.path) from None
                try:
                    fr = frame_from_dict(doc, n, lineno)
                except SchemaError as exc:
                    raise SchemaError(exc.message, lineno, self.path) from None
                if fr.index <= last_t:
                    raise SchemaError(f"frame index {fr.index} does not increase", lineno, self.path)
                last_t = fr.index
                yield fr
        finally:
            self._fh.close()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_stream(path) -> tuple[StreamHeader, list[FrameRecord]]:
    s = FrameStream(path)
    return s.header, list(s)


# --------------------------------------------------------------------------
# run configuration

DEFAULT_CONFIG: dict[str, dict[str, Any]] = {
    "scene": {
        "name": "sweep",
        "frame_count": 500,
        "pixel_noise_sigma": 1.0,
        "outlier_count": 2,
        "dropout_probability": 0.05,
        "true_state": None,
        "min_view_cos": None,
        "disturbance": "off",
        "disturbance_period": 25,
        "disturbance_target": "truth",
    },
    "camera": {"intrinsics": None, "image_size": None, "T_init": None},
    "model": {"ref": "default"},
    "filter": {
        "kind": "aekf",
        "sigma_e": None,
        "sigma_v": None,
        "forget_factor": 0.6,
        "n_particles": 1000,
        "n_effective": 100,
        "pf_adapt_cov": False,
    },
    "jcbb": {"alpha": 0.975, "sigma_e": None, "sigma_v": None, "node_budget": 200_000},
    "visibility": {"enabled": True, "gamma": 100.0},
    "init": {"frames": 10, "iterations": 500, "threshold_px": 3.0, "state": None, "sigma_x": None},
}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then ``overrides``; unknown keys are errors.

    Matrices may be given in full or as their diagonal.
    """
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    layers = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc.msg}", exc.lineno, path) from None
        if not isinstance(doc, dict):
            raise SchemaError("config must be a JSON object", 1, path)
        layers.append((doc, path))
    if overrides:
        layers.append((overrides, None))
    for doc, src in layers:
        for section, values in doc.items():
            if section not in cfg:
                raise SchemaError(f"unknown config section '{section}'", None, src)
            if not isinstance(values, dict):
                raise SchemaError(f"section '{section}' must be an object", None, src)
            if section == "model" and "ref" not in values:
                cfg["model"] = {"inline": values}
                continue
            for key, v in values.items():
                if key not in cfg[section]:
                    raise SchemaError(f"unknown key '{section}.{key}'", None, src)
                cfg[section][key] = v
    return cfg


def matrix_param(value, n: int, what: str) -> np.ndarray | None:
    """``None``, a diagonal of length ``n``, or a full ``n x n`` matrix."""
    if value is None:
        return None
    arr = as_floats(value, None, what)
    if arr.shape == (n,):
        return np.diag(arr)
    if arr.shape == (n, n):
        return arr
    raise SchemaError(f"{what} must be a {n}-diagonal or {n}x{n} matrix")


# --------------------------------------------------------------------------
# initial state


def write_state(path, x, sigma_x, info: dict | None = None) -> None:
    doc = {
        "format": "calibkit-state",
        "version": STATE_VERSION,
        "x": np.asarray(x, dtype=float).tolist(),
        "sigma_x": np.asarray(sigma_x, dtype=float).tolist(),
        "info": info or {},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def read_state(path) -> tuple[np.ndarray, np.ndarray | None, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", exc.lineno, path) from None
    if not isinstance(doc, dict) or "x" not in doc:
        raise SchemaError("state file needs an 'x' field", None, path)
    if doc.get("version", STATE_VERSION) != STATE_VERSION:
        raise SchemaError(f"unsupported state version {doc.get('version')!r}", None, path)
    x = as_floats(doc["x"], (6,), "x")
    P = doc.get("sigma_x")
    P = None if P is None else as_floats(P, (6, 6), "sigma_x")
    return x, P, dict(doc.get("info", {}))


# --------------------------------------------------------------------------
# reports


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    if not math.isfinite(f):
        return ""
    return repr(f)


class ReportWriter:
    """Row-by-row CSV writer; :meth:`fail` appends the trailing error marker."""

    def __init__(self, path, columns=REPORT_COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._fh.write(REPORT_MAGIC + "\n")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self.rows: list[dict] = []

    def write(self, row: dict) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown report columns {sorted(unknown)}")
        self._w.writerow([_cell(row.get(c)) for c in self.columns])
        self.rows.append(row)

    def fail(self, message: str) -> None:
        self._fh.write(f"# ERROR: {' '.join(str(message).split())}\n")
        self.close()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


@dataclass
class ParsedReport:
    columns: tuple
    rows: list[dict]
    error: str | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([math.nan if r[name] is None else r[name] for r in self.rows], dtype=float)


def parse_report(path_or_text, columns=REPORT_COLUMNS) -> ParsedReport:
    """Validate an emitted report and return its rows (``None`` for empty cells)."""
    if isinstance(path_or_text, (str, os.PathLike)) and Path(path_or_text).exists():
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = str(path_or_text)
    lines = text.splitlines()
    if not lines or lines[0] != REPORT_MAGIC:
        raise SchemaError(f"report must start with '{REPORT_MAGIC}'", 1)
    error = None
    if lines[-1].startswith("# ERROR:"):
        error = lines[-1][len("# ERROR:"):].strip()
        lines = lines[:-1]
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    try:
        head = tuple(next(reader))
    except StopIteration:
        raise SchemaError("report has no column row", 2) from None
    if head != tuple(columns):
        raise SchemaError(f"unexpected columns {head}", 2)
    rows = []
    for lineno, rec in enumerate(reader, start=3):
        if len(rec) != len(head):
            raise SchemaError(f"expected {len(head)} cells, got {len(rec)}", lineno)
        row = {}
        for c, v in zip(head, rec):
            if v == "":
                row[c] = None
                continue
            try:
                row[c] = int(v) if c in ("frame", "n_obs", "n_matched", "n_mismatched", "n_pred", "n_pred_total") else float(v)
            except ValueError:
                raise SchemaError(f"column {c} holds non-numeric {v!r}", lineno) from None
        rows.append(row)
    frames = [r["frame"] for r in rows if "frame" in r]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise SchemaError("frame column must increase")
    return ParsedReport(head, rows, error)


def summarize(rows: list[dict], columns=REPORT_COLUMNS) -> dict:
    """Mean, median, p5 and p95 for every numeric column with data."""
    out = {}
    for c in columns:
        if c == "frame":
            continue
        vals = np.array([float(r[c]) for r in rows if r.get(c) is not None], dtype=float)
        vals = vals[np.isfinite(vals)]
        if len(vals) == 0:
            continue
        out[c] = {
            "count": int(len(vals)),
            "mean": float(np.mean(vals)),
            "median": float(np.median(vals)),
            "p5": float(np.percentile(vals, 5)),
            "p95": float(np.percentile(vals, 95)),
        }
    return out


def write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_trace(path, frames: list[int], estimates, truths=None) -> None:
    """Per-frame state trace; the truth columns stay empty when unknown."""
    est = np.asarray(estimates, dtype=float).reshape(-1, 6)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i, f in enumerate(frames):
            tr = truths[i] if truths is not None and truths[i] is not None else [None] * 6
            w.writerow([str(int(f))] + [_cell(v) for v in est[i]] + [_cell(v) for v in tr])


def read_trace(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(frames, estimates (n, 6), truths (n, 6) with NaN where unknown)``."""
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise SchemaError("unexpected trace columns", 1, path)
    data = np.array([[math.nan if v == "" else float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, 13)
    return data[:, 0].astype(int), data[:, 1:7], data[:, 7:13]
