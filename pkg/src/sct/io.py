"""Binary ensemble/noise/model files, CSV ingestion, and the config reader.

All binary formats are little-endian and versioned behind four-byte
magic tags so a reader can refuse files written by a newer package.
The model file stores the training pseudo-data and the transport
hyperparameters instead of the assembled posterior; loading rebuilds
the posterior through the same closed-form assembly used at fit time,
so a loaded model scores bit-identically.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, fields as dc_fields
from typing import get_type_hints

import numpy as np

from .errors import IOFormatError, ValidationError
from .estimation import OptimizerConfig, Stage1Result
from .geometry import METRICS, LocationSet, MaximinOrdering
from .model import FittedModel
from .onion import build_knots
from .transport import fit_posterior

__all__ = [
    "Ensemble",
    "ModelConfig",
    "write_ensemble",
    "read_ensemble",
    "write_noise",
    "read_noise",
    "ingest_csv",
    "save_model",
    "load_model",
]

ENSEMBLE_MAGIC = b"SCTE"
NOISE_MAGIC = b"SCTN"
MODEL_MAGIC = b"SCTM"
FORMAT_VERSION = 1

_METRIC_CODES = {"chordal-sphere": 0, "euclidean-plane": 1}
_METRIC_NAMES = {v: k for k, v in _METRIC_CODES.items()}


@dataclass(frozen=True)
class Ensemble:
    """Replicate fields bound to their locations; rows are replicates."""

    locs: LocationSet
    values: np.ndarray  # (N, L)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise ValidationError("ensemble values must be an (N, L) matrix")
        if vals.shape[1] != len(self.locs):
            raise ValidationError(
                f"ensemble has {vals.shape[1]} columns for "
                f"{len(self.locs)} locations"
            )
        if not np.all(np.isfinite(vals)):
            raise ValidationError("ensemble contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]


# ------------------------------------------------------------ raw helpers


def _read_exact(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise IOFormatError(
            f"truncated file: expected {n} bytes for {what} at offset "
            f"{offset}, got {len(buf)}"
        )
    return buf


def _check_magic(f, magic: bytes, kind: str) -> None:
    got = _read_exact(f, 4, "magic tag")
    if got != magic:
        raise IOFormatError(f"not a {kind} file: magic {got!r} != {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "format version"))
    if version > FORMAT_VERSION:
        raise IOFormatError(
            f"{kind} file has format version {version}, this reader "
            f"supports up to {FORMAT_VERSION}"
        )


def _check_eof(f, path) -> None:
    extra = f.read(1)
    if extra:
        raise IOFormatError(
            f"{path}: {f.tell() - 1} bytes read but file continues; "
            "payload length does not match the header"
        )


def _floats(f, count: int, what: str) -> np.ndarray:
    return np.frombuffer(_read_exact(f, 8 * count, what), dtype="<f8").copy()


# -------------------------------------------------------- ensemble files


def write_ensemble(path, ensemble: Ensemble) -> None:
    """Write locations plus replicate payload in the binary format."""
    locs, vals = ensemble.locs, ensemble.values
    with open(path, "wb") as f:
        f.write(ENSEMBLE_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<QQ", ensemble.L, ensemble.N))
        f.write(struct.pack("<B", _METRIC_CODES[locs.metric]))
        f.write(np.ascontiguousarray(locs.coords, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())


def read_ensemble(path) -> Ensemble:
    """Read and validate a binary ensemble file."""
    with open(path, "rb") as f:
        _check_magic(f, ENSEMBLE_MAGIC, "ensemble")
        L, N = struct.unpack("<QQ", _read_exact(f, 16, "dimensions"))
        (mcode,) = struct.unpack("<B", _read_exact(f, 1, "metric tag"))
        if mcode not in _METRIC_NAMES:
            raise IOFormatError(f"unknown metric code {mcode}")
        coords = _floats(f, 2 * L, "coordinate table").reshape(L, 2)
        vals = _floats(f, N * L, "payload").reshape(N, L)
        _check_eof(f, path)
    return Ensemble(LocationSet(coords, metric=_METRIC_NAMES[mcode]), vals)


def write_noise(path, noise: np.ndarray) -> None:
    """Write a reference-noise matrix for common-noise sampling."""
    noise = np.asarray(noise, dtype=float)
    if noise.ndim != 2:
        raise ValidationError("noise must be a (count, L) matrix")
    if not np.all(np.isfinite(noise)):
        raise ValidationError("noise contains non-finite values")
    with open(path, "wb") as f:
        f.write(NOISE_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<QQ", noise.shape[0], noise.shape[1]))
        f.write(np.ascontiguousarray(noise, dtype="<f8").tobytes())


def read_noise(path) -> np.ndarray:
    with open(path, "rb") as f:
        _check_magic(f, NOISE_MAGIC, "noise")
        count, L = struct.unpack("<QQ", _read_exact(f, 16, "dimensions"))
        noise = _floats(f, count * L, "noise payload").reshape(count, L)
        _check_eof(f, path)
    return noise


# ----------------------------------------------------------- CSV ingest

_POLE_TOL = 1e-9


def ingest_csv(path, metric: str = "chordal-sphere") -> Ensemble:
    """Read lon, lat, replicate... columns into an ensemble.

    Rows at the geographic poles (|lat| = 90) are duplicates of one
    physical location whatever their longitude; they are collapsed to a
    single row per pole, replicate values averaged. Any other duplicate
    is an error.
    """
    if metric not in METRICS:
        raise ValidationError(f"metric must be one of {METRICS}, got {metric!r}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise IOFormatError(f"{path}: empty file, expected a header row")
        if len(header) < 3:
            raise IOFormatError(
                f"{path}: need columns lon, lat plus at least one replicate, "
                f"got {len(header)} columns"
            )
        if [h.strip().lower() for h in header[:2]] != ["lon", "lat"]:
            raise IOFormatError(
                f"{path}: first two columns must be lon, lat, got "
                f"{header[:2]}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IOFormatError(
                    f"{path}: line {lineno} has {len(row)} cells, "
                    f"header has {len(header)}"
                )
            parsed = []
            for col, cell in zip(header, row):
                text = cell.strip()
                try:
                    value = float(text) if text else float("nan")
                except ValueError:
                    raise IOFormatError(
                        f"{path}: line {lineno}, column {col!r}: "
                        f"cannot parse {cell!r} as a number"
                    )
                if not np.isfinite(value):
                    raise ValidationError(
                        f"{path}: missing or non-finite value at line "
                        f"{lineno}, column {col!r}"
                    )
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise IOFormatError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    coords, values = data[:, :2], data[:, 2:].T  # values (N, L)

    if metric == "chordal-sphere":
        coords, values = _collapse_poles(coords, values)
    return Ensemble(LocationSet(coords, metric=metric), values)


def _collapse_poles(coords: np.ndarray, values: np.ndarray):
    """Merge duplicate pole rows; longitude is meaningless at |lat| = 90."""
    out_c, out_v = [], []
    for lat in (90.0, -90.0):
        sel = np.abs(coords[:, 1] - lat) <= _POLE_TOL
        if np.count_nonzero(sel) > 1:
            out_c.append([0.0, lat])
            out_v.append(values[:, sel].mean(axis=1))
        elif np.count_nonzero(sel) == 1:
            i = int(np.flatnonzero(sel)[0])
            out_c.append([0.0, lat])
            out_v.append(values[:, i])
    keep = np.abs(np.abs(coords[:, 1]) - 90.0) > _POLE_TOL
    coords = np.vstack([coords[keep]] + [np.asarray(c)[None, :] for c in out_c]) \
        if out_c else coords[keep]
    values = np.column_stack([values[:, keep]] + out_v) if out_c \
        else values[:, keep]
    return coords, values


# ------------------------------------------------------------ model files

# arrays persisted in this fixed order; integer arrays use <i8
_INT_ARRAYS = {"inducing_indices", "degenerate_locations"}


def save_model(path, model: FittedModel) -> None:
    """Persist a fitted model; the transport posterior is rebuilt on load."""
    s1 = model.stage1
    arrays: list[tuple[str, np.ndarray, str]] = [
        ("coords", model.locs.coords, "<f8"),
        ("location_sds", model.location_sds, "<f8"),
        ("pseudo_train", model.pseudo_train, "<f8"),
        ("order", model.ordering.order, "<i8"),
        ("min_dists", model.ordering.min_dists, "<f8"),
        ("theta", model.transport.theta, "<f8"),
    ]
    for name in ("raw_zeta", "shared", "beta", "eta_zeta", "eta_H",
                 "center", "inducing_indices", "degenerate_locations"):
        arr = getattr(s1, name)
        if arr is not None:
            dtype = "<i8" if name in _INT_ARRAYS else "<f8"
            arrays.append((name, np.asarray(arr), dtype))

    header = {
        "model": {
            "config": model.config,
            "g": model.transport.g,
            "eps": model.transport.eps,
            "metric": model.locs.metric,
        },
        "stage1": {
            "family_name": s1.family_name,
            "use_H": s1.use_H,
            "gmean": s1.gmean,
            "gsd": s1.gsd,
            "grid": None if s1.grid is None
            else {"a": s1.grid.a, "b": s1.grid.b, "D": s1.grid.D},
            "objective_initial": s1.objective_initial,
            "objective_final": s1.objective_final,
            "gradient_norm": s1.gradient_norm,
            "iterations": s1.iterations,
        },
        "arrays": [
            {"name": n, "dtype": d, "shape": list(a.shape)}
            for n, a, d in arrays
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr, dtype in arrays:
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_model(path) -> FittedModel:
    """Load a model file and rebuild the transport posterior exactly."""
    with open(path, "rb") as f:
        _check_magic(f, MODEL_MAGIC, "model")
        (hlen,) = struct.unpack("<Q", _read_exact(f, 8, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header"))
        except json.JSONDecodeError as e:
            raise IOFormatError(f"{path}: corrupt model header: {e}")
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            itemsize = np.dtype(spec["dtype"]).itemsize
            buf = _read_exact(f, itemsize * count, f"array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(
                buf, dtype=spec["dtype"]
            ).reshape(shape).copy()
        _check_eof(f, path)

    minfo, sinfo = header["model"], header["stage1"]
    locs = LocationSet(arrays["coords"], metric=minfo["metric"])
    ordering = MaximinOrdering(
        order=arrays["order"], min_dists=arrays["min_dists"]
    )
    grid = None
    if sinfo["grid"] is not None:
        gi = sinfo["grid"]
        grid = build_knots(gi["a"], gi["b"], gi["D"])
    stage1 = Stage1Result(
        family_name=sinfo["family_name"],
        use_H=sinfo["use_H"],
        gmean=sinfo["gmean"],
        gsd=sinfo["gsd"],
        raw_zeta=arrays.get("raw_zeta"),
        shared=arrays.get("shared"),
        beta=arrays.get("beta"),
        grid=grid,
        eta_zeta=arrays.get("eta_zeta"),
        eta_H=arrays.get("eta_H"),
        center=arrays.get("center"),
        inducing_indices=arrays.get("inducing_indices"),
        degenerate_locations=arrays.get(
            "degenerate_locations", np.empty(0, int)
        ),
        objective_initial=sinfo["objective_initial"],
        objective_final=sinfo["objective_final"],
        gradient_norm=sinfo["gradient_norm"],
        iterations=sinfo["iterations"],
    )
    transport = fit_posterior(
        arrays["pseudo_train"], locs, ordering, arrays["theta"],
        minfo["g"], minfo["eps"],
    )
    return FittedModel(
        stage1=stage1,
        transport=transport,
        ordering=ordering,
        locs=locs,
        config=minfo["config"],
        location_sds=arrays["location_sds"],
        pseudo_train=arrays["pseudo_train"],
    )


# ---------------------------------------------------------------- config

_CONFIG_HELP = {
    "family": "parametric marginal family: skew-t3, gaussian, or none "
              "(identity margins, transport map only)",
    "use_H": "enable the spline correction layer on the normal scores",
    "D": "free spline coefficients per location",
    "a": "lower edge of the flexible spline region (normal-score scale)",
    "b": "upper edge of the flexible spline region (normal-score scale)",
    "M": "inducing locations for the low-rank coefficient priors",
    "g": "transport prior spread; inverse-gamma shape is 2 + 1/g^2",
    "eps": "relevance threshold that caps conditioning-set size",
    "kind_zeta": "kernel for the marginal-parameter prior",
    "kind_beta": "kernel for the spline-coefficient prior",
    "algorithm": "stage-1 optimizer: quasi-newton or first-order-adaptive",
    "max_iterations": "stage-1 iteration budget",
    "gradient_tolerance": "stage-1 convergence tolerance",
    "patience": "early-stopping patience in iterations",
    "validation_fraction": "replicate fraction held out for early stopping",
    "learning_rate": "step size for the first-order optimizer",
    "seed": "seed for the train/validation split",
    "maxiter_tm": "transport-map optimizer iteration budget",
}


@dataclass(frozen=True)
class ModelConfig:
    """Flat key=value model configuration with validated defaults."""

    family: str = "skew-t3"
    use_H: bool = True
    D: int = 40
    a: float = -4.0
    b: float = 4.0
    M: int = 64
    g: float = 4.0
    eps: float = 0.01
    kind_zeta: str = "matern-3/2"
    kind_beta: str = "matern-3/2"
    algorithm: str = "quasi-newton"
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    patience: int = 25
    validation_fraction: float = 0.2
    learning_rate: float = 0.01
    seed: int = 0
    maxiter_tm: int = 200

    @classmethod
    def parse(cls, text: str) -> "ModelConfig":
        """Parse ``key = value`` lines; # comments and blanks allowed."""
        hints = get_type_hints(cls)
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(
                    f"config line {lineno}: expected key = value, got {raw!r}"
                )
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in hints:
                known = ", ".join(sorted(hints))
                raise ValidationError(
                    f"config line {lineno}: unknown key {key!r} "
                    f"(known keys: {known})"
                )
            if key in values:
                raise ValidationError(
                    f"config line {lineno}: duplicate key {key!r}"
                )
            values[key] = _convert(key, val, hints[key])
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read())

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            algorithm=self.algorithm,
            max_iterations=self.max_iterations,
            gradient_tolerance=self.gradient_tolerance,
            patience=self.patience,
            validation_fraction=self.validation_fraction,
            seed=self.seed,
            learning_rate=self.learning_rate,
        )

    def fit_kwargs(self) -> dict:
        """Keyword arguments for :func:`sct.model.fit_model`."""
        return {
            "family": None if self.family == "none" else self.family,
            "use_H": self.use_H,
            "D": self.D, "a": self.a, "b": self.b, "M": self.M,
            "kind_zeta": self.kind_zeta, "kind_beta": self.kind_beta,
            "g": self.g, "eps": self.eps,
            "optimizer": self.optimizer(),
            "maxiter_tm": self.maxiter_tm,
        }

    def explain(self) -> str:
        """One line per key: current value, default, meaning."""
        lines = []
        for f in dc_fields(self):
            cur = getattr(self, f.name)
            mark = "" if cur == f.default else "  [set]"
            lines.append(
                f"{f.name} = {cur}{mark}\n"
                f"    default {f.default}; {_CONFIG_HELP[f.name]}"
            )
        return "\n".join(lines)


def _convert(key: str, val: str, typ):
    if typ is bool:
        low = val.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValidationError(f"config key {key!r}: {val!r} is not a boolean")
    try:
        return typ(val)
    except ValueError:
        raise ValidationError(
            f"config key {key!r}: cannot parse {val!r} as {typ.__name__}"
        )
