"""Reading return panels, run configuration and writing results.

The long CSV format has the header ``date,continent,asset,return`` with
``continent`` one of ``A``, ``E``, ``U``. Each date contributes three
periods in the order Asia, Europe, US. Gaps become masked entries.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .model import CONTINENTS, ModelParams, ReturnPanel, TwoDayParams

LONG_HEADER = ["date", "continent", "asset", "return"]
ESTIMATOR_CHOICES = ("mle-one-day", "qmle-res", "qmle", "qmle-md")


class SchemaError(ValueError):
    """The input file does not follow the expected layout."""


class ContinentCountError(ValueError):
    """Continents do not carry the same number of assets."""


@dataclass(frozen=True)
class AssetRegistry:
    """Names behind the panel axes plus per-asset missing rates."""

    assets: dict[str, tuple[str, ...]]  # continent -> asset names in column order
    dates: tuple[str, ...]
    missing_rate: dict[str, dict[str, float]]
    dropped_dates: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return asdict(self)


def load_schema(name: str) -> dict:
    text = resources.files("staggered_dfm").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc: dict, name: str) -> None:
    jsonschema.validate(doc, load_schema(name))


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Settings for one CLI run; validated before any computation."""

    estimator: str = "mle-one-day"
    max_iter: int = 1000
    rel_tol: float = 1e-8
    param_tol: float = 1e-7
    standardize: bool = True
    missing: str = "mask"
    units: str = "decimal"
    md_weight: str = "efficient"
    out: str = "out"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        validate(data, "config")
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__ and k != "extra"}
        extra = {k: v for k, v in data.items() if k not in cls.__dataclass_fields__}
        return cls(**known, extra=extra)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise SchemaError("config file must hold a mapping")
        return cls.from_mapping(data)

    def merged(self, **overrides) -> "RunConfig":
        data = {k: v for k, v in asdict(self).items() if k != "extra"}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_mapping(data)


# --------------------------------------------------------------------------
# ingestion


def _parse_date(text: str, line: int) -> str:
    try:
        return dt.date.fromisoformat(text.strip()).isoformat()
    except ValueError:
        raise SchemaError(f"line {line}: bad date {text!r}") from None


def read_long_csv(path: str | os.PathLike) -> dict[tuple[str, str, str], float]:
    """Parse the long format into ``{(date, continent, asset): return}``."""
    out: dict[tuple[str, str, str], float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != LONG_HEADER:
            raise SchemaError(f"line 1: header must be {','.join(LONG_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise SchemaError(f"line {line}: expected 4 fields, got {len(row)}")
            date = _parse_date(row[0], line)
            cont = row[1].strip()
            if cont not in CONTINENTS:
                raise SchemaError(f"line {line}: continent must be one of A, E, U")
            asset = row[2].strip()
            if not asset:
                raise SchemaError(f"line {line}: empty asset name")
            if row[3].strip() == "":
                continue  # explicit gap
            try:
                value = float(row[3])
            except ValueError:
                raise SchemaError(f"line {line}: return {row[3]!r} is not a number") from None
            if not np.isfinite(value):
                raise SchemaError(f"line {line}: return must be finite")
            key = (date, cont, asset)
            if key in out:
                raise SchemaError(f"line {line}: duplicate entry for {date} {cont} {asset}")
            out[key] = value
    if not out:
        raise SchemaError("no observations")
    return out


def read_wide_csv(paths: dict[str, str | os.PathLike]) -> dict[tuple[str, str, str], float]:
    """Parse one wide file per continent: a ``date`` column then one column per asset."""
    out: dict[tuple[str, str, str], float] = {}
    if set(paths) != set(CONTINENTS):
        raise SchemaError("wide input needs one file for each of A, E, U")
    for cont, path in paths.items():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0].strip().lower() != "date" or len(header) < 2:
                raise SchemaError(f"{path}: line 1: first column must be 'date'")
            names = [h.strip() for h in header[1:]]
            if len(set(names)) != len(names):
                raise SchemaError(f"{path}: line 1: duplicate asset names")
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise SchemaError(f"{path}: line {line}: expected {len(header)} fields")
                date = _parse_date(row[0], line)
                for name, cell in zip(names, row[1:]):
                    if cell.strip() == "":
                        continue
                    try:
                        value = float(cell)
                    except ValueError:
                        raise SchemaError(f"{path}: line {line}: {cell!r} is not a number") from None
                    if (date, cont, name) in out:
                        raise SchemaError(f"{path}: line {line}: duplicate date {date}")
                    out[(date, cont, name)] = value
    return out


def build_panel(obs: dict[tuple[str, str, str], float], units: str = "decimal",
                missing: str = "mask") -> tuple[ReturnPanel, AssetRegistry]:
    """Arrange observations into a panel with a mask.

    Dates are sorted; with an odd number of dates the last one is dropped
    so that the panel covers whole two-day blocks. Under ``drop-day`` every
    two-day block with a missing return is removed.
    """
    if units not in ("decimal", "percent"):
        raise ValueError("units must be 'decimal' or 'percent'")
    if missing not in ("mask", "drop-day"):
        raise ValueError("missing must be 'mask' or 'drop-day'")
    assets = {c: sorted({a for (_, cc, a) in obs if cc == c}) for c in CONTINENTS}
    counts = {c: len(v) for c, v in assets.items()}
    if len(set(counts.values())) != 1 or counts["A"] == 0:
        raise ContinentCountError(f"assets per continent differ or are zero: {counts}")
    n = counts["A"]
    dates = sorted({d for (d, _, _) in obs})
    dropped = []
    if len(dates) % 2:
        dropped.append(dates.pop())
    if not dates:
        raise SchemaError("need at least two dates")
    pos = {c: {a: i for i, a in enumerate(assets[c])} for c in CONTINENTS}
    dpos = {d: i for i, d in enumerate(dates)}
    values = np.zeros((3 * len(dates), n))
    mask = np.zeros((3 * len(dates), n), dtype=bool)
    scale = 0.01 if units == "percent" else 1.0
    for (d, c, a), v in obs.items():
        if d not in dpos:
            continue
        row = 3 * dpos[d] + CONTINENTS.index(c)
        values[row, pos[c][a]] = v * scale
        mask[row, pos[c][a]] = True
    if missing == "drop-day":
        full = mask.reshape(-1, 6 * n).all(axis=1)
        keep_blocks = np.flatnonzero(full)
        dropped += [dates[2 * b + i] for b in np.flatnonzero(~full) for i in (0, 1)]
        values = values.reshape(-1, 6 * n)[keep_blocks].reshape(-1, n)
        mask = mask.reshape(-1, 6 * n)[keep_blocks].reshape(-1, n)
        dates = [dates[2 * b + i] for b in keep_blocks for i in (0, 1)]
        if not dates:
            raise SchemaError("no complete two-day block remains")
    rates = {}
    for ci, c in enumerate(CONTINENTS):
        m = mask[ci::3]
        rates[c] = {a: round(float(1.0 - m[:, pos[c][a]].mean()), 6) for a in assets[c]}
    registry = AssetRegistry({c: tuple(v) for c, v in assets.items()}, tuple(dates), rates, tuple(dropped))
    return ReturnPanel(values, mask), registry


def ingest(path, config: RunConfig | None = None, wide: dict | None = None):
    """Read a return file into ``(panel, layout, registry)``."""
    config = config or RunConfig()
    obs = read_wide_csv(wide) if wide else read_long_csv(path)
    panel, registry = build_panel(obs, config.units, config.missing)
    return panel, panel.layout(), registry


def write_long_csv(panel: ReturnPanel, registry: AssetRegistry | None, path) -> None:
    """Write a panel in the long format (masked entries are omitted)."""
    n = panel.n_assets
    if registry is None:
        registry = default_registry(panel)
    buf = [",".join(LONG_HEADER)]
    for s in range(panel.n_periods):
        c = CONTINENTS[s % 3]
        date = registry.dates[s // 3]
        for i in range(n):
            if panel.mask[s, i]:
                buf.append(f"{date},{c},{registry.assets[c][i]},{float(panel.values[s, i])!r}")
    atomic_write(path, "\n".join(buf) + "\n")


def default_registry(panel: ReturnPanel, start: str = "2000-01-03") -> AssetRegistry:
    """Synthetic asset names ``A001`` ... and consecutive weekday dates."""
    n = panel.n_assets
    day = dt.date.fromisoformat(start)
    dates = []
    while len(dates) < panel.n_periods // 3:
        if day.weekday() < 5:
            dates.append(day.isoformat())
        day += dt.timedelta(days=1)
    width = max(3, len(str(n)))
    assets = {c: tuple(f"{c}{i + 1:0{width}d}" for i in range(n)) for c in CONTINENTS}
    rates = {c: {a: 0.0 for a in assets[c]} for c in CONTINENTS}
    return AssetRegistry(assets, tuple(dates), rates)


# --------------------------------------------------------------------------
# output


def atomic_write(path, text: str) -> None:
    """Write to a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _clean(a) -> list | float:
    return np.round(np.asarray(a, dtype=float), 12).tolist()


def params_to_dict(params: ModelParams | TwoDayParams, registry: AssetRegistry | None = None) -> dict:
    """JSON-ready description of a parameter set."""
    if isinstance(params, ModelParams):
        doc = {
            "kind": "structural",
            "phi": float(params.phi),
            "loadings": {
                c: {"z0": _clean(params.loadings[i, :, 0]), "z1": _clean(params.loadings[i, :, 1]),
                    "z2": _clean(params.loadings[i, :, 2]), "z3": _clean(params.loadings[i, :, 3])}
                for i, c in enumerate(CONTINENTS)
            },
            "idio_var": {c: _clean(params.idio_var[i]) for i, c in enumerate(CONTINENTS)},
        }
    else:
        doc = {
            "kind": "two-day",
            "Lambda": _clean(params.Lambda),
            "M": _clean(params.M),
            "Sigma_ee": _clean(params.Sigma_ee),
        }
    if registry is not None:
        doc["assets"] = {c: list(v) for c, v in registry.assets.items()}
    return doc


def params_from_dict(doc: dict) -> ModelParams | TwoDayParams:
    validate(doc, "params")
    if doc["kind"] == "structural":
        z = np.array([[doc["loadings"][c][f"z{j}"] for j in range(4)] for c in CONTINENTS])
        return ModelParams(
            doc["phi"], np.transpose(z, (0, 2, 1)), np.array([doc["idio_var"][c] for c in CONTINENTS])
        )
    return TwoDayParams(np.array(doc["Lambda"]), np.array(doc["M"]), np.array(doc["Sigma_ee"]))


def error_document(err: BaseException) -> dict:
    return {"error": {"type": type(err).__name__, "message": str(err)}}
