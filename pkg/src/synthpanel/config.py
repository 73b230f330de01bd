"""Run configuration loaded from YAML.

See ``configs/iran_macro.yaml`` for an annotated example. Validation errors
raise :class:`~synthpanel.errors.ConfigError` with a message that starts with
the offending field path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .gsc import BootstrapConfig
from .panel import DEFAULT_SCHEMA
from .placebo import VERDICT_ALPHA
from .scm import PredictorEntry
from .transform import TransformSpec


@dataclass(frozen=True)
class OutcomeConfig:
    id: str
    transform: TransformSpec = TransformSpec()
    label: str | None = None
    baseline: float | None = None  # counterfactual level for magnitude translation


@dataclass(frozen=True)
class PrincipalComponentConfig:
    id: str
    indicators: tuple[str, ...]


@dataclass(frozen=True)
class PlaceboConfig:
    enabled: bool = True
    level: float = 0.95
    alpha: float = VERDICT_ALPHA
    in_time: tuple[int, ...] = ()


@dataclass(frozen=True)
class GscConfig:
    enabled: bool = False
    r: int | str = "auto"
    r_max: int = 5
    bootstrap: BootstrapConfig = BootstrapConfig()
    in_time_backdate: int | None = None


@dataclass(frozen=True)
class RunConfig:
    data_path: Path
    treated_unit: str
    t0: int
    donors: tuple[str, ...]
    outcomes: tuple[OutcomeConfig, ...]
    schema: dict = field(default_factory=lambda: dict(DEFAULT_SCHEMA))
    principal_components: tuple[PrincipalComponentConfig, ...] = ()
    predictors: tuple[PredictorEntry, ...] | None = None
    scm_restarts: int = 20
    scm_search: str = "auto"
    placebo: PlaceboConfig = PlaceboConfig()
    gsc: GscConfig = GscConfig()
    output: Path = Path("reports")
    seed: int = 0
    magnitude_horizon: int | None = None

    @property
    def outcome_ids(self) -> list[str]:
        return [o.id for o in self.outcomes]


def _req(d: dict, key: str, where: str):
    if key not in d or d[key] is None:
        raise ConfigError(f"{where}{key}: required field missing")
    return d[key]


def _typed(value, kind, where: str):
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}") from None


def _mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping")
    return value


def _transform(raw, where: str) -> TransformSpec:
    if raw is None:
        return TransformSpec()
    if isinstance(raw, str):
        raw = {"kind": raw}
    raw = _mapping(raw, where)
    try:
        return TransformSpec(
            kind=raw.get("kind", "identity"),
            base=None if raw.get("base") is None else _typed(raw["base"], float, f"{where}.base"),
            offset=_typed(raw.get("offset", 0.0), float, f"{where}.offset"),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _predictors(raw, where: str):
    if raw is None:
        return None
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{where}: expected a nonempty list")
    out = []
    for i, item in enumerate(raw):
        item = _mapping(item, f"{where}[{i}]")
        periods = item.get("periods")
        if periods is not None:
            periods = tuple(_typed(p, int, f"{where}[{i}].periods") for p in periods)
        agg = item.get("aggregation", "each")
        if agg not in ("each", "mean"):
            raise ConfigError(f"{where}[{i}].aggregation: must be 'each' or 'mean'")
        out.append(PredictorEntry(item.get("outcome"), periods, agg))
    return tuple(out)


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    raw = _mapping(raw, "config")
    base_dir = Path(base_dir or ".")
    data = _mapping(_req(raw, "data", ""), "data")
    path = Path(_req(data, "path", "data."))
    if not path.is_absolute():
        path = base_dir / path
    schema = {**DEFAULT_SCHEMA, **_mapping(data.get("schema"), "data.schema")}
    unknown = set(schema) - set(DEFAULT_SCHEMA)
    if unknown:
        raise ConfigError(f"data.schema: unknown key(s) {sorted(unknown)}")

    treated = str(_req(raw, "treated_unit", ""))
    t0 = _typed(_req(raw, "t0", ""), int, "t0")
    donors = raw.get("donors")
    if not isinstance(donors, list) or not donors:
        raise ConfigError("donors: must be a nonempty list of unit ids")
    donors = tuple(str(d) for d in donors)
    if treated in donors:
        raise ConfigError(f"donors: treated unit {treated!r} cannot be a donor")
    if len(set(donors)) != len(donors):
        raise ConfigError("donors: duplicate unit ids")

    outcomes = []
    raw_out = raw.get("outcomes")
    if not isinstance(raw_out, list) or not raw_out:
        raise ConfigError("outcomes: must be a nonempty list")
    for i, item in enumerate(raw_out):
        if isinstance(item, str):
            item = {"id": item}
        item = _mapping(item, f"outcomes[{i}]")
        oid = str(_req(item, "id", f"outcomes[{i}]."))
        baseline = item.get("baseline")
        outcomes.append(
            OutcomeConfig(
                id=oid,
                transform=_transform(item.get("transform"), f"outcomes[{i}].transform"),
                label=item.get("label"),
                baseline=None if baseline is None else _typed(baseline, float, f"outcomes[{i}].baseline"),
            )
        )
    ids = [o.id for o in outcomes]
    if len(set(ids)) != len(ids):
        raise ConfigError("outcomes: duplicate outcome ids")

    pcs = []
    for i, item in enumerate(raw.get("principal_components") or []):
        item = _mapping(item, f"principal_components[{i}]")
        inds = item.get("indicators")
        if not isinstance(inds, list) or len(inds) < 2:
            raise ConfigError(f"principal_components[{i}].indicators: need at least two indicator ids")
        pcs.append(PrincipalComponentConfig(str(_req(item, "id", f"principal_components[{i}].")), tuple(map(str, inds))))

    scm = _mapping(raw.get("scm"), "scm")
    search = scm.get("search", "auto")
    if search not in ("auto", "full"):
        raise ConfigError("scm.search: must be 'auto' or 'full'")

    pl = _mapping(raw.get("placebo"), "placebo")
    placebo = PlaceboConfig(
        enabled=_typed(pl.get("enabled", True), bool, "placebo.enabled"),
        level=_typed(pl.get("level", 0.95), float, "placebo.level"),
        alpha=_typed(pl.get("alpha", VERDICT_ALPHA), float, "placebo.alpha"),
        in_time=tuple(_typed(p, int, "placebo.in_time") for p in (pl.get("in_time") or [])),
    )
    for p in placebo.in_time:
        if p >= t0:
            raise ConfigError(f"placebo.in_time: pseudo t0 {p} must precede t0 {t0}")

    g = _mapping(raw.get("gsc"), "gsc")
    r = g.get("r", "auto")
    if r != "auto":
        r = _typed(r, int, "gsc.r")
        if r < 0:
            raise ConfigError("gsc.r: must be 'auto' or a nonnegative integer")
    b = _mapping(g.get("bootstrap"), "gsc.bootstrap")
    try:
        boot = BootstrapConfig(
            replications=_typed(b.get("replications", 500), int, "gsc.bootstrap.replications"),
            seed=_typed(b.get("seed", raw.get("seed", 0)), int, "gsc.bootstrap.seed"),
            level=_typed(b.get("level", 0.95), float, "gsc.bootstrap.level"),
            scheme=b.get("scheme", "pseudo_treated"),
        )
    except ValueError as exc:
        raise ConfigError(f"gsc.bootstrap: {exc}") from None
    backdate = g.get("in_time_backdate")
    gsc = GscConfig(
        enabled=_typed(g.get("enabled", False), bool, "gsc.enabled"),
        r=r,
        r_max=_typed(g.get("r_max", 5), int, "gsc.r_max"),
        bootstrap=boot,
        in_time_backdate=None if backdate is None else _typed(backdate, int, "gsc.in_time_backdate"),
    )

    out = Path(raw.get("output", "reports"))
    if not out.is_absolute():
        out = base_dir / out
    horizon = raw.get("magnitude_horizon")
    return RunConfig(
        data_path=path,
        treated_unit=treated,
        t0=t0,
        donors=donors,
        outcomes=tuple(outcomes),
        schema=schema,
        principal_components=tuple(pcs),
        predictors=_predictors(raw.get("predictors"), "predictors"),
        scm_restarts=_typed(scm.get("restarts", 20), int, "scm.restarts"),
        scm_search=search,
        placebo=placebo,
        gsc=gsc,
        output=out,
        seed=_typed(raw.get("seed", 0), int, "seed"),
        magnitude_horizon=None if horizon is None else _typed(horizon, int, "magnitude_horizon"),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw: Any = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    return parse_config(raw, path.parent)
