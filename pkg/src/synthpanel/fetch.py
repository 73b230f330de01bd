"""Convert World Bank indicator data into the long panel CSV.

Sources:

* ``"worldbank"``: the public v2 indicator API. Responses are cached under
  ``$SYNTHPANEL_CACHE`` (default ``~/.cache/synthpanel``) and replayed from
  there on later calls, so a populated cache works offline.
* a ``.json`` file: one saved API response, or a mapping of series code to
  saved response.
* a ``.csv`` file in the WDI bulk layout (``Country Code``, ``Indicator Code``
  and one column per year).

This is the only part of the package that touches the network.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import urllib.error
import urllib.request
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .artifacts import write_json
from .errors import SourceUnreachable, UnknownSeriesCode
from .panel import PanelObservation, write_long_csv

__all__ = ["fetch_panel", "cache_dir", "api_url", "interpolate_gaps"]

LOGGER = logging.getLogger(__name__)

API_ROOT = "https://api.worldbank.org/v2"
CACHE_ENV = "SYNTHPANEL_CACHE"


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "synthpanel"))


def api_url(code: str, countries: Sequence[str], start: int, end: int, source_id: int | None = None) -> str:
    url = (
        f"{API_ROOT}/country/{';'.join(countries)}/indicator/{code}"
        f"?format=json&date={start}:{end}&per_page=20000"
    )
    return url if source_id is None else f"{url}&source={source_id}"


def _cached_get(url: str, timeout: float = 30.0):
    path = cache_dir() / (hashlib.sha256(url.encode()).hexdigest()[:32] + ".json")
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    LOGGER.info("GET %s", url)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            body = resp.read().decode("utf-8")
    except (urllib.error.URLError, OSError) as exc:
        raise SourceUnreachable(f"{url}: {exc}") from None
    payload = json.loads(body)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(body, encoding="utf-8")
    return payload


def _records(payload, code: str) -> list[dict]:
    # error payloads look like [{"message": [{"id": "120", ...}]}]
    if isinstance(payload, list) and payload and isinstance(payload[0], dict) and "message" in payload[0]:
        raise UnknownSeriesCode(f"series code {code!r} rejected by source: {payload[0]['message']}")
    if not (isinstance(payload, list) and len(payload) == 2):
        raise UnknownSeriesCode(f"series code {code!r}: unexpected response layout")
    return payload[1] or []


def _from_records(records, code, outcome, countries, start, end) -> list[PanelObservation]:
    out = []
    for rec in records:
        if rec.get("indicator", {}).get("id") not in (None, code):
            continue
        unit = rec.get("countryiso3code") or rec.get("country", {}).get("id")
        if countries and unit not in countries:
            continue
        year = int(rec["date"])
        if rec.get("value") is None or not start <= year <= end:
            continue
        out.append(PanelObservation(unit, year, outcome, float(rec["value"])))
    return out


def _from_wdi_csv(path: Path, series, countries, start, end) -> list[PanelObservation]:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        rows = list(csv.DictReader(fh))
    present = {r.get("Indicator Code") for r in rows}
    for code in series:
        if code not in present:
            raise UnknownSeriesCode(f"series code {code!r} not found in {path}")
    out = []
    for r in rows:
        code = r.get("Indicator Code")
        unit = r.get("Country Code")
        if code not in series or (countries and unit not in countries):
            continue
        for year in range(start, end + 1):
            raw = (r.get(str(year)) or "").strip()
            if raw:
                out.append(PanelObservation(unit, year, series[code], float(raw)))
    return out


def interpolate_gaps(obs: list[PanelObservation]) -> list[PanelObservation]:
    """Fill interior missing years of each unit/outcome series linearly; ends are left alone."""
    groups: dict[tuple[str, str], dict[int, float]] = {}
    for o in obs:
        groups.setdefault((o.unit, o.outcome), {})[o.period] = o.value
    out = []
    for (unit, outcome), series in groups.items():
        years = sorted(series)
        full = np.arange(years[0], years[-1] + 1)
        vals = np.interp(full, years, [series[y] for y in years])
        out.extend(PanelObservation(unit, int(y), outcome, float(v)) for y, v in zip(full, vals))
    return out


def fetch_panel(
    source: str | Path,
    series: Mapping[str, str],
    out_csv: str | Path,
    countries: Sequence[str] = (),
    start: int = 1996,
    end: int = 2024,
    source_id: int | None = None,
    interpolate: bool = False,
) -> Path:
    """Write a long CSV for ``series`` (code -> outcome id) and a provenance sidecar.

    ``source_id`` selects a World Bank database (3 is the governance
    indicators). With ``interpolate`` interior missing years are filled
    linearly and the sidecar says so.

    Returns the path of the sidecar ``<out_csv>.provenance.json``.
    """
    out_csv = Path(out_csv)
    countries = list(countries)
    obs: list[PanelObservation] = []
    if str(source) == "worldbank":
        if not countries:
            raise ValueError("the worldbank source needs an explicit country list")
        for code, outcome in series.items():
            payload = _cached_get(api_url(code, countries, start, end, source_id))
            obs += _from_records(_records(payload, code), code, outcome, countries, start, end)
        kind = API_ROOT
    else:
        path = Path(source)
        if not path.exists():
            raise SourceUnreachable(f"source file {path} does not exist")
        if path.suffix.lower() == ".csv":
            obs = _from_wdi_csv(path, series, countries, start, end)
        else:
            payload = json.loads(path.read_text(encoding="utf-8"))
            for code, outcome in series.items():
                if isinstance(payload, dict):
                    if code not in payload:
                        raise UnknownSeriesCode(f"series code {code!r} not found in {path}")
                    recs = _records(payload[code], code)
                else:
                    recs = _records(payload, code)
                    if not any(r.get("indicator", {}).get("id") == code for r in recs):
                        raise UnknownSeriesCode(f"series code {code!r} not found in {path}")
                obs += _from_records(recs, code, outcome, countries, start, end)
        kind = str(path)
    if interpolate:
        obs = interpolate_gaps(obs)
    obs.sort(key=lambda o: (o.outcome, o.unit, o.period))
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_long_csv(obs, out_csv)
    sidecar = out_csv.with_name(out_csv.name + ".provenance.json")
    write_json(
        sidecar,
        {
            "source": kind,
            "retrieved_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "series": dict(series),
            "countries": countries,
            "years": [start, end],
            "rows": len(obs),
            "interpolated": interpolate,
            "source_id": source_id,
        },
    )
    return sidecar
