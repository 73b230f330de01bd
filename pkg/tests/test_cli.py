import csv
import hashlib
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from synthpanel import fetch
from synthpanel.artifacts import dumps, write_csv
from synthpanel.cli import main, prepare_panel, run
from synthpanel.config import load_config, parse_config
from synthpanel.errors import ConfigError, NonPositiveBaseline, SourceUnreachable, UnknownSeriesCode
from synthpanel.magnitude import MagnitudeInput, translate_magnitude
from synthpanel.panel import TreatmentAssignment, build_panel, load_long_csv

MACRO = ["gdp", "gdp_pc", "trade", "nonoil_exports", "fdi", "inflation", "fx", "military", "ppp"]
DONORS = [f"unit_{i:02d}" for i in range(1, 13)]
REPO = Path(__file__).resolve().parents[1]


def simulate_csv(path, outcomes=("y",), seed=0, effect=-0.1, shift=20.0):
    code = main([
        "simulate", "--out", str(path), "--seed", str(seed), "--effect", str(effect),
        "--outcomes", ",".join(outcomes), "--level-shift", str(shift),
    ])
    assert code == 0
    return path


def base_config(data, out, outcomes, **extra):
    cfg = {
        "data": {"path": str(data)},
        "treated_unit": "unit_00",
        "t0": 2006,
        "donors": DONORS,
        "outcomes": outcomes,
        "scm": {"restarts": 2},
        "output": str(out),
        "seed": 1,
    }
    cfg.update(extra)
    return cfg


def write_config(tmp_path, cfg, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config ----------------------------------------------------------------


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"t0": "soon"}, "t0"),
        ({"donors": []}, "donors"),
        ({"donors": ["unit_00"]}, "donors"),
        ({"outcomes": [{"id": "y", "transform": "sqrt"}]}, "outcomes[0].transform"),
        ({"outcomes": [{"id": "y", "baseline": "big"}]}, "outcomes[0].baseline"),
        ({"scm": {"search": "grid"}}, "scm.search"),
        ({"placebo": {"in_time": [2010]}}, "placebo.in_time"),
        ({"gsc": {"bootstrap": {"replications": 10}}}, "gsc.bootstrap"),
        ({"gsc": {"r": -1}}, "gsc.r"),
    ],
)
def test_config_errors_name_the_field(tmp_path, patch, field):
    cfg = base_config("x.csv", "out", ["y"])
    cfg.update(patch)
    with pytest.raises(ConfigError, match=field.replace("[", r"\[").replace("]", r"\]")):
        parse_config(cfg)


def test_config_missing_key_and_bad_yaml(tmp_path):
    cfg = base_config("x.csv", "out", ["y"])
    del cfg["treated_unit"]
    with pytest.raises(ConfigError, match="treated_unit"):
        parse_config(cfg)
    bad = tmp_path / "bad.yaml"
    bad.write_text("data: [unclosed")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shipped_configs_parse():
    for name in ("iran_macro.yaml", "iran_institutions.yaml"):
        cfg = load_config(REPO / "configs" / name)
        assert cfg.treated_unit == "IRN" and cfg.t0 == 2006
        assert len(cfg.donors) == 12
    macro = load_config(REPO / "configs" / "iran_macro.yaml")
    assert [o.id for o in macro.outcomes] == MACRO


def test_missing_outcome_is_a_config_error(tmp_path):
    data = simulate_csv(tmp_path / "d.csv")
    cfg_path = write_config(tmp_path, base_config(data, tmp_path / "out", ["y", "gdp"]))
    with pytest.raises(ConfigError, match="'gdp'"):
        prepare_panel(load_config(cfg_path))
    assert main(["fit", "--config", str(cfg_path)]) == 1


# -- pipeline --------------------------------------------------------------


def test_fit_only_writes_fit_artifacts(tmp_path):
    data = simulate_csv(tmp_path / "d.csv")
    out = tmp_path / "out"
    cfg = base_config(data, out, ["y"], placebo={"enabled": False})
    assert main(["report", "--config", str(write_config(tmp_path, cfg))]) == 0
    assert sorted(p.name for p in (out / "y").iterdir()) == ["gaps.csv", "scm_fit.json"]
    fit = json.loads((out / "y" / "scm_fit.json").read_text())
    assert abs(sum(fit["weights"].values()) - 1) < 1e-9


def test_ingest_writes_panel(tmp_path):
    data = simulate_csv(tmp_path / "d.csv", outcomes=("a", "b"))
    cfg = base_config(data, tmp_path / "out", ["a", {"id": "b", "transform": "log"}])
    assert main(["ingest", "--config", str(write_config(tmp_path, cfg))]) == 0
    meta = json.loads((tmp_path / "out" / "panel.json").read_text())
    assert meta["outcomes"] == ["a", "b"] and meta["units"][0] == "unit_00"


@pytest.fixture(scope="module")
def macro_report(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("macro")
    data = simulate_csv(tmp / "macro.csv", outcomes=MACRO, seed=3)
    outcomes = [{"id": o, "transform": "log"} if o != "fdi" else o for o in MACRO]
    outcomes[0]["baseline"] = 4e11
    cfg = base_config(
        data, tmp / "a", outcomes,
        placebo={"in_time": [2003]},
        gsc={"enabled": True, "r": 2, "bootstrap": {"replications": 100, "seed": 4}, "in_time_backdate": 3},
        magnitude_horizon=18,
    )
    path = write_config(tmp, cfg)
    assert main(["report", "--config", str(path)]) == 0
    return tmp, path


def test_nine_outcome_report(macro_report):
    tmp, _ = macro_report
    out = tmp / "a"
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == sorted(MACRO)
    with open(out / "summary_effects.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["outcome"] for r in rows] == MACRO
    assert all(r["status"] == "ok" for r in rows)
    for name in ("summary_placebo.csv", "summary_gsc.csv", "diagnostics.csv", "weights.csv", "magnitudes.json"):
        assert (out / name).exists()
    for sub in ("scm_fit.json", "gaps.csv", "placebo.csv", "placebo_gaps.csv", "placebo_summary.json", "gsc_fit.json", "gsc_path.csv"):
        assert (out / "gdp" / sub).exists()
    mags = json.loads((out / "magnitudes.json").read_text())
    assert list(mags) == ["gdp"] and mags["gdp"]["horizon"] == 18


def test_summary_p_values_match_placebo_output(macro_report):
    out = macro_report[0] / "a"
    with open(out / "summary_placebo.csv") as fh:
        plac = {r["outcome"]: r for r in csv.DictReader(fh)}
    with open(out / "summary_effects.csv") as fh:
        eff = {r["outcome"]: r for r in csv.DictReader(fh)}
    for o in MACRO:
        s = json.loads((out / o / "placebo_summary.json").read_text())
        assert float(eff[o]["p_value"]) == s["p_two_sided"]
        assert float(plac[o]["p_left_end"]) == s["p_left_end"]
        assert float(plac[o]["p_left_t0_plus_1"]) == s["p_left_t0_plus_1"]
        assert float(plac[o]["p_rmspe_ratio"]) == s["p_rmspe_ratio"]
        assert plac[o]["verdict"] == s["verdict"]
        assert len(s["in_time"]) == 1 and s["in_time"][0]["pseudo_t0"] == 2003


def test_report_is_deterministic_across_runs_and_jobs(macro_report):
    tmp, path = macro_report
    assert main(["report", "--config", str(path), "--out", str(tmp / "b"), "--jobs", "3"]) == 0
    assert tree(tmp / "a") == tree(tmp / "b")


def test_failed_outcome_is_isolated(tmp_path):
    data = simulate_csv(tmp_path / "d.csv", outcomes=("a", "b"))
    cfg = base_config(data, tmp_path / "out", ["a", "b"], gsc={"enabled": True, "r": 12, "bootstrap": {"replications": 100}})
    rows = run(load_config(write_config(tmp_path, cfg)), "gsc")
    assert [r["status"] for r in rows] == ["failed", "failed"]
    assert "RankDeficient" in rows[0]["error"]
    assert main(["gsc", "--config", str(tmp_path / "run.yaml")]) == 3


def test_exit_codes(tmp_path):
    data = simulate_csv(tmp_path / "d.csv")
    ok = write_config(tmp_path, base_config(data, tmp_path / "o", ["y"]), "ok.yaml")
    assert main(["fit", "--config", str(ok)]) == 0
    assert main(["fit", "--config", str(tmp_path / "nope.yaml")]) == 1
    gone = write_config(tmp_path, base_config(tmp_path / "missing.csv", tmp_path / "o", ["y"]), "gone.yaml")
    assert main(["fit", "--config", str(gone)]) == 2
    neg = simulate_csv(tmp_path / "neg.csv", shift=-50.0)
    logged = write_config(tmp_path, base_config(neg, tmp_path / "o", [{"id": "y", "transform": "log"}]), "neg.yaml")
    assert main(["fit", "--config", str(logged)]) == 2


# -- magnitude -------------------------------------------------------------


def test_magnitude_examples():
    r = translate_magnitude(MagnitudeInput(-0.272, 1.0, horizon=1))
    assert r.pct_loss[0] == pytest.approx(0.238, abs=5e-4)
    z = translate_magnitude(MagnitudeInput([0.0, 0.0], 5.0))
    assert z.cumulative_loss == 0.0 and np.all(z.pct_loss == 0)
    c = translate_magnitude(MagnitudeInput(-0.24, 400e9, horizon=18))
    assert c.cumulative_loss == pytest.approx(400e9 * -math.expm1(-0.24) * 18)
    assert 1.5e12 <= c.cumulative_loss <= 2e12
    with pytest.raises(NonPositiveBaseline):
        translate_magnitude(MagnitudeInput([-0.1], 0.0))
    assert translate_magnitude(MagnitudeInput([0.1], 1.0)).pct_loss[0] < 0


# -- artifacts -------------------------------------------------------------


def test_nan_serializes_as_null(tmp_path):
    assert json.loads(dumps({"a": math.nan, "b": [1.0, math.inf], "c": np.float64(2.5)})) == {"a": None, "b": [1.0, None], "c": 2.5}
    write_csv(tmp_path / "t.csv", ("x", "y"), [(math.nan, 1.5)])
    assert (tmp_path / "t.csv").read_text().splitlines()[1] == ",1.5"


# -- fetch -----------------------------------------------------------------


def _wb_payload(code, value):
    recs = [
        {"indicator": {"id": code}, "countryiso3code": c, "date": str(y), "value": value + y - 2000}
        for c in ("IRN", "TUR") for y in (2000, 2001, 2002)
    ]
    return [{"page": 1, "pages": 1, "total": len(recs)}, recs]


def test_fetch_local_file_two_series(tmp_path):
    src = tmp_path / "wb.json"
    src.write_text(json.dumps({"A.B": _wb_payload("A.B", 1.0), "C.D": _wb_payload("C.D", 10.0)}))
    out = tmp_path / "panel.csv"
    code = main(["fetch", "--source", str(src), "--series", "A.B=a", "C.D=c", "--start", "2000", "--end", "2002", "--out", str(out)])
    assert code == 0
    obs = load_long_csv(out)
    assert {o.outcome for o in obs} == {"a", "c"} and len(obs) == 12
    side = json.loads(out.with_name("panel.csv.provenance.json").read_text())
    assert side["series"] == {"A.B": "a", "C.D": "c"} and side["rows"] == 12
    with pytest.raises(UnknownSeriesCode, match="X.Y"):
        fetch.fetch_panel(src, {"X.Y": "x"}, tmp_path / "x.csv")
    assert main(["fetch", "--source", str(tmp_path / "none.json"), "--series", "A.B=a", "--out", str(out)]) == 2


def test_fetch_api_error_payload(tmp_path, fixtures):
    with pytest.raises(UnknownSeriesCode):
        fetch.fetch_panel(fixtures / "wb_api_error.json", {"NOPE": "x"}, tmp_path / "x.csv")


def test_cached_api_response_builds_panel(tmp_path, fixtures, monkeypatch):
    monkeypatch.setenv("SYNTHPANEL_CACHE", str(tmp_path / "cache"))
    countries = ["IRN", "BGR", "EGY", "IDN", "JOR", "MYS", "MAR", "ROU", "SRB", "ZAF", "TUN", "TUR", "VNM"]
    url = fetch.api_url("NY.GDP.MKTP.KD", countries, 1996, 2024)
    (tmp_path / "cache").mkdir()
    shutil.copy(fixtures / "wb_api_gdp.json", tmp_path / "cache" / (hashlib.sha256(url.encode()).hexdigest()[:32] + ".json"))

    def offline(*a, **k):
        raise AssertionError("network touched")

    monkeypatch.setattr(fetch.urllib.request, "urlopen", offline)
    out = tmp_path / "gdp.csv"
    fetch.fetch_panel("worldbank", {"NY.GDP.MKTP.KD": "gdp"}, out, countries, interpolate=True)
    panel = build_panel(load_long_csv(out), TreatmentAssignment("IRN", 2006))
    assert panel.matrix("gdp").shape == (13, 29)
    assert json.loads(out.with_name("gdp.csv.provenance.json").read_text())["interpolated"] is True


def test_unreachable_source(tmp_path, monkeypatch):
    monkeypatch.setenv("SYNTHPANEL_CACHE", str(tmp_path / "cache"))

    def down(*a, **k):
        raise OSError("no route")

    monkeypatch.setattr(fetch.urllib.request, "urlopen", down)
    with pytest.raises(SourceUnreachable):
        fetch.fetch_panel("worldbank", {"NY.GDP.MKTP.KD": "gdp"}, tmp_path / "g.csv", ["IRN"])
