"""Command line entry point and config-driven orchestration.

``run`` drives the pipeline for every configured outcome (synthetic control
fit, then permutation placebos, then generalized synthetic control) and writes
one directory per outcome plus combined summary tables. Outcomes are
independent, so with ``jobs > 1`` they run in worker processes; every
artifact is a pure function of config and data, so the bytes do not depend on
``jobs``.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from . import gsc as gscmod
from . import placebo as plc
from . import scm
from .artifacts import write_csv, write_json
from .config import OutcomeConfig, RunConfig, load_config
from .dgp import DgpSpec, simulate, simulate_outcomes
from .errors import ConfigError, SynthPanelError
from .fetch import fetch_panel
from .magnitude import MagnitudeInput, translate_magnitude
from .panel import BalancedPanel, TreatmentAssignment, build_panel, load_long_csv, panel_observations, write_long_csv
from .transform import add_principal_component, transform_panel

__all__ = ["main", "run", "prepare_panel", "STAGES"]

LOGGER = logging.getLogger("synthpanel")

STAGES = ("fit", "placebo", "gsc")


def prepare_panel(cfg: RunConfig) -> tuple[BalancedPanel, dict]:
    """Load data, apply transforms, and add configured principal components.

    Returns the panel and a dict of principal-component metadata.
    """
    obs = load_long_csv(cfg.data_path, cfg.schema)
    present = {o.outcome for o in obs}
    pc_ids = {pc.id for pc in cfg.principal_components}
    for i, o in enumerate(cfg.outcomes):
        if o.id not in present and o.id not in pc_ids:
            raise ConfigError(f"outcomes[{i}].id: outcome {o.id!r} not found in data")
    for i, pc in enumerate(cfg.principal_components):
        for ind in pc.indicators:
            if ind not in present:
                raise ConfigError(f"principal_components[{i}].indicators: {ind!r} not found in data")
    raw_ids = list(dict.fromkeys(
        [o.id for o in cfg.outcomes if o.id not in pc_ids]
        + [ind for pc in cfg.principal_components for ind in pc.indicators]
    ))
    units = {cfg.treated_unit, *cfg.donors}
    obs = [o for o in obs if o.unit in units and o.outcome in raw_ids]
    panel = build_panel(obs, TreatmentAssignment(cfg.treated_unit, cfg.t0), cfg.donors, raw_ids)
    specs = {o.id: o.transform for o in cfg.outcomes if o.id not in pc_ids and o.transform.kind != "identity"}
    if specs:
        panel = transform_panel(panel, specs)
    meta = {}
    for pc in cfg.principal_components:
        panel, res = add_principal_component(panel, pc.indicators, pc.id)
        meta[pc.id] = {
            "indicators": list(pc.indicators),
            "loadings": res.loadings.tolist(),
            "explained_variance_ratio": res.explained_variance_ratio,
        }
    return panel, meta


@dataclass(frozen=True)
class _Task:
    panel: BalancedPanel
    outcome: OutcomeConfig
    cfg: RunConfig
    stages: tuple[str, ...]
    out_dir: Path


def _fit_stage(t: _Task, row: dict) -> scm.ScmFit:
    cfg, oid = t.cfg, t.outcome.id
    fit = scm.fit(t.panel, oid, cfg.predictors, seed=cfg.seed, restarts=cfg.scm_restarts, search=cfg.scm_search)
    write_json(t.out_dir / "scm_fit.json", fit.to_dict())
    write_csv(t.out_dir / "gaps.csv", ("period", "treated", "synthetic", "gap"), fit.gap_rows())
    eff = scm.effect_summary(fit)
    d = fit.diagnostics
    row.update(
        average_effect=eff.average_effect,
        gap_sd=eff.gap_sd,
        end_of_sample_effect=eff.end_of_sample_effect,
        rmspe_pre=d.rmspe_pre,
        avg_control_bias_pct=d.avg_control_bias_pct,
        sc_bias_pct=d.sc_bias_pct,
        r2_pre=d.r2_pre,
        weights=fit.weights.as_dict(),
    )
    return fit


def _placebo_stage(t: _Task, row: dict) -> None:
    cfg, oid = t.cfg, t.outcome.id
    kw = dict(seed=cfg.seed, restarts=cfg.scm_restarts, search=cfg.scm_search)
    dist = plc.in_space(t.panel, oid, cfg.predictors, **kw)
    summary = plc.summarize(dist, cfg.placebo.level, cfg.placebo.alpha)
    in_time = []
    for p in cfg.placebo.in_time:
        res = plc.in_time(t.panel, oid, p, cfg.predictors, **kw)
        in_time.append({"pseudo_t0": p, "average_effect": res.summary.average_effect, "p_value": res.p_value})
    summary["in_time"] = in_time
    cols = ("unit", "is_treated", "rmspe_pre", "rmspe_post", "ratio", "gap_t0p1", "gap_end", "avg_post_gap", "status")
    write_csv(t.out_dir / "placebo.csv", cols, ([r[c] for c in cols] for r in dist.rows()))
    write_csv(t.out_dir / "placebo_gaps.csv", ("unit", "period", "gap"), dist.gap_rows())
    write_json(t.out_dir / "placebo_summary.json", summary)
    row["placebo"] = summary


def _gsc_stage(t: _Task, row: dict) -> None:
    g = t.cfg.gsc
    fit = gscmod.gsc_fit(t.panel, t.outcome.id, r=g.r, boot=g.bootstrap, r_max=g.r_max)
    d = fit.to_dict()
    if g.in_time_backdate:
        it = gscmod.gsc_in_time_placebo(t.panel, t.outcome.id, g.in_time_backdate, fit.r, g.bootstrap)
        d["in_time"] = {
            "pseudo_t0": it.pseudo_t0,
            "average_att": it.average_att,
            "p_value": it.p_value,
            "anticipation_flag": it.anticipation_flag,
        }
    write_json(t.out_dir / "gsc_fit.json", d)
    write_csv(
        t.out_dir / "gsc_path.csv",
        ("period", "treated", "counterfactual", "att", "ci_low", "ci_high"),
        fit.plot_rows(),
    )
    row["gsc"] = d


def _magnitude(t: _Task, fit: scm.ScmFit, row: dict) -> None:
    base = t.outcome.baseline
    if base is None:
        return
    gaps = fit.post_gaps
    horizon = t.cfg.magnitude_horizon or len(gaps)
    row["magnitude"] = {
        "baseline": base,
        "horizon": horizon,
        "from_path": translate_magnitude(MagnitudeInput(gaps, base)).to_dict(),
        "from_average": translate_magnitude(MagnitudeInput(float(gaps.mean()), base, horizon)).to_dict(),
    }


def _run_outcome(t: _Task) -> dict:
    row: dict = {"outcome": t.outcome.id, "label": t.outcome.label or t.outcome.id, "status": "ok"}
    t.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = None
            if "fit" in t.stages or "placebo" in t.stages:
                fit = _fit_stage(t, row)
                _magnitude(t, fit, row)
            if "placebo" in t.stages:
                _placebo_stage(t, row)
            if "gsc" in t.stages:
                _gsc_stage(t, row)
    except SynthPanelError as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", exit_code=exc.exit_code)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", exit_code=3)
    return row


def _stages_for(cfg: RunConfig, command: str) -> tuple[str, ...]:
    if command == "fit":
        return ("fit",)
    if command == "placebo":
        return ("fit", "placebo")
    if command == "gsc":
        return ("gsc",)
    stages = ["fit"]
    if cfg.placebo.enabled:
        stages.append("placebo")
    if cfg.gsc.enabled:
        stages.append("gsc")
    return tuple(stages)


def _f(d: dict | None, key: str):
    return math.nan if d is None else d.get(key, math.nan)


def _write_summaries(out: Path, rows: list[dict], pc_meta: dict, cfg: RunConfig, stages) -> None:
    write_csv(
        out / "summary_effects.csv",
        ("outcome", "label", "average_effect", "ci_low", "ci_high", "end_of_sample_effect", "p_value", "gap_sd", "status"),
        [
            (
                r["outcome"], r["label"], r.get("average_effect", math.nan),
                _f(r.get("placebo"), "ci_low"), _f(r.get("placebo"), "ci_high"),
                r.get("end_of_sample_effect", math.nan), _f(r.get("placebo"), "p_two_sided"),
                r.get("gap_sd", math.nan), r["status"],
            )
            for r in rows
        ],
    )
    if "placebo" in stages:
        write_csv(
            out / "summary_placebo.csv",
            ("outcome", "label", "rmspe_ratio", "p_rmspe_ratio", "p_left_t0_plus_1", "p_left_end", "verdict"),
            [
                (
                    r["outcome"], r["label"],
                    _f(r.get("placebo"), "rmspe_ratio"), _f(r.get("placebo"), "p_rmspe_ratio"),
                    _f(r.get("placebo"), "p_left_t0_plus_1"), _f(r.get("placebo"), "p_left_end"),
                    (r.get("placebo") or {}).get("verdict", ""),
                )
                for r in rows
            ],
        )
    if "gsc" in stages:
        gsc_rows = []
        for r in rows:
            g = r.get("gsc") or {}
            ci = g.get("average_ci") or [math.nan, math.nan]
            it = g.get("in_time") or {}
            gsc_rows.append((
                r["outcome"], r["label"], g.get("r", ""), g.get("average_att", math.nan), ci[0], ci[1],
                g.get("p_value", math.nan), it.get("p_value", math.nan),
                "" if not it else int(it["anticipation_flag"]),
            ))
        write_csv(
            out / "summary_gsc.csv",
            ("outcome", "label", "r", "average_att", "ci_low", "ci_high", "p_value", "in_time_p_value", "anticipation_flag"),
            gsc_rows,
        )
    if "fit" in stages:
        write_csv(
            out / "diagnostics.csv",
            ("outcome", "rmspe_pre", "avg_control_bias_pct", "sc_bias_pct", "r2_pre"),
            [
                (r["outcome"], *(r.get(k, math.nan) for k in ("rmspe_pre", "avg_control_bias_pct", "sc_bias_pct", "r2_pre")))
                for r in rows
            ],
        )
        write_csv(
            out / "weights.csv",
            ("outcome", "donor", "weight"),
            [(r["outcome"], d, w) for r in rows for d, w in (r.get("weights") or {}).items()],
        )
        mags = {r["outcome"]: r["magnitude"] for r in rows if "magnitude" in r}
        if mags:
            write_json(out / "magnitudes.json", mags)
    write_json(
        out / "summary.json",
        {
            "treated_unit": cfg.treated_unit,
            "t0": cfg.t0,
            "donors": list(cfg.donors),
            "seed": cfg.seed,
            "stages": list(stages),
            "principal_components": pc_meta,
            "outcomes": rows,
            "failed": [r["outcome"] for r in rows if r["status"] != "ok"],
        },
    )


def run(cfg: RunConfig, command: str = "report", out: Path | None = None, jobs: int = 1) -> list[dict]:
    """Run the configured stages for every outcome and write all artifacts.

    Returns one summary row per outcome in config order. A failing outcome is
    recorded (``status == "failed"``) without stopping the others.
    """
    out = Path(out or cfg.output)
    stages = _stages_for(cfg, command)
    panel, pc_meta = prepare_panel(cfg)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [_Task(panel, o, cfg, stages, out / o.id) for o in cfg.outcomes]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
            rows = list(ex.map(_run_outcome, tasks))
    else:
        rows = [_run_outcome(t) for t in tasks]
    _write_summaries(out, rows, pc_meta, cfg, stages)
    for r in rows:
        if r["status"] != "ok":
            LOGGER.error("outcome %s failed: %s", r["outcome"], r["error"])
    return rows


# -- argument parsing ------------------------------------------------------


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: config 'output')")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent outcomes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthpanel", description="Synthetic control case-study toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate data and write the prepared panel")
    _common(p)
    for name, text in (
        ("fit", "synthetic control fits only"),
        ("placebo", "fits plus in-space and in-time placebos"),
        ("gsc", "generalized synthetic control only"),
        ("report", "every stage enabled in the config plus summary tables"),
    ):
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("simulate", help="write a simulated panel as long CSV")
    p.add_argument("--out", type=Path, required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--units", type=int, default=13, help="units including the treated one")
    p.add_argument("--periods", type=int, default=29)
    p.add_argument("--first-period", type=int, default=1996)
    p.add_argument("--t0", type=int, default=2006)
    p.add_argument("--factors", type=int, default=2)
    p.add_argument("--noise-sd", type=float, default=0.05)
    p.add_argument("--effect", type=float, default=0.0)
    p.add_argument("--mode", choices=("factor_model", "two_way_fe", "convex_combination"), default="factor_model")
    p.add_argument("--outcomes", default="y", help="comma-separated outcome ids")
    p.add_argument("--level-shift", type=float, default=0.0, help="constant added to every value")
    p.add_argument("--jobs", type=int, default=1, help=argparse.SUPPRESS)

    p = sub.add_parser("fetch", help="download or convert World Bank series to long CSV")
    p.add_argument("--source", default="worldbank", help="'worldbank' or a local .json/.csv file")
    p.add_argument("--series", nargs="+", required=True, metavar="CODE=OUTCOME")
    p.add_argument("--countries", nargs="*", default=[], help="ISO3 codes")
    p.add_argument("--start", type=int, default=1996)
    p.add_argument("--end", type=int, default=2024)
    p.add_argument("--wb-source", type=int, default=None, help="World Bank database id (3 = governance indicators)")
    p.add_argument("--interpolate", action="store_true", help="fill interior missing years linearly")
    p.add_argument("--out", type=Path, required=True, help="output CSV path")
    p.add_argument("--jobs", type=int, default=1, help=argparse.SUPPRESS)
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _simulate(args) -> None:
    spec = DgpSpec(
        n_units=args.units,
        n_periods=args.periods,
        first_period=args.first_period,
        t0=args.t0,
        n_factors=args.factors,
        noise_sd=args.noise_sd,
        effect=args.effect,
        mode=args.mode,
        seed=args.seed,
    )
    names = [s.strip() for s in args.outcomes.split(",") if s.strip()]
    panel = simulate_outcomes(spec, names) if len(names) > 1 else simulate(replace(spec, outcome=names[0])).panel
    obs = panel_observations(panel)
    if args.level_shift:
        obs = [replace(o, value=o.value + args.level_shift) for o in obs]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_long_csv(obs, args.out)


def _fetch(args) -> None:
    series = {}
    for item in args.series:
        code, sep, outcome = item.partition("=")
        if not sep or not code or not outcome:
            raise ConfigError(f"--series: expected CODE=OUTCOME, got {item!r}")
        series[code] = outcome
    fetch_panel(args.source, series, args.out, args.countries, args.start, args.end, args.wb_source, args.interpolate)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "simulate":
            _simulate(args)
            return 0
        if args.command == "fetch":
            _fetch(args)
            return 0
        cfg = _load(args)
        if args.command == "ingest":
            panel, meta = prepare_panel(cfg)
            out = Path(args.out or cfg.output)
            out.mkdir(parents=True, exist_ok=True)
            write_long_csv(panel_observations(panel), out / "panel.csv")
            write_json(out / "panel.json", {
                "units": list(panel.units),
                "periods": [panel.periods[0], panel.periods[-1]],
                "t0": panel.t0,
                "outcomes": list(panel.outcomes),
                "principal_components": meta,
            })
            return 0
        rows = run(cfg, args.command, args.out, args.jobs)
    except SynthPanelError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"outcome {r['outcome']} failed: {r['error']}", file=sys.stderr)
    return failed[0]["exit_code"] if failed else 0


if __name__ == "__main__":
    sys.exit(main())
