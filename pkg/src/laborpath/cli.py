"""Command-line pipeline: generate, prepare, estimate, predict, lifetime, diagnose.

Every subcommand writes its outputs plus a manifest JSON sufficient to
reproduce the run: subcommand, flags, seed, paths, package version, wall
clock, and convergence flags where estimation is involved.  Exit codes:
0 success, 2 validation failure, 3 non-convergence, 4 I/O failure.

Heavy imports happen inside command bodies — ``--threads`` must pin the
BLAS thread-count environment variables before numpy first loads.
"""

import csv
import json
import os
import sys
import time
from pathlib import Path

import click

EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

LIFETIME_SCENARIOS = (
    "job_for_life_public_vs_mobility",
    "job_for_life_private_vs_mobility",
    "public_vs_private_selection",
    "public_vs_private_no_selection",
)


def _fail(code: int, exc: BaseException) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guard(body):
    """Map exception classes onto the documented exit codes."""
    try:
        return body()
    except click.ClickException:
        raise
    except ValueError as exc:  # includes PanelFormatError and bad configs
        _fail(EXIT_VALIDATION, exc)
    except OSError as exc:
        _fail(EXIT_IO, exc)


def _flags_of(ctx) -> dict:
    flags = {}
    node = ctx
    while node is not None:
        for key, value in node.params.items():
            flags.setdefault(key, list(value) if isinstance(value, tuple) else value)
        node = node.parent
    return flags


def _write_manifest(
    out_path: Path,
    *,
    inputs,
    outputs,
    started: float,
    convergence=None,
    extra=None,
) -> Path:
    from . import __version__

    ctx = click.get_current_context()
    doc = {
        "subcommand": ctx.command.name,
        "flags": _flags_of(ctx),
        "seed": ctx.params.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifact_version": __version__,
        "wall_clock_seconds": round(time.monotonic() - started, 3),
        "convergence": convergence,
    }
    if extra:
        doc.update(extra)
    path = Path(out_path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _manifest_path(primary_output) -> Path:
    p = Path(primary_output)
    return p.with_name(p.stem + ".manifest.json")


def _classes_path(panel_out) -> Path:
    p = Path(panel_out)
    return p.with_name(p.stem + ".classes.csv")


def _write_classes(path, person_ids, km, ky) -> None:
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["person_id", "km", "ky"])
        for pid, a, b in zip(person_ids, km, ky):
            writer.writerow([int(pid), int(a), int(b)])
    os.replace(tmp, path)


def _read_classes(path, person_ids):
    import numpy as np

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["person_id", "km", "ky"]:
            raise ValueError(f"{path}: header must be person_id,km,ky")
        rows = {int(r[0]): (int(r[1]), int(r[2])) for r in reader if r}
    missing = [int(p) for p in person_ids if int(p) not in rows]
    if missing:
        raise ValueError(f"{path}: no classes for persons {missing[:5]}")
    km = np.array([rows[int(p)][0] for p in person_ids])
    ky = np.array([rows[int(p)][1] for p in person_ids])
    return km, ky


def _load_parameter_set(params_path):
    from .panel_io import load_params, published_params

    return load_params(params_path) if params_path else published_params()


def _load_arrays(path, min_spells=1):
    from .panel import PanelArrays
    from .panel_io import load_panel

    histories, report = load_panel(path, min_spells=min_spells)
    if not histories:
        raise ValueError(f"{path}: no usable trajectories")
    return PanelArrays.from_histories(histories), report


@click.group()
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=None,
    help="Pin BLAS/OpenMP thread counts (set before numpy loads).",
)
def main(threads):
    """Career-dynamics pipeline: simulate, prepare, estimate, and value."""
    if threads is not None:
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(threads)


@main.command()
@click.option("--n", required=True, type=click.IntRange(min=1), help="Cohort size.")
@click.option("--start-year", default=2012, show_default=True, type=int)
@click.option("--end-year", default=2019, show_default=True, type=int)
@click.option("--female-share", default=0.5, show_default=True, type=float)
@click.option(
    "--educ-shares",
    default="0.69,0.16,0.15",
    show_default=True,
    help="low,medium,high population shares (must sum to 1).",
)
@click.option(
    "--first-xp-range",
    default="0.0,3.0",
    show_default=True,
    help="uniform support of entry experience, in decades.",
)
@click.option("--params", "params_path", type=click.Path(), default=None,
              help="Parameter JSON; defaults to the published set.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(),
              help="Panel CSV path; classes land next to it.")
def generate(n, start_year, end_year, female_share, educ_shares,
             first_xp_range, params_path, seed, out):
    """Simulate a synthetic cohort panel plus its latent classes."""

    def body():
        started = time.monotonic()
        from .panel_io import save_panel
        from .simulate import PopulationSpec, generate_panel

        ps = _load_parameter_set(params_path)
        spec = PopulationSpec(
            n=n,
            start_year=start_year,
            end_year=end_year,
            female_share=female_share,
            educ_shares=tuple(float(x) for x in educ_shares.split(",")),
            first_xp_range=tuple(float(x) for x in first_xp_range.split(",")),
        )
        sim = generate_panel(spec, ps.mobility, ps.income, seed, ps.config)
        save_panel(sim.panel, out)
        classes = _classes_path(out)
        _write_classes(classes, sim.panel.person_ids, sim.km, sim.ky)
        _write_manifest(
            _manifest_path(out),
            inputs=[params_path] if params_path else [],
            outputs=[out, classes],
            started=started,
        )

    _guard(body)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(),
              help="Raw panel CSV.")
@click.option("--out", required=True, type=click.Path())
@click.option("--end-year", type=int, default=None,
              help="Imputation horizon; defaults to the latest observed year.")
@click.option("--max-age", type=float, default=None,
              help="Imputation age cap; defaults to the retirement age.")
def prepare(in_path, out, end_year, max_age):
    """Clean a panel: drop too-short histories, impute gaps, winsorize."""

    def body():
        started = time.monotonic()
        from .panel_io import load_panel, prepare_panel, save_panel

        histories, report = load_panel(in_path)
        panel, prep = prepare_panel(histories, end_year=end_year, max_age=max_age)
        save_panel(panel, out)
        _write_manifest(
            _manifest_path(out),
            inputs=[in_path],
            outputs=[out],
            started=started,
            extra={
                "preparation": {
                    "malformed_rows": len(report.malformed),
                    "dropped_short": sorted(
                        set(report.dropped_short) | set(prep.dropped_short)
                    ),
                    "imputed_rows": prep.n_imputed_rows,
                    "wages_clamped": prep.winsor.clamped_low
                    + prep.winsor.clamped_high,
                    "winsor_cells_skipped": len(prep.winsor.skipped_cells),
                }
            },
        )

    _guard(body)


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(),
              help="Prepared panel CSV.")
@click.option("--out", required=True, type=click.Path(),
              help="Output parameter JSON; the trace lands next to it.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Model-configuration JSON; flags below override its values.")
@click.option("--km", type=click.IntRange(min=1), default=None,
              help="Number of dynamics classes.")
@click.option("--ky", type=click.IntRange(min=1), default=None,
              help="Number of earnings classes.")
@click.option("--em-tol", type=float, default=None)
@click.option("--max-em-iter", type=int, default=None)
@click.option("--restarts", type=int, default=None,
              help="Random restarts for the first phase.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--checkpoint-dir", type=click.Path(), default=None)
def estimate(panel_path, out, config_path, km, ky, em_tol, max_em_iter,
             restarts, seed, checkpoint_dir):
    """Fit all three phases and write the estimated parameter set."""

    def body():
        started = time.monotonic()
        from .em_income import estimate_sequential
        from .panel_io import ParameterSet, load_panel, prepare_panel, save_params
        from .params import ModelConfig

        if config_path:
            with open(config_path) as fh:
                cfg = ModelConfig.from_dict(json.load(fh))
        else:
            cfg = ModelConfig()
        overrides = {
            "K_m": km,
            "K_y": ky,
            "em_tol": em_tol,
            "max_em_iter": max_em_iter,
            "n_restarts": restarts,
        }
        cfg = cfg.with_(**{k: v for k, v in overrides.items() if v is not None})

        histories, _ = load_panel(panel_path)
        panel, _prep = prepare_panel(histories, config=cfg)
        result = estimate_sequential(
            panel, config=cfg, seed=seed, checkpoint_dir=checkpoint_dir
        )

        save_params(ParameterSet(result.mobility, result.income, cfg), out)
        trace_path = Path(out).with_name(Path(out).stem + ".trace.csv")
        tmp = trace_path.with_name(trace_path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "iteration", "loglik", "distance", "step_scale"])
            for step in result.trace:
                writer.writerow([
                    step.phase, step.iteration, repr(step.loglik),
                    repr(step.distance), repr(step.step_scale),
                ])
        os.replace(tmp, trace_path)
        _write_manifest(
            _manifest_path(out),
            inputs=[panel_path] + ([config_path] if config_path else []),
            outputs=[out, trace_path],
            started=started,
            convergence={
                "converged": result.converged,
                "loglik": result.loglik,
                "em_steps": len(result.trace),
            },
        )
        if not result.converged:
            click.echo("estimation did not converge within the iteration cap", err=True)
            sys.exit(EXIT_NONCONVERGENCE)

    _guard(body)


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(),
              help="Observed panel; each person's first year seeds the projection.")
@click.option("--params", "params_path", type=click.Path(), default=None,
              help="Parameter JSON; defaults to the published set.")
@click.option("--end-year", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--draw-initial", is_flag=True,
              help="Redraw the first year from the model instead of anchoring.")
@click.option("--out", required=True, type=click.Path())
def predict(panel_path, params_path, end_year, seed, draw_initial, out):
    """Project observed individuals forward under a fitted model."""

    def body():
        started = time.monotonic()
        from .panel_io import save_panel
        from .simulate import FirstSpells, predict_panel

        ps = _load_parameter_set(params_path)
        arrays, _report = _load_arrays(panel_path)
        spells = FirstSpells.from_panel(arrays)
        sim = predict_panel(
            spells, ps.mobility, ps.income, end_year, seed, ps.config,
            draw_initial=draw_initial,
        )
        save_panel(sim.panel, out)
        classes = _classes_path(out)
        _write_classes(classes, sim.panel.person_ids, sim.km, sim.ky)
        _write_manifest(
            _manifest_path(out),
            inputs=[panel_path] + ([params_path] if params_path else []),
            outputs=[out, classes],
            started=started,
        )

    _guard(body)


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(),
              help="Panel CSV; each person's first observed year anchors the run.")
@click.option("--params", "params_path", type=click.Path(), default=None,
              help="Parameter JSON; defaults to the published set.")
@click.option("--scenario", "scenarios", multiple=True,
              type=click.Choice(LIFETIME_SCENARIOS),
              help="Curves to emit; defaults to all of them.")
@click.option("--beta", type=float, default=None,
              help="Discount factor; defaults to the configured value.")
@click.option("--rr", type=float, default=None,
              help="Flat pension replacement rate.")
@click.option("--rr-public", type=float, default=None,
              help="Sector-specific replacement rate (needs --rr-private).")
@click.option("--rr-private", type=float, default=None)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(),
              help="Output directory for the curve CSVs.")
def lifetime(panel_path, params_path, scenarios, beta, rr, rr_public,
             rr_private, seed, out):
    """Lifetime-value premium curves for the held-job counterfactuals."""

    def body():
        started = time.monotonic()
        from .lifetime import job_for_life_values, mobility_values, premium_curve
        from .simulate import FirstSpells

        if (rr_public is None) != (rr_private is None):
            raise click.UsageError("--rr-public and --rr-private go together")
        if rr is not None and rr_public is not None:
            raise click.UsageError("--rr conflicts with the sector pair")
        rr_value = (rr_public, rr_private) if rr_public is not None else rr

        ps = _load_parameter_set(params_path)
        arrays, _report = _load_arrays(panel_path)
        spells = FirstSpells.from_panel(arrays)
        chosen = scenarios or LIFETIME_SCENARIOS
        kwargs = dict(seed=seed, config=ps.config, beta=beta, rr=rr_value)

        jfl_pub = jfl_pvt = mob = None
        if any("mobility" in s or "public_vs_private" in s for s in chosen):
            jfl_pub = job_for_life_values(
                spells, ps.mobility, ps.income, "public", **kwargs
            )
            jfl_pvt = job_for_life_values(
                spells, ps.mobility, ps.income, "private", **kwargs
            )
        if any("mobility" in s for s in chosen):
            mob = mobility_values(spells, ps.mobility, ps.income, **kwargs)

        curves = {}
        for name in chosen:
            if name == "job_for_life_public_vs_mobility":
                curves[name] = premium_curve(jfl_pub, mob)
            elif name == "job_for_life_private_vs_mobility":
                curves[name] = premium_curve(jfl_pvt, mob)
            elif name == "public_vs_private_selection":
                curves[name] = premium_curve(
                    jfl_pub.subset(spells.first_state == 2),
                    jfl_pvt.subset(spells.first_state == 1),
                )
            else:
                curves[name] = premium_curve(jfl_pub, jfl_pvt)

        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        rr_used = rr_value if rr_value is not None else ps.config.RR
        rr_text = (
            f"{rr_used[0]}:{rr_used[1]}"
            if isinstance(rr_used, tuple) else repr(float(rr_used))
        )
        beta_used = beta if beta is not None else ps.config.beta
        outputs = []
        for name, curve in curves.items():
            path = out_dir / f"{name}.csv"
            tmp = path.with_name(path.name + ".tmp")
            with open(tmp, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([
                    "percentile", "log_diff", "group_a", "group_b",
                    "scenario", "RR", "beta", "seed",
                ])
                for pct, diff in zip(curve.percentiles, curve.log_diff):
                    writer.writerow([
                        int(pct), repr(float(diff)), curve.group_a,
                        curve.group_b, name, rr_text, repr(beta_used), seed,
                    ])
            os.replace(tmp, path)
            outputs.append(path)
        _write_manifest(
            out_dir / "lifetime.manifest.json",
            inputs=[panel_path] + ([params_path] if params_path else []),
            outputs=outputs,
            started=started,
            extra={
                "wide_uncertainty": {
                    name: curve.wide_uncertainty for name, curve in curves.items()
                }
            },
        )

    _guard(body)


@main.command()
@click.option("--panel-a", required=True, type=click.Path())
@click.option("--panel-b", required=True, type=click.Path())
@click.option("--classes-a", type=click.Path(), default=None,
              help="Latent classes for panel A (enables composition tables).")
@click.option("--classes-b", type=click.Path(), default=None)
@click.option("--bin-width", default=0.05, show_default=True, type=float)
@click.option("--out", required=True, type=click.Path(),
              help="Output directory for the fit report.")
def diagnose(panel_a, panel_b, classes_a, classes_b, bin_width, out):
    """Compare two panels: transitions, wage densities, compositions."""

    def body():
        started = time.monotonic()
        from .diagnostics import (
            composition_csv,
            composition_table,
            histogram_l1_distance,
            matrix_distance,
            transition_matrix,
            transition_matrix_csv,
            wage_histogram,
            wage_histogram_csv,
        )

        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = []

        def emit(name, text):
            path = out_dir / name
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(text)
            os.replace(tmp, path)
            outputs.append(path)

        report = {}
        sides = {}
        for label, panel_path, classes_path in (
            ("a", panel_a, classes_a),
            ("b", panel_b, classes_b),
        ):
            arrays, _ = _load_arrays(panel_path)
            tm = transition_matrix(arrays)
            hist = wage_histogram(arrays, bin_width, group_keys=("state",))
            emit(f"transition_{label}.csv", transition_matrix_csv(tm))
            emit(f"wage_histogram_{label}.csv", wage_histogram_csv(hist))
            if classes_path:
                km, ky = _read_classes(classes_path, arrays.person_ids)
                for tag, cls in (("km", km), ("ky", ky)):
                    emit(
                        f"composition_{tag}_{label}.csv",
                        composition_csv(composition_table(arrays, cls)),
                    )
            sides[label] = (tm, hist)

        tm_a, hist_a = sides["a"]
        tm_b, hist_b = sides["b"]
        report["transition_distance"] = matrix_distance(tm_a, tm_b)
        l1 = {}
        for key, ga in hist_a.groups.items():
            gb = hist_b.groups.get(key)
            if gb is None or ga.empty or gb.empty:
                continue
            l1[str(key[0])] = histogram_l1_distance(ga, gb, bin_width)
        report["wage_histogram_l1_by_state"] = l1

        emit("report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        _write_manifest(
            out_dir / "diagnose.manifest.json",
            inputs=[p for p in (panel_a, panel_b, classes_a, classes_b) if p],
            outputs=outputs,
            started=started,
        )

    _guard(body)


if __name__ == "__main__":
    main()
