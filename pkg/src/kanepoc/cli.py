"""``kanepoc`` command line: simulate, fit, predict, diagnose, bootstrap, study.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

from . import __version__
from .diagnostics import bootstrap_ci, dunn_smyth, qq_reference
from .evt import ColumnMapping, build_threshold_sample, read_dataset
from .network import GLayer, PocEstimate, canonical_widths, estimate_from_dict
from .ordinal import OrdinalModel, fit_ordinal
from .simulation import (
    DIMENSION,
    SCENARIOS,
    ReplicateResult,
    generate,
    run_replicates,
    summarize,
    true_poc,
    unit_grid,
)
from .splines import SplineSpec
from .training import FitConfig, fit

MANIFEST = "manifest.json"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        if np.isnan(v):
            return ""
        return f"{float(v):.17g}"
    return str(v)


def _atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def _write_json(path, doc):
    _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """Collects manifest details for one command invocation."""

    def __init__(self, command, out_dir, config, seeds=None, inputs=()):
        self.out = Path(out_dir)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise click.ClickException(f"cannot create output directory {out_dir}: {exc}")
        if not os.access(self.out, os.W_OK):
            raise click.ClickException(f"output directory {out_dir} is not writable")
        self.command = command
        self.config = config
        self.seeds = seeds or {}
        self.inputs = {str(p): _digest(p) for p in inputs}
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.outputs = []
        self.extra = {}

    def path(self, name):
        self.outputs.append(name)
        return self.out / name

    def finish(self):
        doc = {
            "command": self.command,
            "tool": "kanepoc",
            "version": __version__,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {name: _digest(self.out / name) for name in sorted(set(self.outputs))},
            "started": self.started,
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            **self.extra,
        }
        _write_json(self.out / MANIFEST, doc)


def _default_threads():
    try:
        return max(1, int(os.environ.get("KANEPOC_THREADS", "1")))
    except ValueError:
        return 1


def _parse_ints(text, name):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}", param_hint=name)


class _Group(click.Group):
    """Reports library failures as runtime errors (exit 1) without a traceback."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except (ValueError, OSError, RuntimeError, FloatingPointError, KeyError) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc


@click.group(cls=_Group)
@click.version_option(__version__, prog_name="kanepoc")
def main():
    """Probability-of-cascade surfaces with KANE networks."""


@main.command()
@click.option("--scenario", type=click.Choice(SCENARIOS), required=True)
@click.option("-n", "--n", "n", type=click.IntRange(min=20), default=10000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--quantile", "q", type=click.FloatRange(0, 1, min_open=True, max_open=True),
              default=0.95, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def simulate(scenario, n, seed, q, out_dir):
    """Simulate a scenario dataset plus its true POC grid."""
    run = _Run("simulate", out_dir, {"scenario": scenario, "n": n, "quantile": q}, {"seed": seed})
    draw = generate(scenario, n, seed, q)
    d = DIMENSION[scenario]
    xcols = [f"x{j + 1}" for j in range(d)]
    raw = draw.raw
    if scenario == "C":
        ycols = ["delta_1", "delta_2", "delta_3"]
        follow = raw.followup
    else:
        ycols = ["delta"]
        follow = raw.followup[:, None]
    rows = (list(raw.features[i]) + [raw.trigger[i]] + [_flag(v) for v in follow[i]] for i in range(n))
    _write_csv(run.path("data.csv"), xcols + ["y"] + ycols, rows)
    grid = unit_grid(d)
    truth = true_poc(scenario, grid).reshape(grid.shape[0], -1)
    tcols = ["truth"] if truth.shape[1] == 1 else [f"truth_{j + 1}" for j in range(truth.shape[1])]
    _write_csv(run.path("truth_grid.csv"), xcols + tcols, np.hstack([grid, truth]).tolist())
    mapping = {"features": xcols, "trigger": "y", "followup": ycols,
               "kind": "categorical" if scenario == "C" else "binary",
               "categories": 3 if scenario == "C" else 2}
    _write_json(run.path("mapping.json"), mapping)
    run.extra["threshold"] = draw.threshold
    run.finish()
    click.echo(f"wrote {n} rows ({draw.exceedances.size} exceedances above u={draw.threshold:.6g}) to {out_dir}")


def _flag(v):
    return "" if np.isnan(v) else int(v)


def _load_mapping(data, mapping_path):
    if mapping_path is None:
        sidecar = Path(data).with_name("mapping.json")
        if not sidecar.exists():
            raise click.UsageError("no --mapping given and no mapping.json next to the data file")
        mapping_path = sidecar
    try:
        return ColumnMapping.load(mapping_path), Path(mapping_path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"bad column mapping {mapping_path}: {exc}")


def _load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") == "kanepoc-ordinal":
        return OrdinalModel.from_dict(doc)
    return estimate_from_dict(doc)


@main.command("fit")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--mapping", "mapping_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--quantile", "q", type=click.FloatRange(0, 1, min_open=True, max_open=True),
              default=0.95, show_default=True)
@click.option("--degree", "p", type=click.IntRange(min=0), default=3, show_default=True)
@click.option("--intervals", "m", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--depth", "L", type=click.IntRange(min=2), default=3, show_default=True,
              help="Number of node layers, input and output included.")
@click.option("--hidden", type=str, default=None, help="Hidden widths, e.g. '5,5' (default 2d+1).")
@click.option("--g-layer", "g_name", type=click.Choice(["sigmoid", "softmax"]), default=None,
              help="Defaults to softmax for categorical follow-ups, sigmoid otherwise.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-iter", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON fit configuration; --seed/--max-iter override it.")
@click.option("--unit-features", is_flag=True, help="Features already lie in [0, 1]; do not rescale.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def fit_cmd(data, mapping_path, q, p, m, L, hidden, g_name, seed, max_iter, config_path, unit_features, out_dir):
    """Threshold a CSV dataset and fit a KANE model."""
    mapping, mpath = _load_mapping(data, mapping_path)
    config = FitConfig.load(config_path) if config_path else FitConfig()
    config = config.replace(init_seed=seed, max_iterations=max_iter)
    raw = read_dataset(data, mapping)
    d = raw.features.shape[1]
    bounds = (np.zeros(d), np.ones(d)) if unit_features else None
    sample = build_threshold_sample(raw, q, bounds=bounds)
    spec = SplineSpec(p, m)
    kind = mapping.kind
    if g_name is None:
        g_name = "softmax" if kind == "categorical" else "sigmoid"
    if g_name == "softmax" and kind != "categorical":
        raise click.UsageError("the softmax g-layer needs a categorical follow-up")
    if kind == "categorical" and g_name != "softmax":
        raise click.UsageError("categorical follow-ups need --g-layer softmax")
    outputs = mapping.categories if g_name == "softmax" else 1
    if hidden:
        widths = (d, *_parse_ints(hidden, "--hidden"), outputs)
    else:
        widths = canonical_widths(d, outputs, L)
    cfg = {"data": str(data), "mapping": mapping.to_dict(), "quantile": q, "degree": p,
           "intervals": m, "widths": list(widths), "g_layer": g_name, "fit": config.to_dict(),
           "unit_features": unit_features}
    run = _Run("fit", out_dir, cfg, {"seed": seed}, [data, mpath])
    if kind == "ordinal":
        model = fit_ordinal(sample, widths, spec, config)
        reports = [r.to_dict() if r else None for r in model.reports]
        _write_json(run.path("model.json"), model.to_dict())
        _write_json(run.path("report.json"), {"submodels": reports, "constant": model.constant})
        summary = f"Frank-Hall model with {len(model.submodels)} sub-models"
    else:
        g_layer = GLayer.softmax(outputs) if g_name == "softmax" else GLayer.sigmoid()
        est, report = fit(sample, widths, spec, g_layer, config)
        _write_json(run.path("model.json"), est.to_dict())
        _write_json(run.path("report.json"), report.to_dict())
        run.extra["wall_seconds"] = report.wall_seconds
        summary = f"{report.iterations} iterations, loss {report.final_loss:.6g} ({report.status})"
    run.extra["n_retained"] = int(sample.n_retained)
    run.extra["threshold"] = sample.threshold
    run.finish()
    click.echo(f"fitted on {sample.n_retained} exceedances: {summary}")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--grid", "grid_points", type=click.IntRange(min=2), default=None,
              help="Points per axis of a regular grid over the (scaled) unit cube.")
@click.option("--points", "points_csv", type=click.Path(exists=True, dir_okay=False),
              help="CSV of feature points on the original scale (header row required).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def predict(model_path, grid_points, points_csv, out_path):
    """Evaluate a fitted model on a grid or at given points."""
    if (grid_points is None) == (points_csv is None):
        raise click.UsageError("give exactly one of --grid or --points")
    model = _load_model(model_path)
    d = model.dim
    if grid_points is not None:
        U = unit_grid(d, grid_points)
        X = model.scaling.inverse_transform(U)
        values = model.predict_unit(U)
    else:
        from .evt import read_table

        header, X = read_table(points_csv)
        if X.shape[1] != d:
            raise click.ClickException(f"model expects {d} features, {points_csv} has {X.shape[1]} columns")
        values = model.predict(X)
    xcols = [f"x{j + 1}" for j in range(d)]
    ycols = ["alpha"] if values.shape[1] == 1 else [f"alpha_{j + 1}" for j in range(values.shape[1])]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out_path, xcols + ycols, np.hstack([X, values]).tolist())
    click.echo(f"wrote {values.shape[0]} predictions to {out_path}")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--mapping", "mapping_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--trajectories", "-T", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def diagnose(model_path, data, mapping_path, trajectories, seed, out_dir):
    """Dunn-Smyth residual trajectories and QQ reference data."""
    model = _load_model(model_path)
    if not isinstance(model, PocEstimate) or model.outputs != 1:
        raise click.ClickException("residual diagnostics need a binary (sigmoid) model")
    mapping, mpath = _load_mapping(data, mapping_path)
    if mapping.kind not in ("binary", "continuous"):
        raise click.ClickException("residual diagnostics need a binary follow-up")
    raw = read_dataset(data, mapping)
    if raw.features.shape[1] != model.dim:
        raise click.ClickException(f"model expects {model.dim} features, data has {raw.features.shape[1]}")
    sample = build_threshold_sample(raw, model.quantile or 0.95)
    sample.features = model.scaling.transform(raw.features[sample.index])
    res = dunn_smyth(model, sample, trajectories, seed)
    run = _Run("diagnose", out_dir, {"model": str(model_path), "data": str(data), "trajectories": trajectories},
               {"seed": seed}, [model_path, data, mpath])
    rows = [(t, i, r) for t in range(trajectories) for i, r in enumerate(res.residuals[t])]
    _write_csv(run.path("residuals.csv"), ["trajectory", "index", "residual"], rows)
    qq_rows = []
    for t in range(trajectories):
        qq = qq_reference(res.residuals[t])
        qq_rows.extend((t, i, qq.sample[i], qq.theoretical[i], qq.lower[i], qq.upper[i])
                       for i in range(qq.sample.size))
    _write_csv(run.path("qq.csv"), ["trajectory", "rank", "residual", "theoretical", "band_lo", "band_hi"], qq_rows)
    run.finish()
    click.echo(f"wrote {trajectories} residual trajectories of length {sample.n_retained} to {out_dir}")


@main.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--mapping", "mapping_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--quantile", "q", type=click.FloatRange(0, 1, min_open=True, max_open=True),
              default=0.95, show_default=True)
@click.option("--replicates", "-B", type=click.IntRange(min=50), default=200, show_default=True)
@click.option("--level", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=0.95, show_default=True)
@click.option("--grid", "grid_points", type=click.IntRange(min=2), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-iter", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--unit-features", is_flag=True)
@click.option("--threads", type=click.IntRange(min=1), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def bootstrap(data, mapping_path, q, replicates, level, grid_points, seed, max_iter, unit_features, threads, out_dir):
    """Resampling-cases bootstrap band for a binary POC surface."""
    mapping, mpath = _load_mapping(data, mapping_path)
    if mapping.kind not in ("binary", "continuous"):
        raise click.ClickException("bootstrap bands need a binary follow-up")
    raw = read_dataset(data, mapping)
    d = raw.features.shape[1]
    sample = build_threshold_sample(raw, q, bounds=(np.zeros(d), np.ones(d)) if unit_features else None)
    grid = unit_grid(d, grid_points or (101 if d == 1 else 21))
    config = FitConfig(max_iterations=max_iter, init_seed=seed)
    band = bootstrap_ci(sample, config, replicates, grid, level, seed, threads=threads or _default_threads())
    run = _Run("bootstrap", out_dir, {"data": str(data), "quantile": q, "replicates": replicates,
                                      "level": level, "fit": config.to_dict()}, {"seed": seed}, [data, mpath])
    X = sample.scaling.inverse_transform(grid)
    xcols = [f"x{j + 1}" for j in range(d)]
    rows = np.column_stack([X, band.lower, band.point, band.upper]).tolist()
    _write_csv(run.path("band.csv"), xcols + ["lo", "point", "hi"], rows)
    run.extra.update(constant_fallbacks=band.constant_fallbacks, flagged_points=int(band.flagged.sum()))
    run.finish()
    click.echo(f"wrote {grid.shape[0]}-point band ({replicates} replicates) to {out_dir}")


def _cell_name(scenario, n):
    return f"{scenario}_n{n}"


def _load_cached(path, seed, fingerprint):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None
    if doc.get("fingerprint") != fingerprint or doc["record"].get("seed") != seed:
        return None
    return ReplicateResult.from_dict(doc["record"])


@main.command()
@click.option("--scenarios", default="A1", show_default=True, help="Comma-separated scenario ids.")
@click.option("--sizes", default="5000,10000,15000", show_default=True)
@click.option("--replicates", "-M", type=click.IntRange(min=1), default=None,
              help="Replicates per cell (default 100 for A scenarios, 50 otherwise).")
@click.option("--full", is_flag=True, help="Use 500 replicates per cell.")
@click.option("--seed", type=int, default=0, show_default=True, help="Base seed; replicate r uses seed + r.")
@click.option("--max-iter", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Worker processes (default $KANEPOC_THREADS or 1).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def study(scenarios, sizes, replicates, full, seed, max_iter, threads, out_dir):
    """Monte Carlo MISE study over scenarios and sample sizes.

    Finished replicates are cached under OUT/replicates and reused when the
    study is rerun with the same seeds and configuration.
    """
    ids = [s.strip() for s in scenarios.split(",") if s.strip()]
    bad = [s for s in ids if s not in SCENARIOS]
    if bad or not ids:
        raise click.BadParameter(f"unknown scenarios {bad}", param_hint="--scenarios")
    ns = _parse_ints(sizes, "--sizes")
    if not ns or min(ns) < 20:
        raise click.BadParameter("sizes must be integers of at least 20", param_hint="--sizes")
    config = FitConfig(max_iterations=max_iter)
    threads = threads or _default_threads()

    def reps_for(sc):
        if full:
            return 500
        if replicates is not None:
            return replicates
        return 100 if sc.startswith("A") else 50

    q = 0.95
    cfg = {"scenarios": ids, "sizes": ns, "replicates": {s: reps_for(s) for s in ids},
           "fit": config.to_dict(), "quantile": q}
    run = _Run("study", out_dir, cfg, {"base_seed": seed})
    fingerprint = {"fit": config.to_dict(), "quantile": q, "version": __version__}
    cells, reused = {}, 0
    for sc in ids:
        for n in ns:
            name = _cell_name(sc, n)
            cache = run.out / "replicates" / name
            cache.mkdir(parents=True, exist_ok=True)
            records, jobs = [], []
            for r in range(reps_for(sc)):
                rec = _load_cached(cache / f"r{r:04d}.json", seed + r, fingerprint)
                if rec is None:
                    jobs.append((sc, n, r, seed + r, config, q, None))
                else:
                    records.append(rec)
            reused += len(records)
            for rec in run_replicates(jobs, threads):
                _atomic_write(cache / f"r{rec.replicate:04d}.json",
                              json.dumps({"fingerprint": fingerprint, "record": rec.to_dict()}))
                records.append(rec)
            summary = summarize(sc, n, seed, records)
            cells[(sc, n)] = summary
            _write_cell(run, name, summary)
    _write_table(run, ids, ns, cells)
    run.extra["reused_replicates"] = reused
    run.finish()
    click.echo((run.out / "table.txt").read_text(encoding="utf-8"), nl=False)


def _write_cell(run, name, summary):
    J = summary.categories
    mcols = ["mise"] if J == 1 else [f"mise_{j + 1}" for j in range(J)]
    rows = []
    for r in summary.records:
        m = r.mise if r.ok else [float("nan")] * J
        rows.append([r.replicate, r.seed, r.n_retained, r.final_loss, *m, r.status])
    _write_csv(run.path(f"replicates_{name}.csv"),
               ["replicate", "seed", "n_u", "final_loss", *mcols, "status"], rows)
    d = summary.grid.shape[1]
    xcols = [f"x{j + 1}" for j in range(d)]
    tcols = ["truth"] if J == 1 else [f"truth_{j + 1}" for j in range(J)]
    ecols = ["estimate_mean"] if J == 1 else [f"estimate_mean_{j + 1}" for j in range(J)]
    _write_csv(run.path(f"surface_{name}.csv"), xcols + tcols + ecols,
               np.hstack([summary.grid, summary.truth, summary.mean_curve]).tolist())


def _write_table(run, ids, ns, cells):
    lines = ["MISE across scenarios and sample sizes", ""]
    head = f"{'Scenario':<12}" + "".join(f"{n:>14}" for n in ns)
    rows_csv = []
    blocks = []
    for label, getter in (("mean MISE over replicates", "mean_mise"),
                          ("median MISE over replicates", "median_mise"),
                          ("ISE of the Monte Carlo mean surface", "mean_curve_ise")):
        block = [label, head]
        for sc in ids:
            J = cells[(sc, ns[0])].categories
            for j in range(J):
                row_label = sc if J == 1 else f"{sc} (j={j + 1})"
                vals = []
                for n in ns:
                    s = cells[(sc, n)]
                    v = getattr(s, getter)()[j]
                    cell = f"{v:.3e}" if np.isfinite(v) else "nan"
                    if s.failures:
                        cell += f" [{s.failures} failed]"
                    vals.append(cell)
                    rows_csv.append([getter, row_label, n, s.replicates, s.failures, v])
                block.append(f"{row_label:<12}" + "".join(f"{c:>14}" for c in vals))
        blocks.append("\n".join(block))
    text = "\n".join(lines) + "\n\n".join(blocks) + "\n"
    _atomic_write(run.path("table.txt"), text)
    _write_csv(run.path("table.csv"), ["statistic", "scenario", "n", "replicates", "failures", "value"], rows_csv)
    _write_json(run.path("summary.json"), {
        f"{sc}/{n}": {"mean_mise": cells[(sc, n)].mean_mise(), "median_mise": cells[(sc, n)].median_mise(),
                      "mean_curve_ise": cells[(sc, n)].mean_curve_ise(),
                      "replicates": cells[(sc, n)].replicates, "failures": cells[(sc, n)].failures}
        for sc in ids for n in ns})


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
