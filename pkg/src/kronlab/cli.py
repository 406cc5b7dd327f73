"""Command-line front end.

Exit codes: 0 on success, 1 when a check fails, 2 on bad input or an
internal error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import experiments, verify as verify_mod
from .dynamics import IDENTITY, RELU, LayerSpec, eigen_expansion_norms, rollout as run_rollout, set_propagate_mutation
from .errors import KronlabError
from .graph import Graph, RandomWalk, erdos_renyi, largest_scc, laplacian, load_edge_list, sym_incidence, sym_normalized
from .linalg import random_orthogonal, read_matrix, sym_eig
from .training import FAMILIES

log = logging.getLogger("kronlab")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2


class CheckFailed(Exception):
    pass


def _guarded(fn):
    """Map outcomes to exit codes; click's own usage errors already exit with 2."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except CheckFailed as exc:
            click.echo(f"check failed: {exc}", err=True)
            sys.exit(EXIT_CHECK_FAILED)
        except (click.exceptions.Exit, click.ClickException):
            raise
        except (KronlabError, ValueError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_ERROR)
        except Exception as exc:  # noqa: BLE001
            click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_ERROR)

    return wrapper


def _common(fn):
    """Let --seed/--out/--format also follow the subcommand; values there win."""

    @click.option("--seed", "local_seed", type=int, default=None, hidden=True)
    @click.option("--out", "local_out", type=click.Path(dir_okay=False), default=None, hidden=True)
    @click.option("--format", "local_fmt", type=click.Choice(["csv", "json"]), default=None, hidden=True)
    @click.pass_obj
    @functools.wraps(fn)
    def wrapper(obj, *args, local_seed=None, local_out=None, local_fmt=None, **kwargs):
        merged = dict(obj)
        for key, val in (("seed", local_seed), ("out", local_out), ("format", local_fmt)):
            if val is not None:
                merged[key] = val
        return fn(merged, *args, **kwargs)

    return wrapper


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


def _load_graph(graph_file: Optional[str], er: Optional[tuple], seed: int) -> Graph:
    if graph_file and er:
        raise click.UsageError("give either a graph file or --er, not both")
    if graph_file:
        with open(graph_file) as fh:
            return load_edge_list(fh)
    if er:
        n, p = er
        return largest_scc(erdos_renyi(int(n), float(p), np.random.default_rng([seed, 1])))
    raise click.UsageError("a graph file or --er N P is required")


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for every random draw.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Output file (figure1: file prefix). Defaults to stdout.")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default=None,
              help="Output format (default: json for verify and synthetic, csv otherwise).")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def cli(ctx, seed, out, fmt, verbose):
    """Graph-convolution dynamics laboratory."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.obj = {"seed": seed, "out": out, "format": fmt}


@cli.command()
@click.option("--mutate-propagate", is_flag=True, hidden=True)
@_common
@_guarded
def verify(obj, mutate_propagate):
    """Run the named numerical checks and write a report."""
    set_propagate_mutation(mutate_propagate)
    try:
        results = verify_mod.run_checks(obj["seed"])
    finally:
        set_propagate_mutation(False)
    fmt = obj["format"] or "json"
    text = verify_mod.report_json(results, obj["seed"]) if fmt == "json" else verify_mod.report_csv(results)
    _emit(text, obj["out"])
    for r in results:
        click.echo(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.value!r} {r.comparison} {r.tolerance!r}", err=True)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(", ".join(failed))


@cli.command()
@click.argument("graph_file", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--er", nargs=2, type=float, default=None, help="Generate ER(N, P) instead of reading a file.")
@click.option("--layers", type=click.IntRange(min=0), default=experiments.FIGURE1_LAYERS, show_default=True)
@click.option("--scale", type=float, default=2.0, show_default=True, help="Weight factor of the second run.")
@click.option("--width", type=click.IntRange(min=1), default=experiments.FIGURE1_WIDTH, show_default=True)
@click.option("--check/--no-check", default=True, show_default=True,
              help="Exit 1 unless the decay / growth pattern is observed.")
@_common
@_guarded
def figure1(obj, graph_file, er, layers, scale, width, check):
    """Deep ReLU rollouts with plain and scaled Glorot weights.

    Writes PREFIX.unscaled.EXT and PREFIX.scaled.EXT (prefix from --out,
    default 'figure1').
    """
    g = _load_graph(graph_file, er, obj["seed"])
    plain, scaled = experiments.run_figure1(g, layers=layers, scale=scale, seed=obj["seed"], width=width)
    fmt = obj["format"] or "csv"
    prefix = obj["out"] or "figure1"
    for tag, traj in (("unscaled", plain), ("scaled", scaled)):
        Path(f"{prefix}.{tag}.{fmt}").write_text(traj.to_csv() if fmt == "csv" else traj.to_json())
    if check and layers > 0:
        problems = experiments.figure1_problems(plain, scaled)
        if problems:
            raise CheckFailed("; ".join(problems))


def _split(value: str, cast):
    try:
        return [cast(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"cannot parse {value!r}") from None


@cli.command()
@click.option("--families", default=",".join(FAMILIES), show_default=True,
              help="Comma-separated subset of kp, softmax_skp, skp.")
@click.option("--layers", "layer_list", default="1,8", show_default=True, help="Comma-separated depths.")
@click.option("--graphs", type=click.IntRange(min=1), default=experiments.DEFAULT_GRAPHS, show_default=True)
@click.option("--restarts", type=click.IntRange(min=1), default=experiments.DEFAULT_RESTARTS, show_default=True)
@click.option("--max-steps", type=click.IntRange(min=1), default=experiments.DEFAULT_MAX_STEPS, show_default=True)
@click.option("--lr", type=float, default=experiments.DEFAULT_LR, show_default=True)
@click.option("--transform-mean", type=float, default=experiments.DEFAULT_TRANSFORM_MEAN,
              show_default=True, help="Mean of the transform init.")
@click.option("--plateau", type=click.IntRange(min=1), default=500, show_default=True,
              help="Stop after this many steps without improvement.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--shared-features", is_flag=True, help="Reuse one feature draw across restarts.")
@click.option("--table", type=click.Path(dir_okay=False), default=None, help="Also write the summary table CSV here.")
@_common
@_guarded
def synthetic(obj, families, layer_list, graphs, restarts, max_steps, lr, transform_mean, plateau, jobs,
              shared_features, table):
    """Depth study on the four-node synthetic task."""
    fams = _split(families, str)
    for f in fams:
        if f not in FAMILIES:
            raise click.BadParameter(f"unknown family {f!r}", param_hint="--families")
    depths = _split(layer_list, int)
    report = experiments.run_synthetic(
        fams, depths, graphs=graphs, restarts=restarts, seed=obj["seed"], max_steps=max_steps,
        lr=lr, transform_mean=transform_mean, plateau_window=plateau, jobs=jobs,
        redraw_features=not shared_features,
    )
    fmt = obj["format"] or "json"
    _emit(report.to_json() + "\n" if fmt == "json" else report.table_csv(), obj["out"])
    if table:
        Path(table).write_text(report.table_csv())
    for a in report.aggregates():
        click.echo(f"{a.family} l={a.layers}: {100 * a.mean:.1f} +- {100 * a.std:.1f} (max {100 * a.max:.1f})", err=True)


def _initial_state(spec: str, n: int, rng) -> np.ndarray:
    """``gaussian:D`` for an ``n x D`` standard normal state, or a matrix file path."""
    if spec.startswith("gaussian:"):
        try:
            d = int(spec.split(":", 1)[1])
        except ValueError:
            raise click.BadParameter(f"bad width in {spec!r}", param_hint="--init") from None
        if d < 1:
            raise click.BadParameter("width must be positive", param_hint="--init")
        return rng.standard_normal((n, d))
    with open(spec) as fh:
        x = read_matrix(fh)
    if x.shape[0] != n:
        raise ValueError(f"initial state has {x.shape[0]} rows, graph has {n} nodes")
    return x


def _weights(kind: str, d: int, count: int, scale: float, rng) -> list[np.ndarray]:
    if kind == "identity":
        ws = [np.eye(d) for _ in range(count)]
    elif kind == "gaussian":
        ws = [rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)) for _ in range(count)]
    elif kind == "glorot":
        ws = [experiments.glorot_square(rng, d) for _ in range(count)]
    else:
        ws = [random_orthogonal(d, rng) for _ in range(count)]
    return [scale * w for w in ws]


@cli.command()
@click.argument("graph_file", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--er", nargs=2, type=float, default=None, help="Generate ER(N, P) instead of reading a file.")
@click.option("--init", "init_spec", default="gaussian:4", show_default=True,
              help="'gaussian:D' or a matrix file ('rows cols' header then values).")
@click.option("--layers", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--activation", type=click.Choice([IDENTITY, RELU]), default=IDENTITY, show_default=True)
@click.option("--weights", "weight_kind", type=click.Choice(["gaussian", "glorot", "identity", "orthogonal"]),
              default="gaussian", show_default=True, help="Per-layer transform draw (gaussian: N(0, 1/d)).")
@click.option("--weight-scale", type=float, default=1.0, show_default=True)
@click.option("--aggregation", type=click.Choice(["sym", "rw"]), default="sym", show_default=True,
              help="Symmetric normalisation or the row-normalised random walk D^-1 A.")
@click.option("--masses", is_flag=True, help="Add per-eigenvector subspace masses (sym only).")
@click.option("--eigen-check", is_flag=True,
              help="Append the relative residual against the analytic eigen-expansion norms.")
@_common
@_guarded
def rollout(obj, graph_file, er, init_spec, layers, activation, weight_kind, weight_scale, aggregation,
            masses, eigen_check):
    """Roll a state through repeated layers and export the trajectory."""
    seed = obj["seed"]
    g = _load_graph(graph_file, er, seed)
    rng = np.random.default_rng([seed, 2])
    x0 = _initial_state(init_spec, g.n, rng)
    if aggregation == "sym":
        a = sym_normalized(g)
    else:
        a = np.eye(g.n) - laplacian(g, RandomWalk())
    if eigen_check and (aggregation != "sym" or activation != IDENTITY):
        raise click.UsageError("--eigen-check needs --aggregation sym and --activation identity")
    spectral = sym_eig(a) if (masses or eigen_check) and aggregation == "sym" else None
    ws = _weights(weight_kind, x0.shape[1], layers, weight_scale, rng)
    traj = run_rollout(
        x0,
        [LayerSpec(a, w, activation) for w in ws],
        delta_rw=laplacian(g, RandomWalk()),
        sym_incidence=sym_incidence(g) if not g.directed else None,
        spectral=spectral if masses else None,
    )
    extra = None
    if eigen_check:
        analytic = eigen_expansion_norms(x0, ws, spectral)
        measured = traj.column("fro_norm_sq")
        extra = {"eigen_residual": [abs(m - e) / e if e > 0 else abs(m) for m, e in zip(measured, analytic)]}
    fmt = obj["format"] or "csv"
    if fmt == "csv":
        text = traj.to_csv(extra)
    else:
        blob = json.loads(traj.to_json())
        if extra:
            for rec, val in zip(blob["records"], extra["eigen_residual"]):
                rec["eigen_residual"] = val
        text = json.dumps(blob, indent=2) + "\n"
    _emit(text, obj["out"])


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="kronlab", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_ERROR
    except click.exceptions.Abort:
        return EXIT_ERROR
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
