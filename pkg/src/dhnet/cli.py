"""Command line interface: ``dhnet validate | init | simulate | mms | compare``.

Failures exit with status 1 and print one line ``error[<Category>]: detail``
on stderr, where the category is the exception class name.
"""

from __future__ import annotations

import csv
import functools
import sys
from pathlib import Path

import click
import numpy as np

from . import io
from .assembly import assemble
from .exceptions import DHNetError, ParseError
from .initialization import InitProblem, consistent_init, default_anchor
from .integrator import IntegratorConfig, integrate
from .network import consumer_matrices, incidence_matrix
from .verification import convergence_study, study_table, trajectory_difference

MODELS = ("full", "reduced")


def _fail(category: str, detail: str):
    click.echo(f"error[{category}]: {' '.join(str(detail).split())}", err=True)
    sys.exit(1)


def _guarded(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DHNetError as exc:
            _fail(type(exc).__name__, exc)
        except click.BadParameter as exc:
            _fail("UsageError", exc.format_message())
        except (OSError, ValueError) as exc:
            _fail(type(exc).__name__, exc)

    return wrapper


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


@click.group()
@click.version_option(package_name="dhnet")
def main():
    """Thermo-hydraulic simulation of district heating networks."""


@main.command()
@click.argument("net", type=click.Path(dir_okay=False))
@click.option("--matrices", is_flag=True, help="Print incidence and consumer matrices.")
@_guarded
def validate(net, matrices):
    """Validate NET and report the direction-following order."""
    model = io.parse_network(net)
    click.echo(f"pipes: {model.N}  nodes: {model.n_nodes}  consumers: {model.n_c}")
    click.echo(f"supply nodes: {model.n_s}  demand nodes: {model.n_d}  junctions: {model.n_junc}")
    click.echo("pipe order: " + " ".join(p.id for p in model.pipes))
    click.echo("node order: " + " ".join(n.id for n in model.nodes))
    if model.virtual_pipes:
        click.echo("virtual pipes: " + " ".join(model.virtual_pipes))
    if matrices:
        inc = incidence_matrix(model)
        c1, c2 = consumer_matrices(model)
        with np.printoptions(linewidth=200):
            click.echo("incidence:\n" + str(inc.full.astype(int)))
            click.echo("consumer C1:\n" + str(np.asarray(c1).astype(int)))
            click.echo("consumer C2:\n" + str(np.asarray(c2).astype(int)))


def _initial_state(ops, t0, guess):
    if guess is None:
        return default_anchor(ops, t0)
    _, states, names = io.read_result(guess)
    expected = ops.layout.names([p.id for p in ops.model.pipes])
    if names != expected or states.shape[0] == 0:
        raise ParseError(f"{guess}: columns do not match the network layout")
    return states[-1], np.zeros(ops.layout.size)


@main.command()
@click.argument("net", type=click.Path(dir_okay=False))
@click.option("--t0", type=float, default=0.0, show_default=True)
@click.option("--model", "variant", type=click.Choice(MODELS), default="full", show_default=True)
@click.option("--order", type=click.IntRange(1, 3), default=1, show_default=True)
@click.option("--guess", type=click.Path(dir_okay=False), help="Result file whose last row seeds the solve.")
@click.option("--out", type=click.Path(dir_okay=False), help="Snapshot file for the consistent state.")
@_guarded
def init(net, t0, variant, order, guess, out):
    """Compute a consistent initial state of NET at T0."""
    model = io.parse_network(net)
    ops = assemble(model, order, variant)
    z, zdot = _initial_state(ops, t0, guess)
    res = consistent_init(InitProblem(ops, z, zdot, t0))
    for name, value in res.residuals.items():
        click.echo(f"{name:10s} {value:.3e}")
    click.echo(f"kkt        {res.kkt_residual:.3e}")
    click.echo(f"iterations {res.iterations}")
    if out:
        io.write_result(out, [t0], [res.z], ops.layout.names([p.id for p in model.pipes]))


def _parse_probes(text, model, layout):
    probes = []
    for item in filter(None, (s.strip() for s in (text or "").split(","))):
        pid, _, pos = item.partition(":")
        try:
            i = model.pipe_index(pid)
        except KeyError:
            raise click.BadParameter(f"unknown pipe {pid!r} in probe {item!r}") from None
        n = layout.n_points[i]
        if pos == "in":
            j = 1
        elif pos == "out":
            j = n
        elif pos.isdigit() and 1 <= int(pos) <= n:
            j = int(pos)
        else:
            raise click.BadParameter(f"probe position must be in, out or 1..{n}, got {item!r}")
        probes.append((f"T[{pid},{j}]", i, j))
    return probes


@main.command()
@click.argument("net", type=click.Path(dir_okay=False))
@click.option("--t0", type=float, default=0.0, show_default=True)
@click.option("--tf", type=float, required=True)
@click.option("--model", "variant", type=click.Choice(MODELS), default="full", show_default=True)
@click.option("--order", type=click.IntRange(1, 3), default=1, show_default=True)
@click.option("--rtol", type=float, default=1e-4, show_default=True)
@click.option("--atol", type=float, default=1e-6, show_default=True)
@click.option("--guess", type=click.Path(dir_okay=False), help="Result file whose last row seeds initialisation.")
@click.option("--out", type=click.Path(dir_okay=False), default="trajectory.csv", show_default=True)
@click.option("--demand-out", type=click.Path(dir_okay=False), help="Demand fulfilment file [OUT stem + _demand.csv].")
@click.option("--probe", "probe_text", help="Comma-separated probes pipe:pos with pos in, out or a grid index.")
@click.option("--probe-out", type=click.Path(dir_okay=False), help="Probe file [OUT stem + _probes.csv].")
@_guarded
def simulate(net, t0, tf, variant, order, rtol, atol, guess, out, demand_out, probe_text, probe_out):
    """Initialise and integrate NET over [T0, TF]."""
    model = io.parse_network(net)
    ops = assemble(model, order, variant)
    lay = ops.layout
    probes = _parse_probes(probe_text, model, lay)
    z, zdot = _initial_state(ops, t0, guess)
    start = consistent_init(InitProblem(ops, z, zdot, t0))
    traj = integrate(ops, start.z, start.zdot, (t0, tf), IntegratorConfig(rtol=rtol, atol=atol))

    out = Path(out)
    io.write_result(out, traj.times, traj.states, lay.names([p.id for p in model.pipes]))
    balance = np.array([ops.consumer_balance(t, s) for t, s in zip(traj.times, traj.states)])
    demand_out = Path(demand_out or out.with_name(out.stem + "_demand.csv"))
    io.write_result(demand_out, traj.times, balance.reshape(len(traj.times), -1), [c.id for c in model.consumers])
    if probes:
        values = np.array([[lay.temperature_field(s, i)[j - 1] for _, i, j in probes] for s in traj.states])
        probe_out = Path(probe_out or out.with_name(out.stem + "_probes.csv"))
        io.write_result(probe_out, traj.times, values, [name for name, _, _ in probes])
    worst = float(np.abs(balance).max(initial=0.0))
    click.echo(
        f"steps {len(traj.times) - 1}  rejected {traj.n_rejected}  "
        f"max |demand residual| {worst:.3e}  written {out}"
    )


@main.command()
@click.option("--variant", type=click.Choice(["index1", "index2"]), default="index2", show_default=True)
@click.option("--orders", default="1,2,3", show_default=True)
@click.option("--segments", default="25,50,100", show_default=True)
@click.option("--rtol", type=float, default=1e-10, show_default=True)
@click.option("--atol", type=float, default=1e-12, show_default=True)
@click.option("--n-times", type=click.IntRange(1), default=20, show_default=True, help="Lattice intervals in time.")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV file for the convergence table.")
@_guarded
def mms(variant, orders, segments, rtol, atol, n_times, out):
    """Convergence study against the manufactured two-consumer solution."""
    rows = convergence_study(
        variant,
        _int_list(orders),
        _int_list(segments),
        IntegratorConfig(rtol=rtol, atol=atol),
        n_times,
    )
    table = study_table(rows)
    cols = list(table[0])
    click.echo("  ".join(f"{c:>14s}" for c in cols))
    for r in table:
        click.echo("  ".join(f"{_cell(r[c]):>14s}" for c in cols))
    stagnated = [f"order {r['order']} at {r['segments']}" for r in table if r["stagnated"]]
    if stagnated:
        click.echo("stagnation detected: " + ", ".join(stagnated))
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in table:
                w.writerow({c: _cell(r[c], full=True) for c in cols})


def _cell(value, full=False):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(value)
    return format(float(value), ".17g" if full else ".4e")


@main.command()
@click.argument("traj_a", type=click.Path(dir_okay=False))
@click.argument("traj_b", type=click.Path(dir_okay=False))
@click.option("--relative", is_flag=True, help="Also print the relative L2 difference per component.")
@_guarded
def compare(traj_a, traj_b, relative):
    """Norms of the difference of two result files."""
    ta, A, names_a = io.read_result(traj_a)
    tb, B, names_b = io.read_result(traj_b)
    if names_a != names_b:
        raise ParseError("result files have different columns")
    d = trajectory_difference(ta, A, tb, B)
    click.echo(f"L1 {d['L1']:.17g}")
    click.echo(f"L2 {d['L2']:.17g}")
    click.echo(f"Linf {d['Linf']:.17g}")
    if relative:
        for name, value in zip(names_a, d["relative_L2"]):
            click.echo(f"relative_L2 {name} {value:.6e}")
