import numpy as np
import pytest

from dhnet.io import fixture_path, parse_network
from dhnet.network import (
    Constants,
    Consumer,
    Node,
    NodeKind,
    Pipe,
    PipeParams,
    PlantBoundary,
    RawNetwork,
)
from dhnet.verification import ManufacturedCase


# lines reported by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def tree_network(parents, hosts, n_seg=3, demand=20e3, rng=None) -> RawNetwork:
    """Supply tree of junctions ``S_j`` with a mirrored return tree ``R_j``.

    ``parents[j]`` is the parent junction of ``S_{j+1}`` (``S_0`` hangs off
    the plant); ``hosts[k]`` is the junction feeding consumer ``k``.  Every
    junction without child junctions must host a consumer.
    """
    m = len(parents) + 1
    params = PipeParams(length=50.0, diameter=0.1, heat_transfer=0.3, n_seg=n_seg)
    rng = rng or np.random.default_rng(0)
    nodes = [Node("plant_out", NodeKind.SUPPLY), Node("plant_in", NodeKind.DEMAND)]
    nodes += [Node(f"S{j}", NodeKind.INTERIOR) for j in range(m)]
    nodes += [Node(f"R{j}", NodeKind.INTERIOR) for j in range(m)]
    pipes = [Pipe("sp", "plant_out", "S0", params), Pipe("rp", "R0", "plant_in", params)]
    for j, par in enumerate(parents, start=1):
        pipes.append(Pipe(f"s{par}-{j}", f"S{par}", f"S{j}", params))
        pipes.append(Pipe(f"r{j}-{par}", f"R{j}", f"R{par}", params))
    consumers = []
    for k, host in enumerate(hosts):
        nodes += [Node(f"c{k}_in", NodeKind.DEMAND), Node(f"c{k}_out", NodeKind.SUPPLY)]
        pipes.append(Pipe(f"in{k}", f"S{host}", f"c{k}_in", params))
        pipes.append(Pipe(f"out{k}", f"c{k}_out", f"R{host}", params))
        consumers.append(Consumer(f"c{k}", f"in{k}", f"out{k}", demand * (1 + rng.random()), 50.0))
    order = rng.permutation(len(pipes))
    return RawNetwork(
        Constants(),
        tuple(nodes),
        tuple(pipes[i] for i in order),
        tuple(consumers),
        PlantBoundary(85.0, 5e5, 2e5),
    )


JACOBIAN_BLOCKS = ("f1_x1", "f1_x2", "f1_y", "f2_x1", "f2_x2", "f2_y", "g1_x", "g1_y", "g2_x", "g2_y")


def fd_jacobian_errors(ops, t, z, rel_step=1e-6):
    """Relative max-norm gap between analytic and central-difference blocks."""
    lay = ops.layout
    z = np.asarray(z, dtype=float)

    def stacked(w):
        return np.concatenate(ops.eval_f(t, w) + ops.eval_g(t, w))

    cols = []
    for j in range(z.size):
        h = rel_step * (1.0 + abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        cols.append((stacked(zp) - stacked(zm)) / (2.0 * h))
    fd = np.column_stack(cols)
    J = ops.eval_jacobians(t, z)
    nt, N = lay.n_tilde, lay.N
    rows = {"f1": slice(0, nt), "f2": slice(nt, nt + N)}
    rows["g1"] = slice(nt + N, nt + N + ops.n_g1)
    rows["g2"] = slice(nt + N + ops.n_g1, nt + N + ops.n_g1 + ops.n_g2)
    var = {"x1": lay.x1, "x2": lay.x2, "y": lay.y, "x": slice(0, lay.n_x)}
    errors = {}
    for name in JACOBIAN_BLOCKS:
        fn, vn = name.split("_")
        exact = getattr(J, name).toarray()
        approx = fd[rows[fn], var[vn]]
        assert exact.shape == approx.shape, name
        scale = max(np.abs(exact).max(initial=0.0), np.abs(approx).max(initial=0.0))
        errors[name] = 0.0 if scale == 0 else float(np.abs(exact - approx).max() / scale)
    return errors


def random_tree(rng, max_junctions=5, max_extra=3):
    m = int(rng.integers(1, max_junctions + 1))
    parents = [int(rng.integers(0, j)) for j in range(1, m)]
    has_child = set(parents)
    hosts = [j for j in range(m) if j not in has_child]
    hosts += [int(rng.integers(0, m)) for _ in range(int(rng.integers(0, max_extra + 1)))]
    return tree_network(parents, hosts, rng=rng)


@pytest.fixture(scope="session")
def two_consumer():
    return parse_network(fixture_path("two_consumer.net"))


@pytest.fixture(scope="session")
def five_consumer():
    return parse_network(fixture_path("five_consumer.net"))


@pytest.fixture(params=["index1", "index2"])
def mms_case(request):
    return ManufacturedCase(variant=request.param, n_seg=10)
