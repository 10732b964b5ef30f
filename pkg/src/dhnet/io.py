"""Network files, time-series files and result files.

A network file is YAML with the sections ``constants``, ``nodes``,
``pipes``, ``consumers`` and ``plant``::

    constants: {rho: 960, cp: 4160, T_ext: 20, g: 9.80665}
    nodes:
      - {id: plant_out, kind: supply}
    pipes:
      - {id: "1", from: plant_out, to: J4, L: 100, d: 0.1071, k: 0.31,
         k_rough: 1.0e-4, dh: 0, n_seg: 10}
    consumers:
      - {id: c1, pipe_in: "4", pipe_out: "2", T_out: 60, demand: c1.csv}
    plant: {T_in: 90, p_in: 5.0e5, p_return: 1.0e5}

Every signal (``T_out``, ``demand``, the plant entries) is a number, a path
to a two-column series file (relative to the network file) or an inline
mapping ``{times: [...], values: [...]}``.  Pipes may set ``lambda`` to
override the Nikuradse friction factor.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np
import yaml

from .exceptions import NetworkError, ParseError
from .network import (
    Constants,
    Consumer,
    Node,
    NodeKind,
    Pipe,
    PipeParams,
    PlantBoundary,
    RawNetwork,
    validate_and_order,
)
from .signals import Constant, Signal, TimeSeries

FIXTURES_ENV = "DHNET_FIXTURES"

_TOP_KEYS = {"constants", "nodes", "pipes", "consumers", "plant"}
_CONSTANT_KEYS = {"rho", "cp", "T_ext", "g"}
_NODE_KEYS = {"id", "kind"}
_PIPE_KEYS = {"id", "from", "to", "L", "d", "k", "k_rough", "dh", "n_seg", "lambda"}
_PIPE_REQUIRED = {"id", "from", "to", "L", "d"}
_CONSUMER_KEYS = {"id", "pipe_in", "pipe_out", "T_out", "demand"}
_PLANT_KEYS = {"T_in", "p_in", "p_return"}


class _LineDict(dict):
    line: int | None = None


class _LineList(list):
    line: int | None = None


class _Loader(yaml.SafeLoader):
    """Safe loader that remembers the line of every mapping and sequence."""

    def construct_mapping(self, node, deep=False):
        out = _LineDict(super().construct_mapping(node, deep=True))
        out.line = node.start_mark.line + 1
        return out

    def construct_sequence(self, node, deep=False):
        out = _LineList(super().construct_sequence(node, deep=True))
        out.line = node.start_mark.line + 1
        return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _Loader.construct_mapping)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _Loader.construct_sequence)


def _fail(msg, section=None, line=None, path=None):
    where = ", ".join(x for x in (path and str(path), section and f"section {section}", line and f"line {line}") if x)
    err = ParseError(f"{where}: {msg}" if where else msg)
    err.section, err.line = section, line
    return err


def _check_keys(entry, allowed, required, section, path):
    if not isinstance(entry, dict):
        raise _fail(f"expected a mapping, got {type(entry).__name__}", section, getattr(entry, "line", None), path)
    unknown = set(entry) - allowed
    if unknown:
        raise _fail(f"unknown key(s) {sorted(map(str, unknown))}", section, entry.line, path)
    missing = required - set(entry)
    if missing:
        raise _fail(f"missing key(s) {sorted(missing)}", section, entry.line, path)


def _number(entry, key, section, path, default=None, cast=float):
    if key not in entry:
        if default is None:
            raise _fail(f"missing key {key!r}", section, entry.line, path)
        return default
    value = entry[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(f"{key!r} must be a number, got {value!r}", section, entry.line, path)
    if cast is int and int(value) != value:
        raise _fail(f"{key!r} must be an integer, got {value!r}", section, entry.line, path)
    return cast(value)


def _signal(value, what, section, line, base: Path, path):
    if isinstance(value, bool):
        raise _fail(f"{what}: booleans are not signals", section, line, path)
    if isinstance(value, (int, float)):
        return Constant(float(value))
    if isinstance(value, str):
        return read_series(_resolve(value, base))
    if isinstance(value, dict) and set(value) == {"times", "values"}:
        try:
            return TimeSeries(np.asarray(value["times"], float), np.asarray(value["values"], float))
        except (ValueError, TypeError) as exc:
            raise _fail(f"{what}: {exc}", section, getattr(value, "line", line), path) from exc
    raise _fail(f"{what}: expected a number, a series file or {{times, values}}", section, line, path)


def _resolve(ref: str, base: Path) -> Path:
    candidate = base / ref
    if candidate.exists():
        return candidate
    fixtures = os.environ.get(FIXTURES_ENV)
    if fixtures and (Path(fixtures) / ref).exists():
        return Path(fixtures) / ref
    raise ParseError(f"series file {ref!r} not found next to the network file")


def parse_raw(path) -> RawNetwork:
    """Read a network file without topological validation."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    return loads_raw(text, base=path.parent, path=path)


def loads_raw(text: str, base: Path | None = None, path=None) -> RawNetwork:
    base = Path(base or ".")
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise _fail(f"malformed YAML: {getattr(exc, 'problem', exc)}", line=mark and mark.line + 1, path=path) from exc
    if not isinstance(doc, dict):
        raise _fail("document must be a mapping", path=path)
    _check_keys(doc, _TOP_KEYS, _TOP_KEYS - {"constants"}, None, path)

    cdoc = doc.get("constants", _LineDict())
    _check_keys(cdoc, _CONSTANT_KEYS, set(), "constants", path)
    default = Constants()
    constants = Constants(**{k: _number(cdoc, k, "constants", path, getattr(default, k)) for k in _CONSTANT_KEYS})

    nodes = []
    for entry in _sequence(doc, "nodes", path):
        _check_keys(entry, _NODE_KEYS, _NODE_KEYS, "nodes", path)
        try:
            kind = NodeKind(entry["kind"])
        except ValueError:
            raise _fail(f"node {entry['id']!r}: unknown kind {entry['kind']!r}", "nodes", entry.line, path) from None
        nodes.append(Node(str(entry["id"]), kind))
    node_ids = {n.id for n in nodes}

    pipes = []
    for entry in _sequence(doc, "pipes", path):
        _check_keys(entry, _PIPE_KEYS, _PIPE_REQUIRED, "pipes", path)
        pid = str(entry["id"])
        for end in ("from", "to"):
            if str(entry[end]) not in node_ids:
                raise _fail(f"pipe {pid!r} references missing node {entry[end]!r}", "pipes", entry.line, path)
        lam = entry.get("lambda")
        try:
            params = PipeParams(
                length=_number(entry, "L", "pipes", path),
                diameter=_number(entry, "d", "pipes", path),
                roughness=_number(entry, "k_rough", "pipes", path, 1e-4),
                heat_transfer=_number(entry, "k", "pipes", path, 0.0),
                height_diff=_number(entry, "dh", "pipes", path, 0.0),
                n_seg=_number(entry, "n_seg", "pipes", path, 10, cast=int),
                friction=None if lam is None else _number(entry, "lambda", "pipes", path),
            )
        except ParseError:
            raise
        except ValueError as exc:
            raise _fail(f"pipe {pid!r}: {exc}", "pipes", entry.line, path) from exc
        pipes.append(Pipe(pid, str(entry["from"]), str(entry["to"]), params))
    pipe_ids = {p.id for p in pipes}

    consumers = []
    for entry in _sequence(doc, "consumers", path, allow_empty=True):
        _check_keys(entry, _CONSUMER_KEYS, _CONSUMER_KEYS, "consumers", path)
        cid = str(entry["id"])
        for key in ("pipe_in", "pipe_out"):
            if str(entry[key]) not in pipe_ids:
                raise _fail(f"consumer {cid!r} references missing pipe {entry[key]!r}", "consumers", entry.line, path)
        consumers.append(
            Consumer(
                cid,
                str(entry["pipe_in"]),
                str(entry["pipe_out"]),
                _signal(entry["demand"], f"consumer {cid!r} demand", "consumers", entry.line, base, path),
                _signal(entry["T_out"], f"consumer {cid!r} T_out", "consumers", entry.line, base, path),
            )
        )

    pdoc = doc["plant"]
    _check_keys(pdoc, _PLANT_KEYS, _PLANT_KEYS, "plant", path)
    plant = PlantBoundary(**{k: _signal(pdoc[k], f"plant {k}", "plant", pdoc.line, base, path) for k in _PLANT_KEYS})
    return RawNetwork(constants, tuple(nodes), tuple(pipes), tuple(consumers), plant)


def _sequence(doc, key, path, allow_empty=False):
    seq = doc[key]
    if seq is None and allow_empty:
        return []
    if not isinstance(seq, list) or (not seq and not allow_empty):
        raise _fail(f"{key} must be a non-empty list", key, getattr(seq, "line", None), path)
    return seq


def parse_network(path):
    """Read, validate and order a network file."""
    raw = parse_raw(path)
    try:
        return validate_and_order(raw)
    except NetworkError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- writing
def _dump_signal(sig: Signal):
    if isinstance(sig, Constant):
        return float(sig.value)
    if isinstance(sig, TimeSeries):
        return {"times": [float(t) for t in sig.times], "values": [float(v) for v in sig.values]}
    raise ValueError(f"signal {sig!r} has no file representation")


def dumps_network(raw: RawNetwork) -> str:
    c = raw.constants
    doc = {
        "constants": {"rho": c.rho, "cp": c.cp, "T_ext": c.T_ext, "g": c.g},
        "nodes": [{"id": n.id, "kind": n.kind.value} for n in raw.nodes],
        "pipes": [],
        "consumers": [
            {
                "id": k.id,
                "pipe_in": k.pipe_in,
                "pipe_out": k.pipe_out,
                "T_out": _dump_signal(k.T_out),
                "demand": _dump_signal(k.demand),
            }
            for k in raw.consumers
        ],
        "plant": {k: _dump_signal(getattr(raw.plant, k)) for k in ("T_in", "p_in", "p_return")},
    }
    for p in raw.pipes:
        if p.virtual:
            raise ValueError("virtual pipes are created on validation and cannot be written")
        q = p.params
        entry = {
            "id": p.id,
            "from": p.tail,
            "to": p.head,
            "L": q.length,
            "d": q.diameter,
            "k": q.heat_transfer,
            "k_rough": q.roughness,
            "dh": q.height_diff,
            "n_seg": int(q.n_seg),
        }
        if q.friction is not None:
            entry["lambda"] = q.friction
        doc["pipes"].append(entry)
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def dump_network(raw: RawNetwork, path) -> None:
    Path(path).write_text(dumps_network(raw))


def read_series(path) -> TimeSeries:
    """Two-column CSV (time in seconds, value); a non-numeric header row is skipped."""
    path = Path(path)
    times, values = [], []
    try:
        with path.open(newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    t, v = (float(x) for x in row)
                except ValueError:
                    if lineno == 1:
                        continue
                    raise ParseError(f"{path}, line {lineno}: expected two numbers, got {row}") from None
                times.append(t)
                values.append(v)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return TimeSeries(np.array(times), np.array(values))
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_series(path, times, values) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "value"])
        for t, v in zip(times, values):
            w.writerow([_fmt(t), _fmt(v)])


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_result(path, times, states, names) -> None:
    """One row per time; columns ``t`` then the named state components."""
    states = np.atleast_2d(np.asarray(states, float))
    if states.shape != (len(times), len(names)):
        raise ValueError(f"states shape {states.shape} does not match {len(times)} times x {len(names)} names")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for t, row in zip(times, states):
            w.writerow([_fmt(t), *map(_fmt, row)])


def read_result(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    if not rows or rows[0][:1] != ["t"]:
        raise ParseError(f"{path}: missing header starting with 't'")
    names = rows[0][1:]
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if data.size == 0:
        data = data.reshape(0, len(names) + 1)
    if data.shape[1] != len(names) + 1:
        raise ParseError(f"{path}: rows have {data.shape[1]} columns, header has {len(names) + 1}")
    return data[:, 0], data[:, 1:], names


def fixture_path(name: str) -> Path:
    """Path of a shipped fixture, or of ``$DHNET_FIXTURES/name`` when set."""
    override = os.environ.get(FIXTURES_ENV)
    if override and (Path(override) / name).exists():
        return Path(override) / name
    return Path(__file__).parent / "fixtures" / name
