"""Radial feeder data model, MATPOWER case parsing, validation and JSON I/O.

Quantities on :class:`Bus` and :class:`Branch` are stored in engineering
units (MW, MVAr) for loads and shunts and per-unit for branch impedances, as
in the MATPOWER case format. Per-unit views are derived on :class:`Network`.
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "Network",
    "Diagnostic",
    "CaseSyntaxError",
    "NetworkError",
    "DEFAULT_PCC_VOLTAGE",
    "parse_matpower_case",
    "validate_network",
    "network_to_dict",
    "network_from_dict",
    "load_network",
    "bundled_case_path",
]

DEFAULT_PCC_VOLTAGE = 1.03
NETWORK_SCHEMA = "pvhc-network/1"


class CaseSyntaxError(ValueError):
    """Malformed case text; carries the 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class NetworkError(ValueError):
    """Case data that parses but violates a network invariant."""

    def __init__(self, message: str, diagnostics=()):
        self.diagnostics = list(diagnostics)
        super().__init__(message)


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # "slack" or "pq"
    p_load: float = 0.0  # MW at peak
    q_load: float = 0.0  # MVAr at peak
    g_shunt: float = 0.0  # MW consumed at 1 p.u.
    b_shunt: float = 0.0  # MVAr injected at 1 p.u.
    base_kv: float = 1.0
    v_set: float | None = None  # p.u., slack only


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    rating: float = 0.0  # MVA, informational


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def peak_load_mw(self) -> float:
        return float(sum(b.p_load for b in self.buses))

    @cached_property
    def peak_load_mvar(self) -> float:
        return float(sum(b.q_load for b in self.buses))

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=int)

    @cached_property
    def index_of(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack_index(self) -> int:
        idx = [i for i, b in enumerate(self.buses) if b.kind == "slack"]
        if len(idx) != 1:
            raise NetworkError(f"expected exactly one slack bus, found {len(idx)}")
        return idx[0]

    @property
    def slack_voltage(self) -> float:
        return float(self.buses[self.slack_index].v_set)

    @cached_property
    def p_load_pu(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses]) / self.base_mva

    @cached_property
    def q_load_pu(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses]) / self.base_mva

    @cached_property
    def admittance(self) -> np.ndarray:
        from .powerflow import build_admittance

        y = build_admittance(self)
        y.setflags(write=False)
        return y

    def with_pcc_voltage(self, v_set: float) -> "Network":
        buses = [replace(b, v_set=float(v_set)) if b.kind == "slack" else b for b in self.buses]
        return replace(self, buses=tuple(buses))

    def non_slack_ids(self) -> list[int]:
        return [b.id for b in self.buses if b.kind != "slack"]


@dataclass(frozen=True)
class Diagnostic:
    invariant: str
    element: str
    message: str

    def __str__(self):
        return f"{self.invariant} [{self.element}]: {self.message}"


def validate_network(net: Network) -> list[Diagnostic]:
    """Check every network invariant and describe each violation found."""
    diags: list[Diagnostic] = []
    ids = [b.id for b in net.buses]
    seen: set[int] = set()
    for bid in ids:
        if bid in seen:
            diags.append(Diagnostic("duplicate bus id", f"bus {bid}", f"bus id {bid} appears more than once"))
        seen.add(bid)
    slacks = [b for b in net.buses if b.kind == "slack"]
    if not slacks:
        diags.append(Diagnostic("no slack bus", "network", "network has no slack bus"))
    elif len(slacks) > 1:
        names = ", ".join(str(b.id) for b in slacks)
        diags.append(Diagnostic("multiple slack buses", f"buses {names}", "multiple slack buses"))
    for b in net.buses:
        if b.id <= 0:
            diags.append(Diagnostic("bus id positive", f"bus {b.id}", "bus ids must be positive integers"))
        if b.kind not in ("slack", "pq"):
            diags.append(Diagnostic("bus kind", f"bus {b.id}", f"unsupported bus kind {b.kind!r}"))
        if b.kind == "pq" and b.p_load < 0:
            diags.append(Diagnostic("p_load >= 0", f"bus {b.id}", f"negative peak load {b.p_load}"))
        if not b.base_kv > 0:
            diags.append(Diagnostic("base_kv > 0", f"bus {b.id}", f"base_kv {b.base_kv} is not positive"))
        if b.kind == "slack" and not (b.v_set is not None and b.v_set > 0):
            diags.append(Diagnostic("slack setpoint", f"bus {b.id}", "slack bus needs a positive v_set"))
    for k, br in enumerate(net.branches):
        tag = f"branch {k} ({br.from_bus}-{br.to_bus})"
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                diags.append(Diagnostic("branch endpoints exist", tag, f"references nonexistent bus {end}"))
        if br.r < 0:
            diags.append(Diagnostic("r >= 0", tag, f"negative resistance {br.r}"))
        if br.x == 0:
            diags.append(Diagnostic("x != 0", tag, "zero series reactance"))
        if br.from_bus == br.to_bus:
            diags.append(Diagnostic("branch endpoints distinct", tag, "branch connects a bus to itself"))
    if net.buses and not any(d.invariant == "branch endpoints exist" for d in diags):
        adj: dict[int, list[int]] = {bid: [] for bid in seen}
        for br in net.branches:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
        start = slacks[0].id if slacks else ids[0]
        reached = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in reached:
                    reached.add(v)
                    queue.append(v)
        missing = sorted(seen - reached)
        if missing:
            shown = ", ".join(str(m) for m in missing[:10])
            diags.append(Diagnostic("connected graph", f"buses {shown}", f"{len(missing)} bus(es) unreachable from bus {start}"))
    return diags


# --------------------------------------------------------------------------
# MATPOWER subset parser

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_FUNCTION = re.compile(r"function\s+\w+\s*=\s*\w+\s*;?\s*$")
_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_STRING = re.compile(r"'[^']*'\s*;?\s*$")
_SCALAR = re.compile(r"(" + _NUMBER.pattern + r")\s*;?\s*$")


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == "'":
            in_str = not in_str
        elif ch == "%" and not in_str:
            return line[:i]
    return line


def _scan_case(text: str) -> tuple[dict[str, float], dict[str, list[list[float]]]]:
    scalars: dict[str, float] = {}
    matrices: dict[str, list[list[float]]] = {}
    current: str | None = None
    rows: list[list[float]] = []
    row: list[float] = []
    start_line = 0

    def close_row(lineno, col):
        nonlocal row
        if row:
            if rows and len(row) != len(rows[0]):
                raise CaseSyntaxError(
                    f"row of mpc.{current} has {len(row)} columns, expected {len(rows[0])}", lineno, col
                )
            rows.append(row)
            row = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        pos = 0
        if current is None:
            stripped = line.strip()
            if not stripped:
                continue
            col = len(line) - len(line.lstrip()) + 1
            if _FUNCTION.match(stripped):
                continue
            m = _ASSIGN.match(stripped)
            if not m:
                raise CaseSyntaxError(f"unsupported statement {stripped[:40]!r}", lineno, col)
            name = m.group(1)
            rest = stripped[m.end():]
            rest_col = col + m.end()
            if rest.startswith("["):
                current = name
                rows, row = [], []
                start_line = lineno
                line = " " * (rest_col) + rest[1:]
                pos = rest_col
            elif _STRING.match(rest):
                continue
            else:
                sm = _SCALAR.match(rest)
                if not sm:
                    raise CaseSyntaxError(f"unsupported value for mpc.{name}", lineno, rest_col)
                scalars[name] = float(sm.group(1))
                continue
        # inside a matrix literal
        while pos < len(line):
            ch = line[pos]
            if ch.isspace() or ch == ",":
                pos += 1
            elif ch == ";":
                close_row(lineno, pos + 1)
                pos += 1
            elif ch == "]":
                close_row(lineno, pos + 1)
                tail = line[pos + 1:].strip()
                if tail not in ("", ";"):
                    raise CaseSyntaxError(f"unexpected text after matrix: {tail[:20]!r}", lineno, pos + 2)
                matrices[current] = rows
                current = None
                break
            else:
                m = _NUMBER.match(line, pos)
                end = m.end() if m else pos
                if not m or (end < len(line) and not (line[end].isspace() or line[end] in ",;]")):
                    bad = re.match(r"\S+", line[pos:]).group(0)
                    raise CaseSyntaxError(f"invalid numeric token {bad[:20]!r}", lineno, pos + 1)
                row.append(float(m.group(0)))
                pos = end
        if current is not None:
            close_row(lineno, len(line) + 1)
    if current is not None:
        raise CaseSyntaxError(f"unterminated matrix mpc.{current}", start_line, 1)
    return scalars, matrices


def parse_matpower_case(text: str, pcc_voltage: float = DEFAULT_PCC_VOLTAGE, name: str = "") -> Network:
    """Parse a MATPOWER-style case into a :class:`Network`.

    Only numeric assignments to ``mpc.*`` fields are accepted. Bus type 3
    marks the slack bus, whose voltage setpoint is ``pcc_voltage``; any
    generator rows must sit on that bus. PV buses, isolated buses, tap-changing
    or phase-shifting branches are rejected. Out-of-service branches are
    dropped.

    Raises
    ------
    CaseSyntaxError
        Text outside the supported syntax.
    NetworkError
        Missing tables, unsupported features or violated invariants.
    """
    scalars, mats = _scan_case(text)
    for required in ("bus", "branch"):
        if required not in mats:
            raise NetworkError(f"case has no mpc.{required} table")
    if "baseMVA" not in scalars:
        raise NetworkError("case has no mpc.baseMVA")
    base_mva = scalars["baseMVA"]
    if not base_mva > 0:
        raise NetworkError(f"baseMVA must be positive, got {base_mva}")

    buses = []
    for r in mats["bus"]:
        if len(r) < 10:
            raise NetworkError(f"bus row for bus {r[0]:g} has {len(r)} columns; need at least 10")
        bid, btype = r[0], int(r[1])
        if bid != int(bid):
            raise NetworkError(f"bus id {bid} is not an integer")
        if btype == 3:
            kind = "slack"
        elif btype == 1:
            kind = "pq"
        elif btype == 2:
            raise NetworkError(f"bus {int(bid)}: PV (voltage-controlled) buses are not supported")
        else:
            raise NetworkError(f"bus {int(bid)}: bus type {btype} is not supported")
        buses.append(
            Bus(
                id=int(bid),
                kind=kind,
                p_load=r[2],
                q_load=r[3],
                g_shunt=r[4],
                b_shunt=r[5],
                base_kv=r[9],
                v_set=float(pcc_voltage) if kind == "slack" else None,
            )
        )
    branches = []
    for r in mats["branch"]:
        if len(r) < 5:
            raise NetworkError(f"branch row {r[:2]} has {len(r)} columns; need at least 5")
        status = r[10] if len(r) > 10 else 1.0
        if status == 0:
            continue
        ratio = r[8] if len(r) > 8 else 0.0
        shift = r[9] if len(r) > 9 else 0.0
        if ratio not in (0.0, 1.0) or shift != 0.0:
            raise NetworkError(
                f"branch {int(r[0])}-{int(r[1])}: transformer taps/phase shifts are not supported"
            )
        branches.append(
            Branch(
                from_bus=int(r[0]),
                to_bus=int(r[1]),
                r=r[2],
                x=r[3],
                b_charging=r[4],
                rating=r[5] if len(r) > 5 else 0.0,
            )
        )
    net = Network(base_mva=base_mva, buses=tuple(buses), branches=tuple(branches), name=name)
    diags = validate_network(net)
    if diags:
        raise NetworkError("; ".join(str(d) for d in diags), diags)
    slack_id = net.buses[net.slack_index].id
    for g in mats.get("gen", []):
        in_service = g[7] if len(g) > 7 else 1.0
        if in_service and int(g[0]) != slack_id:
            raise NetworkError(f"generator at bus {int(g[0])}: only a generator at the slack bus is supported")
    return net


# --------------------------------------------------------------------------
# JSON schema and loading helpers


def network_to_dict(net: Network) -> dict:
    return {
        "schema": NETWORK_SCHEMA,
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [
            {
                "id": b.id,
                "kind": b.kind,
                "p_load_mw": b.p_load,
                "q_load_mvar": b.q_load,
                "g_shunt_mw": b.g_shunt,
                "b_shunt_mvar": b.b_shunt,
                "base_kv": b.base_kv,
                "v_set": b.v_set,
            }
            for b in net.buses
        ],
        "branches": [
            {
                "from_bus": br.from_bus,
                "to_bus": br.to_bus,
                "r_pu": br.r,
                "x_pu": br.x,
                "b_charging_pu": br.b_charging,
                "rating_mva": br.rating,
            }
            for br in net.branches
        ],
    }


def network_from_dict(data: dict) -> Network:
    if data.get("schema") != NETWORK_SCHEMA:
        raise NetworkError(f"unsupported network schema {data.get('schema')!r}")
    buses = tuple(
        Bus(
            id=int(b["id"]),
            kind=b["kind"],
            p_load=float(b["p_load_mw"]),
            q_load=float(b["q_load_mvar"]),
            g_shunt=float(b["g_shunt_mw"]),
            b_shunt=float(b["b_shunt_mvar"]),
            base_kv=float(b["base_kv"]),
            v_set=None if b["v_set"] is None else float(b["v_set"]),
        )
        for b in data["buses"]
    )
    branches = tuple(
        Branch(
            from_bus=int(br["from_bus"]),
            to_bus=int(br["to_bus"]),
            r=float(br["r_pu"]),
            x=float(br["x_pu"]),
            b_charging=float(br["b_charging_pu"]),
            rating=float(br["rating_mva"]),
        )
        for br in data["branches"]
    )
    return Network(base_mva=float(data["base_mva"]), buses=buses, branches=branches, name=data.get("name", ""))


def bundled_case_path(name: str) -> Path:
    return Path(str(resources.files("pvhc") / "data" / f"{name}.m"))


def load_network(source: str | Path, pcc_voltage: float | None = None) -> Network:
    """Load a network from a bundled case name, a ``.m`` case or a JSON file.

    ``pcc_voltage`` overrides the slack setpoint; when omitted, JSON files keep
    their stored setpoint and case files get :data:`DEFAULT_PCC_VOLTAGE`.
    """
    src = str(source)
    if src in ("case33", "case123"):
        path = bundled_case_path(src)
    else:
        path = Path(src)
    text = path.read_text()
    if path.suffix == ".json":
        net = network_from_dict(json.loads(text))
        diags = validate_network(net)
        if diags:
            raise NetworkError("; ".join(str(d) for d in diags), diags)
        return net if pcc_voltage is None else net.with_pcc_voltage(pcc_voltage)
    v = DEFAULT_PCC_VOLTAGE if pcc_voltage is None else pcc_voltage
    return parse_matpower_case(text, pcc_voltage=v, name=path.stem)
