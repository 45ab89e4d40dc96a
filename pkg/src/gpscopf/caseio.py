"""Network case and dynamics-sidecar I/O.

Reads the MATPOWER ``.m`` subset (baseMVA plus the bus/gen/branch/gencost
matrices, polynomial costs of degree <= 2) into immutable record types,
validates structural invariants, and serializes back to the same format.
Generator dynamics (inertia, damping, transient reactance, mechanical
power, synchronous speed, rotor-angle threshold) live in a JSON sidecar
because MATPOWER files carry no dynamics columns.

Angles are stored in radians internally; the file format carries degrees
for bus voltage angles, branch phase shifts and angle-difference limits.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .errors import CaseError

log = logging.getLogger(__name__)

PQ, PV, REF = 1, 2, 3

_BUS_COLS = 13
_GEN_COLS = 10  # through APF we only consume the first 10
_BRANCH_COLS = 13
_DYN_KEYS = {"m", "d", "xd_prime", "pm", "omega_s", "delta_max"}

DELTA_MAX_DEFAULT = math.radians(100.0)


@dataclass(frozen=True)
class BusRecord:
    id: int
    bus_type: int  # PQ / PV / REF
    pd: float  # MW
    qd: float  # MVAr
    gs: float  # MW consumed at 1 p.u.
    bs: float  # MVAr injected at 1 p.u.
    base_kv: float
    vm0: float  # initial magnitude guess, p.u.
    va0: float  # initial angle guess, rad
    vmax: float
    vmin: float


@dataclass(frozen=True)
class GeneratorRecord:
    bus: int
    pg0: float  # MW, file setpoint
    qg0: float  # MVAr
    qmax: float
    qmin: float
    vg: float  # voltage setpoint, p.u.
    status: int
    pmax: float
    pmin: float
    c2: float  # $/MW^2
    c1: float  # $/MW
    c0: float  # $


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float  # total line charging susceptance, p.u.
    rate_a: float  # MVA, 0 means unlimited
    tap: float  # 1.0 if absent in file
    shift: float  # rad
    status: int
    angmin: float  # rad
    angmax: float  # rad


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    buses: tuple[BusRecord, ...]
    generators: tuple[GeneratorRecord, ...]
    branches: tuple[BranchRecord, ...]

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}


@dataclass(frozen=True)
class DynParams:
    gen_index: int
    m: float  # inertia constant, s^2 * p.u.
    d: float  # damping, p.u. per (rad/s) slip
    xd_prime: float  # transient reactance, p.u.
    pm: float  # mechanical input power, p.u.
    omega_s: float  # synchronous angular frequency, rad/s
    delta_max: float  # rotor-angle threshold, rad


@dataclass(frozen=True)
class Violation:
    record: str
    rule: str
    detail: str

    def __str__(self):
        return f"{self.record}: {self.rule} ({self.detail})"


# ---------------------------------------------------------------------------
# MATPOWER-subset parsing


_ASSIGN_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_FUNC_RE = re.compile(r"^\s*function\s+mpc\s*=\s*(\w+)")
_NUM_RE = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_number(tok: str, lineno: int, col: int) -> float:
    if not _NUM_RE.match(tok):
        raise CaseError(f"expected a number, found {tok!r}", line=lineno, column=col)
    return float(tok)


def _parse_matrix(lines, start, name):
    """Collect rows of a bracketed numeric matrix starting at lines[start].

    Returns (rows, next_line_index); each row is a list of floats. Rows are
    separated by ';' or newlines, the matrix ends at ']'.
    """
    rows = []
    current = []
    i = start
    while i < len(lines):
        lineno, text = lines[i]
        i += 1
        closing = False
        if "]" in text:
            text = text[: text.index("]")]
            closing = True
        # split on semicolons: each chunk ends a row
        chunks = text.split(";")
        for k, chunk in enumerate(chunks):
            toks = chunk.split()
            for tok in toks:
                col = text.find(tok) + 1
                current.append(_parse_number(tok, lineno, col))
            ends_row = k < len(chunks) - 1
            if ends_row and current:
                rows.append(current)
                current = []
        if closing:
            if current:
                rows.append(current)
            return rows, i
        if current:
            # newline also terminates a row
            rows.append(current)
            current = []
    raise CaseError(f"matrix mpc.{name} is never closed with ']'", line=lines[start][0])


def _scan_case_text(text: str):
    """Return (name, scalars, matrices) from MATPOWER-style text."""
    raw_lines = text.splitlines()
    lines = [(n + 1, _strip_comment(s)) for n, s in enumerate(raw_lines)]
    lines = [(n, s) for n, s in lines if s.strip()]

    name = "case"
    scalars: dict[str, float] = {}
    matrices: dict[str, list[list[float]]] = {}

    i = 0
    while i < len(lines):
        lineno, text_i = lines[i]
        m = _FUNC_RE.match(text_i)
        if m:
            name = m.group(1)
            i += 1
            continue
        m = _ASSIGN_RE.match(text_i)
        if not m:
            stripped = text_i.strip()
            if stripped in ("end", "end;") or stripped.startswith(("if ", "return")):
                i += 1
                continue
            raise CaseError(f"unrecognized statement: {stripped!r}", line=lineno)
        field, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("["):
            # sub[0] aliases the current line with the '[' stripped
            sub = [(lineno, rhs[1:])] + lines[i + 1 :]
            rows, consumed = _parse_matrix(sub, 0, field)
            matrices[field] = rows
            i += consumed
        else:
            rhs = rhs.rstrip(";").strip().strip("'\"")
            if field == "version":
                if rhs not in ("2",):
                    log.warning("case version %r, expected '2'; parsing anyway", rhs)
            else:
                scalars[field] = _parse_number(rhs, lineno, text_i.find(rhs) + 1)
            i += 1
    return name, scalars, matrices


def _row_get(row, idx, default=None, *, lineno_hint=""):
    if idx < len(row):
        return row[idx]
    if default is None:
        raise CaseError(f"row too short{lineno_hint}: need column {idx + 1}")
    return default


def parse_case(text: str) -> NetworkCase:
    """Parse MATPOWER-subset case text into a NetworkCase.

    Supported fields: mpc.baseMVA, mpc.bus, mpc.gen, mpc.branch,
    mpc.gencost (polynomial model, degree <= 2). Unknown mpc fields and
    trailing matrix columns are ignored with a warning. Raises CaseError
    on syntax problems, unsupported cost models, dangling bus references
    and zero-impedance in-service branches.
    """
    name, scalars, matrices = _scan_case_text(text)

    for field in matrices:
        if field not in ("bus", "gen", "branch", "gencost"):
            log.warning("ignoring unknown matrix mpc.%s", field)
    for field in scalars:
        if field != "baseMVA":
            log.warning("ignoring unknown scalar mpc.%s", field)

    if "baseMVA" not in scalars:
        raise CaseError("missing mpc.baseMVA")
    base_mva = float(scalars["baseMVA"])
    if base_mva <= 0:
        raise CaseError(f"baseMVA must be positive, got {base_mva}")
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in matrices:
            raise CaseError(f"missing matrix mpc.{required}")

    buses = []
    for row in matrices["bus"]:
        if len(row) < _BUS_COLS:
            raise CaseError(f"bus row has {len(row)} columns, expected >= {_BUS_COLS}")
        if len(row) > _BUS_COLS:
            log.warning("bus %d: ignoring %d trailing columns", int(row[0]), len(row) - _BUS_COLS)
        btype = int(row[1])
        if btype not in (PQ, PV, REF):
            raise CaseError(f"bus {int(row[0])}: unsupported bus type {btype}")
        buses.append(
            BusRecord(
                id=int(row[0]),
                bus_type=btype,
                pd=row[2],
                qd=row[3],
                gs=row[4],
                bs=row[5],
                base_kv=row[9],
                vm0=row[7],
                va0=math.radians(row[8]),
                vmax=row[11],
                vmin=row[12],
            )
        )

    gens = []
    for row in matrices["gen"]:
        if len(row) < _GEN_COLS:
            raise CaseError(f"gen row has {len(row)} columns, expected >= {_GEN_COLS}")
        gens.append(
            dict(
                bus=int(row[0]),
                pg0=row[1],
                qg0=row[2],
                qmax=row[3],
                qmin=row[4],
                vg=row[5],
                status=int(row[7]),
                pmax=row[8],
                pmin=row[9],
            )
        )

    costrows = matrices["gencost"]
    if len(costrows) != len(gens):
        raise CaseError(
            f"gencost has {len(costrows)} rows for {len(gens)} generators "
            "(reactive cost rows are not supported)"
        )
    for g, row in zip(gens, costrows):
        model = int(row[0])
        if model != 2:
            raise CaseError(f"unsupported cost model {model} (only polynomial model 2)")
        n = int(row[3])
        if n > 3:
            raise CaseError(f"polynomial cost degree {n - 1} > 2 not supported")
        coeffs = row[4 : 4 + n]
        if len(coeffs) != n:
            raise CaseError(f"gencost row promises {n} coefficients, carries {len(coeffs)}")
        padded = [0.0] * (3 - n) + list(coeffs)
        g["c2"], g["c1"], g["c0"] = padded

    bus_ids = {b.id for b in buses}
    generators = []
    for g in gens:
        if g["bus"] not in bus_ids:
            raise CaseError(f"generator references nonexistent bus {g['bus']}")
        generators.append(GeneratorRecord(**g))

    branches = []
    for row in matrices["branch"]:
        if len(row) < _BRANCH_COLS:
            raise CaseError(f"branch row has {len(row)} columns, expected >= {_BRANCH_COLS}")
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in bus_ids:
                raise CaseError(f"branch {f}-{t} references nonexistent bus {end}")
        status = int(row[10])
        if status and row[2] == 0.0 and row[3] == 0.0:
            raise CaseError(f"in-service branch {f}-{t} has zero impedance")
        angmin, angmax = row[11], row[12]
        if (angmin == 0.0 and angmax == 0.0) or angmin <= -360.0 or angmax >= 360.0:
            # MATPOWER convention: 0 or +-360 means unconstrained
            angmin, angmax = -360.0, 360.0
        branches.append(
            BranchRecord(
                from_bus=f,
                to_bus=t,
                r=row[2],
                x=row[3],
                b=row[4],
                rate_a=row[5],
                tap=row[8] if row[8] != 0.0 else 1.0,
                shift=math.radians(row[9]),
                status=status,
                angmin=math.radians(angmin),
                angmax=math.radians(angmax),
            )
        )

    return NetworkCase(
        name=name,
        base_mva=base_mva,
        buses=tuple(buses),
        generators=tuple(generators),
        branches=tuple(branches),
    )


def serialize_case(case: NetworkCase) -> str:
    """Render a NetworkCase back to MATPOWER-subset text (round-trips)."""

    def fmt(x: float) -> str:
        return repr(float(x))

    out = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {fmt(case.base_mva)};", ""]
    out.append("mpc.bus = [")
    for b in case.buses:
        out.append(
            "\t".join(
                fmt(v)
                for v in (
                    b.id, b.bus_type, b.pd, b.qd, b.gs, b.bs, 1, b.vm0,
                    math.degrees(b.va0), b.base_kv, 1, b.vmax, b.vmin,
                )
            )
            + ";"
        )
    out.append("];")
    out.append("")
    out.append("mpc.gen = [")
    for g in case.generators:
        out.append(
            "\t".join(
                fmt(v)
                for v in (
                    g.bus, g.pg0, g.qg0, g.qmax, g.qmin, g.vg, case.base_mva,
                    g.status, g.pmax, g.pmin,
                )
            )
            + ";"
        )
    out.append("];")
    out.append("")
    out.append("mpc.branch = [")
    for br in case.branches:
        out.append(
            "\t".join(
                fmt(v)
                for v in (
                    br.from_bus, br.to_bus, br.r, br.x, br.b, br.rate_a, br.rate_a,
                    br.rate_a, 0.0 if br.tap == 1.0 else br.tap, math.degrees(br.shift),
                    br.status, math.degrees(br.angmin), math.degrees(br.angmax),
                )
            )
            + ";"
        )
    out.append("];")
    out.append("")
    out.append("mpc.gencost = [")
    for g in case.generators:
        out.append("\t".join(fmt(v) for v in (2, 0, 0, 3, g.c2, g.c1, g.c0)) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Dynamics sidecar


def parse_dynamics(text: str, n_gen: int | None = None) -> list[DynParams]:
    """Parse the JSON dynamics sidecar into one DynParams per generator.

    The document maps generator indices (as decimal strings) to objects with
    keys {m, d, xd_prime, pm, omega_s, delta_max}; delta_max may be omitted
    and defaults to 100 degrees. When n_gen is given, every index in
    [0, n_gen) must be present.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseError(f"dynamics sidecar is not valid JSON: {e}", line=e.lineno) from e
    if not isinstance(doc, dict):
        raise CaseError("dynamics sidecar must be a JSON object keyed by generator index")

    params = []
    for key, entry in doc.items():
        try:
            gen_index = int(key)
        except ValueError:
            raise CaseError(f"dynamics key {key!r} is not a generator index") from None
        if not isinstance(entry, dict):
            raise CaseError(f"dynamics entry for generator {gen_index} must be an object")
        unknown = set(entry) - _DYN_KEYS
        if unknown:
            raise CaseError(f"generator {gen_index}: unknown dynamics keys {sorted(unknown)}")
        missing = _DYN_KEYS - {"delta_max"} - set(entry)
        if missing:
            raise CaseError(f"generator {gen_index}: missing dynamics keys {sorted(missing)}")
        p = DynParams(
            gen_index=gen_index,
            m=float(entry["m"]),
            d=float(entry["d"]),
            xd_prime=float(entry["xd_prime"]),
            pm=float(entry["pm"]),
            omega_s=float(entry["omega_s"]),
            delta_max=float(entry.get("delta_max", DELTA_MAX_DEFAULT)),
        )
        if p.m <= 0:
            raise CaseError(f"generator {gen_index}: inertia must satisfy m > 0, got {p.m}")
        if p.xd_prime <= 0:
            raise CaseError(f"generator {gen_index}: xd_prime must be > 0, got {p.xd_prime}")
        if p.d < 0:
            raise CaseError(f"generator {gen_index}: damping must be >= 0, got {p.d}")
        if p.omega_s <= 0:
            raise CaseError(f"generator {gen_index}: omega_s must be > 0, got {p.omega_s}")
        if p.delta_max <= 0:
            raise CaseError(f"generator {gen_index}: delta_max must be > 0, got {p.delta_max}")
        params.append(p)

    params.sort(key=lambda p: p.gen_index)
    seen = [p.gen_index for p in params]
    if len(set(seen)) != len(seen):
        raise CaseError("duplicate generator index in dynamics sidecar")
    if n_gen is not None:
        expect = set(range(n_gen))
        missing = expect - set(seen)
        if missing:
            raise CaseError(f"dynamics sidecar missing generators {sorted(missing)}")
    return params


def serialize_dynamics(params: list[DynParams]) -> str:
    doc = {
        str(p.gen_index): {
            "m": p.m,
            "d": p.d,
            "xd_prime": p.xd_prime,
            "pm": p.pm,
            "omega_s": p.omega_s,
            "delta_max": p.delta_max,
        }
        for p in params
    }
    return json.dumps(doc, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Validation


def validate_case(case: NetworkCase) -> list[Violation]:
    """Check record invariants and connectivity; violations are data, not errors."""
    out = []
    idx = case.bus_index()

    n_ref = 0
    for b in case.buses:
        if not (0 < b.vmin <= b.vmax):
            out.append(
                Violation(f"bus {b.id}", "0 < vmin <= vmax", f"vmin={b.vmin}, vmax={b.vmax}")
            )
        if b.bus_type == REF:
            n_ref += 1
    if n_ref != 1:
        out.append(Violation("case", "exactly one REF bus", f"found {n_ref}"))

    for i, g in enumerate(case.generators):
        tag = f"generator {i} (bus {g.bus})"
        if g.bus not in idx:
            out.append(Violation(tag, "generator bus exists", f"bus {g.bus} not in case"))
        if g.pmin > g.pmax:
            out.append(Violation(tag, "pmin <= pmax", f"pmin={g.pmin}, pmax={g.pmax}"))
        if g.qmin > g.qmax:
            out.append(Violation(tag, "qmin <= qmax", f"qmin={g.qmin}, qmax={g.qmax}"))
        if g.c2 < 0:
            out.append(Violation(tag, "c2 >= 0", f"c2={g.c2}"))

    for br in case.branches:
        tag = f"branch {br.from_bus}-{br.to_bus}"
        for end in (br.from_bus, br.to_bus):
            if end not in idx:
                out.append(Violation(tag, "branch endpoints exist", f"bus {end} not in case"))
        if br.status and br.r == 0 and br.x == 0:
            out.append(Violation(tag, "r^2 + x^2 > 0 in service", "zero impedance"))
        if not (br.angmin <= 0 <= br.angmax):
            out.append(
                Violation(tag, "angmin <= 0 <= angmax", f"angmin={br.angmin}, angmax={br.angmax}")
            )

    # connectivity over in-service branches (union-find)
    parent = list(range(len(case.buses)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for br in case.branches:
        if not br.status or br.from_bus not in idx or br.to_bus not in idx:
            continue
        ra, rb = find(idx[br.from_bus]), find(idx[br.to_bus])
        if ra != rb:
            parent[ra] = rb
    comps: dict[int, int] = {}
    for i in range(len(case.buses)):
        comps[find(i)] = comps.get(find(i), 0) + 1
    if len(comps) > 1:
        sizes = sorted(comps.values(), reverse=True)
        out.append(
            Violation("case", "in-service graph connected", f"{len(comps)} components, sizes {sizes}")
        )
    return out


# ---------------------------------------------------------------------------
# Per-unit array view used by the numeric layers


def case_arrays(case: NetworkCase) -> SimpleNamespace:
    """Flatten a case into p.u. numpy arrays over in-service equipment.

    Loads, shunts, generator limits and branch ratings are divided by
    base_mva; cost coefficients stay on their native MW basis. Generator
    and branch arrays carry `gen_pos` / `branch_pos` with the original
    record positions.
    """
    base = case.base_mva
    idx = case.bus_index()
    n = len(case.buses)

    bus_type = np.array([b.bus_type for b in case.buses], dtype=np.int64)
    a = SimpleNamespace(
        n=n,
        base_mva=base,
        bus_ids=np.array([b.id for b in case.buses], dtype=np.int64),
        bus_type=bus_type,
        ref=int(np.flatnonzero(bus_type == REF)[0]) if np.any(bus_type == REF) else 0,
        pd=np.array([b.pd for b in case.buses]) / base,
        qd=np.array([b.qd for b in case.buses]) / base,
        gs=np.array([b.gs for b in case.buses]) / base,
        bs=np.array([b.bs for b in case.buses]) / base,
        vmin=np.array([b.vmin for b in case.buses]),
        vmax=np.array([b.vmax for b in case.buses]),
        vm0=np.array([b.vm0 for b in case.buses]),
        va0=np.array([b.va0 for b in case.buses]),
    )

    live_gens = [(i, g) for i, g in enumerate(case.generators) if g.status]
    a.ng = len(live_gens)
    a.gen_pos = np.array([i for i, _ in live_gens], dtype=np.int64)
    a.gen_bus = np.array([idx[g.bus] for _, g in live_gens], dtype=np.int64)
    a.pmin = np.array([g.pmin for _, g in live_gens]) / base
    a.pmax = np.array([g.pmax for _, g in live_gens]) / base
    a.qmin = np.array([g.qmin for _, g in live_gens]) / base
    a.qmax = np.array([g.qmax for _, g in live_gens]) / base
    a.vg = np.array([g.vg for _, g in live_gens])
    a.pg0 = np.array([g.pg0 for _, g in live_gens]) / base
    a.qg0 = np.array([g.qg0 for _, g in live_gens]) / base
    a.c2 = np.array([g.c2 for _, g in live_gens])
    a.c1 = np.array([g.c1 for _, g in live_gens])
    a.c0 = np.array([g.c0 for _, g in live_gens])

    live_brs = [(i, br) for i, br in enumerate(case.branches) if br.status]
    a.nl = len(live_brs)
    a.branch_pos = np.array([i for i, _ in live_brs], dtype=np.int64)
    a.f = np.array([idx[br.from_bus] for _, br in live_brs], dtype=np.int64)
    a.t = np.array([idx[br.to_bus] for _, br in live_brs], dtype=np.int64)
    a.r = np.array([br.r for _, br in live_brs])
    a.x = np.array([br.x for _, br in live_brs])
    a.bc = np.array([br.b for _, br in live_brs])
    a.tap = np.array([br.tap for _, br in live_brs])
    a.shift = np.array([br.shift for _, br in live_brs])
    a.rate_a = np.array([br.rate_a for _, br in live_brs]) / base
    a.angmin = np.array([br.angmin for _, br in live_brs])
    a.angmax = np.array([br.angmax for _, br in live_brs])
    return a
