"""Declarative problem specifications (YAML).

A spec file is a mapping with a required ``schema_version`` header and a
``kind`` selecting the problem family::

    schema_version: 1
    kind: lq                 # lq | linear | filter-linear
    grid: {T: 1.0, n_steps: 100}
    monte_carlo: {paths: 10000, seed: 1, degree: 3}
    marks:
      ms1: {marks: [1, 2], weights: [0.5, 0.7]}
      ms2: {marks: [1, 2], weights: [0.6, 0.6]}
    state: {...}
    ...
    experiments:
      maxcond: {n_bins: 10}

Coefficients are constants, polynomials in ``t`` (``{poly: [c0, c1, ...]}``)
or piecewise constants (``{piecewise: {breaks: [t1, ...], values: [v0, v1, ...]}}``).
Mark-indexed coefficients are lists with one such entry per mark, or a single
entry broadcast over the marks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import CoefficientError, InvalidArgument, InvalidTilt, SpecError
from .filtering import LinearFilterSystem
from .linear import LinearCoefficients
from .lq import LqCoefficients
from .problem import TILT_MESSAGE
from .randmeasures import MarkSpace, empty_mark_space, make_time_grid

SCHEMA_VERSION = 1
KINDS = ("lq", "linear", "filter-linear")
SPEC_DIR = Path(__file__).with_name("specs")

# section -> (required scalars, optional scalars, mark fields of ms1, mark fields of ms2)
LQ_LAYOUT = {
    "state": (("b11", "b12", "b13", "s11", "s12", "s13", "s21", "s22", "s23"), (),
              ("f11", "f12"), ("f21", "f22")),
    "backward": (("g11", "g12", "g13", "g14", "g17", "g18"), (), ("g15",), ("g16",)),
    "observation": (("b22", "sigma3"), (), (), ("f3", "lam11")),
    "cost": (("l11",), (), (), ()),
}
LINEAR_LAYOUT = {
    "state": (("a",), ("c", "s1x", "s1c", "s2x", "s2c"), ("f1x", "f1c"), ("f2x", "f2c")),
    "backward": ((), ("gx", "gy", "gz1", "gz2", "gzeta1", "gzeta2", "gc"), (), ()),
    "observation": ((), ("b22", "b2y", "sigma3"), (), ("lam",)),
}
FILTER_LAYOUT = {
    "signal": (("a",), ("h_const", "b1", "b2", "h0_mean", "h0_sd"), ("c1",), ("c2",)),
    "observation": (("alpha", "B"), ("alpha_const",), (), ("C",)),
}
TERMINAL = {"lq": ("phi11", "phi12"), "linear": ("phix", "phic"), "filter-linear": ()}


@dataclass
class ProblemSpec:
    kind: str
    grid: object
    ms1: MarkSpace
    ms2: MarkSpace
    coefficients: dict
    terminal: dict
    x0: float
    paths: int
    seed: int
    degree: int
    experiments: dict = field(default_factory=dict)
    source: str = ""
    tilt_floor: float = 1e-6

    def lq(self):
        if self.kind != "lq":
            raise InvalidArgument(f"spec kind {self.kind!r} is not an LQ problem")
        return LqCoefficients.from_values(self.ms1, self.ms2, x0=self.x0, tilt_floor=self.tilt_floor,
                                          **self.terminal, **self.coefficients)

    def linear(self):
        if self.kind != "linear":
            raise InvalidArgument(f"spec kind {self.kind!r} is not a linear problem")
        return LinearCoefficients.from_values(self.ms1, self.ms2, x0=self.x0,
                                              tilt_floor=self.tilt_floor,
                                              **self.terminal, **self.coefficients)

    def filter_system(self):
        if self.kind != "filter-linear":
            raise InvalidArgument(f"spec kind {self.kind!r} is not a filter system")
        kw = dict(self.coefficients)
        h0_mean = kw.pop("h0_mean", None)
        h0_sd = kw.pop("h0_sd", None)
        h0_mean = 0.0 if h0_mean is None else float(h0_mean(0.0))
        kw.setdefault("h_const", 0.0)
        kw.setdefault("b1", 0.0)
        kw.setdefault("b2", 0.0)
        kw.setdefault("alpha_const", 0.0)
        kw.setdefault("c1", np.zeros(self.ms1.size))
        kw.setdefault("c2", np.zeros(self.ms2.size))
        kw.setdefault("C", np.ones(self.ms2.size))
        sys = LinearFilterSystem(ms1=self.ms1, ms2=self.ms2, h0_mean=h0_mean, **kw)
        sd = sys.stationary_sd() if h0_sd is None else float(h0_sd(0.0))
        return LinearFilterSystem(ms1=self.ms1, ms2=self.ms2, h0_mean=h0_mean, h0_sd=sd, **kw)

    def options(self, command):
        return dict(self.experiments.get(command) or {})


# YAML line bookkeeping


def _line_map(node, prefix="", out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, val in node.value:
            name = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[name] = key.start_mark.line + 1
            _line_map(val, name, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, val in enumerate(node.value):
            name = f"{prefix}[{i}]"
            out[name] = val.start_mark.line + 1
            _line_map(val, name, out)
    return out


class _Collector:
    def __init__(self, lines):
        self.lines = lines
        self.errors = []

    def add(self, path, message):
        line = self.lines.get(path)
        if line is None and "." in path:
            line = self.lines.get(path.rsplit(".", 1)[0])
        self.errors.append(SpecError(message, field=path, line=line))

    def raise_if_any(self):
        if not self.errors:
            return
        first = self.errors[0]
        err = SpecError("; ".join(str(e) for e in self.errors)) if len(self.errors) > 1 else first
        err.violations = list(self.errors)
        if len(self.errors) > 1:
            err.field, err.line = first.field, first.line
        raise err


# coefficient parsing


def _number(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    v = float(v)
    if not np.isfinite(v):
        raise ValueError("coefficient must be finite")
    return v


def time_function(v, T):
    """Scalar coefficient entry -> callable of ``t`` (constant, polynomial or piecewise constant)."""
    if isinstance(v, dict):
        if set(v) == {"poly"}:
            c = [_number(x) for x in v["poly"]]
            if not c:
                raise ValueError("poly needs at least one coefficient")
            c = np.asarray(c)[::-1]
            return lambda t, c=c: float(np.polyval(c, t))
        if set(v) == {"piecewise"}:
            pw = v["piecewise"]
            if not isinstance(pw, dict) or set(pw) != {"breaks", "values"}:
                raise ValueError("piecewise needs exactly 'breaks' and 'values'")
            br = np.asarray([_number(x) for x in pw["breaks"]])
            vals = np.asarray([_number(x) for x in pw["values"]])
            if vals.size != br.size + 1:
                raise ValueError("piecewise needs one more value than breaks")
            if np.any(np.diff(br) <= 0) or (br.size and (br[0] <= 0 or br[-1] >= T)):
                raise ValueError(f"breaks must increase strictly inside (0, {T:g})")
            return lambda t, br=br, vals=vals: float(vals[np.searchsorted(br, t, side="right")])
        raise ValueError(f"unknown coefficient form {sorted(v)}; use a number, poly or piecewise")
    c = _number(v)
    return lambda t, c=c: c


def mark_function(v, size, T):
    """Mark-indexed coefficient entry -> callable of ``t`` returning an array of length ``size``."""
    entries = v if isinstance(v, list) else [v] * size
    if len(entries) != size:
        raise ValueError(f"expected {size} per-mark entries, got {len(entries)}")
    fs = [time_function(e, T) for e in entries]
    if all(not isinstance(e, dict) for e in entries):
        arr = np.asarray([f(0.0) for f in fs])
        return lambda t, arr=arr: arr
    return lambda t, fs=fs: np.asarray([f(t) for f in fs])


def _mark_space(raw, path, col):
    if raw is None:
        return empty_mark_space()
    if not isinstance(raw, dict) or set(raw) - {"marks", "weights"} or "weights" not in raw:
        col.add(path, "mark space needs 'weights' (and optionally 'marks')")
        return empty_mark_space()
    try:
        w = [_number(x) for x in raw["weights"]]
        m = [_number(x) for x in raw.get("marks", list(range(1, len(w) + 1)))]
        return MarkSpace(m, w)
    except (ValueError, TypeError, InvalidArgument) as exc:
        col.add(path, str(exc))
        return empty_mark_space()


def _positive_int(raw, path, col, default):
    v = raw if raw is not None else default
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        col.add(path, f"expected a positive integer, got {v!r}")
        return default
    return v


def _parse(data, lines, source):
    col = _Collector(lines)
    if not isinstance(data, dict):
        raise SpecError("spec must be a mapping", line=1)
    if "schema_version" not in data:
        raise SpecError("missing schema version header", field="schema_version", line=1)
    if data["schema_version"] != SCHEMA_VERSION:
        raise SpecError(f"unsupported schema version {data['schema_version']!r} (expected {SCHEMA_VERSION})",
                        field="schema_version", line=lines.get("schema_version"))
    kind = data.get("kind")
    if kind not in KINDS:
        raise SpecError(f"kind must be one of {', '.join(KINDS)}", field="kind", line=lines.get("kind"))
    layout = {"lq": LQ_LAYOUT, "linear": LINEAR_LAYOUT, "filter-linear": FILTER_LAYOUT}[kind]
    known = {"schema_version", "kind", "grid", "monte_carlo", "marks", "terminal", "x0",
             "tilt_floor", "experiments", "description"} | set(layout)
    for key in data:
        if key not in known:
            col.add(str(key), "unknown section")

    g = data.get("grid") or {}
    T, n_steps = g.get("T", 1.0), g.get("n_steps", 100)
    try:
        T = _number(T)
        if T <= 0:
            raise ValueError("horizon must be positive")
    except ValueError as exc:
        col.add("grid.T", str(exc))
        T = 1.0
    n_steps = _positive_int(n_steps, "grid.n_steps", col, 100)
    mc = data.get("monte_carlo") or {}
    paths = _positive_int(mc.get("paths"), "monte_carlo.paths", col, 10000)
    seed = mc.get("seed", 1)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        col.add("monte_carlo.seed", f"expected a non-negative integer, got {seed!r}")
        seed = 1
    degree = _positive_int(mc.get("degree"), "monte_carlo.degree", col, 3)

    marks = data.get("marks") or {}
    ms1 = _mark_space(marks.get("ms1"), "marks.ms1", col)
    ms2 = _mark_space(marks.get("ms2"), "marks.ms2", col)

    coeffs = {}
    for section, (required, optional, m1, m2) in layout.items():
        raw = data.get(section)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            col.add(section, "expected a mapping")
            continue
        allowed = set(required) | set(optional) | set(m1) | set(m2)
        for key in raw:
            if key not in allowed:
                col.add(f"{section}.{key}", "unknown coefficient")
        for key in required:
            if key not in raw:
                col.add(f"{section}.{key}", "missing required coefficient")
        for key, val in raw.items():
            if key not in allowed:
                continue
            path = f"{section}.{key}"
            try:
                if key in m1:
                    coeffs[key] = mark_function(val, ms1.size, T)
                elif key in m2:
                    coeffs[key] = mark_function(val, ms2.size, T)
                else:
                    coeffs[key] = time_function(val, T)
            except (ValueError, TypeError) as exc:
                col.add(path, str(exc))

    terminal = {}
    raw_term = data.get("terminal") or {}
    for key in raw_term:
        if key not in TERMINAL[kind]:
            col.add(f"terminal.{key}", "unknown terminal coefficient")
    for key in TERMINAL[kind]:
        if key in raw_term:
            try:
                terminal[key] = _number(raw_term[key])
            except ValueError as exc:
                col.add(f"terminal.{key}", str(exc))
        elif key in ("phi11", "phix"):
            col.add(f"terminal.{key}", "missing required coefficient")

    x0 = 0.0
    if kind != "filter-linear":
        if "x0" not in data:
            col.add("x0", "missing initial state")
        else:
            try:
                x0 = _number(data["x0"])
            except ValueError as exc:
                col.add("x0", str(exc))
    tilt_floor = data.get("tilt_floor", 1e-6)
    experiments = data.get("experiments") or {}
    if not isinstance(experiments, dict):
        col.add("experiments", "expected a mapping")
        experiments = {}
    col.raise_if_any()

    spec = ProblemSpec(kind, make_time_grid(T, n_steps), ms1, ms2, coeffs, terminal, x0,
                       paths, seed, degree, experiments, source, float(tilt_floor))
    _semantic_checks(spec, col)
    col.raise_if_any()
    return spec


def _semantic_checks(spec, col):
    grid = spec.grid
    tilt_field = {"lq": "observation.lam11", "linear": "observation.lam"}.get(spec.kind)
    if tilt_field:
        name = tilt_field.split(".")[1]
        if name in spec.coefficients:
            for t in grid.nodes:
                lam = np.asarray(spec.coefficients[name](t))
                if np.any(lam < spec.tilt_floor) or np.any(lam > 1.0):
                    col.add(tilt_field, TILT_MESSAGE)
                    return
    try:
        if spec.kind == "lq":
            spec.lq().check(grid)
        elif spec.kind == "filter-linear":
            spec.filter_system().check(grid)
    except InvalidTilt as exc:
        col.add(tilt_field or "observation", str(exc))
    except (InvalidArgument, CoefficientError) as exc:
        col.add(spec.kind, str(exc))


def parse_spec(text, source="<string>"):
    """Parse and validate spec text."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise SpecError(f"parse error: {getattr(exc, 'problem', None) or exc}", line=line) from exc
    lines = _line_map(node) if node is not None else {}
    return _parse(data, lines, source)


def load_spec(path):
    """Load a spec file; bare names resolve to the shipped specs (``lq_default`` etc.)."""
    p = Path(path)
    if not p.exists():
        shipped = SPEC_DIR / (p.name if p.suffix else p.name + ".yaml")
        if shipped.exists():
            p = shipped
        else:
            raise SpecError(f"spec file not found: {path}")
    return parse_spec(p.read_text(), source=str(p))


def shipped_specs():
    return sorted(q.stem for q in SPEC_DIR.glob("*.yaml"))
