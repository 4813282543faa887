"""Experiment configuration: flat ``key = value`` text with section headers.

Example::

    [model]
    kind = rotated_J
    n = 2
    shape = 16, 16, 16, 16
    amplitude = 0.3
    wave = 1

    [F]
    recipe = trig
    terms = 0.2 cos:1,0,0,0; 0.15 sin:0,1,1,0

    [initial]
    recipe = zero

    [flow]
    t_final = 200.0
    conv_tol = 1e-09

    [diagnostics]
    harnack = 0.3333333333333333, 2.0, 0.5, 1.0
    decay_window = 2.0, auto
    contraction_floor = 1e-13

    [output]
    directory = out

    [run]
    seed = 0

Field recipes (``[F]``, ``[initial]``) are ``zero``, ``constant`` (key
``value``), ``trig`` (key ``terms``) or, for ``[F]`` only, ``manufactured``
(key ``phi_star``, itself a trig term list). A trig term is a coefficient
followed by factors ``sin:k`` or ``cos:k`` with ``k`` an integer wave
vector, so ``0.3 sin:1,0 cos:0,1`` is ``0.3 sin(x1) cos(x2)``. Terms are
separated by ``;``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .flow import FlowConfig
from .manifold import ModelSpec


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class TrigTerm:
    coef: float
    factors: tuple  # ((kind, wave vector), ...)

    def evaluate(self, coords) -> np.ndarray:
        out = np.asarray(self.coef, dtype=float)
        for kind, k in self.factors:
            if len(k) != len(coords):
                raise ConfigError(f"wave vector {k} does not match dimension {len(coords)}")
            arg = sum(ki * x for ki, x in zip(k, coords))
            out = out * (np.sin(arg) if kind == "sin" else np.cos(arg))
        return out

    def render(self) -> str:
        parts = [repr(self.coef)] + [f"{kind}:{','.join(str(i) for i in k)}" for kind, k in self.factors]
        return " ".join(parts)


def parse_terms(text: str) -> tuple:
    terms = []
    for chunk in text.split(";"):
        tokens = chunk.split()
        if not tokens:
            continue
        try:
            coef = float(tokens[0])
            factors = []
            for tok in tokens[1:]:
                kind, _, wave = tok.partition(":")
                if kind not in ("sin", "cos"):
                    raise ConfigError(f"unknown trig factor {tok!r}")
                factors.append((kind, tuple(int(v) for v in wave.split(","))))
        except ValueError as exc:
            raise ConfigError(f"bad trig term {chunk.strip()!r}: {exc}") from exc
        terms.append(TrigTerm(coef, tuple(factors)))
    return tuple(terms)


def render_terms(terms) -> str:
    return "; ".join(t.render() for t in terms)


def trig_field(terms, grid) -> np.ndarray:
    coords = grid.mesh()
    out = np.zeros(grid.shape)
    for t in terms:
        out = out + t.evaluate(coords)
    return out


@dataclass(frozen=True)
class FieldRecipe:
    recipe: str = "zero"
    value: float = 0.0
    terms: tuple = ()
    phi_star: tuple = ()

    def __post_init__(self):
        if self.recipe not in ("zero", "constant", "trig", "manufactured"):
            raise ConfigError(f"unknown field recipe {self.recipe!r}")

    def build(self, model) -> np.ndarray:
        grid = model.grid
        if self.recipe == "zero":
            return np.zeros(grid.shape)
        if self.recipe == "constant":
            return np.full(grid.shape, self.value)
        if self.recipe == "trig":
            return trig_field(self.terms, grid)
        from .elliptic import manufactured_F

        return manufactured_F(trig_field(self.phi_star, grid), model)


@dataclass(frozen=True)
class DiagnosticsConfig:
    harnack: tuple = ((1.0 / 3.0, 2.0, 0.5, 1.0),)
    decay_window: tuple = (2.0, None)  # None: up to convergence time
    contraction_floor: float = 1e-13
    decay_min_rows: int = 10
    heat_cfl: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    F: FieldRecipe = FieldRecipe()
    initial: FieldRecipe = FieldRecipe()
    flow: FlowConfig = FlowConfig()
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    output: str = "out"
    seed: int = 0
    # optional J/G/frame dumps replacing the analytic model fields
    model_dumps: tuple = field(default=())

    def digest(self) -> str:
        return hashlib.sha256(render(self).encode()).hexdigest()[:16]


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _recipe(sec, allow_manufactured: bool) -> FieldRecipe:
    recipe = sec.get("recipe", "zero").strip()
    if recipe == "manufactured" and not allow_manufactured:
        raise ConfigError("the manufactured recipe is only valid for F")
    return FieldRecipe(
        recipe=recipe,
        value=sec.getfloat("value", 0.0),
        terms=parse_terms(sec.get("terms", "")),
        phi_star=parse_terms(sec.get("phi_star", "")),
    )


_FLOW_TYPES = {f.name: f.type for f in fields(FlowConfig)}


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
        if not cp.has_section("model"):
            raise ConfigError("missing [model] section")
        m = cp["model"]
        n = m.getint("n")
        wave = _ints(m.get("wave", "1"))
        model = ModelSpec(
            kind=m.get("kind").strip(),
            n=n,
            shape=_ints(m.get("shape")),
            amplitude=m.getfloat("amplitude", 0.0),
            wave=wave,
        )
        dumps = tuple(s.strip() for s in m.get("dumps", "").split(",") if s.strip())
        if dumps and len(dumps) != 3:
            raise ConfigError("model dumps must list J, G and frame files")

        F = _recipe(cp["F"], True) if cp.has_section("F") else FieldRecipe()
        initial = _recipe(cp["initial"], False) if cp.has_section("initial") else FieldRecipe()

        flow_kwargs = {}
        if cp.has_section("flow"):
            for key, raw in cp["flow"].items():
                if key not in _FLOW_TYPES:
                    raise ConfigError(f"unknown flow key {key!r}")
                flow_kwargs[key] = int(raw) if _FLOW_TYPES[key] in ("int", int) else float(raw)
        flow = FlowConfig(**flow_kwargs)

        diag = DiagnosticsConfig()
        if cp.has_section("diagnostics"):
            d = cp["diagnostics"]
            harnack = tuple(_floats(chunk) for chunk in d.get("harnack", "").split(";") if chunk.strip())
            if any(len(h) != 4 for h in harnack):
                raise ConfigError("harnack entries need eps, alpha, t1, t2")
            lo, _, hi = d.get("decay_window", "2.0, auto").partition(",")
            hi = hi.strip()
            diag = DiagnosticsConfig(
                harnack=harnack or diag.harnack,
                decay_window=(float(lo), None if hi in ("", "auto") else float(hi)),
                contraction_floor=d.getfloat("contraction_floor", diag.contraction_floor),
                decay_min_rows=d.getint("decay_min_rows", diag.decay_min_rows),
                heat_cfl=d.getfloat("heat_cfl", diag.heat_cfl),
            )
        output = cp.get("output", "directory", fallback="out").strip()
        seed = cp.getint("run", "seed", fallback=0)
    except ConfigError:
        raise
    except (configparser.Error, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(model, F, initial, flow, diag, output, seed, dumps)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def _recipe_lines(r: FieldRecipe) -> list:
    lines = [f"recipe = {r.recipe}"]
    if r.recipe == "constant":
        lines.append(f"value = {r.value!r}")
    if r.terms:
        lines.append(f"terms = {render_terms(r.terms)}")
    if r.phi_star:
        lines.append(f"phi_star = {render_terms(r.phi_star)}")
    return lines


def render(config: ExperimentConfig) -> str:
    m = config.model
    d = config.diagnostics
    out = ["[model]", f"kind = {m.kind}", f"n = {m.n}", f"shape = {', '.join(str(s) for s in m.shape)}",
           f"amplitude = {m.amplitude!r}", f"wave = {', '.join(str(w) for w in m.wave)}"]
    if config.model_dumps:
        out.append(f"dumps = {', '.join(config.model_dumps)}")
    out += ["", "[F]"] + _recipe_lines(config.F)
    out += ["", "[initial]"] + _recipe_lines(config.initial)
    out += ["", "[flow]"] + [f"{f.name} = {getattr(config.flow, f.name)!r}" for f in fields(FlowConfig)]
    hi = "auto" if d.decay_window[1] is None else repr(d.decay_window[1])
    out += [
        "", "[diagnostics]",
        "harnack = " + "; ".join(", ".join(repr(float(v)) for v in h) for h in d.harnack),
        f"decay_window = {d.decay_window[0]!r}, {hi}",
        f"contraction_floor = {d.contraction_floor!r}",
        f"decay_min_rows = {d.decay_min_rows}",
        f"heat_cfl = {d.heat_cfl!r}",
        "", "[output]", f"directory = {config.output}",
        "", "[run]", f"seed = {config.seed}",
    ]
    return "\n".join(out) + "\n"
