"""Run configuration: YAML document validated against a strict schema.

Unknown keys are rejected, physical constraints are re-checked at parse
time, and errors carry the offending field path and YAML line.
"""
import hashlib
import json
from typing import Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

COMMANDS = ("sample", "oracle", "compare", "partition", "stability")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PointSpec(_Strict):
    chart: Literal["north", "south"] = "north"
    coord: List[float] = Field(min_length=2, max_length=2)
    coefficient: float

    @field_validator("coefficient")
    @classmethod
    def _lc(cls, v):
        if v > 1.0:
            raise ValueError("divisor coefficients must be <= 1 (lc)")
        return v


class PerturbationSpec(_Strict):
    """Zonal continuous perturbation sum_j c_j P_j(Zc) (Legendre)."""
    kind: Literal["zonal"] = "zonal"
    coefficients: List[float] = Field(default_factory=list)


class LogLogSpec(_Strict):
    amplitude: float = Field(1.0, gt=0)


class WeightBlock(_Strict):
    perturbation: Optional[PerturbationSpec] = None
    loglog: Optional[LogLogSpec] = None


class GeometryBlock(_Strict):
    degree: int = Field(ge=0)
    divisor: List[PointSpec] = Field(default_factory=list)
    weight: WeightBlock = Field(default_factory=WeightBlock)
    measure: Literal["smooth", "klt", "poincare"] = "smooth"
    basis: Literal["fs", "monomial", "cusp"] = "fs"

    @model_validator(mode="after")
    def _physical(self):
        coeffs = [p.coefficient for p in self.divisor]
        if self.measure == "klt" and any(c >= 1.0 for c in coeffs):
            raise ValueError("klt measure requires all divisor coefficients < 1")
        if self.measure == "klt" and not coeffs:
            raise ValueError("klt measure needs a divisor")
        if self.measure == "smooth" and coeffs:
            raise ValueError("smooth measure takes no divisor")
        if self.measure == "poincare" and not any(c == 1.0 for c in coeffs):
            raise ValueError("poincare measure needs a coefficient-1 point")
        if self.weight.loglog is not None and not any(c == 1.0 for c in coeffs):
            raise ValueError("log-log weight needs coefficient-1 points")
        if self.basis == "cusp" and not any(c == 1.0 for c in coeffs):
            raise ValueError("cusp basis needs coefficient-1 points")
        return self


class ProcessBlock(_Strict):
    k: int = Field(1, ge=1)
    beta: Optional[float] = None
    beta_k: Optional[Dict[int, float]] = None
    N: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _phase(self):
        if (self.beta is None) == (self.beta_k is None):
            raise ValueError("give exactly one of beta (fixed phase) or beta_k (scaled phase)")
        if self.beta_k is not None:
            if any(v < 0 for v in self.beta_k.values()):
                raise ValueError("scaled phase needs beta_k >= 0")
            if self.k not in self.beta_k:
                raise ValueError(f"beta_k table has no entry for k={self.k}")
        return self

    def effective_beta(self):
        return float(self.beta) if self.beta is not None else float(self.beta_k[self.k])


class SamplerBlock(_Strict):
    chains: int = Field(1, ge=1)
    sweeps: int = Field(1000, ge=1)          # retained configurations per chain
    burn_in: int = Field(10000, ge=0)
    thin: int = Field(10, ge=1)
    proposal_scale: Optional[float] = Field(None, gt=0)
    guard: float = Field(1e-8, ge=0)
    guard_threshold: float = Field(0.05, ge=0, le=1)
    rebuild: int = Field(1000, ge=1)
    p_global: float = Field(0.1, ge=0, le=1)
    seed: int = 0
    grid_m: int = Field(32, ge=2)
    bandwidth: Optional[float] = Field(None, gt=0)


class OracleBlock(_Strict):
    m: int = Field(64, ge=2)
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(200, ge=1)


class PartitionBlock(_Strict):
    method: Literal["exact", "mc"] = "exact"
    samples: int = Field(100000, ge=1)
    seed: int = 0


class StabilityBlock(_Strict):
    mode: Literal["scan", "strong"] = "scan"
    k_max: int = Field(4, ge=1)
    b_grid: List[float] = Field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 0.95])
    k_range: List[int] = Field(default_factory=lambda: [1, 2, 3])
    mc_samples: int = Field(20000, ge=1)

    @field_validator("b_grid")
    @classmethod
    def _open_unit(cls, v):
        if any(not 0 < b < 1 for b in v):
            raise ValueError("b_grid must lie in (0, 1)")
        return v


class CompareBlock(_Strict):
    tolerance: float = Field(0.05, gt=0)
    force: bool = False


class OutputBlock(_Strict):
    directory: str = "out"
    formats: List[Literal["csv", "json", "npz"]] = Field(default_factory=lambda: ["csv", "json"])


class RunConfig(_Strict):
    command: Optional[Literal["sample", "oracle", "compare", "partition", "stability"]] = None
    geometry: GeometryBlock
    process: ProcessBlock = Field(default_factory=lambda: ProcessBlock(beta=1.0))
    sampler: SamplerBlock = Field(default_factory=SamplerBlock)
    oracle: OracleBlock = Field(default_factory=OracleBlock)
    partition: PartitionBlock = Field(default_factory=PartitionBlock)
    stability: StabilityBlock = Field(default_factory=StabilityBlock)
    compare: CompareBlock = Field(default_factory=CompareBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    # ------------------------------------------------------------ provenance

    def config_hash(self):
        blob = json.dumps(self.model_dump(mode="json", exclude={"output"}), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def geometry_hash(self):
        blob = json.dumps({"geometry": self.geometry.model_dump(mode="json"), "k": self.process.k},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # ------------------------------------------------------------ builders

    def divisor(self):
        from .geometry import Divisor, SpherePoint
        pts = []
        for p in self.geometry.divisor:
            c = complex(p.coord[0], p.coord[1])
            pts.append((SpherePoint(p.chart, c), p.coefficient))
        return Divisor(tuple(pts)) if pts else None

    def lc_part(self):
        from .geometry import Divisor
        D = self.divisor()
        if D is None:
            return None
        pts = tuple((p, c) for p, c in D.points if c == 1.0)
        return Divisor(pts) if pts else None

    def perturbation(self):
        pert = self.geometry.weight.perturbation
        if pert is None or not pert.coefficients:
            return None
        coeffs = np.array(pert.coefficients, dtype=float)
        return lambda x: np.polynomial.legendre.legval(np.asarray(x)[:, 2], coeffs)

    def weight(self, degree=None):
        from .geometry import WeightSpec
        d = self.geometry.degree if degree is None else degree
        k = self.process.k
        u = self.perturbation()
        pert = None if u is None else (lambda x, u=u: k * u(x))
        ll = self.geometry.weight.loglog
        if ll is None:
            return WeightSpec(d, pert)
        return WeightSpec(d, pert, self.lc_part(), k * ll.amplitude)

    def mu0(self):
        from .geometry import BackgroundMeasure
        g = self.geometry
        if g.measure == "smooth":
            return BackgroundMeasure("smooth")
        return BackgroundMeasure(g.measure, self.divisor())

    def basis(self):
        from .geometry import cusp_basis, fs_orthonormal_basis, monomial_basis, SectionBasis
        g = self.geometry
        if g.basis == "cusp":
            b = cusp_basis(g.degree, self.lc_part())
        elif g.basis == "monomial":
            b = monomial_basis(g.degree)
        else:
            b = fs_orthonormal_basis(g.degree)
        N = self.process.N
        if N is not None:
            if N > b.N:
                raise ConfigError(f"N={N} exceeds the section space dimension {b.N}", "process.N")
            b = SectionBasis(b.degree, b.coeffs[:N].copy(), b.orthonormal)
        return b

    def to_model(self):
        from .sampler import GibbsModel
        return GibbsModel(self.basis(), self.process.k, self.process.effective_beta(), self.weight(), self.mu0())

    def sampler_config(self):
        from .sampler import SamplerConfig
        s = self.sampler
        return SamplerConfig(chains=s.chains, n_keep=s.sweeps, burn_in=s.burn_in, thin=s.thin,
                             proposal_scale=s.proposal_scale, p_global=s.p_global, guard=s.guard,
                             rebuild=s.rebuild, seed=s.seed)


# ---------------------------------------------------------------- loading

def _line_map(text):
    """Map dotted key paths to 1-based YAML line numbers."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (str(k.value),)
                out[".".join(p)] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (str(i),)
                out[".".join(p)] = v.start_mark.line + 1
                walk(v, p)
    if root is not None:
        walk(root, ())
    return out


def parse_config(text, overrides=None):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = getattr(getattr(exc, "problem_mark", None), "line", None)
        raise ConfigError(f"YAML syntax error: {exc}", None, None if line is None else line + 1) from None
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    for path, value in (overrides or {}).items():
        node = data
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = _line_map(text)
        err = exc.errors()[0]
        loc = ".".join(str(x) for x in err["loc"])
        line = None
        parts = loc.split(".")
        while parts and line is None:
            line = lines.get(".".join(parts))
            parts = parts[:-1]
        raise ConfigError(err["msg"], loc or None, line) from None


def load_config(path, overrides=None):
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, overrides)
