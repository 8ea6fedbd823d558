import json
import math
from pathlib import Path
from typing import Any, Literal, Optional, Annotated

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field, ValidationError, field_serializer, field_validator, model_validator
from pydantic.config import ConfigDict
from pydantic.functional_validators import BeforeValidator

from .errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


def _to_array(value):
    if value is None:
        return None
    arr = np.array(value)
    arr.setflags(write=False)
    return arr


def _to_csr(value):
    if value is None:
        return None
    return sp.csr_matrix(value)


def _to_complex(value):
    if isinstance(value, str):
        return complex(value.replace(" ", ""))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    return complex(value)


NDArray = Annotated[np.ndarray, BeforeValidator(_to_array)]
SparseMatrix = Annotated[Any, BeforeValidator(_to_csr)]
ComplexValue = Annotated[Any, BeforeValidator(_to_complex)]


def array_to_json(value: Optional[np.ndarray]):
    if value is None:
        return None
    arr = np.asarray(value)
    if np.iscomplexobj(arr) and np.any(arr.imag != 0):
        return {"real": arr.real.tolist(), "imag": arr.imag.tolist()}
    return np.real(arr).tolist()


class LabModel(BaseModel):
    """Immutable model that may carry numpy arrays and sparse matrices."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# ---------------------------------------------------------------- reports


class DoublingProfile(BaseModel):
    c_doubling: float = Field(ge=1.0)
    nu_fit: float = Field(gt=0.0)
    radii_window: tuple[float, float]
    max_ratio_violation: float
    n_radii: int


class EllipticityReport(BaseModel):
    lambda_low: float
    Lambda_high: float
    violations: int = Field(ge=0)

    @property
    def valid(self) -> bool:
        return self.violations == 0


class CarreReport(BaseModel):
    residual_strong: float
    residual_strong_abs: float
    residual_weak_max_t: Optional[float] = None
    carre_w_ratio: Optional[float] = None


class R2Report(BaseModel):
    r2_max_ratio: Optional[float] = None
    r2_max_defect: Optional[float] = None
    carre2_max_ratio: float
    samples: int
    skipped: int = 0


class DecompositionReport(LabModel):
    pi_resonant: NDArray
    pi_g_f: NDArray
    pi_f_g: NDArray
    residual_p: float = Field(ge=0.0)
    residual_refined: float = Field(ge=0.0)
    carre_split_residual: Optional[float] = None
    quadrature_order_estimate: Optional[float] = None
    converged_to_roundoff: bool = False
    p: float = 2.0

    @field_serializer("pi_resonant", "pi_g_f", "pi_f_g")
    def serialize_field(self, value: np.ndarray, _info):
        return array_to_json(value)


class EstimateReport(BaseModel):
    name: str
    fitted_constants: dict[str, Optional[float]] = Field(default_factory=dict)
    violations: int = Field(default=0, ge=0)
    window: dict[str, Any] = Field(default_factory=dict)
    samples: int = 0
    seed: Optional[int] = None
    method: str = "estimate"
    notes: str = ""
    rows: list[dict[str, Any]] = Field(default_factory=list)


class LeibnizRow(BaseModel):
    row_id: int
    p: float
    alpha: float
    n_samples: int
    max_ratio: float
    mean_ratio: float
    stability: float
    argmax_sample: int
    inside_thm13: bool
    inside_previous: bool

    @model_validator(mode="after")
    def check_order(self):
        if not (self.max_ratio >= self.mean_ratio >= 0.0):
            raise ValueError("expected max_ratio >= mean_ratio >= 0")
        return self


class LeibnizReport(BaseModel):
    rows: list[LeibnizRow]
    p0_used: float
    nu_used: float
    hypotheses_met: bool
    sampler: str
    seed: int
    degenerate_pairs: int = 0


class RunResult(BaseModel):
    """What an experiment hands to the report writer."""

    experiment: str
    report: dict[str, Any]
    tables: dict[str, list[dict[str, Any]]] = Field(default_factory=dict)
    violations: int = Field(default=0, ge=0)


# ----------------------------------------------------------------- config


class SpaceSpec(BaseModel):
    kind: Literal["grid", "graph"] = "grid"
    dims: list[int] = Field(default_factory=lambda: [64])
    h: float = Field(default=1.0, gt=0.0)
    periodic: bool = False
    edges: Optional[list[tuple[int, int, float]]] = None
    edges_file: Optional[str] = None
    mu: Optional[list[float]] = None

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind == "grid" and not 1 <= len(self.dims) <= 3:
            raise ValueError("grid spaces need between 1 and 3 dims")
        if self.kind == "graph" and self.edges is None and self.edges_file is None:
            raise ValueError("graph spaces need edges or edges_file")
        return self


class OperatorSpec(BaseModel):
    kind: Literal["graph_laplacian", "divergence_form", "delta_a"] = "graph_laplacian"
    A_constant: Optional[list[list[ComplexValue]]] = None
    A_file: Optional[str] = None
    a_constant: Optional[ComplexValue] = None
    a_file: Optional[str] = None
    a_sine_amplitude: Optional[float] = None
    accretivity_floor: float = Field(default=0.0, ge=0.0)

    @field_serializer("A_constant")
    def serialize_matrix(self, value, _info):
        if value is None:
            return None
        return [[str(complex(v)) for v in row] for row in value]

    @field_serializer("a_constant")
    def serialize_scalar(self, value, _info):
        return None if value is None else str(complex(value))


class CalculusSpec(BaseModel):
    D: Optional[int] = Field(default=None, ge=1)
    strict_kernel: bool = False
    allow_schur: bool = True
    nu: Optional[float] = Field(default=None, gt=0.0)
    p0: float = Field(default=2.0, gt=1.0)


class QuadratureSpec(BaseModel):
    nodes_per_decade: int = Field(default=40, ge=8)
    t_min_factor: float = Field(default=1e-2, gt=0.0)
    t_max_factor: float = Field(default=1e2, gt=0.0)


class SamplerSpec(BaseModel):
    kind: Literal["spectral_bandlimited", "random_bump", "eigenfunction_product"] = "spectral_bandlimited"
    count: int = Field(default=32, ge=1)
    seed: int = Field(ge=0)


def _default_alphas() -> list[float]:
    return [round(0.1 * k, 1) for k in range(1, 10)]


class GridSpec(BaseModel):
    p: list[float] = Field(default_factory=lambda: [1.5, 2.0, 4.0, 8.0], min_length=1)
    alpha: list[float] = Field(default_factory=_default_alphas, min_length=1)

    @field_validator("p")
    @classmethod
    def check_p(cls, value: list[float]) -> list[float]:
        if any(not (1.0 < p < math.inf) for p in value):
            raise ValueError("every p must lie in (1, inf)")
        return sorted(set(value))

    @field_validator("alpha")
    @classmethod
    def check_alpha(cls, value: list[float]) -> list[float]:
        if any(not (0.0 < a < 1.0) for a in value):
            raise ValueError("every alpha must lie in (0, 1)")
        return sorted(set(value))


class EstimateSuiteSpec(BaseModel):
    ue_t_window: Optional[tuple[float, float]] = None
    ue_times: int = Field(default=12, ge=2)
    dg_radius: Optional[float] = Field(default=None, gt=0.0)
    dg_separations: list[float] = Field(default_factory=lambda: [8.0, 16.0, 32.0])
    dg_samples: int = Field(default=200, ge=1)
    gradient_p: list[float] = Field(default_factory=lambda: [2.0, 4.0])
    gradient_times: int = Field(default=8, ge=1)
    gradient_samples: int = Field(default=1000, ge=1)
    square_p: list[float] = Field(default_factory=lambda: [1.5, 2.0, 4.0])
    square_alpha: float = Field(default=0.5, gt=0.0, lt=1.0)
    square_N: int = Field(default=2, ge=1)
    square_samples: int = Field(default=100, ge=1)
    orthogonality_samples: int = Field(default=20, ge=1)
    tent_p: list[float] = Field(default_factory=lambda: [2.0, 4.0])
    tent_j: list[int] = Field(default_factory=lambda: [1, 2, 3])
    tent_samples: int = Field(default=50, ge=1)
    imaginary_p: list[float] = Field(default_factory=lambda: [2.0, 4.0])
    imaginary_eta: list[float] = Field(default_factory=lambda: [-8.0, -4.0, -2.0, -1.0, 1.0, 2.0, 4.0, 8.0])
    imaginary_samples: int = Field(default=200, ge=1)

    @field_validator("imaginary_eta")
    @classmethod
    def check_symmetric(cls, value: list[float]) -> list[float]:
        if sorted(value) != sorted(-v for v in value):
            raise ValueError("eta grid must be symmetric about 0")
        return sorted(value)


class OutputSpec(BaseModel):
    out_dir: str = "runs/latest"
    tables: bool = True
    summary: bool = True


ExperimentKind = Literal[
    "verify_assumptions", "decomposition", "carre_split",
    "leibniz_sweep", "proposition_norms", "estimate_suite",
]


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    experiment: ExperimentKind
    space: SpaceSpec
    operator: OperatorSpec = Field(default_factory=OperatorSpec)
    calculus: CalculusSpec = Field(default_factory=CalculusSpec)
    quadrature: QuadratureSpec = Field(default_factory=QuadratureSpec)
    sampler: SamplerSpec
    grid: GridSpec = Field(default_factory=GridSpec)
    estimates: EstimateSuiteSpec = Field(default_factory=EstimateSuiteSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)
    base_dir: Optional[str] = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def check_operator_space(self):
        if self.operator.kind != "graph_laplacian" and self.space.kind != "grid":
            raise ValueError(f"{self.operator.kind} requires a grid space")
        return self

    @property
    def seed(self) -> int:
        return self.sampler.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        sampler = self.sampler.model_copy(update={"seed": seed})
        return self.model_copy(update={"sampler": sampler})

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        """Resolve a file referenced by the config relative to the config's directory."""
        if path is None:
            return None
        candidate = Path(path)
        if not candidate.is_absolute() and self.base_dir is not None:
            candidate = Path(self.base_dir) / candidate
        return candidate

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        try:
            data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot parse config {path}: {e}")
        data["base_dir"] = str(path.parent)
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(format_validation_error(e))


def format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "\n".join(lines)
