from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List, Optional, Dict, Literal, Tuple

IMAGE_VOCAB_SIZE = 8
LR_SIDE = 4
HR_SIDE = 8
PATTERNS: Tuple[str, ...] = ("solid", "stripes", "checker")
FORMAT_VERSION = 1


class Interpretation(BaseModel):
    """One concrete (color, pattern) reading of a prompt."""
    model_config = {"frozen": True}

    color: int = Field(..., ge=0, lt=IMAGE_VOCAB_SIZE, description="Image token id")
    pattern: Literal["solid", "stripes", "checker"]

    @property
    def sort_key(self) -> Tuple[int, int]:
        return (self.color, PATTERNS.index(self.pattern))


class PromptSpec(BaseModel):
    model_config = {"frozen": True}

    tokens: Tuple[int, int, int, int]
    color_class: Tuple[int, ...] = Field(..., description="Concrete colors the prompt admits")
    pattern: Literal["solid", "stripes", "checker"]
    interpretations: Tuple[Interpretation, ...]

    @property
    def is_ambiguous(self) -> bool:
        return len(self.interpretations) >= 2

    @model_validator(mode="after")
    def check_interpretations(self) -> "PromptSpec":
        if len(self.interpretations) != len(self.color_class):
            raise ValueError("one interpretation per admissible color is required")
        return self


class TokenGrid(BaseModel):
    model_config = {"frozen": True}

    resolution: Literal["LR", "HR"]
    cells: Tuple[int, ...]

    @property
    def side(self) -> int:
        return LR_SIDE if self.resolution == "LR" else HR_SIDE

    def at(self, row: int, col: int) -> int:
        return self.cells[row * self.side + col]

    @model_validator(mode="after")
    def check_cells(self) -> "TokenGrid":
        expected = self.side * self.side
        if len(self.cells) != expected:
            raise ValueError(f"{self.resolution} grid needs {expected} cells, got {len(self.cells)}")
        if any(c < 0 or c >= IMAGE_VOCAB_SIZE for c in self.cells):
            raise ValueError("cell ids must lie in [0, 7]")
        return self


# File records

class FileHeader(BaseModel):
    format_version: int = FORMAT_VERSION
    vocabulary_hash: str
    kind: Literal["dataset", "benchmark"]
    n: int
    seed: int
    ambiguous_fraction: Optional[float] = None


class DatasetRecord(BaseModel):
    prompt: List[int] = Field(..., min_length=4, max_length=4)
    lr: List[int] = Field(..., min_length=16, max_length=16)
    hr: List[int] = Field(..., min_length=64, max_length=64)
    interpretation: Interpretation


class BenchmarkRecord(DatasetRecord):
    interpretations: List[Interpretation] = Field(..., min_length=2)


# Training / evaluation reports

class LikelihoodReport(BaseModel):
    log_p_lr: float
    log_p_hr: float
    log_p_total: float


class StepReport(BaseModel):
    step: int
    L_AR: float
    L_MAER: float
    L_KL: float
    L_total: float
    grad_norm: float
    realized_KL: float


class GradCheckEntry(BaseModel):
    loss: str
    parameter: str
    frozen: bool
    max_rel_error: float
    checked_entries: int
    tolerance: float
    passed: bool


class GradCheckReport(BaseModel):
    entries: List[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def max_error(self, loss: str) -> float:
        return max((e.max_rel_error for e in self.entries if e.loss == loss and not e.frozen), default=0.0)


class AlignmentReport(BaseModel):
    mean_score: float
    mean_preference: float
    chance_score: float
    scores: List[float]
    preferences: List[float]
    temperature: float
    seed: int


class PromptDiversity(BaseModel):
    prompt: List[int]
    labels: List[str]
    plausibility: List[float]
    distinct_clusters: int
    coverage: float
    n_interpretations: int


class DiversityReport(BaseModel):
    k: int
    prompts: List[PromptDiversity]
    mean_distinct_clusters: float
    mean_coverage: float
    mean_plausibility: float
    fraction_multi_cluster: float
    mean_mode_distinct_clusters: float
    mean_mode_plausibility: float
    notes: List[str] = []


class AblationRow(BaseModel):
    variant: Literal["baseline", "+MAER", "+ambiguity", "full"]
    use_maer: bool
    use_ambiguity: bool
    alignment_mean: Optional[float] = None
    alignment_std: Optional[float] = None
    preference_mean: Optional[float] = None
    nll_mean: Optional[float] = None
    nll_std: Optional[float] = None
    distinct_clusters_mean: Optional[float] = None
    coverage_mean: Optional[float] = None
    plausibility_mean: Optional[float] = None
    per_seed_alignment: Dict[int, float] = {}
    seed_count: int = 0
    failed_seeds: Dict[int, str] = {}

    @property
    def failed(self) -> bool:
        return self.seed_count == 0


class AblationResult(BaseModel):
    rows: List[AblationRow]
    seeds: List[int]
    full_beats_baseline: Dict[int, bool]
    notes: List[str] = []

    @field_validator("rows")
    @classmethod
    def four_rows(cls, rows: List[AblationRow]) -> List[AblationRow]:
        if len(rows) != 4:
            raise ValueError("an ablation has exactly four variant rows")
        return rows
