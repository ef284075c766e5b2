"""
Procedural scene grammar: prompts, ground-truth token grids, the alignment
oracle and the ambiguous-prompt benchmark.

Everything here is a pure function of its arguments. Per-record randomness
comes from numpy Generators seeded by (seed, index), so records can be
produced in any order or in parallel and still match byte for byte.
"""
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np

from App.core.errors import DatasetParseError, OutputPathError, ResolutionError, UsageError
from App.models.schemas import (
    HR_SIDE,
    LR_SIDE,
    PATTERNS,
    BenchmarkRecord,
    DatasetRecord,
    FileHeader,
    Interpretation,
    PromptSpec,
    TokenGrid,
)
from App.services.vocabulary import CLASS_COLORS, COLOR_NAMES, vocabulary

logger = logging.getLogger(__name__)

WHITE = COLOR_NAMES.index("white")

Record = Union[DatasetRecord, BenchmarkRecord]


def enumerate_interpretations(tokens: Sequence[int]) -> Tuple[Interpretation, ...]:
    """All (admissible color, prompt pattern) pairs, sorted by color id."""
    vocabulary.validate_prompt(tokens)
    pattern = vocabulary.prompt_tokens[int(tokens[2])]
    colors = vocabulary.admissible_colors(int(tokens[1]))
    return tuple(Interpretation(color=c, pattern=pattern) for c in sorted(colors))


@lru_cache(maxsize=None)
def _prompt_spec(tokens: Tuple[int, int, int, int]) -> PromptSpec:
    interpretations = enumerate_interpretations(tokens)
    return PromptSpec(
        tokens=tokens,
        color_class=tuple(i.color for i in interpretations),
        pattern=interpretations[0].pattern,
        interpretations=interpretations,
    )


def make_prompt(tokens: Sequence[int]) -> PromptSpec:
    return _prompt_spec(tuple(int(t) for t in tokens))


@lru_cache(maxsize=None)
def _render_cells(color: int, pattern: str) -> Tuple[int, ...]:
    cells = []
    for row in range(HR_SIDE):
        for col in range(HR_SIDE):
            if pattern == "solid":
                on = True
            elif pattern == "stripes":
                on = row % 2 == 0
            else:
                on = (row + col) % 2 == 0
            cells.append(color if on else WHITE)
    return tuple(cells)


def render_scene(interp: Interpretation) -> TokenGrid:
    return TokenGrid(resolution="HR", cells=_render_cells(interp.color, interp.pattern))


def downsample_lr(hr: TokenGrid) -> TokenGrid:
    """
    Majority vote over each 2x2 HR block; ties go to the lowest token id.
    """
    if hr.resolution != "HR":
        raise ResolutionError(f"downsample_lr expects an HR grid, got {hr.resolution}")
    grid = np.asarray(hr.cells, dtype=np.int64).reshape(HR_SIDE, HR_SIDE)
    blocks = grid.reshape(LR_SIDE, 2, LR_SIDE, 2).transpose(0, 2, 1, 3).reshape(LR_SIDE * LR_SIDE, 4)
    counts = np.stack([np.bincount(b, minlength=len(COLOR_NAMES)) for b in blocks])
    # argmax returns the first maximum, i.e. the lowest id on ties
    return TokenGrid(resolution="LR", cells=tuple(int(v) for v in counts.argmax(axis=1)))


def match_fractions(hr_cells: Sequence[int], prompt: PromptSpec) -> np.ndarray:
    """Per-interpretation fraction of cells equal to its rendering."""
    cells = np.asarray(hr_cells, dtype=np.int64)
    references = np.array([_render_cells(i.color, i.pattern) for i in prompt.interpretations], dtype=np.int64)
    return (references == cells[None, :]).mean(axis=1)


def oracle_score(hr: Union[TokenGrid, Sequence[int]], prompt: PromptSpec) -> float:
    cells = hr.cells if isinstance(hr, TokenGrid) else hr
    return float(match_fractions(cells, prompt).max())


def preference_score(hr: Union[TokenGrid, Sequence[int]]) -> float:
    """
    Prompt-free well-formedness score: the fraction of 2x2 HR blocks whose
    content could come from some single-color rendering of any pattern.
    """
    cells = hr.cells if isinstance(hr, TokenGrid) else hr
    grid = np.asarray(cells, dtype=np.int64).reshape(HR_SIDE, HR_SIDE)
    good = 0
    for r in range(0, HR_SIDE, 2):
        for c in range(0, HR_SIDE, 2):
            block = grid[r:r + 2, c:c + 2]
            good += int(any(
                np.array_equal(block, np.asarray(_render_cells(color, pattern)).reshape(HR_SIDE, HR_SIDE)[r:r + 2, c:c + 2])
                for color in range(len(COLOR_NAMES))
                for pattern in PATTERNS
            ))
    return good / (LR_SIDE * LR_SIDE)


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _draw_record(rng: np.random.Generator, ambiguous: bool) -> Tuple[PromptSpec, Interpretation]:
    pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    if ambiguous:
        classes = tuple(CLASS_COLORS)
        word = classes[int(rng.integers(len(classes)))]
    else:
        word = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
    prompt = make_prompt(vocabulary.encode_prompt(word, pattern))
    interp = prompt.interpretations[int(rng.integers(len(prompt.interpretations)))]
    return prompt, interp


def _record_for(prompt: PromptSpec, interp: Interpretation, with_interpretations: bool) -> Record:
    hr = render_scene(interp)
    fields = dict(
        prompt=list(prompt.tokens),
        lr=list(downsample_lr(hr).cells),
        hr=list(hr.cells),
        interpretation=interp,
    )
    if with_interpretations:
        return BenchmarkRecord(interpretations=list(prompt.interpretations), **fields)
    return DatasetRecord(**fields)


def generate_records(n: int, seed: int, ambiguous_fraction: float) -> List[DatasetRecord]:
    if n < 1:
        raise UsageError("n must be >= 1")
    if not 0.0 <= ambiguous_fraction <= 1.0:
        raise UsageError("ambiguous_fraction must lie in [0, 1]")
    records = []
    for index in range(n):
        rng = _record_rng(seed, index)
        ambiguous = bool(rng.random() < ambiguous_fraction)
        records.append(_record_for(*_draw_record(rng, ambiguous), with_interpretations=False))
    return records


def generate_benchmark_records(n: int = 200, seed: int = 0) -> List[BenchmarkRecord]:
    if n < 1:
        raise UsageError("n must be >= 1")
    return [
        _record_for(*_draw_record(_record_rng(seed, index), ambiguous=True), with_interpretations=True)
        for index in range(n)
    ]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_records(path: Union[str, Path], header: FileHeader, records: Sequence[Record]) -> Path:
    path = Path(path)
    lines = [_dumps(header.model_dump(exclude_none=True))]
    lines.extend(_dumps(r.model_dump()) for r in records)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise OutputPathError(path, e.strerror or str(e))
    logger.info("Wrote %d %s records to %s", len(records), header.kind, path)
    return path


def generate_dataset(n: int, seed: int, ambiguous_fraction: float, path: Union[str, Path]) -> Path:
    """
    Write n training records (plus a header line) to a JSONL file.

    Args:
        n: number of records
        seed: base seed, combined with each record index
        ambiguous_fraction: probability that a record's prompt uses a class word
        path: output file

    Returns:
        Path: the written file
    """
    records = generate_records(n, seed, ambiguous_fraction)
    header = FileHeader(vocabulary_hash=vocabulary.hash, kind="dataset", n=n, seed=seed,
                        ambiguous_fraction=ambiguous_fraction)
    return write_records(path, header, records)


def generate_ambiguous_benchmark(n: int = 200, seed: int = 0, path: Union[str, Path] = "benchmark.jsonl") -> Path:
    records = generate_benchmark_records(n, seed)
    header = FileHeader(vocabulary_hash=vocabulary.hash, kind="benchmark", n=n, seed=seed)
    return write_records(path, header, records)


def _iter_lines(path: Path) -> Iterator[Tuple[int, str]]:
    try:
        with path.open() as fh:
            for number, line in enumerate(fh, start=1):
                if line.strip():
                    yield number, line
    except FileNotFoundError:
        raise DatasetParseError(path, 0, "file does not exist")


def load_records(path: Union[str, Path]) -> Tuple[FileHeader, List[Record]]:
    """
    Parse a dataset or benchmark file, validating the header against the
    current vocabulary and every record against its schema.
    """
    path = Path(path)
    header = None
    records: List[Record] = []
    for number, line in _iter_lines(path):
        try:
            obj = json.loads(line)
            if header is None:
                header = FileHeader.model_validate(obj)
                if header.format_version != 1:
                    raise ValueError(f"unsupported format_version {header.format_version}")
                if header.vocabulary_hash != vocabulary.hash:
                    raise ValueError("vocabulary hash does not match this build")
                continue
            model = BenchmarkRecord if header.kind == "benchmark" else DatasetRecord
            record = model.model_validate(obj)
            make_prompt(record.prompt)
        except DatasetParseError:
            raise
        except Exception as e:
            raise DatasetParseError(path, number, str(e).splitlines()[0])
        records.append(record)
    if header is None:
        raise DatasetParseError(path, 1, "missing header line")
    return header, records
