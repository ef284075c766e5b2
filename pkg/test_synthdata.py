import itertools

import numpy as np
import pytest

from App.core.errors import DatasetParseError, MalformedPromptError, ResolutionError, UsageError, VocabularyError
from App.models.schemas import PATTERNS, Interpretation, TokenGrid
from App.services.synthdata import (
    downsample_lr,
    enumerate_interpretations,
    generate_ambiguous_benchmark,
    generate_benchmark_records,
    generate_dataset,
    generate_records,
    load_records,
    make_prompt,
    match_fractions,
    oracle_score,
    preference_score,
    render_scene,
)
from App.services.vocabulary import CLASS_COLORS, COLOR_NAMES, vocabulary

RED, ORANGE, BLUE, BLACK, WHITE = 0, 1, 4, 6, 7


def test_interpretations_of_class_and_color_words():
    warm = enumerate_interpretations(vocabulary.encode_prompt("warm", "stripes"))
    assert [(i.color, i.pattern) for i in warm] == [(0, "stripes"), (1, "stripes"), (2, "stripes")]
    assert len(enumerate_interpretations(vocabulary.encode_prompt("any", "solid"))) == 8
    red = make_prompt(vocabulary.encode_prompt("red", "checker"))
    assert not red.is_ambiguous
    assert red.interpretations == (Interpretation(color=RED, pattern="checker"),)


@pytest.mark.parametrize("tokens, position", [
    ([2, 2, 13, 0], 0),
    ([1, 13, 13, 0], 1),
    ([1, 2, 5, 0], 2),
    ([1, 2, 13, 16], 3),
    ([1, 2, 13], 3),
])
def test_malformed_prompt_reports_position(tokens, position):
    with pytest.raises(MalformedPromptError) as info:
        enumerate_interpretations(tokens)
    assert info.value.position == position


def test_render_scene_patterns():
    solid = render_scene(Interpretation(color=BLUE, pattern="solid"))
    assert set(solid.cells) == {BLUE}
    stripes = render_scene(Interpretation(color=RED, pattern="stripes"))
    assert all(stripes.at(0, c) == RED and stripes.at(1, c) == WHITE for c in range(8))
    checker = render_scene(Interpretation(color=ORANGE, pattern="checker"))
    assert checker.at(0, 0) == ORANGE and checker.at(0, 1) == WHITE and checker.at(1, 1) == ORANGE


def test_downsample_majority_and_ties():
    assert set(downsample_lr(render_scene(Interpretation(color=BLUE, pattern="solid"))).cells) == {BLUE}
    # every 2x2 block of stripes/checker is two color cells and two white: tie -> lowest id
    stripes = downsample_lr(render_scene(Interpretation(color=BLUE, pattern="stripes")))
    assert set(stripes.cells) == {BLUE}
    cells = [BLACK] * 64
    cells[0] = cells[1] = cells[8] = WHITE
    assert downsample_lr(TokenGrid(resolution="HR", cells=tuple(cells))).at(0, 0) == WHITE


def test_downsample_rejects_lr_grid():
    with pytest.raises(ResolutionError):
        downsample_lr(TokenGrid(resolution="LR", cells=(0,) * 16))


def test_oracle_score_examples():
    warm_solid = make_prompt(vocabulary.encode_prompt("warm", "solid"))
    assert oracle_score(render_scene(Interpretation(color=ORANGE, pattern="solid")), warm_solid) == 1.0
    assert oracle_score([BLACK] * 64, warm_solid) == 0.0
    red_solid = make_prompt(vocabulary.encode_prompt("red", "solid"))
    assert oracle_score(render_scene(Interpretation(color=RED, pattern="stripes")), red_solid) == 0.5


def test_patterns_of_one_color_never_cross_match():
    for color, (p, q) in itertools.product(range(len(COLOR_NAMES) - 1), itertools.permutations(PATTERNS, 2)):
        prompt = make_prompt(vocabulary.encode_prompt(COLOR_NAMES[color], q))
        assert oracle_score(render_scene(Interpretation(color=color, pattern=p)), prompt) <= 0.5


def test_interpretations_of_one_prompt_are_separable():
    for word, pattern in itertools.product(CLASS_COLORS, PATTERNS):
        prompt = make_prompt(vocabulary.encode_prompt(word, pattern))
        for interp in prompt.interpretations:
            fractions = match_fractions(render_scene(interp).cells, prompt)
            others = [f for i, f in zip(prompt.interpretations, fractions) if i != interp]
            assert max(others) <= 0.5


def test_preference_score():
    for color, pattern in itertools.product(range(8), PATTERNS):
        assert preference_score(render_scene(Interpretation(color=color, pattern=pattern))) == 1.0
    cells = np.arange(64) % 8
    assert preference_score(cells.tolist()) < 0.5


def test_records_follow_the_grammar():
    for record in generate_records(50, seed=1, ambiguous_fraction=0.5):
        spec = make_prompt(record.prompt)
        assert record.interpretation in spec.interpretations
        hr = render_scene(record.interpretation)
        assert record.hr == list(hr.cells)
        assert record.lr == list(downsample_lr(hr).cells)
        assert oracle_score(record.hr, spec) == 1.0


def test_ambiguous_fraction_extremes():
    assert not any(make_prompt(r.prompt).is_ambiguous for r in generate_records(40, 2, 0.0))
    assert all(make_prompt(r.prompt).is_ambiguous for r in generate_records(40, 2, 1.0))


def test_ambiguous_fraction_is_binomial():
    ambiguous = sum(make_prompt(r.prompt).is_ambiguous for r in generate_records(1000, 0, 0.5))
    assert 400 <= ambiguous <= 600


@pytest.mark.parametrize("n, fraction", [(0, 0.5), (10, -0.1), (10, 1.5)])
def test_generate_records_rejects_bad_arguments(n, fraction):
    with pytest.raises(UsageError) as e:
        generate_records(n, 0, fraction)
    assert e.value.exit_code == 1
    with pytest.raises(UsageError):
        generate_benchmark_records(0)


def test_dataset_file_is_deterministic(tmp_path):
    a = generate_dataset(30, 7, 0.5, tmp_path / "a.jsonl")
    b = generate_dataset(30, 7, 0.5, tmp_path / "b.jsonl")
    assert a.read_bytes() == b.read_bytes()
    header, records = load_records(a)
    assert header.kind == "dataset" and header.n == 30 and header.vocabulary_hash == vocabulary.hash
    assert len(records) == 30


def test_benchmark_prompts_are_ambiguous(tmp_path):
    path = generate_ambiguous_benchmark(20, seed=4, path=tmp_path / "bench.jsonl")
    header, records = load_records(path)
    assert header.kind == "benchmark"
    assert len(records) == 20
    for record in records:
        assert len(record.interpretations) >= 2
        assert list(make_prompt(record.prompt).interpretations) == record.interpretations


def test_load_records_reports_line(tmp_path):
    path = generate_dataset(5, 0, 0.5, tmp_path / "d.jsonl")
    lines = path.read_text().splitlines()
    lines[2] = '{"prompt": [1, 2, 3]}'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetParseError) as info:
        load_records(path)
    assert info.value.line == 3


def test_load_records_rejects_foreign_vocabulary(tmp_path):
    path = generate_dataset(2, 0, 0.5, tmp_path / "d.jsonl")
    path.write_text(path.read_text().replace(vocabulary.hash, "0" * 16, 1))
    with pytest.raises(DatasetParseError) as info:
        load_records(path)
    assert info.value.line == 1


def test_parse_text():
    assert vocabulary.parse_text("the red checker") == [1, 2, 15, 0]
    assert vocabulary.parse_text("a warm stripes image") == vocabulary.encode_prompt("warm", "stripes")
    with pytest.raises(VocabularyError):
        vocabulary.parse_text("red")
    with pytest.raises(VocabularyError):
        vocabulary.parse_text("teal solid")
