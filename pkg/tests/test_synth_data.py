import numpy as np
import pandas as pd
import pytest

from engines.synth_data import (
    CLASS_WORDS,
    MAX_DETAIL,
    MODIFIER_WORDS,
    VOCABULARY,
    build_world,
    detail_level,
    encode_prompt,
    export_dataset_csv,
    generate_dataset,
    prompt_length_scores,
)
from errors import ContractViolation


@pytest.fixture
def world():
    return build_world(data_dim=2, embed_dim=6)


def test_vocabulary():
    assert len(VOCABULARY) == 64
    assert len(set(VOCABULARY)) == 64
    assert len(CLASS_WORDS) == 8


def test_world_is_fixed():
    a, b = build_world(3, 5), build_world(3, 5)
    np.testing.assert_array_equal(a.embedding_table, b.embedding_table)
    assert a.embedding_table.shape == (64, 5)


class TestEncoder:
    def test_mean_of_rows(self, world):
        z = encode_prompt(("ring", "red"), world)
        expected = (world.embedding_table[VOCABULARY.index("ring")] + world.embedding_table[VOCABULARY.index("red")]) / 2
        np.testing.assert_allclose(z, expected)

    def test_unknown_token(self, world):
        with pytest.raises(ContractViolation, match="unicorn"):
            encode_prompt(("ring", "unicorn"), world)

    def test_empty_prompt(self, world):
        with pytest.raises(ContractViolation):
            encode_prompt((), world)

    def test_detail_level_caps(self):
        assert detail_level(("star",)) == 0
        assert detail_level(("star", *MODIFIER_WORDS[:5])) == MAX_DETAIL


class TestDataset:
    def test_levels_balanced(self, world):
        data = generate_dataset(103, seed=0, world=world)
        counts = np.bincount(data.levels, minlength=4)
        assert counts.max() - counts.min() <= 1
        assert data.x0.shape == (103, 2)
        assert data.embeddings.shape == (103, 6)

    def test_prompt_structure(self, world):
        data = generate_dataset(40, seed=1, world=world)
        for prompt in data.prompts:
            assert prompt.tokens[0] == CLASS_WORDS[prompt.class_id]
            assert len(prompt.tokens) == 1 + prompt.detail_level
            assert len(set(prompt.tokens)) == len(prompt.tokens)

    def test_prompt_length_scores(self, world):
        data = generate_dataset(40, seed=2, world=world)
        scores = prompt_length_scores(data.prompts)
        np.testing.assert_allclose(scores, data.levels / MAX_DETAIL)
        assert scores.min() == 0.0 and scores.max() == 1.0

    def test_reproducible_and_named(self, world):
        a = generate_dataset(20, seed=4, world=world, name="train")
        b = generate_dataset(20, seed=4, world=world, name="train")
        c = generate_dataset(20, seed=4, world=world, name="eval")
        np.testing.assert_array_equal(a.x0, b.x0)
        assert not np.array_equal(a.x0, c.x0)

    def test_richer_prompts_are_tighter(self, world):
        stds = [world.conditional_std(level) for level in range(MAX_DETAIL + 1)]
        assert all(x > y for x, y in zip(stds, stds[1:]))

    def test_samples_follow_conditional_law(self, world):
        data = generate_dataset(4000, seed=2, world=world)
        mask = (data.class_ids == 0) & (data.levels == 3)
        spread = data.x0[mask] - world.conditional_mean(0, 3)
        assert abs(spread.std() - world.conditional_std(3)) < 0.05

    def test_rejects_empty(self, world):
        with pytest.raises(ContractViolation):
            generate_dataset(0, seed=0, world=world)

    def test_subset(self, world):
        data = generate_dataset(10, seed=0, world=world)
        part = data.subset([2, 5])
        assert len(part) == 2
        np.testing.assert_array_equal(part.x0[1], data.x0[5])


def test_csv_export(tmp_path, world):
    data = generate_dataset(8, seed=0, world=world)
    path = export_dataset_csv(data, tmp_path / "out" / "data.csv", qualities=np.linspace(0, 1, 8))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["prompt", "detail_level", "class_id", "quality", "x0", "x1"]
    assert frame["quality"].iloc[-1] == pytest.approx(1.0)
    assert frame["prompt"].iloc[0] == data.prompts[0].text
