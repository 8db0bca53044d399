from fractions import Fraction

import numpy as np
import pytest

from prompt_transfer.analysis.efficiency import efficiency_report, efficiency_text, format_k
from prompt_transfer.analysis.similarity import prompt_embedding, render_heatmap, similarity_matrix
from prompt_transfer.modelling.numerics import Rng
from prompt_transfer.modelling.prompts import SharedPrompt, TaskFactors, compose, identity_factors


def test_format_k():
    assert format_k(77_668) == "77.6K"
    assert format_k(76_800) == "76.8K"
    assert format_k(Fraction(10_468)) == "10.5K"
    assert format_k(Fraction(10_449)) == "10.4K"
    assert format_k(88) == "88"
    assert format_k(999) == "999"
    assert format_k(Fraction(31, 2)) == "16"


def test_efficiency_full_size():
    rows = efficiency_report(100, 768, 8)
    assert [r.formatted for r in rows] == ["76.8K", "77.6K", "10.5K", "76.8K"]
    assert rows[1].count == 77_668
    text = efficiency_text(100, 768, 8)
    assert text.startswith("# param/task l=100 d=768 tau=8\n")
    assert "MPT single-task\t77,668\t77.6K" in text
    assert "10,468\t10.5K" in text


def test_efficiency_text_shows_exact_rationals():
    assert "15/2" not in efficiency_text(3, 5, 2)
    assert "31/2\t16" in efficiency_text(3, 5, 2)


def test_prompt_embedding_is_the_row_mean():
    rng = Rng(0)
    shared = SharedPrompt(rng.normal(1.0, (4, 6)))
    factors = TaskFactors("t", rng.normal(1.0, 4), rng.normal(1.0, 6))
    emb = prompt_embedding(shared, factors)
    assert emb.shape == (6,)
    np.testing.assert_allclose(emb, compose(shared, factors).mean(axis=0))
    same = prompt_embedding(shared, identity_factors("t", 4, 6))
    np.testing.assert_allclose(same, shared.matrix.mean(axis=0))


def test_similarity_matrix():
    sim = similarity_matrix({
        "a": np.array([1.0, 0.0]),
        "b": np.array([0.0, 2.0]),
        "c": np.array([-3.0, 0.0]),
        "d": np.array([1.0, 1.0]),
    })
    assert sim.task_ids == ["a", "b", "c", "d"]
    assert np.array_equal(np.diag(sim.entries), np.ones(4))
    assert np.array_equal(sim.entries, sim.entries.T)
    assert sim["a", "b"] == pytest.approx(0.0, abs=1e-15)
    assert sim["a", "c"] == pytest.approx(-1.0, abs=1e-15)
    assert sim["b", "d"] == pytest.approx(2 ** -0.5, abs=1e-15)
    assert np.all(np.abs(sim.entries) <= 1.0)
    lines = sim.to_text().splitlines()
    assert lines[0] == "a b c d"
    assert lines[1] == "1.0000 0.0000 -1.0000 0.7071"


def test_similarity_matrix_errors():
    with pytest.raises(ValueError, match=">= 2"):
        similarity_matrix({"a": np.ones(3)})
    with pytest.raises(ValueError, match="zero-norm"):
        similarity_matrix({"a": np.ones(3), "b": np.zeros(3)})


def test_similarity_is_symmetric_on_random_prompts():
    rng = Rng(4)
    shared = SharedPrompt(rng.normal(1.0, (5, 8)))
    embeddings = {
        str(i): prompt_embedding(shared, TaskFactors(str(i), rng.normal(1.0, 5), rng.normal(1.0, 8)))
        for i in range(5)
    }
    sim = similarity_matrix(embeddings)
    assert np.array_equal(sim.entries, sim.entries.T)
    assert np.all(np.abs(sim.entries) <= 1.0 + 1e-12)


def test_render_heatmap(tmp_path):
    sim = similarity_matrix({"a": np.array([1.0, 0.2]), "b": np.array([0.1, 1.0])})
    fn = tmp_path / "reports" / "similarity.png"
    render_heatmap(sim, str(fn))
    assert fn.read_bytes().startswith(b"\x89PNG")
    assert not (tmp_path / "reports" / "similarity.png.tmp").exists()
