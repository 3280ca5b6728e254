import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfacon.data import group_by_anchor, load_manifest
from dfacon.detector import (
    build_index,
    index_from_vectors,
    load_index,
    pairwise_score,
    query,
    query_vector,
    save_index,
)
from dfacon.embedder import ProbePoint, make_encoder
from dfacon.errors import (
    ConfigurationError,
    DecodeError,
    DimensionMismatchError,
    StaleIndexError,
    ValidationError,
)


def full_sort_topk(vectors, ids, q, k):
    scores = [(float(np.clip(v @ q, -1, 1)), -i, ids[i]) for i, v in enumerate(vectors)]
    scores.sort(reverse=True)
    return [(aid, s) for s, _, aid in scores[:k]]


@pytest.fixture(scope="module")
def originals(synth_dir):
    return [(g.anchor_id, g.original_path) for g in group_by_anchor(load_manifest(synth_dir))]


def test_single_original_index(toy_handle, originals):
    assert len(build_index(originals[:1], toy_handle)) == 1


def test_rebuild_is_identical(toy_handle, originals):
    a = build_index(originals, toy_handle)
    b = build_index(originals, toy_handle)
    assert np.array_equal(a.vectors, b.vectors) and a.model_fingerprint == b.model_fingerprint


def test_duplicate_ids_rejected(toy_handle, originals):
    with pytest.raises(ValidationError, match="a00000"):
        build_index([originals[0], originals[0]], toy_handle)


def test_undecodable_original_named(toy_handle, tmp_path):
    (tmp_path / "x.png").write_text("nope")
    with pytest.raises(DecodeError, match="x.png"):
        build_index([("x", str(tmp_path / "x.png"))], toy_handle)


def test_dimension_mismatch(toy_handle, originals):
    index = build_index(originals, toy_handle, ProbePoint.ENCODER_OUTPUT)
    with pytest.raises(DimensionMismatchError):
        query_vector(index, np.ones(128), 0.5)


def test_self_query_is_infringing(toy_handle, originals):
    index = build_index(originals, toy_handle)
    v = query(index, originals[2][1], toy_handle, threshold=0.99, k=5)
    assert v.infringing and v.best_match == originals[2][0]
    assert v.best_score == pytest.approx(1.0, abs=1e-6)
    assert len(v.topk) == 5 and v.topk[0] == (v.best_match, v.best_score)


def test_orthogonal_entries():
    index = index_from_vectors(["A", "B"], np.eye(2))
    v = query_vector(index, [1.0, 0.0], threshold=0.5, k=2)
    assert v.topk == (("A", 1.0), ("B", 0.0))


def test_tie_at_threshold_counts():
    index = index_from_vectors(["A"], [[1.0, 0.0]])
    assert query_vector(index, [1.0, 0.0], threshold=1.0, k=1).infringing


def test_inpainted_forgery_finds_its_original(synth_dir, toy_handle):
    recs = load_manifest(synth_dir)
    forged = next(r for r in recs if r.attack.value == "inpainting")
    others = [g for g in group_by_anchor(recs) if g.anchor_id != forged.anchor_id][:2]
    entries = [(forged.anchor_id, forged.original_path)] + [(g.anchor_id, g.original_path) for g in others]
    index = build_index(entries, toy_handle)
    scores = index.vectors @ toy_handle.embed_paths([forged.candidate_path])[0]
    assert int(np.argmax(scores)) == 0  # brute-force cosine over the three entries
    v = query(index, forged.candidate_path, toy_handle, threshold=float(scores[0]), k=3)
    assert v.best_match == forged.anchor_id and v.infringing


def test_stale_index(toy_handle, originals):
    index = build_index(originals, toy_handle)
    other = make_encoder("toy_cnn", seed=123)
    with pytest.raises(StaleIndexError):
        query(index, originals[0][1], other, 0.5)


def test_argument_validation():
    index = index_from_vectors(["A", "B"], np.eye(2))
    with pytest.raises(ConfigurationError):
        query_vector(index, [1, 0], 0.5, k=3)
    with pytest.raises(ConfigurationError):
        query_vector(index, [1, 0], 1.5)
    with pytest.raises(ValidationError):
        query_vector(index_from_vectors([], np.zeros((0, 2))), [1, 0], 0.5)


def test_index_file_round_trip(tmp_path, toy_handle, originals):
    index = build_index(originals, toy_handle, ProbePoint.PROJECTION_OUTPUT)
    loaded = load_index(save_index(index, tmp_path / "idx.bin"))
    assert loaded.ids == index.ids and loaded.probe is ProbePoint.PROJECTION_OUTPUT
    assert loaded.model_fingerprint == index.model_fingerprint
    assert np.allclose(loaded.vectors, index.vectors, atol=1e-6)
    raw = (tmp_path / "idx.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:40])
    with pytest.raises(ValidationError):
        load_index(tmp_path / "bad.bin")


def test_pairwise_score_identity_and_symmetry(toy_handle, originals):
    a, b = originals[0][1], originals[1][1]
    assert pairwise_score(a, a, toy_handle) == pytest.approx(1.0, abs=1e-6)
    assert pairwise_score(a, b, toy_handle) == pytest.approx(pairwise_score(b, a, toy_handle), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(2, 8), st.integers(0, 2**31 - 1), st.data())
def test_topk_matches_full_sort(n, d, seed, data):
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(n, d))
    if data.draw(st.booleans()):  # force exact ties
        vectors[n // 2] = vectors[0]
    ids = [f"id{i}" for i in range(n)]
    index = index_from_vectors(ids, vectors)
    q = rng.normal(size=d)
    k = data.draw(st.integers(1, n))
    v = query_vector(index, q, 0.0, k)
    oracle = full_sort_topk(index.vectors, ids, q / np.linalg.norm(q), k)
    assert [a for a, _ in v.topk] == [a for a, _ in oracle]
    assert np.allclose([s for _, s in v.topk], [s for _, s in oracle])
    assert all(-1 - 1e-6 <= s <= 1 + 1e-6 for _, s in v.topk)
    assert v.infringing == (v.best_score >= v.threshold_used)
