import numpy as np
import pytest

from skillforge.encoder import EncoderConfig, make_model
from skillforge.index import (
    DEFAULT_GAMMA_GRID,
    GammaSelection,
    IndexFormatError,
    RetrievalParams,
    SkillIndex,
    build_index,
    load_index,
    predict_posting,
    predict_sentence,
    query,
    save_index,
    serialize_index,
    tune_gamma,
)
from skillforge.sentence_filter import FilterConfig, train_filter
from skillforge.taxonomy import Skill, SkillTaxonomy


def unit_rows(rows):
    matrix = np.asarray(rows, dtype=np.float64)
    return (matrix / np.linalg.norm(matrix, axis=1, keepdims=True)).astype(np.float32)


HAND = SkillIndex(["s1", "s2", "s3"], np.array([[1, 0], [0, 1], [-1, 0]], dtype=np.float32))


# --- params and index validation -------------------------------------------------


def test_retrieval_params_defaults_and_validation():
    params = RetrievalParams()
    assert params.budget == 50
    assert params.threshold == -1.0
    with pytest.raises(ValueError):
        RetrievalParams(budget=0)


def test_index_validation():
    good = np.eye(3, dtype=np.float32)
    with pytest.raises(IndexFormatError, match="match"):
        SkillIndex(["a", "b"], good)
    with pytest.raises(IndexFormatError, match="duplicate"):
        SkillIndex(["a", "a", "b"], good)
    with pytest.raises(IndexFormatError, match="empty"):
        SkillIndex([], np.zeros((0, 3), dtype=np.float32))
    bad = good.copy()
    bad[0, 0] = np.nan
    with pytest.raises(IndexFormatError, match="finite"):
        SkillIndex(["a", "b", "c"], bad)
    with pytest.raises(IndexFormatError, match="unit-norm"):
        SkillIndex(["a", "b", "c"], good * 2.0)
    assert HAND.dim == 2 and len(HAND) == 3


# --- query --------------------------------------------------------------------------


def test_query_threshold_drops_low_similarity():
    matches = query(HAND, np.array([1.0, 0.0]), RetrievalParams(budget=2, threshold=0.5))
    assert matches == [("s1", 1.0)]


def test_query_permissive_threshold_keeps_budget():
    matches = query(HAND, np.array([1.0, 0.0]), RetrievalParams(budget=2, threshold=-2.0))
    assert matches == [("s1", 1.0), ("s2", 0.0)]


def test_query_threshold_boundary_is_inclusive():
    matches = query(HAND, np.array([1.0, 0.0]), RetrievalParams(budget=3, threshold=1.0))
    assert matches == [("s1", 1.0)]


def test_query_budget_binds_before_threshold():
    index = SkillIndex(["s1", "s2", "s3"], unit_rows([[1, 0], [0.8, 0.6], [0.6, 0.8]]))
    matches = query(index, np.array([1.0, 0.0]), RetrievalParams(budget=2, threshold=-2.0))
    assert [m[0] for m in matches] == ["s1", "s2"]


def test_query_ties_break_by_ascending_id():
    index = SkillIndex(["b", "a"], np.array([[1, 0], [1, 0]], dtype=np.float32))
    matches = query(index, np.array([1.0, 0.0]), RetrievalParams(budget=2))
    assert [m[0] for m in matches] == ["a", "b"]


def test_query_dim_mismatch():
    with pytest.raises(ValueError, match="dim"):
        query(HAND, np.array([1.0, 0.0, 0.0]))


def brute_force(index, vec, budget, threshold):
    sims = index.matrix.astype(np.float64) @ np.asarray(vec, dtype=np.float64)
    rows = sorted(zip(index.ids, sims), key=lambda r: (-r[1], r[0]))[:budget]
    return [(skill_id, sim) for skill_id, sim in rows if sim >= threshold]


def test_query_matches_brute_force_oracle():
    rng = np.random.default_rng(11)
    matrix = rng.normal(size=(100, 16))
    index = SkillIndex([f"s{i:03d}" for i in range(100)], unit_rows(matrix))
    for _ in range(20):
        vec = rng.normal(size=16)
        vec /= np.linalg.norm(vec)
        budget = int(rng.integers(1, 120))
        threshold = float(rng.uniform(-1, 1))
        got = query(index, vec, RetrievalParams(budget=budget, threshold=threshold))
        want = brute_force(index, vec, budget, threshold)
        assert [g[0] for g in got] == [w[0] for w in want]
        np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want], atol=1e-12)


def test_query_monotone_in_threshold_and_budget():
    rng = np.random.default_rng(5)
    index = SkillIndex([f"s{i:02d}" for i in range(30)], unit_rows(rng.normal(size=(30, 8))))
    vec = rng.normal(size=8)
    vec /= np.linalg.norm(vec)
    previous = None
    for threshold in (-1.0, -0.5, 0.0, 0.3, 0.8):
        ids = [m[0] for m in query(index, vec, RetrievalParams(budget=30, threshold=threshold))]
        if previous is not None:
            assert set(ids) <= set(previous)
        previous = ids
    smaller = query(index, vec, RetrievalParams(budget=5, threshold=-1.0))
    larger = query(index, vec, RetrievalParams(budget=12, threshold=-1.0))
    assert larger[:5] == smaller


# --- persistence ----------------------------------------------------------------------


def test_index_round_trip(tmp_path):
    index = SkillIndex(["技能一", "s2"], unit_rows([[3, 4], [1, 0]]), fingerprint="abc123")
    path = tmp_path / "index.bin"
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.ids == index.ids
    assert loaded.fingerprint == "abc123"
    np.testing.assert_array_equal(loaded.matrix, index.matrix)


def test_index_load_rejects_corruption(tmp_path):
    index = SkillIndex(["s1", "s2"], np.eye(2, dtype=np.float32))
    blob = serialize_index(index)
    path = tmp_path / "index.bin"

    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(IndexFormatError, match="magic"):
        load_index(path)

    import struct

    path.write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(IndexFormatError, match="version"):
        load_index(path)

    path.write_bytes(blob + b"\x00")
    with pytest.raises(IndexFormatError, match="trailing"):
        load_index(path)

    for cut in (3, 9, 15, len(blob) - 3):
        path.write_bytes(blob[:cut])
        with pytest.raises(IndexFormatError, match="truncated"):
            load_index(path)

    # Overwrite the last matrix float: the row is no longer unit-norm.
    path.write_bytes(blob[:-4] + struct.pack("<f", 5.0))
    with pytest.raises(IndexFormatError, match="unit-norm"):
        load_index(path)


def test_index_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_index(tmp_path / "absent.bin")


# --- model-backed prediction -----------------------------------------------------------


TAX = SkillTaxonomy(
    [
        Skill("A1", "python", "Writes python services and scripts.", "GA", "software"),
        Skill("A2", "sql", "Designs sql schemas and queries.", "GA", "software"),
        Skill("B1", "welding", "Performs mig and tig welding work.", "GB", "trades"),
    ]
)
TINY = EncoderConfig(hidden_size=8, lstm_hidden=8, attention_dim=8, embed_dim=8, max_len=64)


@pytest.fixture(scope="module")
def model():
    return make_model(TINY, [s.description for s in TAX])


@pytest.fixture(scope="module")
def index(model):
    return build_index(model, TAX)


def test_build_index_shape_and_fingerprint(model, index):
    assert index.ids == TAX.ids
    assert index.dim == TINY.embed_dim
    assert index.fingerprint == model.fingerprint()
    assert serialize_index(build_index(model, TAX)) == serialize_index(index)


def test_predict_sentence_echoed_description_hits_itself(model, index):
    prediction = predict_sentence(model, index, TAX.description_of("A2"))
    assert prediction.skills[0][0] == "A2"
    assert prediction.skills[0][1] == pytest.approx(1.0, abs=1e-5)


def test_predict_sentence_impossible_threshold_is_empty(model, index):
    prediction = predict_sentence(
        model, index, "anything", RetrievalParams(budget=3, threshold=1.1)
    )
    assert prediction.skills == ()


def test_predict_posting_unions_sentences(model, index):
    text = TAX.description_of("A1") + "。" + TAX.description_of("B1")
    prediction = predict_posting(None, model, index, text, params=RetrievalParams(budget=1))
    assert len(prediction.sentences) == 2
    assert prediction.skill_ids == {"A1", "B1"}
    sims = [sim for _, sim in prediction.ranked]
    assert sims == sorted(sims, reverse=True)
    assert prediction.top_k(1) == [prediction.ranked[0][0]]


def test_predict_posting_order_independent(model, index):
    first = TAX.description_of("A1") + "。" + TAX.description_of("B1")
    second = TAX.description_of("B1") + "。" + TAX.description_of("A1")
    params = RetrievalParams(budget=2)
    a = predict_posting(None, model, index, first, params=params)
    b = predict_posting(None, model, index, second, params=params)
    assert a.ranked == b.ranked


def test_predict_posting_duplicate_sentence_keeps_single_entry(model, index):
    text = TAX.description_of("A1") + "。" + TAX.description_of("A1")
    prediction = predict_posting(None, model, index, text, params=RetrievalParams(budget=1))
    ids = [skill_id for skill_id, _ in prediction.ranked]
    assert len(ids) == len(set(ids)) == 1


def test_predict_posting_empty_text(model, index):
    prediction = predict_posting(None, model, index, "")
    assert prediction.sentences == ()
    assert prediction.ranked == ()


def test_predict_posting_filter_drops_boilerplate(model, index):
    positives = [f"requires python sql skill {i}" for i in range(20)]
    negatives = [f"free lunch benefit perk {i}" for i in range(20)]
    filter_model = train_filter(positives, negatives, FilterConfig(epochs=12))
    text = "requires python sql skill work。free lunch benefit perk offer"
    # The tuned threshold hugs the training positives, so pin a looser one.
    filtered = predict_posting(filter_model, model, index, text, relevance_threshold=0.5)
    assert [s.text for s in filtered.sentences] == ["requires python sql skill work"]


# --- gamma tuning -------------------------------------------------------------------


def test_default_gamma_grid():
    assert len(DEFAULT_GAMMA_GRID) == 20
    assert DEFAULT_GAMMA_GRID[0] == 0.0
    assert DEFAULT_GAMMA_GRID[-1] == 0.95


FULL = [
    [("g1", 0.9), ("x", 0.55), ("y", 0.3)],
    [("g2", 0.8), ("z", 0.6)],
]
GOLDS = [frozenset({"g1"}), frozenset({"g2"})]


def cutoff_fn(gamma):
    return [[(s, v) for s, v in ranked if v >= gamma] for ranked in FULL]


def test_tune_gamma_picks_best_f1():
    selection = tune_gamma(cutoff_fn, GOLDS, grid=[0.0, 0.7, 0.95])
    assert selection == GammaSelection(gamma=0.7, f1=1.0, all_zero=False)


def test_tune_gamma_tie_prefers_smaller_gamma():
    selection = tune_gamma(lambda g: FULL, GOLDS, grid=[0.2, 0.1, 0.3])
    assert selection.gamma == 0.1  # grid is sorted internally; constant scores tie


def test_tune_gamma_single_value_grid():
    selection = tune_gamma(cutoff_fn, GOLDS, grid=[0.7])
    assert selection.gamma == 0.7 and selection.f1 == 1.0


def test_tune_gamma_all_zero_flags_and_falls_back():
    selection = tune_gamma(lambda g: [[], []], GOLDS, grid=[0.1, 0.2])
    assert selection == GammaSelection(gamma=0.1, f1=0.0, all_zero=True)


def test_tune_gamma_validation():
    with pytest.raises(ValueError, match="grid"):
        tune_gamma(cutoff_fn, GOLDS, grid=[])
    with pytest.raises(ValueError, match="postings"):
        tune_gamma(cutoff_fn, [], grid=[0.1])
    with pytest.raises(ValueError, match="misaligned"):
        tune_gamma(lambda g: [[]], GOLDS, grid=[0.1])
    with pytest.raises(ValueError, match="gold"):
        tune_gamma(lambda g: [[], []], [frozenset(), frozenset({"a"})], grid=[0.1])
