import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillforge.checkpoint import save_checkpoint
from skillforge.sentence_filter import (
    SENTENCE_DELIMITERS,
    FilterConfig,
    FilterModel,
    FilterTrainingError,
    apply_filter,
    keyword_baseline,
    load_labeled_jsonl,
    save_labeled_jsonl,
    segment_posting,
    select_threshold,
    train_filter,
)


# --- segmentation ------------------------------------------------------------


def test_segment_cjk_mixed_terminators():
    assert segment_posting("负责开发。要求本科！") == ["负责开发", "要求本科"]


def test_segment_consecutive_delimiters():
    assert segment_posting("A?B。。C") == ["A", "B", "C"]


def test_segment_empty():
    assert segment_posting("") == []
    assert segment_posting("。！？") == []


def test_segment_no_delimiter_returns_whole_text():
    assert segment_posting("hello world") == ["hello world"]


def test_segment_keeps_unterminated_tail():
    assert segment_posting("第一句。第二句") == ["第一句", "第二句"]


def test_segment_drops_whitespace_only_segments():
    assert segment_posting("a。 。b") == ["a", "b"]


def test_segment_fullwidth_period_and_question():
    assert segment_posting("要求本科．熟悉Ｃ？好") == ["要求本科", "熟悉Ｃ", "好"]


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="ab要求。．.！!？?xy", max_size=60))
def test_segment_reconstruction(text):
    segments = segment_posting(text)
    for segment in segments:
        assert segment
        assert not any(d in segment for d in SENTENCE_DELIMITERS)
    stripped = "".join(c for c in text if c not in SENTENCE_DELIMITERS)
    assert "".join(segments) == stripped


# --- threshold selection -----------------------------------------------------


def test_select_threshold_prefers_high_recall_at_equal_precision():
    sel = select_threshold([0.9, 0.8, 0.6, 0.4], [1, 1, 1, 0], min_recall=0.66)
    assert sel.threshold == 0.6
    assert sel.precision == 1.0
    assert sel.recall == 1.0
    assert sel.met_constraint


def test_select_threshold_separable_full_recall():
    sel = select_threshold([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0], min_recall=1.0)
    assert sel.threshold == 0.8
    assert sel.precision == 1.0 and sel.recall == 1.0
    assert sel.met_constraint


def test_select_threshold_no_recall_floor():
    sel = select_threshold([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0], min_recall=0.0)
    assert sel.threshold == 0.8


def test_select_threshold_unattainable_floor_falls_back_to_max_recall():
    sel = select_threshold([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0], min_recall=1.5)
    assert not sel.met_constraint
    assert sel.recall == 1.0
    assert sel.threshold == 0.8


def test_select_threshold_needs_positives():
    with pytest.raises(ValueError, match="positive"):
        select_threshold([0.5, 0.4], [0, 0])


def test_select_threshold_shape_mismatch():
    with pytest.raises(ValueError, match="1-D"):
        select_threshold([0.5, 0.4], [1])


def _metrics_at(scores, labels, tau):
    kept = [s >= tau for s in scores]
    tp = sum(1 for k, l in zip(kept, labels) if k and l == 1)
    fp = sum(1 for k, l in zip(kept, labels) if k and l == 0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / sum(1 for l in labels if l == 1)
    return precision, recall


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
            st.sampled_from([0, 1]),
        ),
        min_size=1,
        max_size=12,
    ).filter(lambda rows: any(label for _, label in rows)),
    st.floats(min_value=0.0, max_value=1.0),
)
def test_select_threshold_is_optimal(rows, min_recall):
    scores = [s for s, _ in rows]
    labels = [l for _, l in rows]
    sel = select_threshold(scores, labels, min_recall=min_recall)
    candidates = sorted(set(scores) | {0.0})
    assert sel.threshold in candidates
    precision, recall = _metrics_at(scores, labels, sel.threshold)
    assert sel.precision == pytest.approx(precision, abs=1e-12)
    assert sel.recall == pytest.approx(recall, abs=1e-12)
    for tau in candidates:
        p, r = _metrics_at(scores, labels, tau)
        if sel.met_constraint:
            assert r < min_recall or (p, r, -tau) <= (sel.precision, sel.recall, -sel.threshold)
            assert sel.recall >= min_recall
        else:
            assert r < min_recall
            assert (r, p, -tau) <= (sel.recall, sel.precision, -sel.threshold)


# --- training ----------------------------------------------------------------


POSITIVES = [f"requires deep python and sql craft {i}" for i in range(30)]
NEGATIVES = [f"free lunch and gym benefits perk {i}" for i in range(30)]
FAST = FilterConfig(epochs=8)


def test_train_filter_separates_classes():
    model = train_filter(POSITIVES, NEGATIVES, FAST)
    predictions = model.predict(POSITIVES + NEGATIVES)
    truth = np.array([1] * len(POSITIVES) + [0] * len(NEGATIVES))
    assert (predictions == truth).mean() >= 0.95
    assert model.selection is not None
    assert model.selection.recall >= FAST.min_recall


def test_train_filter_identical_classes_is_chance():
    texts = [f"the same sentence number {i}" for i in range(12)]
    model = train_filter(texts, texts, FAST)
    predictions = model.predict(texts + texts)
    truth = np.array([1] * 12 + [0] * 12)
    assert abs((predictions == truth).mean() - 0.5) <= 0.1


def test_train_filter_deterministic():
    a = train_filter(POSITIVES, NEGATIVES, FAST)
    b = train_filter(POSITIVES, NEGATIVES, FAST)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.bias == b.bias
    assert a.threshold == b.threshold


def test_train_filter_requires_both_classes():
    with pytest.raises(FilterTrainingError):
        train_filter([], NEGATIVES, FAST)
    with pytest.raises(FilterTrainingError):
        train_filter(POSITIVES, [], FAST)


def test_filter_model_round_trip(tmp_path):
    model = train_filter(POSITIVES, NEGATIVES, FAST)
    path = tmp_path / "filter.ckpt"
    model.save(path)
    loaded = FilterModel.load(path)
    probe = POSITIVES[:3] + NEGATIVES[:3]
    # Weights travel as float32, so scores match to float32 precision.
    np.testing.assert_allclose(loaded.score(probe), model.score(probe), atol=1e-4)
    assert loaded.threshold == model.threshold
    assert loaded.config == model.config


def test_filter_model_load_rejects_wrong_kind(tmp_path):
    path = tmp_path / "other.ckpt"
    save_checkpoint(path, "biencoder", {}, {"w": np.zeros(3)})
    with pytest.raises(ValueError, match="biencoder"):
        FilterModel.load(path)


# --- application -------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    return train_filter(POSITIVES, NEGATIVES, FAST)


def test_apply_filter_zero_threshold_keeps_all(trained):
    sentences = POSITIVES[:2] + NEGATIVES[:2]
    assert apply_filter(trained, sentences, threshold=0.0) == sentences


def test_apply_filter_monotone_in_threshold(trained):
    sentences = POSITIVES[:5] + NEGATIVES[:5]
    previous = apply_filter(trained, sentences, threshold=0.0)
    for tau in (0.2, 0.4, 0.6, 0.8, 1.01):
        kept = apply_filter(trained, sentences, threshold=tau)
        assert set(kept) <= set(previous)
        # Order preservation: kept is a subsequence of the input.
        it = iter(sentences)
        assert all(s in it for s in kept)
        previous = kept
    assert apply_filter(trained, sentences, threshold=1.01) == []


def test_apply_filter_defaults_to_model_threshold(trained):
    sentences = POSITIVES[:3] + NEGATIVES[:3]
    assert apply_filter(trained, sentences) == apply_filter(
        trained, sentences, threshold=trained.threshold
    )
    assert apply_filter(trained, []) == []


def test_keyword_baseline():
    sentences = ["需要精通python开发", "五险一金待遇优厚", "熟悉sql调优"]
    assert keyword_baseline(sentences, ["python", "sql"]) == [1, 0, 1]
    assert keyword_baseline(sentences, []) == [0, 0, 0]
    assert keyword_baseline(sentences, ["", "python"]) == [1, 0, 0]


# --- labeled data io ---------------------------------------------------------


def test_labeled_jsonl_round_trip(tmp_path):
    rows = [("要求熟悉分布式系统", 1), ("地铁直达福利好", 0)]
    path = tmp_path / "labeled.jsonl"
    save_labeled_jsonl(rows, path)
    assert load_labeled_jsonl(path) == rows


def test_labeled_jsonl_rejects_bad_label(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"text": "x", "label": 2}\n', encoding="utf-8")
    with pytest.raises(ValueError, match="line 1"):
        load_labeled_jsonl(path)
