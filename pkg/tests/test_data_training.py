import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptable_adapters.adapters import AA, AAFocused, AdapterConfig, AdapterModel, Baseline
from adaptable_adapters.backbone import BackboneConfig, build_backbone
from adaptable_adapters.data import (NUM_RESERVED, PAD, SEP, Dataset, generate_synthetic_task, heldout_indices,
                                     load_tsv, majority_label, make_split, order_label, setting_label, tokenize)
from adaptable_adapters.training import TrainConfig, evaluate, matthews, train

TINY = BackboneConfig(num_layers=2, model_dim=16, num_heads=2, ffn_dim=16, vocab_size=128, max_seq_len=12)
TINY_ADAPTER = AdapterConfig(reduction_factor=4)


def _task(kind="keyword-topic", size=240, seed=0):
    return generate_synthetic_task(kind, size, vocab=128, seed=seed, max_seq_len=12)


# synthetic generators

@pytest.mark.parametrize("kind", ["keyword-topic", "order-pattern", "majority-token"])
def test_generator_deterministic_and_balanced(kind):
    a, b = _task(kind), _task(kind)
    assert a.ids.tobytes() == b.ids.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.fingerprint() == b.fingerprint()
    assert 0.45 <= a.labels.mean() <= 0.55
    assert a.ids.min() >= 0 and a.ids.max() < 128
    assert _task(kind, seed=1).fingerprint() != a.fingerprint()


def test_order_pattern_rule():
    d = _task("order-pattern")
    for i in range(len(d)):
        assert order_label(d.token_ids(i)) == d.labels[i]
    a, b = NUM_RESERVED, NUM_RESERVED + 1
    assert order_label([50, a, 60, b]) == 1
    assert order_label([50, b, 60, a]) == 0


def test_majority_token_rule():
    d = _task("majority-token")
    for i in range(len(d)):
        assert majority_label(d.token_ids(i)) == d.labels[i]
    c0, c1 = NUM_RESERVED, NUM_RESERVED + 4
    assert majority_label([c0] * 6 + [c1] * 2 + [90]) == 0


def test_keyword_topic_has_class_keyword():
    d = _task()
    for i in range(len(d)):
        base = NUM_RESERVED + 6 * int(d.labels[i])
        assert any(base <= t < base + 6 for t in d.token_ids(i))


def test_generator_errors():
    with pytest.raises(ValueError):
        generate_synthetic_task("keyword-topic", 100)
    with pytest.raises(ValueError):
        generate_synthetic_task("keyword-topic", 300, vocab=20)
    with pytest.raises(ValueError):
        generate_synthetic_task("parity", 300)


def test_dataset_validates_ranges():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4)), np.array([0, 2]), 2, "x")
    with pytest.raises(ValueError):
        Dataset(np.full((2, 4), 9), np.array([0, 1]), 2, "x", vocab_size=8)


# delimited text

def _write(tmp_path, text, name="d.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_tsv_identical_text_identical_ids(tmp_path):
    d = load_tsv(_write(tmp_path, "sentence\tlabel\nThe cat sat\tyes\nthe CAT sat\tno\n"), "sentence", "label")
    assert d.token_ids(0) == d.token_ids(1) == tokenize("the cat sat", 2048)
    assert all(NUM_RESERVED <= t < 2048 for t in d.token_ids(0))


def test_tsv_pairs_joined_with_sep(tmp_path):
    d = load_tsv(_write(tmp_path, "s1\ts2\tlabel\na b\tc\t1\n"), ["s1", "s2"], "label")
    assert d.token_ids(0) == tokenize("a b", 2048) + [SEP] + tokenize("c", 2048)


def test_tsv_label_first_appearance(tmp_path):
    d = load_tsv(_write(tmp_path, "sentence\tlabel\nx\tyes\ny\tno\nz\tyes\n"), "sentence", "label")
    assert d.num_classes == 2 and d.label_map == {"yes": 0, "no": 1}
    assert d.labels.tolist() == [0, 1, 0]


def test_tsv_csv_delimiter_and_truncation(tmp_path):
    words = " ".join(f"w{i}" for i in range(30))
    d = load_tsv(_write(tmp_path, f"text,y\n{words},a\n", "d.csv"), "text", "y", ",", max_seq_len=8)
    assert d.ids.shape == (1, 8) and PAD not in d.token_ids(0)


def test_tsv_missing_column_names_header(tmp_path):
    with pytest.raises(ValueError, match="sentence"):
        load_tsv(_write(tmp_path, "text\tlabel\nx\t1\n"), "sentence", "label")


def test_tsv_empty_file(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        load_tsv(_write(tmp_path, ""), "sentence", "label")
    with pytest.raises(ValueError):
        load_tsv(_write(tmp_path, "sentence\tlabel\n"), "sentence", "label")


# splits

def test_low_data_100_split():
    d = _task(size=600)
    s = make_split(d, 100, 42)
    assert len(s.train) == 75 and len(s.dev) == 25
    assert len(s.test) == 120


def test_full_split_of_1000_pool():
    d = _task(size=1250)
    s = make_split(d, None, 42)
    assert len(s.train) + len(s.dev) == 1000
    assert len(s.train) == 750 and len(s.dev) == 250


def test_split_same_seed_same_sets_and_fixed_test():
    d = _task(size=600)
    a, b = make_split(d, 100, 92), make_split(d, 100, 92)
    assert a == b
    c = make_split(d, 300, 111)
    assert c.test == a.test == tuple(heldout_indices(d).tolist())
    assert make_split(d, 100, 111).train != a.train


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([None, 100, 300]), st.integers(0, 10_000))
def test_split_disjoint_and_covering(n, seed):
    d = _task(size=500)
    s = make_split(d, n, seed)
    tr, dv, te = set(s.train), set(s.dev), set(s.test)
    assert not (tr & dv or tr & te or dv & te)
    if n is None:
        assert tr | dv | te == set(range(len(d)))
    else:
        assert len(tr) + len(dv) == n


def test_split_rejects_oversized_low_data():
    with pytest.raises(ValueError):
        make_split(_task(size=240), 500, 0)


def test_setting_labels():
    assert setting_label(None) == "full" and setting_label(300) == "n300"


# metrics

def test_metric_examples():
    assert evaluate([1, 0, 1], [1, 0, 1]) == 1.0
    assert evaluate([1, 0, 1], [1, 0, 1], "matthews") == 1.0
    assert evaluate([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5
    assert evaluate([1, 1, 1, 1], [1, 0, 1, 0], "matthews") == 0.0
    assert evaluate([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
    assert evaluate([1, 1, 0, 0], [1, 0, 1, 0], "matthews") == 0.0


def test_metric_errors():
    with pytest.raises(ValueError):
        evaluate([], [])
    with pytest.raises(ValueError):
        evaluate([1], [1, 0])
    with pytest.raises(ValueError):
        evaluate([1], [1], "f1")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_mcc_matches_binary_formula_and_bounds(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    tp = np.sum((p == 1) & (y == 1))
    tn = np.sum((p == 0) & (y == 0))
    fp = np.sum((p == 1) & (y == 0))
    fn = np.sum((p == 0) & (y == 1))
    den = math.sqrt(float((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)))
    expect = 0.0 if den == 0 else (tp * tn - fp * fn) / den
    got = matthews(p, y)
    assert got == pytest.approx(expect, abs=1e-12)
    assert -1 <= got <= 1
    assert 0 <= evaluate(p, y) <= 1


# training

@pytest.fixture(scope="module")
def tiny_encoder():
    return build_backbone(TINY)


def _train(encoder, variant, seed=42, n=100, epochs=3, batch_size=16, **kw):
    d = _task(size=300)
    model = AdapterModel(encoder, variant, TINY_ADAPTER, d.num_classes, seed, **kw)
    return train(model, d, make_split(d, n, seed), TrainConfig(epochs=epochs, batch_size=batch_size), seed), model


def test_training_deterministic(tiny_encoder):
    a, _ = _train(tiny_encoder, AA())
    b, _ = _train(tiny_encoder, AA())
    assert a.dev_metrics == b.dev_metrics and a.train_losses == b.train_losses
    assert abs(a.test_metric - b.test_metric) <= 1e-12
    assert a.rationals == b.rationals and a.switches == b.switches


def test_run_result_fields(tiny_encoder):
    r, model = _train(tiny_encoder, AA())
    assert r.status == "ok" and len(r.dev_metrics) == 3
    assert r.best_epoch == int(np.argmax(r.dev_metrics))  # argmax returns the first maximum
    assert r.selected_layers is not None and r.architecture["total_layers"] == 2
    assert set(r.rationals) == {"0", "1"} and set(r.switches) == {"0", "1"}
    assert r.trainable_param_count == sum(t.size for t in model.trainable_parameters())
    assert r.data_setting == "n100" and len(r.dataset_fingerprint) == 16
    assert r.wall_time > 0


def test_best_epoch_weights_restored(tiny_encoder):
    r, model = _train(tiny_encoder, Baseline(), epochs=4)
    d = _task(size=300)
    s = make_split(d, 100, 42)
    te = np.array(s.test)
    assert evaluate(model.predict(d.ids[te], d.mask[te]), d.labels[te]) == r.test_metric


def test_nothing_to_train(tiny_encoder):
    # 75 training rows in 3 equal batches, so the epoch-mean loss is the full-set loss each time
    r, model = _train(tiny_encoder, AAFocused(()), n=100, batch_size=25, freeze_head=True)
    assert r.trainable_param_count == 0
    assert len(set(r.dev_metrics)) == 1
    assert r.train_losses == pytest.approx([r.train_losses[0]] * 3, rel=1e-12)
    d = _task(size=300)
    te = np.array(make_split(d, 100, 42).test)
    fresh = AdapterModel(tiny_encoder, AAFocused(()), TINY_ADAPTER, 2, 42, freeze_head=True)
    assert r.test_metric == evaluate(fresh.predict(d.ids[te], d.mask[te]), d.labels[te])


def test_divergence_marks_run_failed(tiny_encoder):
    d = _task(size=300)
    model = AdapterModel(tiny_encoder, Baseline(), TINY_ADAPTER, 2, 42)
    model.head_b.values[:] = np.nan
    r = train(model, d, make_split(d, 100, 42), TrainConfig(epochs=2), 42)
    assert r.status == "failed" and "nan" in r.error


def test_variants_share_splits_for_a_seed(tiny_encoder):
    d = _task(size=300)
    assert make_split(d, 100, 42) == make_split(d, 100, 42)
