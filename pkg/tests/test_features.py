import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lookalike.customer_data import CustomerRecord, DataError
from lookalike.features import (
    FeatureContext,
    FeatureSchema,
    FeatureStats,
    WordVectorEncoder,
    WordVectorTable,
    embed_location,
    extract_features,
    fit_normalizer,
    infer_schema,
    load_word_vectors,
    save_word_vectors,
)
from lookalike.customer_data import synthetic_word_vectors

TABLE = WordVectorTable(2, {"san": np.array([1.0, 0.0]), "jose": np.array([0.0, 1.0])})


def test_load_word_vectors(tmp_path):
    p = tmp_path / "wv.txt"
    p.write_text("a 1.0 2.0\nb 3.0 4.0")
    t = load_word_vectors(p)
    assert t.dimension == 2 and len(t.entries) == 2
    np.testing.assert_array_equal(t.entries["b"], [3.0, 4.0])


def test_word_vector_errors(tmp_path):
    p = tmp_path / "wv.txt"
    p.write_text("a 1.0 2.0\nb 3.0 4.0\nc 1.0\n")
    with pytest.raises(DataError, match="line 3"):
        load_word_vectors(p)
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        load_word_vectors(p)
    p.write_text("a 1.0 x\n")
    with pytest.raises(DataError, match="line 1"):
        load_word_vectors(p)


def test_word_vector_roundtrip(tmp_path):
    t = synthetic_word_vectors(4, dim=8, rng_seed=3)
    save_word_vectors(t, tmp_path / "wv.txt")
    assert load_word_vectors(tmp_path / "wv.txt") == t


def test_embed_location_examples():
    np.testing.assert_array_equal(embed_location("San Jose", TABLE), [0.5, 0.5])
    np.testing.assert_array_equal(embed_location("QQQQQ", TABLE), [0.0, 0.0])
    np.testing.assert_array_equal(embed_location("", TABLE), [0.0, 0.0])
    np.testing.assert_array_equal(embed_location("san san", TABLE), [1.0, 0.0])


words = st.lists(st.sampled_from(["san", "jose", "main", "st", "ca", "95112"]), max_size=6)
seps = st.text(alphabet=" ,.-#/;", min_size=1, max_size=3)


@settings(max_examples=200, deadline=None)
@given(words, st.data())
def test_embed_location_case_and_punctuation(tokens, data):
    plain = " ".join(tokens)
    noisy = ""
    for tok in tokens:
        noisy += "".join(c.upper() if data.draw(st.booleans()) else c for c in tok)
        noisy += data.draw(seps)
    np.testing.assert_array_equal(embed_location(plain, TABLE), embed_location(noisy, TABLE))


def test_fit_normalizer_examples():
    schema = FeatureSchema(("x", "y"), ())
    s = fit_normalizer([CustomerRecord(0, dense_stats={"x": 5.0})], schema)
    assert s.std == (0.0, 0.0)
    s = fit_normalizer([CustomerRecord(0, dense_stats={"x": 1.0}), CustomerRecord(1, dense_stats={"x": 3.0})], schema)
    assert s.mean == (2.0, 0.0) and s.std == (1.0, 0.0)
    with pytest.raises(ValueError):
        fit_normalizer([], schema)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_fit_normalizer_order_invariant(values, rnd):
    schema = FeatureSchema(("x",), ())
    recs = [CustomerRecord(i, dense_stats={"x": v}) for i, v in enumerate(values)]
    a = fit_normalizer(recs, schema)
    rnd.shuffle(recs)
    b = fit_normalizer(recs, schema)
    assert a.mean == pytest.approx(b.mean, abs=1e-12)
    assert a.std == pytest.approx(b.std, abs=1e-12)
    assert min(a.std) >= 0


def test_layout_by_segment():
    schema = FeatureSchema(("orders", "gmv"), (("gender", ("f", "m", "u")),), 2)
    stats = FeatureStats((2.0, 10.0), (1.0, 0.0))
    rec = CustomerRecord(1, demographics={"gender": "m"}, dense_stats={"orders": 4.0, "gmv": 99.0},
                         location_text="San Jose")
    v = extract_features(rec, schema, stats, TABLE)
    assert v.shape == (7,) == (schema.total_width,)
    np.testing.assert_array_equal(v[:2], [2.0, 0.0])      # z-score, std 0 -> 0
    np.testing.assert_array_equal(v[2:5], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(v[5:], [0.5, 0.5])


def test_dense_at_mean_is_zero_and_oov_block():
    schema = FeatureSchema(("a",), (("edu", ("hs", "phd")),))
    stats = FeatureStats((3.0,), (2.0,))
    v = extract_features(CustomerRecord(0, demographics={"edu": "mba"}, dense_stats={"a": 3.0}), schema, stats)
    np.testing.assert_array_equal(v, [0.0, 0.0, 0.0])


def test_context_rejects_mismatched_encoder():
    schema = FeatureSchema(("a",), (), 3)
    with pytest.raises(ValueError):
        FeatureContext(schema, FeatureStats((0.0,), (1.0,)), WordVectorEncoder(TABLE))
    with pytest.raises(ValueError):
        FeatureSchema(("a", "a"), ())


def test_schema_json_roundtrip(tmp_path, small_universe):
    s = infer_schema(small_universe, 32)
    s.save(tmp_path / "s.json")
    assert FeatureSchema.load(tmp_path / "s.json") == s
    assert s.without_location().location_dim == 0


def test_universe_features_properties(small_universe):
    schema = infer_schema(small_universe, 32)
    table = synthetic_word_vectors(3, dim=32, rng_seed=0)
    ctx = FeatureContext(schema, fit_normalizer(small_universe, schema), WordVectorEncoder(table))
    X = ctx.matrix(small_universe)
    assert X.shape == (len(small_universe), schema.total_width)
    assert np.isfinite(X).all()
    col = len(schema.dense_fields)
    for _, vocab in schema.categorical_fields:
        block = X[:, col:col + len(vocab)]
        assert set(np.unique(block)) <= {0.0, 1.0}
        assert (block.sum(axis=1) <= 1).all()
        col += len(vocab)
    # Dense columns are standardized over the fitting population.
    dense = X[:, :len(schema.dense_fields)]
    np.testing.assert_allclose(dense.mean(axis=0), 0, atol=1e-9)
    for r, row in zip(small_universe[:20], X[:20]):
        np.testing.assert_array_equal(ctx.vector(r), row)
