import json

import numpy as np
import pytest

from lookalike.ann_index import (
    EmbeddingMatrix,
    brute_force_knn,
    build_ivf,
    load_embeddings,
    load_index,
    mixture_embeddings,
)
from lookalike.customer_data import CustomerRecord, DataError, TimeWindow
from lookalike.features import FeatureSchema, FeatureStats, fit_normalizer, infer_schema
from lookalike.model import MlpParams, ModelBundle, TrainConfig, init_params, save_model
from lookalike.pipeline import (
    DEFAULT_VARIANTS,
    ExpansionEngine,
    ExpansionRequest,
    ExpansionResult,
    TrainReport,
    VariantRun,
    expand,
    format_report,
    merge_hits,
    offline_stage,
    prepare_pairs,
    summarize_runs,
)
from lookalike.similarity import SimilarityMetric


@pytest.fixture(scope="module")
def model_file(tmp_path_factory, small_universe):
    schema = infer_schema(small_universe)
    stats = fit_normalizer(small_universe, schema)
    params = init_params(TrainConfig(embedding_dim=16, hidden_dims=(24,), rng_seed=1), schema.total_width)
    for _, b in params.layers:
        b += 0.05
    path = tmp_path_factory.mktemp("m") / "model.lkem"
    save_model(ModelBundle(params, schema, stats), path)
    return path


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory, small_universe, model_file):
    out = tmp_path_factory.mktemp("off")
    return offline_stage(small_universe, model_file, out, nlist=12)


def test_offline_shape_and_determinism(tmp_path, small_universe, model_file, artifacts):
    emb = load_embeddings(artifacts.embeddings_path)
    idx = load_index(artifacts.index_path)
    assert len(emb) == len(small_universe) - len(artifacts.skipped)
    assert int(idx.list_sizes().sum()) == len(emb)
    again = offline_stage(small_universe, model_file, tmp_path, nlist=12)
    assert again.embeddings_path.read_bytes() == artifacts.embeddings_path.read_bytes()
    assert again.index_path.read_bytes() == artifacts.index_path.read_bytes()


def test_offline_threads_identical(tmp_path, small_universe, model_file, artifacts):
    again = offline_stage(small_universe, model_file, tmp_path, nlist=12, threads=3)
    assert again.index_path.read_bytes() == artifacts.index_path.read_bytes()


def test_offline_missing_model_writes_nothing(tmp_path, small_universe):
    out = tmp_path / "out"
    with pytest.raises(OSError):
        offline_stage(small_universe, tmp_path / "nope.lkem", out)
    assert not out.exists()


def test_offline_skips_zero_embeddings(tmp_path):
    # Embedding = ReLU(z-scored order count) in both coordinates; below-mean customers get zero.
    recs = [CustomerRecord(i, dense_stats={"order_count": float(i)}) for i in range(20)]
    schema = FeatureSchema(("order_count",), ())
    stats = fit_normalizer(recs, schema)
    params = MlpParams([(np.array([[1.0]]), np.zeros(1)), (np.ones((2, 1)), np.zeros(2))])
    save_model(ModelBundle(params, schema, stats), tmp_path / "m.lkem")
    art = offline_stage(recs, tmp_path / "m.lkem", tmp_path, nlist=1)
    assert art.skipped == list(range(10))
    assert (tmp_path / "skipped.txt").read_text().split() == [str(i) for i in range(10)]
    assert sorted(load_embeddings(art.embeddings_path).ids.tolist()) == list(range(10, 20))


def engine_for(artifacts, universe, model_file):
    return ExpansionEngine.from_files(
        artifacts.index_path, artifacts.embeddings_path, model_file, universe
    )


def test_request_validation():
    with pytest.raises(ValueError):
        ExpansionRequest([])
    with pytest.raises(ValueError):
        ExpansionRequest([1, 1])
    with pytest.raises(ValueError):
        ExpansionRequest([1], output_size=0)
    assert ExpansionRequest([1], output_size=7).effective_k_per_seed == 7


def test_single_seed_excluded(artifacts, small_universe, model_file):
    eng = engine_for(artifacts, small_universe, model_file)
    seed = int(load_embeddings(artifacts.embeddings_path).ids[0])
    res = expand(ExpansionRequest([seed], output_size=20), eng)
    ids = [e.customer_id for e in res.entries]
    assert seed not in ids and len(ids) == 20 and len(set(ids)) == 20
    kept = expand(ExpansionRequest([seed], output_size=20, exclude_seeds=False), eng, nprobe=12)
    assert kept.entries[0].customer_id == seed and kept.entries[0].score == pytest.approx(1.0, abs=1e-6)


def test_result_ordering_and_monotone_prefix(artifacts, small_universe, model_file):
    eng = engine_for(artifacts, small_universe, model_file)
    seeds = [int(c) for c in load_embeddings(artifacts.embeddings_path).ids[:5]]
    small = expand(ExpansionRequest(seeds, output_size=30, k_per_seed=200), eng)
    big = expand(ExpansionRequest(seeds, output_size=90, k_per_seed=200), eng)
    keys = [(-e.score, e.customer_id) for e in big.entries]
    assert keys == sorted(keys)
    assert big.entries[:30] == small.entries
    assert not set(seeds) & {e.customer_id for e in big.entries}


def test_identical_seeds_merge_idempotent():
    m = EmbeddingMatrix(np.arange(6), [[1, 0], [1, 0], [0.9, 0.1], [0.5, 0.5], [0, 1], [-1, 0]])
    eng = ExpansionEngine(build_ivf(m, 2), m)
    both = expand(ExpansionRequest([0, 1], output_size=10), eng, nprobe=2)
    one = expand(ExpansionRequest([0], output_size=10), eng, nprobe=2)
    assert [(e.customer_id, e.score) for e in both.entries] == [
        (e.customer_id, e.score) for e in one.entries if e.customer_id != 1
    ]
    # Ties between seeds credit the lower seed id.
    assert all(e.best_seed_id == 0 for e in both.entries)


def test_merge_hits():
    from lookalike.ann_index import SearchHit as H

    best = merge_hits([7, 3], [[H(1, 0.5), H(2, 0.9)], [H(1, 0.5), H(2, 0.95)]])
    assert best == {1: (0.5, 3), 2: (0.95, 3)}


def test_filters_sound(artifacts, small_universe, model_file):
    eng = engine_for(artifacts, small_universe, model_file)
    seeds = [int(c) for c in load_embeddings(artifacts.embeddings_path).ids[:3]]
    gender = small_universe[0].demographics["gender"]
    res = expand(ExpansionRequest(seeds, output_size=50, attribute_filters=[("gender", (gender,))]), eng)
    by_id = {r.customer_id: r for r in small_universe}
    assert res.entries
    assert all(by_id[e.customer_id].demographics["gender"] == gender for e in res.entries)
    empty = expand(ExpansionRequest(seeds, attribute_filters=[("gender", ("nobody",))]), eng)
    assert empty.entries == [] and "note" in empty.metadata


def test_seed_by_record_when_no_stored_embedding(artifacts, small_universe, model_file):
    emb = load_embeddings(artifacts.embeddings_path)
    eng_stored = ExpansionEngine.from_files(artifacts.index_path, artifacts.embeddings_path, model_file)
    eng_model = ExpansionEngine.from_files(artifacts.index_path, None, model_file, small_universe)
    seeds = [int(c) for c in emb.ids[:4]]
    a = expand(ExpansionRequest(seeds, output_size=25), eng_stored)
    b = expand(ExpansionRequest(seeds, output_size=25), eng_model)
    assert [e.customer_id for e in a.entries] == [e.customer_id for e in b.entries]
    with pytest.raises(DataError, match="424242"):
        expand(ExpansionRequest([424242]), eng_stored)


def test_result_json_roundtrip_and_determinism(artifacts, small_universe, model_file):
    eng = engine_for(artifacts, small_universe, model_file)
    req = ExpansionRequest([int(load_embeddings(artifacts.embeddings_path).ids[2])], output_size=15)
    a, b = expand(req, eng).to_json(), expand(req, eng).to_json()
    assert a == b
    back = ExpansionResult.from_dict(json.loads(a))
    assert back.to_json() == a
    assert back.to_csv().splitlines()[0] == "customer_id,score,best_seed_id"
    timed = expand(req, eng, timing=True)
    assert timed.metadata["elapsed_ms"] >= 0


def test_merge_matches_brute_force_oracle_100k():
    data = mixture_embeddings(100_000, 128, rng_seed=11)
    idx = build_ivf(data, None, rng_seed=0, max_iters=3)
    eng = ExpansionEngine(idx, data)
    rng = np.random.default_rng(4)
    seeds = sorted(rng.choice(100_000, size=100, replace=False).tolist())
    res = expand(ExpansionRequest(seeds, output_size=1000), eng, nprobe=idx.nlist)
    k = 1000 + len(seeds)
    rows = data.row_of()
    oracle = merge_hits(seeds, [brute_force_knn(data.vectors[rows[s]], data, k) for s in seeds])
    want = sorted(
        ((sc, cid, s) for cid, (sc, s) in oracle.items() if cid not in set(seeds)),
        key=lambda t: (-t[0], t[1]),
    )[:1000]
    assert [e.customer_id for e in res.entries] == [w[1] for w in want]
    assert [e.best_seed_id for e in res.entries] == [w[2] for w in want]
    np.testing.assert_allclose([e.score for e in res.entries], [w[0] for w in want], atol=1e-6)


def test_prepare_pairs_split(small_universe):
    m = SimilarityMetric()
    split = prepare_pairs(small_universe, m, TimeWindow(0, 80), TimeWindow(80, 120), 300, 50, 0, 6)
    assert (len(split.train), len(split.val), len(split.test)) == (300, 50, 50)
    keys = [frozenset((p.id_a, p.id_b)) for p in split.train + split.val + split.test]
    assert len(set(keys)) == 400
    with pytest.raises(ValueError):
        prepare_pairs(small_universe, m, TimeWindow(0, 90), TimeWindow(80, 120), 10, 5, 0, 6)


def test_summary_baseline_is_100():
    runs = []
    for seed, maes in enumerate([(0.2, 0.18, 0.19, 0.17), (0.22, 0.2, 0.21, 0.2)]):
        for v, mae in zip(DEFAULT_VARIANTS, maes):
            runs.append(VariantRun(v, seed, TrainReport(test_mae=mae)))
    rows = summarize_runs(runs)
    assert len(rows) == 4
    assert rows[0]["relative_pct"] == 100.0
    assert rows[1]["test_mae"] == pytest.approx(0.19)
    assert rows[1]["relative_pct"] == pytest.approx(100 * 0.19 / 0.21)
    assert [r["hidden_layers"] for r in rows] == [2, 2, 3, 3]
    assert "100.0%" in format_report(rows)
