from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from conftest import micro_config
from eric.model import EricModel, quantize_state
from eric.probe import (PerturbationRecord, accuracy_by_position, accuracy_csv, chance_purity, cluster_purity,
                        mean_accuracy, mention_control, paired_sign_test, perturb_and_score, perturb_example,
                        perturbation_candidates, state_diagnostics)
from eric.rng import make_rng
from eric.synthetic import four_state_world, generate_synthetic_corpus


@pytest.fixture(scope="module")
def probe_corpus():
    return generate_synthetic_corpus(four_state_world(seed=11), 60)


def test_candidates_and_perturbation_keep_prefix(probe_corpus):
    examples, vocab = probe_corpus
    rng = make_rng(0, "t")
    n_cand = 0
    for ex in examples:
        for n, orig, rep in perturbation_candidates(ex, vocab.is_placeholder, rng):
            n_cand += 1
            s, e = ex.sentence_spans[n]
            before = {t for t in ex.output_ids[:s] if vocab.is_placeholder(t)}
            assert len(before) >= 2 and rep in before and rep != orig
            p = perturb_example(ex, n, rep, vocab.is_placeholder)
            assert bytes(str(p.output_ids[:s]), "utf8") == bytes(str(ex.output_ids[:s]), "utf8")
            diff = [i for i, (a, b) in enumerate(zip(p.output_ids, ex.output_ids)) if a != b]
            assert len(diff) == 1 and s <= diff[0] < e
            assert p.mentioned_entity[:n] == ex.mentioned_entity[:n]
    assert n_cand > 50


def test_sentences_with_one_prior_entity_are_skipped(probe_corpus):
    examples, vocab = probe_corpus
    for ex in examples[:20]:
        seen = set()
        eligible = {n for n, *_ in perturbation_candidates(ex, vocab.is_placeholder, make_rng(0, "t"))}
        for n, (s, e) in enumerate(ex.sentence_spans):
            if n in eligible:
                assert len(seen) >= 2
            seen |= {t for t in ex.output_ids[s:e] if vocab.is_placeholder(t)}


def test_untrained_models_score_at_chance(probe_corpus):
    examples, vocab = probe_corpus
    accs = []
    for seed in range(3):
        m = EricModel(micro_config(len(vocab), max_seq_len=128), seed=seed)
        records = perturb_and_score(m, examples, vocab, "gold", seed=0)
        accs.append(np.mean([r.correct for r in records]))
    assert abs(np.mean(accs) - 0.5) < 0.06


def test_probe_modes_and_determinism(probe_corpus):
    examples, vocab = probe_corpus
    m = EricModel(micro_config(len(vocab), max_seq_len=128), seed=0)
    a = perturb_and_score(m, examples[:15], vocab, "predicted", seed=1)
    b = perturb_and_score(m, examples[:15], vocab, "predicted", seed=1)
    assert a == b
    r = perturb_and_score(m, examples[:15], vocab, "random", seed=1)
    assert [(x.example_index, x.sentence_index, x.replacement) for x in r] == \
           [(x.example_index, x.sentence_index, x.replacement) for x in a]
    with pytest.raises(ValueError):
        perturb_and_score(m, examples[:2], vocab, "oracle")


def test_ablation_scores_with_zero_states(probe_corpus):
    examples, vocab = probe_corpus
    m = EricModel(micro_config(len(vocab), max_seq_len=128, state_injection=False, lambda2=0.0), seed=0)
    a = perturb_and_score(m, examples[:10], vocab, "predicted")
    b = perturb_and_score(m, examples[:10], vocab, "random")
    assert [x.logp_original for x in a] == [x.logp_original for x in b]


def _rec(n, correct, i=0, rep=9):
    return PerturbationRecord(i, n, 5, rep, 0.0 if correct else -1.0, -0.5)


def test_accuracy_aggregation_and_csv():
    recs = [_rec(2, True), _rec(2, False), _rec(3, True), _rec(3, True, i=1)]
    assert accuracy_by_position(recs) == [(2, 0.5, 2), (3, 1.0, 2)]
    assert mean_accuracy(recs) == 0.75
    assert accuracy_csv(recs) == "position,accuracy,count\n2,0.500000,2\n3,1.000000,2\n"


def test_sign_test_hand_values():
    a = [_rec(2, True, i=i) for i in range(8)] + [_rec(2, True, i=8)]
    b = [_rec(2, False, i=i) for i in range(8)] + [_rec(2, True, i=8)]
    res = paired_sign_test(a, b)
    assert (res["wins"], res["losses"]) == (8, 0)
    assert res["p_value"] == pytest.approx(0.5 ** 8)
    assert paired_sign_test(b, a)["p_value"] == pytest.approx(1.0)
    assert paired_sign_test(a, a) == {"wins": 0, "losses": 0, "p_value": 1.0}


def test_purity_definitions():
    assert cluster_purity([0, 0, 1, 1], [0, 0, 1, 0]) == 0.75
    assert chance_purity([0, 1, 2, 3] * 5, 4) == 0.25
    assert chance_purity([0, 0, 0, 1], 2) == 0.75
    rng = np.random.default_rng(0)
    gold = rng.integers(4, size=20000)
    assign = rng.integers(8, size=20000)
    assert abs(cluster_purity(assign, gold) - 0.25) < 0.02


def test_random_codebook_utilization():
    rng = np.random.default_rng(1)
    cb = rng.normal(size=(16, 8))
    cb /= np.linalg.norm(cb, axis=1, keepdims=True)
    e = rng.normal(size=(2000, 8))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    k, _ = quantize_state(e, cb)
    assert len(set(k.tolist())) == 16
    # chi-square against the Voronoi cell sizes is not uniform, so only check coverage and spread
    counts = np.bincount(k, minlength=16)
    assert counts.max() < 0.3 * len(k)
    assert stats.entropy(counts / counts.sum()) > 0.8 * np.log(16)


def test_state_diagnostics_shape(probe_corpus):
    examples, vocab = probe_corpus
    m = EricModel(micro_config(len(vocab), max_seq_len=128), seed=0)
    d = state_diagnostics(m, examples, 4)
    assert 1 <= d.utilization <= m.config.K
    assert d.n_assignments == sum(c for _, c in d.top_states) or len(d.top_states) == 10
    assert d.chance_purity <= d.purity <= 1.0
    assert set(d.to_dict()) >= {"utilization", "K", "purity", "chance_purity", "utilization_fraction"}


def test_mention_control_hand_example(vocab):
    s, e0, e1 = vocab.sent_id, vocab.placeholder_id(0), vocab.placeholder_id(1)
    w = 200
    ids = [s, e0, w, s, w, w, s, e1, w, s, e0, vocab.eos_id]
    res = mention_control([(ids, [0, None, 0, 1])], vocab)
    # sentence 3 predicted e0 but wrote e1; sentence 4 predicted e1 but wrote e0
    assert res == {"correct": 2, "total": 4, "accuracy": 0.5}
