import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cifpt.data import CorpusSpec, SlotVocab, Utterance
from cifpt.evaluation import (
    BeamConfig,
    EntityPrediction,
    ParseStats,
    beam_search,
    corpus_wer,
    evaluate_model,
    greedy_decode,
    intent_accuracy,
    intent_chance_band,
    levenshtein,
    parse_slot_sequence,
    slu_f1,
    strict_f1,
    tags_to_entities,
    value_similarity,
    wer,
)
from cifpt.models import CifSluModel
from cifpt.verify import tiny_model_config

VOCAB = SlotVocab(30, 4)


class TableDecoder:
    """Next-token logits looked up from the full prefix (BOS excluded)."""

    bos_id = -1

    def __init__(self, table, eos_id=None, default=None):
        self.table, self.eos_id, self.default = table, eos_id, default

    def next_logits(self, prefixes, memory):
        return np.stack([np.asarray(self.table.get(tuple(int(t) for t in p[1:]), self.default), float)
                         for p in prefixes])


def _random_two_step(rng, v):
    table = {(): rng.normal(size=v)}
    for a in range(v):
        table[(a,)] = rng.normal(size=v) * 2
    return TableDecoder(table)


def _log_softmax(z):
    z = np.asarray(z, float)
    return z - z.max() - math.log(np.exp(z - z.max()).sum())


# -- beam search ----------------------------------------------------------
def test_width_one_equals_greedy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = 5
        table = {(): rng.normal(size=v)}
        for a, b in itertools.product(range(v), repeat=2):
            table[(a,)] = rng.normal(size=v)
            table[(a, b)] = rng.normal(size=v)
        dec = TableDecoder(table, eos_id=4, default=np.zeros(v))
        beam = beam_search(dec, None, BeamConfig(width=1, temperature=1.25, max_len=3))
        greedy = greedy_decode(dec, None, 3, temperature=1.25)
        assert beam == greedy


def test_greedy_output_is_temperature_invariant():
    dec = _random_two_step(np.random.default_rng(1), 6)
    outs = {tuple(greedy_decode(dec, None, 2, t).tokens) for t in (0.3, 1.0, 1.25, 4.0)}
    assert len(outs) == 1


@pytest.mark.parametrize("seed", range(10))
def test_full_width_matches_exhaustive_search(seed):
    v = 4
    dec = _random_two_step(np.random.default_rng(seed), v)
    temp = 1.25
    best = max(((a, b) for a in range(v) for b in range(v)),
               key=lambda s: _log_softmax(dec.table[()] / temp)[s[0]] + _log_softmax(dec.table[(s[0],)] / temp)[s[1]])
    score = _log_softmax(dec.table[()] / temp)[best[0]] + _log_softmax(dec.table[(best[0],)] / temp)[best[1]]
    res = beam_search(dec, None, BeamConfig(width=v, temperature=temp, max_len=2))
    assert tuple(res.tokens) == best
    assert res.score == pytest.approx(score, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_wider_beam_never_scores_lower_on_two_step_decoders(seed, v):
    dec = _random_two_step(np.random.default_rng(seed), v)
    scores = [beam_search(dec, None, BeamConfig(width=w, max_len=2)).score for w in range(1, v + 1)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))


def test_wider_beam_can_score_lower_on_deeper_decoders():
    # the wider beam keeps two children of token 1, crowding out the prefix [0, 0]
    # whose continuation is nearly certain
    table = {
        (): [0.0, -0.1, -30.0],
        (0,): [0.0, 0.0, 0.0],
        (1,): [0.0, 0.0, -30.0],
    }
    dec = TableDecoder(table, default=[0.0, 0.0, 0.0])
    dec.table.update({(0, b): [30.0, 0.0, 0.0] for b in range(3)})
    narrow = beam_search(dec, None, BeamConfig(width=1, temperature=1.0, max_len=3))
    wide = beam_search(dec, None, BeamConfig(width=2, temperature=1.0, max_len=3))
    assert narrow.tokens == [0, 0, 0]
    assert wide.score < narrow.score


def test_eos_retires_hypothesis_and_unfinished_is_flagged():
    dec = TableDecoder({(): [0.0, 5.0]}, eos_id=1, default=[0.0, 0.0])
    res = beam_search(dec, None, BeamConfig(width=2, max_len=4))
    assert res.tokens == [] and res.finished
    never = TableDecoder({}, eos_id=1, default=[5.0, -5.0])
    res = beam_search(never, None, BeamConfig(width=1, max_len=3))
    assert res.tokens == [0, 0, 0] and not res.finished
    assert not greedy_decode(never, None, 3).finished


def test_ties_break_by_lower_token_id():
    dec = TableDecoder({}, default=[1.0, 1.0, 1.0])
    assert beam_search(dec, None, BeamConfig(width=3, max_len=2)).tokens == [0, 0]


def test_beam_config_validation():
    with pytest.raises(ValueError):
        BeamConfig(width=0)
    with pytest.raises(ValueError):
        BeamConfig(temperature=0)


# -- slot parsing ---------------------------------------------------------
def test_parse_examples():
    date = VOCAB.type_id(1)
    assert parse_slot_sequence([VOCAB.sep, date, 2, 3, VOCAB.eos], VOCAB) == [EntityPrediction(1, (2, 3))]
    assert parse_slot_sequence([VOCAB.eos], VOCAB) == []
    stats = ParseStats()
    assert parse_slot_sequence([VOCAB.sep, date, VOCAB.eos], VOCAB, stats) == []
    assert stats.dropped == 1


def test_parse_drops_malformed_groups():
    stats = ParseStats()
    seq = [5, VOCAB.sep, 7, 8, VOCAB.sep, VOCAB.type_id(0), 9, VOCAB.sep, VOCAB.type_id(2), VOCAB.sep, VOCAB.eos]
    assert parse_slot_sequence(seq, VOCAB, stats) == [EntityPrediction(0, (9,))]
    assert stats.dropped == 4


def test_tags_to_entities():
    assert tags_to_entities([0, 2, 2, 1, 0], [10, 11, 12, 13, 14]) == [
        EntityPrediction(1, (11, 12)), EntityPrediction(0, (13,))]


# -- WER and accuracy -----------------------------------------------------
def test_wer_examples():
    assert wer([1, 2, 3], [1, 2, 3]) == 0.0
    assert wer([], [1, 2, 3]) == 1.0
    assert wer([1, 2, 9], [1, 2, 3]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        wer([1], [])
    assert corpus_wer([[1], [2, 2]], [[1, 5], [2, 2]]) == pytest.approx(1 / 4)


@settings(max_examples=100, deadline=None)
@given(*(st.lists(st.integers(0, 3), max_size=6) for _ in range(3)))
def test_edit_distance_is_a_metric(a, b, c):
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert levenshtein(a, b) == levenshtein(b, a)
    assert (levenshtein(a, b) == 0) == (a == b)


def test_intent_accuracy_examples():
    assert intent_accuracy([1, 2], [1, 2]) == 1.0
    assert intent_accuracy([0, 0], [1, 2]) == 0.0
    assert intent_accuracy([1, 2, 3, 0], [1, 2, 3, 4]) == 0.75
    with pytest.raises(ValueError):
        intent_accuracy([1], [1, 2])


# -- entity F1 ------------------------------------------------------------
def test_slu_f1_examples():
    gold = [[EntityPrediction(0, ("next", "friday"))]]
    assert slu_f1(gold, gold) == 1.0
    assert slu_f1([[]], gold) == 0.0
    partial = [[EntityPrediction(0, ("friday",))]]
    s = 0.5 * (1 - 1 / 2) + 0.5 * (1 - 5 / 11)
    assert value_similarity(partial[0][0], gold[0][0]) == pytest.approx(s, abs=1e-12)
    assert slu_f1(partial, gold) == pytest.approx(0.5227, abs=1e-4)
    assert slu_f1(partial, gold) == pytest.approx(s, abs=1e-12)
    assert strict_f1(partial, gold) == 0.0


def test_type_mismatch_gets_no_credit():
    assert slu_f1([[EntityPrediction(1, (3,))]], [[EntityPrediction(0, (3,))]]) == 0.0


def test_greedy_matching_prefers_best_pair():
    golds = [[EntityPrediction(0, (1, 2)), EntityPrediction(0, (5,))]]
    preds = [[EntityPrediction(0, (5,)), EntityPrediction(0, (1, 2))]]
    assert slu_f1(preds, golds) == 1.0 and strict_f1(preds, golds) == 1.0


_entity = st.builds(EntityPrediction, st.integers(0, 2), st.lists(st.integers(0, 6), min_size=1, max_size=3).map(tuple))
_corpus = st.lists(st.lists(_entity, max_size=3), min_size=1, max_size=4)


@settings(max_examples=100, deadline=None)
@given(_corpus, _corpus)
def test_partial_credit_only_adds(preds, golds):
    n = min(len(preds), len(golds))
    preds, golds = preds[:n], golds[:n]
    soft, hard = slu_f1(preds, golds), strict_f1(preds, golds)
    assert 0.0 <= hard <= soft + 1e-12 <= 1.0 + 1e-12
    assert slu_f1(golds, golds) == (1.0 if any(golds) else 0.0)


# -- model evaluation -----------------------------------------------------
def _tiny_eval_set(cfg, n=8):
    rng = np.random.default_rng(4)
    utts = []
    for i in range(n):
        tokens = [int(t) for t in rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 4)))]
        frames = rng.normal(size=(2 * len(tokens) + 4, cfg.frame_dim))
        utts.append(Utterance(f"e{i}", frames, tokens, int(rng.integers(cfg.intent_count)), [(0, 0, 1)]))
    return utts


def test_threaded_evaluation_equals_sequential():
    cfg = tiny_model_config(0)
    model = CifSluModel(cfg, np.random.default_rng(1))
    utts = _tiny_eval_set(cfg)
    beam = BeamConfig(width=2, max_len=4)
    one = evaluate_model(model, utts, beam, max_frames=40, workers=1)
    many = evaluate_model(model, utts, beam, max_frames=40, workers=3)
    assert one == many
    assert {"intent_accuracy", "slu_f1", "strict_f1", "wer", "dropped_slot_groups"} <= one.keys()
    with pytest.raises(ValueError):
        evaluate_model(model, utts, beam, workers=0)


def test_chance_band():
    lo, hi = intent_chance_band(200, 6)
    sd = math.sqrt(1 / 6 * 5 / 6 / 200)
    assert lo == pytest.approx(1 / 6 - 3 * sd) and hi == pytest.approx(1 / 6 + 3 * sd)
    assert CorpusSpec().intent_count == 6
