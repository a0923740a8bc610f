"""Decoding and metrics: beam search, slot parsing, WER, intent accuracy, entity F1."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .data import Batch, SlotVocab, Utterance, batchify, word_surface


# -- beam search ----------------------------------------------------------
class StepDecoder(Protocol):
    bos_id: int
    eos_id: int | None

    def next_logits(self, prefixes: np.ndarray, memory) -> np.ndarray:
        """``(H, t)`` prefixes (BOS first) -> ``(H, V)`` next-token logits."""


@dataclass
class BeamConfig:
    width: int = 10
    temperature: float = 1.25
    max_len: int = 16
    length_norm: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")


@dataclass
class BeamResult:
    tokens: list[int]
    score: float
    finished: bool   # False when max_len was reached without an EOS


def _log_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _final_score(score: float, length: int, length_norm: bool) -> float:
    return score / max(length, 1) if length_norm else score


def beam_search(decoder: StepDecoder, memory, cfg: BeamConfig) -> BeamResult:
    """Beam search over temperature-scaled log-probabilities.

    Candidates are ranked by score, then token id, then the insertion order
    of the hypothesis they extend. Hypotheses that emit EOS leave the beam.
    """
    eos = decoder.eos_id
    live = [[decoder.bos_id]]
    live_scores = np.zeros(1)
    done: list[tuple[float, list[int]]] = []
    for _ in range(cfg.max_len):
        logp = _log_probs(np.asarray(decoder.next_logits(np.array(live, dtype=np.int64), memory)),
                          cfg.temperature)
        h, v = logp.shape
        cand = (live_scores[:, None] + logp).ravel()
        hyp_idx = np.repeat(np.arange(h), v)
        tok_idx = np.tile(np.arange(v), h)
        order = np.lexsort((hyp_idx, tok_idx, -cand))[: cfg.width]
        nxt, nxt_scores = [], []
        for j in order:
            seq = live[hyp_idx[j]] + [int(tok_idx[j])]
            if eos is not None and tok_idx[j] == eos:
                done.append((float(cand[j]), seq))
            else:
                nxt.append(seq)
                nxt_scores.append(cand[j])
        if not nxt:
            break
        live, live_scores = nxt, np.array(nxt_scores)
        if done and not cfg.length_norm and max(s for s, _ in done) >= live_scores.max():
            break   # log-probabilities only lower a live score
    if done:
        best = max(done, key=lambda d: _final_score(d[0], len(d[1]) - 1, cfg.length_norm))
        return BeamResult(best[1][1:-1], _final_score(best[0], len(best[1]) - 1, cfg.length_norm), True)
    i = int(np.argmax([_final_score(s, len(q) - 1, cfg.length_norm) for s, q in zip(live_scores, live)]))
    seq = live[i][1:]
    finished = eos is None
    return BeamResult(seq, _final_score(float(live_scores[i]), len(seq), cfg.length_norm), finished)


def greedy_decode(decoder: StepDecoder, memory, max_len: int, temperature: float = 1.0) -> BeamResult:
    """Argmax decoding; the score uses the same temperature-scaled log-probabilities as the beam."""
    seq = [decoder.bos_id]
    score = 0.0
    for _ in range(max_len):
        logp = _log_probs(np.asarray(decoder.next_logits(np.array([seq], dtype=np.int64), memory)),
                          temperature)[0]
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        seq.append(tok)
        if decoder.eos_id is not None and tok == decoder.eos_id:
            return BeamResult(seq[1:-1], score, True)
    return BeamResult(seq[1:], score, decoder.eos_id is None)


# -- slot strings ---------------------------------------------------------
@dataclass(frozen=True)
class EntityPrediction:
    type_id: int
    value: tuple

    def __post_init__(self):
        if len(self.value) == 0:
            raise ValueError("entity value must be non-empty")

    def words(self) -> list[str]:
        return [v if isinstance(v, str) else word_surface(int(v)) for v in self.value]


@dataclass
class ParseStats:
    dropped: int = 0


def parse_slot_sequence(tokens: Sequence[int], vocab: SlotVocab, stats: ParseStats | None = None
                        ) -> list[EntityPrediction]:
    """Split ``SEP TYPE value... SEP TYPE value... EOS`` into entities.

    Malformed groups (unknown type token, empty value, non-word value
    tokens, or stray tokens before the first SEP) are dropped and counted
    in ``stats``.
    """
    stats = ParseStats() if stats is None else stats
    groups: list[list[int]] = []
    lead: list[int] = []
    for tok in tokens:
        tok = int(tok)
        if tok == vocab.eos:
            break
        if tok == vocab.sep:
            groups.append([])
        elif groups:
            groups[-1].append(tok)
        else:
            lead.append(tok)
    if lead:
        stats.dropped += 1
    out = []
    for group in groups:
        slot_type = vocab.type_of(group[0]) if group else None
        value = group[1:]
        if slot_type is None or not value or not all(vocab.is_word(t) for t in value):
            stats.dropped += 1
            continue
        out.append(EntityPrediction(slot_type, tuple(value)))
    return out


def tags_to_entities(tags: Sequence[int], tokens: Sequence[int]) -> list[EntityPrediction]:
    """Maximal runs of one non-zero tag become entities of type ``tag - 1``."""
    out = []
    i = 0
    n = min(len(tags), len(tokens))
    while i < n:
        tag = int(tags[i])
        j = i + 1
        while j < n and int(tags[j]) == tag:
            j += 1
        if tag > 0:
            out.append(EntityPrediction(tag - 1, tuple(int(t) for t in tokens[i:j])))
        i = j
    return out


def gold_entities(utt: Utterance) -> list[EntityPrediction]:
    return [EntityPrediction(t, tuple(utt.tokens[s:e])) for t, s, e in utt.slots]


# -- metrics --------------------------------------------------------------
def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return levenshtein(list(hyp), list(ref)) / len(ref)


def corpus_wer(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> float:
    """Total edits over total reference tokens."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("references are empty")
    return sum(levenshtein(list(h), list(r)) for h, r in zip(hyps, refs)) / total


def intent_accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    if len(preds) != len(golds):
        raise ValueError("prediction and gold counts differ")
    if not golds:
        raise ValueError("no examples")
    return sum(int(p) == int(g) for p, g in zip(preds, golds)) / len(golds)


def value_similarity(pred: EntityPrediction, gold: EntityPrediction) -> float:
    """Mean of word-level and character-level normalised edit similarity."""
    pw, gw = pred.words(), gold.words()
    word = 1 - levenshtein(pw, gw) / max(len(pw), len(gw))
    ps, gs = " ".join(pw), " ".join(gw)
    char = 1 - levenshtein(ps, gs) / max(len(ps), len(gs))
    return 0.5 * word + 0.5 * char


def exact_similarity(pred: EntityPrediction, gold: EntityPrediction) -> float:
    return float(pred.words() == gold.words())


@dataclass
class F1Report:
    tp: float = 0.0
    fp: float = 0.0
    fn: float = 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp > 0 else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp > 0 else 0.0

    @property
    def f1(self) -> float:
        if self.tp <= 0:
            return 0.0
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def match_entities(preds: Sequence[EntityPrediction], golds: Sequence[EntityPrediction],
                   similarity=value_similarity) -> list[tuple[int, int, float]]:
    """Greedy same-type matching by descending score, ties by gold then pred index."""
    pairs = [(-similarity(p, g), gi, pi)
             for gi, g in enumerate(golds) for pi, p in enumerate(preds) if p.type_id == g.type_id]
    pairs.sort()
    used_g, used_p, out = set(), set(), []
    for neg, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out.append((gi, pi, -neg))
    return out


def entity_f1_report(preds: Sequence[Sequence[EntityPrediction]], golds: Sequence[Sequence[EntityPrediction]],
                     similarity=value_similarity) -> F1Report:
    if len(preds) != len(golds):
        raise ValueError("prediction and gold utterance counts differ")
    rep = F1Report()
    for p, g in zip(preds, golds):
        matched = match_entities(p, g, similarity)
        for _, _, s in matched:
            rep.tp += s
            rep.fp += 1 - s
            rep.fn += 1 - s
        rep.fp += len(p) - len(matched)
        rep.fn += len(g) - len(matched)
    return rep


def slu_f1(preds, golds) -> float:
    return entity_f1_report(preds, golds, value_similarity).f1


def strict_f1(preds, golds) -> float:
    return entity_f1_report(preds, golds, exact_similarity).f1


# -- model evaluation -----------------------------------------------------
@dataclass
class UtterancePrediction:
    id: str
    intent: int | None = None
    entities: list[EntityPrediction] = field(default_factory=list)
    transcript: list[int] | None = None
    slot_tokens: list[int] | None = None
    slot_finished: bool = True


def predict_batch(model, batch: Batch, beam: BeamConfig, tasks=("ic", "sf"), decode_asr: bool = True,
                  stats: ParseStats | None = None) -> list[UtterancePrediction]:
    stats = ParseStats() if stats is None else stats
    needs_asr = decode_asr or model.cfg.slot_decoder == "tag"
    state = model.infer_state(batch, decode=True if needs_asr else None)
    with ad.no_grad():
        seq, mask = model.interface(state)
        out = [UtterancePrediction(uid) for uid in batch.ids]
        if state.asr is not None:
            for i, p in enumerate(out):
                p.transcript = [int(t) for t in state.asr.tokens[i, : state.cif.token_mask[i].sum()]]
        if "ic" in tasks:
            pred = model.intent(seq, mask).data.argmax(axis=-1)
            for p, k in zip(out, pred):
                p.intent = int(k)
        if "sf" in tasks:
            if model.cfg.slot_decoder == "tag":
                tags = model.slot_tag(seq, mask).data.argmax(axis=-1)
                for i, p in enumerate(out):
                    n = int(mask[i].sum())
                    p.entities = tags_to_entities(tags[i, :n], state.asr.tokens[i, :n])
            else:
                for i, p in enumerate(out):
                    n = int(mask[i].sum())
                    memory = (_row(seq, i, n), np.ones((1, n), dtype=bool))
                    res = (greedy_decode(model.slot_gen, memory, beam.max_len, beam.temperature)
                           if beam.width == 1 else beam_search(model.slot_gen, memory, beam))
                    p.slot_tokens = res.tokens
                    p.slot_finished = res.finished
                    p.entities = parse_slot_sequence(res.tokens, model.cfg.slot_vocab, stats)
    return out


def _row(x, i: int, n: int):
    return ad.Tensor(x.data[i: i + 1, :n])


def evaluate_model(model, utts: Sequence[Utterance], beam: BeamConfig | None = None, tasks=("ic", "sf"),
                   max_frames: int = 4000, workers: int = 1, config_echo: dict | None = None) -> dict:
    """Run inference over ``utts`` and return a JSON-ready report."""
    beam = BeamConfig() if beam is None else beam
    if workers < 1:
        raise ValueError("workers must be at least 1")
    batches = batchify(list(utts), max_frames, model.cfg.slot_vocab)
    stats_per = [ParseStats() for _ in batches]

    def run(i):
        return predict_batch(model, batches[i], beam, tasks, model.cfg.interface != "h", stats_per[i])

    if workers == 1:
        results = [run(i) for i in range(len(batches))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(batches))))
    by_id = {p.id: p for batch in results for p in batch}
    preds = [by_id[u.id] for u in utts]
    report: dict = {"count": len(utts), "tasks": list(tasks)}
    if "ic" in tasks:
        report["intent_accuracy"] = intent_accuracy([p.intent for p in preds], [u.intent for u in utts])
    if "sf" in tasks:
        pe = [p.entities for p in preds]
        ge = [gold_entities(u) for u in utts]
        report["slu_f1"] = entity_f1_report(pe, ge, value_similarity).as_dict()
        report["strict_f1"] = entity_f1_report(pe, ge, exact_similarity).as_dict()
        report["dropped_slot_groups"] = sum(s.dropped for s in stats_per)
        report["unfinished_slot_decodes"] = sum(not p.slot_finished for p in preds)
    if all(p.transcript is not None for p in preds):
        report["wer"] = corpus_wer([p.transcript for p in preds], [u.tokens for u in utts])
        report["token_count_exact"] = float(np.mean([len(p.transcript) == len(u.tokens)
                                                     for p, u in zip(preds, utts)]))
    report["beam"] = asdict(beam)
    if config_echo is not None:
        report["config"] = config_echo
    return report


def intent_chance_band(count: int, classes: int, sigmas: float = 3.0) -> tuple[float, float]:
    """Chance accuracy plus/minus ``sigmas`` binomial standard deviations."""
    p = 1.0 / classes
    sd = (p * (1 - p) / count) ** 0.5
    return p - sigmas * sd, p + sigmas * sd


def summarize(reports: Sequence[dict], key_path: Sequence[str]) -> tuple[float, float]:
    vals = []
    for r in reports:
        v = r
        for k in key_path:
            v = v[k]
        vals.append(float(v))
    return float(np.mean(vals)), float(np.std(vals))


__all__ = [
    "BeamConfig", "BeamResult", "EntityPrediction", "F1Report", "ParseStats", "beam_search",
    "corpus_wer", "entity_f1_report", "evaluate_model", "exact_similarity", "gold_entities",
    "greedy_decode", "intent_accuracy", "intent_chance_band", "levenshtein", "match_entities",
    "parse_slot_sequence", "slu_f1", "strict_f1", "tags_to_entities", "value_similarity", "wer",
]
