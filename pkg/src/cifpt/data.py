"""Synthetic speech-like corpus, slot serialisation, batching and file formats.

Each word id owns a fixed random prototype frame vector. An utterance is a
token sequence; every token is rendered as its prototype repeated for a
random duration plus Gaussian noise. Frames are rounded to float32 so the
JSON-lines and CIFD binary renderings hold identical values.

Vocabulary layout for a word vocabulary of size V:

* the lower ``V - V // 2`` ids are filler words; the first
  ``intent_count * k`` of them are carriers that may open an utterance,
  and the intent is ``first_token % intent_count``;
* the upper ``V // 2`` ids are entity words; a slot span consists of
  entity words only and its type is the bucket of its leading word,
  ``(lead - first_entity_id) % slot_type_count``.

Slot spans are separated by at least one filler word, so entities are
recoverable from the transcript.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLIT_CODES = {"train": 1, "dev": 2, "test": 3}
CIFD_MAGIC = b"CIFD"
CIFD_VERSION = 1


@dataclass
class CorpusSpec:
    vocab_size: int = 30
    intent_count: int = 6
    slot_type_count: int = 4
    frame_dim: int = 16
    duration_min: int = 8
    duration_max: int = 16
    noise_std: float = 0.3
    len_min: int = 3
    len_max: int = 8
    max_slots: int = 2
    count: int = 2000
    seed: int = 0
    downsample_factor: int = 8

    def validate(self) -> None:
        if self.duration_min < self.downsample_factor:
            raise ValueError(
                f"duration_min={self.duration_min} < downsample_factor={self.downsample_factor}: "
                "tokens would not survive down-sampling"
            )
        if self.duration_max < self.duration_min:
            raise ValueError("duration_max < duration_min")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("need 1 <= len_min <= len_max")
        if self.carrier_count < self.intent_count or self.entity_count < self.slot_type_count:
            raise ValueError("vocabulary too small for the requested intents/slot types")
        if self.filler_count < 3 or self.entity_count < 2:
            raise ValueError("vocabulary too small to avoid repeated tokens")

    @property
    def entity_count(self) -> int:
        return self.vocab_size // 2

    @property
    def filler_count(self) -> int:
        return self.vocab_size - self.entity_count

    @property
    def carrier_count(self) -> int:
        return (self.filler_count // self.intent_count) * self.intent_count

    def slot_type_of(self, token: int) -> int:
        return (token - self.filler_count) % self.slot_type_count

    def is_entity(self, token: int) -> bool:
        return token >= self.filler_count


@dataclass
class Utterance:
    id: str
    frames: np.ndarray
    tokens: list[int]
    intent: int
    slots: list[tuple[int, int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "frames": self.frames.tolist(),
            "tokens": list(self.tokens),
            "intent": self.intent,
            "slots": [list(s) for s in self.slots],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        return cls(
            id=obj["id"],
            frames=np.asarray(obj["frames"], dtype=np.float64),
            tokens=[int(t) for t in obj["tokens"]],
            intent=int(obj["intent"]),
            slots=[tuple(int(v) for v in s) for s in obj["slots"]],
        )


class SlotVocab:
    """Output vocabulary of the slot decoders: words, then SEP, EOS, BOS, slot types."""

    def __init__(self, vocab_size: int, slot_type_count: int):
        self.vocab_size = vocab_size
        self.slot_type_count = slot_type_count
        self.sep = vocab_size
        self.eos = vocab_size + 1
        self.bos = vocab_size + 2
        self.size = vocab_size + 3 + slot_type_count

    def type_id(self, slot_type: int) -> int:
        return self.vocab_size + 3 + slot_type

    def type_of(self, token: int) -> int | None:
        k = token - self.vocab_size - 3
        return k if 0 <= k < self.slot_type_count else None

    def is_word(self, token: int) -> bool:
        return 0 <= token < self.vocab_size

    def surface(self, token: int) -> str:
        if self.is_word(token):
            return word_surface(token)
        if token == self.sep:
            return "[SEP]"
        if token == self.eos:
            return "[EOS]"
        if token == self.bos:
            return "[BOS]"
        return f"type{self.type_of(token)}"


def word_surface(token: int) -> str:
    return f"w{token}"


def prototypes(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.normal(0.0, 1.0, size=(spec.vocab_size, spec.frame_dim))


def _draw_other(rng: np.random.Generator, lo: int, hi: int, avoid: int | None) -> int:
    while True:
        tok = int(rng.integers(lo, hi))
        if tok != avoid:
            return tok


def sample_transcript(spec: CorpusSpec, rng: np.random.Generator):
    """Draw (tokens, intent, slots) following the layout in the module docstring."""
    n = int(rng.integers(spec.len_min, spec.len_max + 1))
    first = int(rng.integers(0, spec.carrier_count))
    k = int(rng.integers(0, spec.max_slots + 1))
    lengths = [int(rng.integers(1, 3)) for _ in range(k)]
    while lengths and sum(lengths) + len(lengths) - 1 > n - 1:
        lengths.pop()
    fillers = n - 1 - sum(lengths)
    gaps = sorted(rng.choice(fillers + 1, size=len(lengths), replace=False).tolist()) if lengths else []

    tokens = [first]
    slots = []
    span_iter = iter(zip(gaps, lengths))
    pending = next(span_iter, None)
    for gap in range(fillers + 1):
        while pending is not None and pending[0] == gap:
            start = len(tokens)
            for _ in range(pending[1]):
                tokens.append(_draw_other(rng, spec.filler_count, spec.vocab_size, tokens[-1]))
            slots.append((spec.slot_type_of(tokens[start]), start, len(tokens)))
            pending = next(span_iter, None)
        if gap < fillers:
            tokens.append(_draw_other(rng, 0, spec.filler_count, tokens[-1]))
    return tokens, first % spec.intent_count, slots


def render_frames(tokens: Sequence[int], protos: np.ndarray, spec: CorpusSpec,
                  rng: np.random.Generator, durations: Sequence[int] | None = None) -> np.ndarray:
    if durations is None:
        durations = rng.integers(spec.duration_min, spec.duration_max + 1, size=len(tokens))
    frames = np.concatenate([np.repeat(protos[t][None], d, axis=0) for t, d in zip(tokens, durations)])
    if spec.noise_std > 0:
        frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
    return frames.astype(np.float32).astype(np.float64)


def gen_corpus(spec: CorpusSpec, split: str = "train", count: int | None = None) -> list[Utterance]:
    """Generate ``count`` utterances for ``split``; reproducible from ``spec.seed``."""
    spec.validate()
    protos = prototypes(spec)
    code = SPLIT_CODES[split]
    out = []
    for i in range(spec.count if count is None else count):
        rng = np.random.default_rng([spec.seed, code, i])
        tokens, intent, slots = sample_transcript(spec, rng)
        frames = render_frames(tokens, protos, spec, rng)
        out.append(Utterance(f"{split}-{i:05d}", frames, tokens, intent, slots))
    return out


def serialize_slots(slots: Iterable[tuple[int, int, int]], tokens: Sequence[int], vocab: SlotVocab) -> list[int]:
    """``[SEP, TYPE, value..., SEP, TYPE, value..., EOS]`` in span order; bare EOS if no slots."""
    out = []
    for slot_type, start, end in sorted(slots, key=lambda s: s[1]):
        if not 0 <= start < end <= len(tokens):
            raise ValueError(f"slot span ({start}, {end}) outside transcript of length {len(tokens)}")
        out.append(vocab.sep)
        out.append(vocab.type_id(slot_type))
        out.extend(int(t) for t in tokens[start:end])
    out.append(vocab.eos)
    return out


def slot_tags(slots: Iterable[tuple[int, int, int]], length: int) -> list[int]:
    """Per-token tags: 0 outside slots, ``type + 1`` inside."""
    tags = [0] * length
    for slot_type, start, end in slots:
        for i in range(start, end):
            tags[i] = slot_type + 1
    return tags


@dataclass
class Batch:
    ids: list[str]
    frames: np.ndarray          # (B, T', F), zero padded
    frame_lengths: np.ndarray   # (B,)
    tokens: np.ndarray          # (B, N)
    token_lengths: np.ndarray
    intents: np.ndarray         # (B,)
    slot_targets: np.ndarray    # (B, K)
    slot_inputs: np.ndarray     # (B, K): BOS + targets[:-1]
    slot_lengths: np.ndarray
    tags: np.ndarray            # (B, N)
    utterances: list[Utterance]

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def token_mask(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.token_lengths[:, None]

    @property
    def slot_mask(self) -> np.ndarray:
        return np.arange(self.slot_targets.shape[1])[None, :] < self.slot_lengths[:, None]

    @property
    def padded_frames(self) -> int:
        return self.frames.shape[0] * self.frames.shape[1]


def make_batch(utts: Sequence[Utterance], vocab: SlotVocab) -> Batch:
    b = len(utts)
    t_max = max(u.frames.shape[0] for u in utts)
    dim = utts[0].frames.shape[1]
    n_max = max(len(u.tokens) for u in utts)
    slot_seqs = [serialize_slots(u.slots, u.tokens, vocab) for u in utts]
    k_max = max(len(s) for s in slot_seqs)
    frames = np.zeros((b, t_max, dim))
    tokens = np.zeros((b, n_max), dtype=np.int64)
    tags = np.zeros((b, n_max), dtype=np.int64)
    targets = np.full((b, k_max), vocab.eos, dtype=np.int64)
    inputs = np.full((b, k_max), vocab.eos, dtype=np.int64)
    for i, (u, seq) in enumerate(zip(utts, slot_seqs)):
        frames[i, : u.frames.shape[0]] = u.frames
        tokens[i, : len(u.tokens)] = u.tokens
        tags[i, : len(u.tokens)] = slot_tags(u.slots, len(u.tokens))
        targets[i, : len(seq)] = seq
        inputs[i, : len(seq)] = [vocab.bos] + seq[:-1]
    return Batch(
        ids=[u.id for u in utts],
        frames=frames,
        frame_lengths=np.array([u.frames.shape[0] for u in utts]),
        tokens=tokens,
        token_lengths=np.array([len(u.tokens) for u in utts]),
        intents=np.array([u.intent for u in utts]),
        slot_targets=targets,
        slot_inputs=inputs,
        slot_lengths=np.array([len(s) for s in slot_seqs]),
        tags=tags,
        utterances=list(utts),
    )


def group_by_frames(utts: Sequence[Utterance], max_frames: int) -> list[list[Utterance]]:
    """Greedy in-order grouping so that batch_size * longest_frames <= max_frames."""
    groups: list[list[Utterance]] = []
    cur: list[Utterance] = []
    longest = 0
    for u in utts:
        t = u.frames.shape[0]
        if t > max_frames:
            raise ValueError(f"utterance {u.id} has {t} frames, more than max_frames={max_frames}")
        if cur and (len(cur) + 1) * max(longest, t) > max_frames:
            groups.append(cur)
            cur, longest = [], 0
        cur.append(u)
        longest = max(longest, t)
    if cur:
        groups.append(cur)
    return groups


def batchify(utts: Sequence[Utterance], max_frames: int, vocab: SlotVocab) -> list[Batch]:
    return [make_batch(g, vocab) for g in group_by_frames(utts, max_frames)]


# -- files ------------------------------------------------------------------
def write_jsonl(path, utts: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(json.dumps(u.to_json(), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[Utterance]:
    with open(path, encoding="utf-8") as fh:
        return [Utterance.from_json(json.loads(line)) for line in fh if line.strip()]


def write_cifd(path, utts: Sequence[Utterance]) -> None:
    """Binary frame file: ``CIFD``, u32 version, u32 count, then per utterance
    u32 frames, u32 dim and frames*dim little-endian float32 values."""
    with open(path, "wb") as fh:
        fh.write(CIFD_MAGIC)
        fh.write(struct.pack("<II", CIFD_VERSION, len(utts)))
        for u in utts:
            t, d = u.frames.shape
            fh.write(struct.pack("<II", t, d))
            fh.write(u.frames.astype("<f4").tobytes())


def read_cifd(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CIFD_MAGIC:
        raise ValueError(f"{path}: not a CIFD file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CIFD_VERSION:
        raise ValueError(f"{path}: unsupported CIFD version {version}")
    pos = 12
    out = []
    for _ in range(count):
        t, d = struct.unpack_from("<II", raw, pos)
        pos += 8
        arr = np.frombuffer(raw, dtype="<f4", count=t * d, offset=pos).reshape(t, d)
        out.append(arr.astype(np.float64))
        pos += 4 * t * d
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
