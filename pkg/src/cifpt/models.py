"""Network assemblies: speech encoder, CIF, ASR decoder, teacher, SLU decoders."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cif import CifConfig, CifOutput, WeightEstimator, integrate_fire, quantity_loss, scale_weights
from .data import Batch, SlotVocab
from .losses import LossWeights, ce_loss, cif_total_loss, ctc_loss, lmd_loss
from .nn import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    TransformerLayer,
    act,
    add_positions,
    masked_mean,
)

INTERFACE_KINDS = ("c", "m", "p", "e", "c+m", "c+e", "h")
SLOT_DECODERS = ("generation", "tag")
PRETRAINED_PREFIXES = ("encoder.", "estimator.", "ctc_head.", "asr.")


@dataclass
class ModelConfig:
    frame_dim: int = 16
    hidden_dim: int = 64
    vocab_size: int = 30
    intent_count: int = 6
    slot_type_count: int = 4
    encoder_layers: int = 2
    asr_decoder_layers: int = 2
    intent_decoder_layers: int = 2
    slot_decoder_layers: int = 4
    teacher_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    downsample_factor: int = 8
    max_len: int = 32
    beta: float = 1.0
    tail_fire_threshold: float = 0.5
    interface_scale: float = 0.25   # applied to the interface before positions are added
    interface: str = "c"
    slot_decoder: str = "generation"
    seed: int = 0

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError("downsample_factor must be a power of 2")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.interface not in INTERFACE_KINDS:
            raise ValueError(f"interface must be one of {INTERFACE_KINDS}")
        if self.slot_decoder not in SLOT_DECODERS:
            raise ValueError(f"slot_decoder must be one of {SLOT_DECODERS}")
        if self.interface_scale <= 0:
            raise ValueError("interface_scale must be positive")

    @property
    def cif(self) -> CifConfig:
        return CifConfig(self.beta, self.tail_fire_threshold, True, self.hidden_dim)

    @property
    def slot_vocab(self) -> SlotVocab:
        return SlotVocab(self.vocab_size, self.slot_type_count)


def _grad_scope(enabled: bool):
    return contextlib.nullcontext() if enabled else ad.no_grad()


class SpeechEncoder(Module):
    """Stacked kernel-2/stride-2 convolutions, then self-attention blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.factor = cfg.downsample_factor
        n_conv = int(math.log2(cfg.downsample_factor))
        dims = [cfg.frame_dim] + [cfg.hidden_dim] * n_conv
        self.convs = [Linear(2 * a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        if not self.convs:
            self.convs = [Linear(cfg.frame_dim, cfg.hidden_dim, rng)]
        self.layers = [TransformerLayer(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, rng)
                       for _ in range(cfg.encoder_layers)]
        self.norm = LayerNorm(cfg.hidden_dim)

    @staticmethod
    def output_lengths(frame_lengths, factor: int) -> np.ndarray:
        return -(-np.asarray(frame_lengths) // factor)

    def __call__(self, frames, frame_lengths) -> tuple[Tensor, np.ndarray]:
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        lengths = np.asarray(frame_lengths)
        if (lengths < self.factor).any():
            raise ValueError(f"utterance shorter than the down-sampling factor {self.factor}")
        b = x.shape[0]
        if self.factor == 1:
            x = act(self.convs[0](x))
        else:
            for conv in self.convs:
                if x.shape[1] % 2:
                    x = ad.concat([x, np.zeros((b, 1, x.shape[2]))], axis=1)
                x = x.reshape(b, x.shape[1] // 2, 2 * x.shape[2])
                lengths = -(-lengths // 2)
                mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
                x = ad.masked_fill(act(conv(x)), ~mask[:, :, None], 0.0)
        mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
        x = add_positions(x)
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x), mask


class AsrDecoder(Module):
    """Causal decoder whose position i sees embed(y_{i-1}) + c_i."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.bos = cfg.vocab_size
        self.embed = Embedding(cfg.vocab_size + 1, cfg.hidden_dim, rng)
        self.layers = [TransformerLayer(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, rng, causal=True)
                       for _ in range(cfg.asr_decoder_layers)]
        self.norm = LayerNorm(cfg.hidden_dim)
        self.out = Linear(cfg.hidden_dim, cfg.vocab_size, rng)

    def __call__(self, c: Tensor, y_prev, mask=None) -> tuple[Tensor, Tensor]:
        y_prev = np.asarray(y_prev, dtype=np.int64)
        if y_prev.shape != c.shape[:2]:
            raise ValueError(f"previous tokens {y_prev.shape} do not align with CIF outputs {c.shape[:2]}")
        x = add_positions(self.embed(y_prev) + c)
        for layer in self.layers:
            x = layer(x, mask)
        m = self.norm(x)
        return self.out(m), m

    def shift(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        prev = np.full_like(tokens, self.bos)
        prev[:, 1:] = tokens[:, :-1]
        return prev

    def greedy(self, c: Tensor, mask=None) -> "AsrDecode":
        """One token per CIF vector, fed back autoregressively."""
        b, n, _ = c.shape
        prev = np.full((b, n), self.bos, dtype=np.int64)
        with ad.no_grad():
            for i in range(n):
                logits, _ = self(c[:, : i + 1], prev[:, : i + 1], None if mask is None else mask[:, : i + 1])
                if i + 1 < n:
                    prev[:, i + 1] = logits.data[:, i].argmax(axis=-1)
            logits, hidden = self(c, prev, mask)
        return AsrDecode(logits, hidden, logits.data.argmax(axis=-1))


@dataclass
class AsrDecode:
    logits: Tensor
    hidden: Tensor
    tokens: np.ndarray


class TeacherEncoder(Module):
    """Small bidirectional text encoder standing in for a pre-trained LM."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.vocab_size = cfg.vocab_size
        self.mask_id = cfg.vocab_size
        self.embed = Embedding(cfg.vocab_size + 1, cfg.hidden_dim, rng)
        self.layers = [TransformerLayer(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, rng)
                       for _ in range(cfg.teacher_layers)]
        self.norm = LayerNorm(cfg.hidden_dim)
        self.mlm_head = Linear(cfg.hidden_dim, cfg.vocab_size, rng)

    def encode(self, tokens, mask=None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and tokens.max() > self.mask_id:
            raise ValueError("token id outside the teacher vocabulary")
        x = add_positions(self.embed(tokens))
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)

    def __call__(self, tokens, mask=None) -> Tensor:
        """Frozen contextual embeddings; never records gradients."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and tokens.max() >= self.vocab_size:
            raise ValueError("token id >= vocab size")
        with ad.no_grad():
            return self.encode(tokens, mask)

    def mlm_logits(self, tokens, mask=None) -> Tensor:
        return self.mlm_head(self.encode(tokens, mask))


class IntentDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.scale = cfg.interface_scale
        self.layers = [TransformerLayer(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, rng)
                       for _ in range(cfg.intent_decoder_layers)]
        self.norm = LayerNorm(cfg.hidden_dim)
        self.proj = Linear(cfg.hidden_dim, cfg.intent_count, rng)

    def __call__(self, x: Tensor, mask) -> Tensor:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("intent decoder got an all-masked interface")
        x = add_positions(x * self.scale)
        for layer in self.layers:
            x = layer(x, mask)
        return self.proj(masked_mean(self.norm(x), mask))


class SlotGenerationDecoder(Module):
    """Transformer decoder generating the serialised slot string from an interface."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        vocab = cfg.slot_vocab
        self.scale = cfg.interface_scale
        self.bos_id, self.eos_id = vocab.bos, vocab.eos
        self.embed = Embedding(vocab.size, cfg.hidden_dim, rng)
        self.layers = [TransformerLayer(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, rng, cross=True, causal=True)
                       for _ in range(cfg.slot_decoder_layers)]
        self.norm = LayerNorm(cfg.hidden_dim)
        self.out = Linear(cfg.hidden_dim, vocab.size, rng)

    def __call__(self, memory: Tensor, memory_mask, y_prev, mask=None) -> Tensor:
        if memory.shape[1] == 0:
            raise ValueError("slot decoder got an empty interface")
        memory = add_positions(memory * self.scale)
        x = add_positions(self.embed(np.asarray(y_prev, dtype=np.int64)))
        for layer in self.layers:
            x = layer(x, mask, memory=memory, memory_mask=memory_mask)
        return self.out(self.norm(x))

    def next_logits(self, prefixes: np.ndarray, memory) -> np.ndarray:
        """Logits for the token after each prefix, ``memory`` being one utterance's interface."""
        mem, mem_mask = memory
        h = prefixes.shape[0]
        mem = Tensor(np.repeat(mem.data, h, axis=0))
        mem_mask = np.repeat(mem_mask, h, axis=0)
        with ad.no_grad():
            return self(mem, mem_mask, prefixes).data[:, -1]

    def cross_attention_weights(self) -> list[np.ndarray]:
        return [layer.cross_attn.last_weights for layer in self.layers]


class SlotTagDecoder(Module):
    """Causal self-attention stack tagging each interface position with a slot type (0 = O)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.scale = cfg.interface_scale
        self.layers = [TransformerLayer(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, rng, causal=True)
                       for _ in range(cfg.slot_decoder_layers)]
        self.norm = LayerNorm(cfg.hidden_dim)
        self.out = Linear(cfg.hidden_dim, cfg.slot_type_count + 1, rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = add_positions(x * self.scale)
        for layer in self.layers:
            x = layer(x, mask)
        return self.out(self.norm(x))


class InterfaceProjections(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.posterior = Linear(cfg.vocab_size, d, rng)
        self.c_m = Linear(2 * d, d, rng)
        self.c_e = Linear(2 * d, d, rng)


@dataclass
class ForwardState:
    h: Tensor
    h_mask: np.ndarray
    alpha: Tensor | None = None
    cif: CifOutput | None = None
    asr: AsrDecode | None = None


class CifSluModel(Module):
    """Speech encoder + CIF + ASR decoder, with intent and slot heads on top."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.encoder = SpeechEncoder(cfg, rng)
        self.estimator = WeightEstimator(cfg.hidden_dim, rng)
        self.ctc_head = Linear(cfg.hidden_dim, cfg.vocab_size + 1, rng)
        self.asr = AsrDecoder(cfg, rng)
        self.intent = IntentDecoder(cfg, rng)
        self.slot_gen = SlotGenerationDecoder(cfg, rng)
        self.slot_tag = SlotTagDecoder(cfg, rng)
        self.iface = InterfaceProjections(cfg, rng)

    # -- grouping --------------------------------------------------------
    def pretrained_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if n.startswith(PRETRAINED_PREFIXES)}

    def slu_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if not n.startswith(PRETRAINED_PREFIXES)}

    # -- pieces ----------------------------------------------------------
    def run_cif(self, batch: Batch, scaled: bool) -> ForwardState:
        h, h_mask = self.encoder(batch.frames, batch.frame_lengths)
        alpha = self.estimator(h, h_mask)
        if scaled:
            a = scale_weights(alpha, batch.token_lengths, h_mask)
            cif = integrate_fire(h, a, self.cfg.cif, h_mask, max_tokens=batch.tokens.shape[1])
        else:
            cif = integrate_fire(h, alpha, self.cfg.cif, h_mask, min_tokens=1)
        return ForwardState(h, h_mask, alpha, cif)

    def asr_losses(self, batch: Batch, state: ForwardState, weights: LossWeights,
                   teacher: TeacherEncoder | None = None) -> dict[str, Tensor]:
        mask = batch.token_mask
        logits, hidden = self.asr(state.cif.tokens, self.asr.shift(batch.tokens), mask)
        state.asr = AsrDecode(logits, hidden, logits.data.argmax(axis=-1))
        out = {
            "ce": ce_loss(logits, batch.tokens, mask),
            "ctc": self.ctc(batch, state),
            "qua": quantity_loss(state.alpha, batch.token_lengths),
        }
        if weights.lmd_kind != "none" and teacher is not None:
            target = teacher(batch.tokens, mask)
            if weights.lambda_lmd == 0.0:
                # keep the zero-weighted term out of the graph so gradients match a run without it
                with ad.no_grad():
                    out["lmd"] = lmd_loss(weights.lmd_kind, target, state.cif.tokens, weights, mask)
            else:
                out["lmd"] = lmd_loss(weights.lmd_kind, target, state.cif.tokens, weights, mask)
        out["total"] = cif_total_loss(out["ce"], out["ctc"], out["qua"], out.get("lmd"), weights)
        return out

    def ctc(self, batch: Batch, state: ForwardState) -> Tensor:
        logits = self.ctc_head(state.h)
        return ctc_loss(logits, batch.tokens, state.h_mask.sum(axis=1), batch.token_lengths,
                        blank=self.cfg.vocab_size)

    def interface(self, state: ForwardState, kind: str | None = None) -> tuple[Tensor, np.ndarray]:
        """Token-level (or, for kind 'h', frame-level) sequence handed to the SLU decoders."""
        kind = self.cfg.interface if kind is None else kind
        if kind == "h":
            return state.h, state.h_mask
        c, mask = state.cif.tokens, state.cif.token_mask
        if kind == "c":
            return c, mask
        if state.asr is None:
            raise ValueError(f"interface {kind!r} needs an ASR decode")
        if kind == "m":
            return state.asr.hidden, mask
        if kind == "p":
            return self.iface.posterior(ad.softmax(state.asr.logits)), mask
        e = self.asr.embed(state.asr.tokens)
        if kind == "e":
            return e, mask
        if kind == "c+m":
            return self.iface.c_m(ad.concat([c, state.asr.hidden], axis=2)), mask
        if kind == "c+e":
            return self.iface.c_e(ad.concat([c, e], axis=2)), mask
        raise ValueError(f"unknown interface kind {kind!r}")

    def _needs_decode(self) -> bool:
        return self.cfg.interface in ("m", "p", "e", "c+m", "c+e") or self.cfg.slot_decoder == "tag"

    # -- objectives ------------------------------------------------------
    def pretrain_loss(self, batch: Batch, weights: LossWeights, teacher: TeacherEncoder | None = None,
                      objective: str = "cif") -> dict[str, Tensor]:
        if objective == "ctc":
            h, h_mask = self.encoder(batch.frames, batch.frame_lengths)
            ctc = self.ctc(batch, ForwardState(h, h_mask))
            return {"ctc": ctc, "total": ctc}
        state = self.run_cif(batch, scaled=True)
        return self.asr_losses(batch, state, weights, teacher)

    def slu_loss(self, batch: Batch, tasks=("ic", "sf"), train_pretrained: bool = False,
                 joint_asr: bool = False, weights: LossWeights | None = None) -> dict[str, Tensor]:
        weights = LossWeights(lmd_kind="none") if weights is None else weights
        out: dict[str, Tensor] = {}
        with _grad_scope(train_pretrained):
            if self.cfg.interface == "h":
                h, h_mask = self.encoder(batch.frames, batch.frame_lengths)
                state = ForwardState(h, h_mask)
                if joint_asr:
                    out["ctc"] = self.ctc(batch, state)
                    out["asr"] = out["ctc"] * weights.lambda1
            else:
                state = self.run_cif(batch, scaled=True)
                if joint_asr:
                    parts = self.asr_losses(batch, state, LossWeights(
                        weights.lambda1, weights.lambda2, 0.0, weights.gamma, weights.tau, "none"))
                    out.update({k: v for k, v in parts.items() if k != "total"})
                    out["asr"] = parts["total"]
                elif self._needs_decode():
                    logits, hidden = self.asr(state.cif.tokens, self.asr.shift(batch.tokens), batch.token_mask)
                    state.asr = AsrDecode(logits, hidden, logits.data.argmax(axis=-1))
        seq, mask = self.interface(state)
        total = None
        if "ic" in tasks:
            out["ic"] = ce_loss(self.intent(seq, mask).reshape(batch.size, 1, -1),
                                batch.intents[:, None])
            total = out["ic"]
        if "sf" in tasks:
            if self.cfg.slot_decoder == "generation":
                logits = self.slot_gen(seq, mask, batch.slot_inputs, batch.slot_mask)
                out["sf"] = ce_loss(logits, batch.slot_targets, batch.slot_mask)
            else:
                out["sf"] = ce_loss(self.slot_tag(seq, mask), batch.tags, batch.token_mask)
            total = out["sf"] if total is None else total + out["sf"]
        if "asr" in out:
            total = out["asr"] if total is None else total + out["asr"]
        out["total"] = total
        return out

    # -- inference -------------------------------------------------------
    def infer_state(self, batch: Batch, decode: bool | None = None) -> ForwardState:
        with ad.no_grad():
            if self.cfg.interface == "h":
                h, h_mask = self.encoder(batch.frames, batch.frame_lengths)
                state = ForwardState(h, h_mask)
                decode = False if decode is None else decode
                if decode:
                    state.alpha = self.estimator(h, h_mask)
                    state.cif = integrate_fire(h, state.alpha, self.cfg.cif, h_mask, min_tokens=1)
            else:
                state = self.run_cif(batch, scaled=False)
            if decode or (decode is None and self._needs_decode()):
                state.asr = self.asr.greedy(state.cif.tokens, state.cif.token_mask)
        return state
