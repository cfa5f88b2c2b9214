"""Auxiliary text supervision: vocabulary, causal decoder, and token loss.

Reports supervise the vision encoder during pretraining only — a causal
transformer decoder predicts each report token from the preceding tokens
and, via cross-attention, from the visible-token encoding of one view. The
same report is predicted independently from every view of the study. Text
is never an input at evaluation time.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor
from .backbone import Encoding
from .errors import ValidationError

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
RESERVED = (PAD, UNK, EOS)
PAD_ID, UNK_ID, EOS_ID = 0, 1, 2


class Vocabulary:
    """Word-level token table; ids 0..2 are pad / unknown / end-of-report."""

    def __init__(self, words):
        words = list(words)
        if len(set(words)) != len(words):
            raise ValidationError("vocabulary words must be unique")
        for w in words:
            if w in RESERVED:
                raise ValidationError(f"{w!r} collides with a reserved token")
        self.tokens = list(RESERVED) + words
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts, min_freq: int = 1) -> "Vocabulary":
        """Frequency-sorted vocabulary over whitespace-split lowercase words."""
        counts = Counter()
        for text in texts:
            if text:
                counts.update(text.lower().split())
        kept = [(w, c) for w, c in counts.items() if c >= min_freq]
        kept.sort(key=lambda wc: (-wc[1], wc[0]))
        return cls([w for w, _ in kept])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tokens[:3] != list(RESERVED):
            raise ValidationError(f"vocabulary file must start with {RESERVED}")
        return cls(tokens[3:])

    def tokenize(self, text: str, max_len: int) -> np.ndarray:
        """Lowercased word ids, truncated to max_len - 1, EOS-terminated."""
        words = text.lower().split() if text else []
        ids = [self._ids.get(w, UNK_ID) for w in words[:max_len - 1]]
        ids.append(EOS_ID)
        return np.asarray(ids, dtype=np.int64)


@dataclass(frozen=True)
class TextDecoderConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 32
    max_len: int = 16
    vocab_size: int = 0  # filled in from the Vocabulary

    def __post_init__(self):
        if self.max_len < 2:
            raise ValidationError(f"max_len must be >= 2, got {self.max_len}")
        if min(self.layers, self.heads, self.dim) < 1:
            raise ValidationError("layers, heads, and dim must be positive")
        if self.dim % self.heads != 0:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")


class TextDecoder:
    """Causal transformer over report tokens with visual cross-attention."""

    def __init__(self, config: TextDecoderConfig, memory_dim: int,
                 rng: np.random.Generator):
        if config.vocab_size < len(RESERVED) + 1:
            raise ValidationError(f"vocab_size {config.vocab_size} is too small")
        self.config = config
        d = config.dim
        self.tok_embed = Parameter(nn.trunc_normal(rng, (config.vocab_size, d)))
        self.pos = nn.sincos_1d(config.max_len, d)
        self.blocks = [nn.DecoderBlock(d, memory_dim, config.heads, rng)
                       for _ in range(config.layers)]
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size, rng)

    def decode_logits(self, prefix_ids, encoding: Encoding | Tensor) -> Tensor:
        """Per-position vocabulary logits for a (teacher-forced) prefix."""
        prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
        k = len(prefix_ids)
        if k == 0:
            raise ValidationError("prefix must be nonempty")
        if k > self.config.max_len:
            raise ValidationError(f"prefix of {k} tokens exceeds max_len "
                                  f"{self.config.max_len}")
        memory = encoding.tokens if isinstance(encoding, Encoding) else encoding
        x = ad.take(self.tok_embed, prefix_ids, axis=0) + Tensor(self.pos[:k])
        bias = nn.causal_bias(k)
        for block in self.blocks:
            x = block(x, memory, bias)
        return self.head(self.norm(x))

    def parameters(self, prefix: str = "text") -> dict:
        groups = [{f"{prefix}.tok_embed": self.tok_embed}]
        groups += [blk.parameters(f"{prefix}.block{i}")
                   for i, blk in enumerate(self.blocks)]
        groups.append(self.norm.parameters(f"{prefix}.norm"))
        groups.append(self.head.parameters(f"{prefix}.head"))
        return nn.merge_params(*groups)


def token_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[k, target_k] over the K positions."""
    k = len(targets)
    log_probs = ad.log_softmax(logits, axis=-1)
    picked = log_probs[(np.arange(k), np.asarray(targets, dtype=np.int64))]
    return -picked.mean()


def loss_ce(encodings, report_ids, decoder: TextDecoder) -> Tensor:
    """Autoregressive report loss, averaged over tokens and views.

    The decoder input at position k is the padding/start token followed by
    the first k-1 report tokens; the target is the report itself (already
    EOS-terminated by the tokenizer).
    """
    report_ids = np.asarray(report_ids, dtype=np.int64)
    if report_ids.size == 0:
        raise ValidationError("loss_ce needs a nonempty report")
    if len(encodings) == 0:
        raise ValidationError("loss_ce needs at least one view encoding")
    inputs = np.concatenate([[PAD_ID], report_ids[:-1]])
    total = None
    for enc in encodings:
        logits = decoder.decode_logits(inputs, enc)
        term = token_cross_entropy(logits, report_ids)
        total = term if total is None else total + term
    return total * (1.0 / len(encodings))
