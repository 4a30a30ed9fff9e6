"""Tiny causal language decoder standing in for the full LLM.

Consumes projected visual tokens as an embedding prefix, appends token
embeddings for [BOS, prompt, target, EOS], and trains with cross-entropy
over the target span only. Two pre-norm transformer blocks by default; no
KV cache, greedy decoding only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .projector import ProjectedEmbedding
from .rng import SplitMix64
from .tensor import IGNORE_INDEX, InvalidTargetError, ShapeError, Tensor


class SequenceLengthError(ValueError):
    """Raised when a composed sequence exceeds the configured maximum."""


class UnknownTokenError(KeyError):
    """Raised when encoding a token absent from the vocabulary."""


PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"


class Vocab:
    """Dense bidirectional token <-> id map with reserved PAD/BOS/EOS ids 0/1/2."""

    def __init__(self, words):
        reserved = [PAD, BOS, EOS]
        extra = sorted({w for w in words if w not in reserved})
        self.id_to_token = reserved + extra
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.pad_id, self.bos_id, self.eos_id = 0, 1, 2

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        words = []
        for text in texts:
            words.extend(text.lower().split())
        return cls(words)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str, skip_unknown: bool = False) -> list[int]:
        """Token ids for whitespace-split words. The vocabulary is closed, so
        encoding raises on unknown words unless ``skip_unknown`` (used for
        inference-time prompts that may carry free-form clue text)."""
        ids = []
        for w in text.lower().split():
            if w not in self.token_to_id:
                if skip_unknown:
                    continue
                raise UnknownTokenError(f"token {w!r} not in vocabulary")
            ids.append(self.token_to_id[w])
        return ids

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise UnknownTokenError(f"token id {i} out of range")
            words.append(self.id_to_token[i])
        return " ".join(words)


@dataclass
class DecoderConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    mlp_ratio: int = 4
    max_seq: int = 256
    # Block weights start small. The embedding table starts at unit scale so
    # the readout can reach confident logits with modest head movement; the
    # head starts small but nonzero so gradients reach every upstream module
    # from step one.
    block_sigma: float = 0.02
    embed_sigma: float = 1.0
    head_sigma: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


@dataclass
class BlockParams:
    # Attention projections carry no biases: a key bias is a provable no-op
    # under softmax shift invariance, so none of q/k/v/o gets one.
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.ln1_gain", self.ln1_gain),
            (f"{prefix}.ln1_bias", self.ln1_bias),
            (f"{prefix}.wq", self.wq),
            (f"{prefix}.wk", self.wk),
            (f"{prefix}.wv", self.wv),
            (f"{prefix}.wo", self.wo),
            (f"{prefix}.ln2_gain", self.ln2_gain),
            (f"{prefix}.ln2_bias", self.ln2_bias),
            (f"{prefix}.mlp_w1", self.mlp_w1),
            (f"{prefix}.mlp_b1", self.mlp_b1),
            (f"{prefix}.mlp_w2", self.mlp_w2),
            (f"{prefix}.mlp_b2", self.mlp_b2),
        ]


@dataclass
class DecoderParams:
    embed: Tensor
    blocks: list[BlockParams]
    head: Tensor
    config: DecoderConfig = field(default_factory=DecoderConfig)

    @classmethod
    def build(cls, vocab_size: int, config: DecoderConfig | None = None, seed: int = 0) -> "DecoderParams":
        config = config or DecoderConfig()
        d = config.d_model
        master = SplitMix64(seed)

        def w(shape, sigma):
            return T.seeded_normal(shape, sigma, master.spawn_seed(), requires_grad=True)

        def b(n):
            return T.zeros((n,), requires_grad=True)

        def ones(n):
            return T.constant((n,), 1.0, requires_grad=True)

        blocks = []
        for _ in range(config.n_blocks):
            blocks.append(
                BlockParams(
                    ln1_gain=ones(d),
                    ln1_bias=b(d),
                    wq=w((d, d), config.block_sigma),
                    wk=w((d, d), config.block_sigma),
                    wv=w((d, d), config.block_sigma),
                    wo=w((d, d), config.block_sigma),
                    ln2_gain=ones(d),
                    ln2_bias=b(d),
                    mlp_w1=w((d, config.mlp_ratio * d), config.block_sigma),
                    mlp_b1=b(config.mlp_ratio * d),
                    mlp_w2=w((config.mlp_ratio * d, d), config.block_sigma),
                    mlp_b2=b(d),
                )
            )
        return cls(
            embed=w((vocab_size, d), config.embed_sigma),
            blocks=blocks,
            head=w((d, vocab_size), config.head_sigma),
            config=config,
        )

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("embed", self.embed)]
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named(f"block{i}"))
        out.append(("head", self.head))
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named())

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


def _block_forward(x: Tensor, blk: BlockParams, n_heads: int) -> Tensor:
    d = x.shape[1]
    dh = d // n_heads
    h = T.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
    q = T.matmul(h, blk.wq)
    k = T.matmul(h, blk.wk)
    v = T.matmul(h, blk.wv)
    heads = []
    for i in range(n_heads):
        heads.append(
            T.causal_attention(
                T.narrow(q, 1, i * dh, dh),
                T.narrow(k, 1, i * dh, dh),
                T.narrow(v, 1, i * dh, dh),
            )
        )
    attn = T.concat(heads, axis=1)
    x = T.add(x, T.matmul(attn, blk.wo))
    h2 = T.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
    m = T.gelu(T.add(T.matmul(h2, blk.mlp_w1), blk.mlp_b1))
    return T.add(x, T.add(T.matmul(m, blk.mlp_w2), blk.mlp_b2))


def forward_logits(visual: ProjectedEmbedding | None, token_ids, params: DecoderParams) -> Tensor:
    """Logits over the vocabulary at every position of [visual tokens; token_ids]."""
    token_ids = list(token_ids)
    for tid in token_ids:
        if not 0 <= tid < params.vocab_size:
            raise InvalidTargetError(f"token id {tid} outside [0, {params.vocab_size})")
    prefix = 0 if visual is None else visual.tokens.shape[0]
    total = prefix + len(token_ids)
    if total > params.config.max_seq:
        raise SequenceLengthError(f"sequence of {total} exceeds max_seq {params.config.max_seq}")
    if total == 0:
        raise ShapeError("forward_logits needs at least one position")

    if token_ids:
        tok = T.take_rows(params.embed, token_ids)
        x = tok if visual is None else T.concat([visual.tokens, tok], axis=0)
    else:
        x = visual.tokens
    for blk in params.blocks:
        x = _block_forward(x, blk, params.config.n_heads)
    return T.matmul(x, params.head)


def forward_loss(
    visual: ProjectedEmbedding | None,
    prompt_ids,
    target_ids,
    params: DecoderParams,
    bos_id: int = 1,
    eos_id: int = 2,
) -> Tensor:
    """Cross-entropy over the target span of [visual][BOS, prompt][target, EOS].

    Every position whose next token is a prompt or visual token carries
    IGNORE_INDEX, so only target tokens (plus the closing EOS) contribute.
    """
    prompt_ids = list(prompt_ids)
    target_ids = list(target_ids)
    text_ids = [bos_id] + prompt_ids + target_ids + [eos_id]
    prefix = 0 if visual is None else visual.tokens.shape[0]
    total = prefix + len(text_ids)

    labels = [IGNORE_INDEX] * total
    first_target = 1 + len(prompt_ids)  # index into text_ids
    for j in range(first_target, len(text_ids)):
        labels[prefix + j - 1] = text_ids[j]

    logits = forward_logits(visual, text_ids, params)
    return T.cross_entropy(logits, labels)


def generate_greedy(
    visual: ProjectedEmbedding | None,
    prompt_ids,
    params: DecoderParams,
    max_new: int = 32,
    bos_id: int = 1,
    eos_id: int = 2,
) -> list[int]:
    """Argmax decoding until EOS or max_new tokens; ties break toward lower id.

    Returns the generated ids without the terminating EOS.
    """
    ids = [bos_id] + list(prompt_ids)
    out: list[int] = []
    for _ in range(max_new):
        logits = forward_logits(visual, ids, params)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == eos_id:
            break
        out.append(nxt)
        ids.append(nxt)
    return out
