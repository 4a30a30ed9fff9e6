"""Full captioning model: fusion -> projector -> decoder, with named modules.

The "ce" slot holds the change-extraction parameters in the standard model;
the concat-ablation variant keeps the same slot name so stage plans and
checkpoints stay portable across the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .ce import (
    CEParams,
    ConcatFusionParams,
    FeaturePair,
    ce_forward,
    concat_fusion_forward,
)
from .decoder import DecoderConfig, DecoderParams, Vocab, forward_loss, generate_greedy
from .projector import ProjectedEmbedding, ProjectorParams, project
from .rng import SplitMix64
from .tensor import Tensor

MODULE_NAMES = ("ce", "projector", "decoder")

DEFAULT_INSTRUCTION = "describe the changes"


@dataclass
class ModelConfig:
    lv: int
    dv: int
    d_l: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    mlp_ratio: int = 4
    max_seq: int = 256
    projector_hidden: int | None = None
    fusion: str = "ce"  # "ce" or "concat"
    instruction: str = DEFAULT_INSTRUCTION
    block_sigma: float = 0.02
    embed_sigma: float = 1.0
    head_sigma: float = 0.02

    def __post_init__(self):
        if self.fusion not in ("ce", "concat"):
            raise ValueError(f"unknown fusion kind {self.fusion!r}")

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            d_model=self.d_l,
            n_blocks=self.n_blocks,
            n_heads=self.n_heads,
            mlp_ratio=self.mlp_ratio,
            max_seq=self.max_seq,
            block_sigma=self.block_sigma,
            embed_sigma=self.embed_sigma,
            head_sigma=self.head_sigma,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CaptionModel:
    """Parameter bundle plus the forward paths the trainer and CLI need."""

    def __init__(self, config: ModelConfig, vocab: Vocab, fusion, projector: ProjectorParams, decoder: DecoderParams):
        self.config = config
        self.vocab = vocab
        self.fusion = fusion
        self.projector = projector
        self.decoder = decoder

    @classmethod
    def build(cls, config: ModelConfig, vocab: Vocab, seed: int = 0) -> "CaptionModel":
        master = SplitMix64(seed)
        fusion_seed, proj_seed, dec_seed = (master.spawn_seed() for _ in range(3))
        if config.fusion == "ce":
            fusion = CEParams.build(config.lv, config.dv, seed=fusion_seed)
        else:
            fusion = ConcatFusionParams.build(config.lv, config.dv, seed=fusion_seed)
        projector = ProjectorParams.build(
            config.dv, config.d_l, seed=proj_seed, hidden=config.projector_hidden
        )
        decoder = DecoderParams.build(len(vocab), config.decoder_config(), seed=dec_seed)
        return cls(config, vocab, fusion, projector, decoder)

    # -- parameter registry ------------------------------------------------

    def named_modules(self) -> dict[str, list[tuple[str, Tensor]]]:
        return {
            "ce": self.fusion.named(),
            "projector": self.projector.named(),
            "decoder": self.decoder.named(),
        }

    def parameters(self, modules=MODULE_NAMES) -> list[tuple[str, Tensor]]:
        registry = self.named_modules()
        out = []
        for mod in modules:
            if mod not in registry:
                raise KeyError(f"unknown module {mod!r}; expected one of {sorted(registry)}")
            out.extend((f"{mod}.{name}", t) for name, t in registry[mod])
        return out

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    # -- forward paths -----------------------------------------------------

    def fused_features(self, pair: FeaturePair) -> Tensor:
        if isinstance(self.fusion, CEParams):
            return ce_forward(pair, self.fusion)
        return concat_fusion_forward(pair, self.fusion)

    def visual_tokens(self, visual: FeaturePair | Tensor) -> ProjectedEmbedding:
        """Project a bi-temporal pair (through fusion) or a single frame (directly)."""
        if isinstance(visual, FeaturePair):
            return project(self.fused_features(visual), self.projector)
        return project(visual, self.projector)

    def sample_loss(self, pair: FeaturePair | Tensor, prompt_ids, target_ids) -> Tensor:
        return forward_loss(
            self.visual_tokens(pair),
            prompt_ids,
            target_ids,
            self.decoder,
            bos_id=self.vocab.bos_id,
            eos_id=self.vocab.eos_id,
        )

    def batch_loss(self, batch) -> Tensor:
        """Mean of per-sample losses; batch items are (visual, prompt_ids, target_ids)."""
        from . import tensor as T

        total = None
        for visual, prompt_ids, target_ids in batch:
            loss = self.sample_loss(visual, prompt_ids, target_ids)
            total = loss if total is None else T.add(total, loss)
        if total is None:
            raise ValueError("batch_loss needs at least one sample")
        return T.scale(total, 1.0 / len(batch))

    def generate(self, pair: FeaturePair | Tensor, prompt_ids, max_new: int = 32) -> list[int]:
        return generate_greedy(
            self.visual_tokens(pair),
            prompt_ids,
            self.decoder,
            max_new=max_new,
            bos_id=self.vocab.bos_id,
            eos_id=self.vocab.eos_id,
        )

    def caption(self, pair: FeaturePair | Tensor, prompt: str | None = None, max_new: int = 32) -> str:
        """Greedy caption for a prompt string; out-of-vocabulary prompt words
        (e.g. augmentation clues) are skipped rather than rejected."""
        text = prompt if prompt is not None else self.config.instruction
        return self.vocab.decode(self.generate(pair, self.vocab.encode(text, skip_unknown=True), max_new=max_new))
