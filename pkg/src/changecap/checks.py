"""Gradient-integrity suites: finite differences vs backward() per module.

Each suite builds a seeded instance, defines a scalar loss, and returns the
max relative error over the checked coordinates. The CLI `gradcheck`
subcommand and the acceptance tests both run these.

Module-level suites probe at h=1e-5: at the oracle's default h=1e-4 the
central-difference truncation of GELU's third derivative (~1e-4 relative)
drowns the tolerances, while 1e-5 keeps truncation near 1e-6 and stays far
above the float64 cancellation floor.
"""

from __future__ import annotations

from . import tensor as T
from .ce import CEParams, FeaturePair, ce_forward
from .decoder import Vocab
from .model import CaptionModel, ModelConfig
from .projector import ProjectorParams, project
from .tensor import finite_diff_check

TOLERANCES = {
    "tensor": 1e-6,
    "ce": 1e-4,
    "projector": 1e-5,
    "decoder": 1e-3,
    "chain": 1e-3,
}


def _random_pair(lv: int, dv: int, seed: int) -> FeaturePair:
    return FeaturePair(
        T.seeded_normal((lv, dv), 1.0, seed),
        T.seeded_normal((lv, dv), 1.0, seed + 1),
    )


def _sq_sum(t):
    return T.tsum(T.mul(t, t))


def tensor_ops_check(seed: int = 0, h: float = 1e-4) -> float:
    """Primitive ops: conv2d, matmul, layer_norm, causal attention, cross-entropy."""
    worst = 0.0

    x = T.seeded_normal((2, 5, 5), 1.0, seed, requires_grad=True)
    w = T.seeded_normal((3, 2, 3, 3), 0.5, seed + 1, requires_grad=True)
    b = T.seeded_normal((3,), 0.5, seed + 2, requires_grad=True)
    worst = max(worst, finite_diff_check(lambda: _sq_sum(T.conv2d(x, w, b, padding=1)), [x, w, b], h=h))

    a = T.seeded_normal((3, 4), 1.0, seed + 3, requires_grad=True)
    m = T.seeded_normal((4, 2), 1.0, seed + 4, requires_grad=True)
    worst = max(worst, finite_diff_check(lambda: _sq_sum(T.matmul(a, m)), [a, m], h=h))

    xs = T.seeded_normal((4, 6), 1.0, seed + 5, requires_grad=True)
    gain = T.seeded_normal((6,), 0.3, seed + 6, requires_grad=True)
    bias = T.seeded_normal((6,), 0.3, seed + 7, requires_grad=True)
    worst = max(worst, finite_diff_check(lambda: _sq_sum(T.layer_norm(xs, gain, bias)), [xs, gain, bias], h=h))

    q = T.seeded_normal((5, 4), 1.0, seed + 8, requires_grad=True)
    k = T.seeded_normal((5, 4), 1.0, seed + 9, requires_grad=True)
    v = T.seeded_normal((5, 4), 1.0, seed + 10, requires_grad=True)
    worst = max(worst, finite_diff_check(lambda: _sq_sum(T.causal_attention(q, k, v)), [q, k, v], h=h))

    logits = T.seeded_normal((4, 5), 1.0, seed + 11, requires_grad=True)
    targets = [1, 4, -100, 2]
    worst = max(worst, finite_diff_check(lambda: T.cross_entropy(logits, targets), [logits], h=h))

    return worst


def ce_check(lv: int = 16, dv: int = 8, seed: int = 0, h: float = 1e-5) -> float:
    """All CEParams coordinates on loss = sum(ce_forward(pair)^2)."""
    pair = _random_pair(lv, dv, seed + 100)
    params = CEParams.build(lv, dv, seed=seed)
    tensors = [t for _, t in params.named()]

    def loss():
        out = ce_forward(pair, params)
        return T.tsum(T.mul(out, out))

    return finite_diff_check(loss, tensors, h=h)


def projector_check(lv: int = 16, dv: int = 8, dl: int = 32, seed: int = 0, h: float = 1e-5) -> float:
    """All ProjectorParams coordinates on loss = sum(project(x)^2)."""
    x = T.seeded_normal((lv, dv), 1.0, seed + 200)
    params = ProjectorParams.build(dv, dl, seed=seed)
    tensors = [t for _, t in params.named()]

    def loss():
        out = project(x, params).tokens
        return T.tsum(T.mul(out, out))

    return finite_diff_check(loss, tensors, h=h)


def _chain_fixture(lv: int, dv: int, dl: int, seed: int):
    """Seeded full-chain instance built for meaningful finite differences.

    Weights are drawn wider than the training init and the conv biases sit
    well above zero: that keeps every ReLU live and away from its kink and
    keeps true gradients far above the float64 cancellation floor, so a
    failing check means a wrong derivative rather than probe noise.
    """
    import numpy as np

    from .decoder import DecoderParams
    from .rng import SplitMix64, normals

    vocab = Vocab(["a", "structure", "appears", "in", "the", "top", "left", "describe", "changes"])
    config = ModelConfig(lv=lv, dv=dv, d_l=dl, block_sigma=0.25, embed_sigma=1.0, head_sigma=0.5)
    fusion = CEParams.build(lv, dv, seed=seed, sigma=0.25)
    bias_rng = SplitMix64(seed + 7)
    for name, t in fusion.named():
        if name.endswith("_b"):
            t.data = 0.3 + 0.2 * np.abs(normals(t.size, bias_rng)).reshape(t.shape)
    projector = ProjectorParams.build(dv, dl, seed=seed + 1, sigma=0.25)
    decoder = DecoderParams.build(len(vocab), config.decoder_config(), seed=seed + 2)
    model = CaptionModel(config, vocab, fusion, projector, decoder)

    pair = _random_pair(lv, dv, seed + 300)
    prompt_ids = vocab.encode("describe the changes")
    target_ids = vocab.encode("a structure appears in the top left")
    return model, pair, prompt_ids, target_ids


def _decoder_coord_sets(model: CaptionModel, prompt_ids, target_ids):
    """Restrict the embedding-table probe to rows of tokens that occur in the
    sequence; other rows never enter the forward pass (row gather), so their
    true gradient is structurally zero and finite differences see only noise."""
    used = sorted(
        set(prompt_ids) | set(target_ids) | {model.vocab.bos_id, model.vocab.eos_id}
    )
    d = model.decoder.config.d_model
    embed_coords = [row * d + col for row in used for col in range(d)]
    sets: list = []
    for name, _ in model.decoder.named():
        sets.append(embed_coords if name == "embed" else None)
    return sets


def decoder_check(
    lv: int = 16, dv: int = 8, dl: int = 32, seed: int = 0, h: float = 1e-5, per_tensor: int = 5
) -> float:
    """Random per-tensor coordinate subset of DecoderParams on the composed loss."""
    model, pair, prompt_ids, target_ids = _chain_fixture(lv, dv, dl, seed)
    tensors = [t for _, t in model.decoder.named()]

    def loss():
        return model.sample_loss(pair, prompt_ids, target_ids)

    return finite_diff_check(
        loss,
        tensors,
        h=h,
        max_coords_per_param=per_tensor,
        seed=seed,
        coord_sets=_decoder_coord_sets(model, prompt_ids, target_ids),
    )


def chain_check(
    lv: int = 16, dv: int = 8, dl: int = 32, seed: int = 0, h: float = 1e-5, decoder_per_tensor: int = 5
) -> dict[str, float]:
    """Composed CE -> projector -> decoder loss; every CE and projector
    coordinate, a seeded 5-per-tensor subset of the decoder. Returns
    per-module max relative errors."""
    model, pair, prompt_ids, target_ids = _chain_fixture(lv, dv, dl, seed)

    def loss():
        return model.sample_loss(pair, prompt_ids, target_ids)

    ce_tensors = [t for _, t in model.fusion.named()]
    proj_tensors = [t for _, t in model.projector.named()]
    dec_tensors = [t for _, t in model.decoder.named()]
    return {
        "ce": finite_diff_check(loss, ce_tensors, h=h),
        "projector": finite_diff_check(loss, proj_tensors, h=h),
        "decoder": finite_diff_check(
            loss,
            dec_tensors,
            h=h,
            max_coords_per_param=decoder_per_tensor,
            seed=seed,
            coord_sets=_decoder_coord_sets(model, prompt_ids, target_ids),
        ),
    }


def run_suite(name: str, lv: int = 16, dv: int = 8, dl: int = 32, seed: int = 0) -> float:
    if name == "tensor":
        return tensor_ops_check(seed=seed)
    if name == "ce":
        return ce_check(lv, dv, seed=seed)
    if name == "projector":
        return projector_check(lv, dv, dl, seed=seed)
    if name == "decoder":
        return decoder_check(lv, dv, dl, seed=seed)
    if name == "chain":
        return max(chain_check(lv, dv, dl, seed=seed).values())
    raise ValueError(f"unknown gradcheck suite {name!r}")
