"""Network pieces: shared encoder, attention-shifting decoder blocks,
morphological feature perturbation, and parameter initialisation.

The segmentation net is a U-shaped encoder/decoder. MisMatch pairs one
decoder built from positive attention shifting blocks (PASB, dilated side
branch that inflates foreground) with one built from negative attention
shifting blocks (NASB, residual side branch that shrinks it); consistency
between the two heads is the training signal on unlabelled data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (Tensor, add, concat_channels, conv2d, instance_norm,
                       maxpool2, mul, record_op, relu, same_padding, scale,
                       sigmoid, upsample_bilinear2)
from .errors import ConfigError, ContractError, DimensionError, ParameterError

PASB_SIDE_DILATION = 5

# Decoder layouts per experiment variant. MM is the full method; MM-a/b/c
# ablate the attention decoders pairwise; Sup1 is a plain single-decoder
# U-net; Sup2 is the MM topology trained supervised-only; Morph swaps the
# learned attention for fixed grey-scale dilation/erosion on features.
DECODER_LAYOUTS: dict[str, tuple[str, ...]] = {
    "MM": ("pasb", "nasb"),
    "MM-a": ("standard", "standard"),
    "MM-b": ("standard", "nasb"),
    "MM-c": ("standard", "pasb"),
    "Sup1": ("standard",),
    "Sup2": ("pasb", "nasb"),
    "Morph": ("morph_dilate", "morph_erode"),
}

BLOCK_KINDS = ("standard", "pasb", "nasb")


@dataclass
class ConvPair:
    w: Tensor
    b: Tensor


@dataclass
class NormPair:
    gamma: Tensor
    beta: Tensor


@dataclass
class BlockParams:
    """Two main conv stages plus, for attention kinds, two side stages.

    Side convolutions preserve the working channel width; the side branch
    reads the first main stage's output, so NASB's per-layer identity
    skips type-check and PASB sees the same projection.
    """
    block_kind: str
    main_conv1: ConvPair
    main_norm1: NormPair
    main_conv2: ConvPair
    main_norm2: NormPair
    side_conv1: Optional[ConvPair] = None
    side_norm1: Optional[NormPair] = None
    side_conv2: Optional[ConvPair] = None
    side_norm2: Optional[NormPair] = None
    side_dilation: int = 1


@dataclass
class DecoderParams:
    kind: str                    # standard | pasb | nasb | morph_dilate | morph_erode
    blocks: list[BlockParams] = field(default_factory=list)
    head: ConvPair = None


@dataclass
class ModelParams:
    encoder: list[BlockParams]
    decoders: list[DecoderParams]
    in_channels: int
    base_width: int


# ---------------------------------------------------------------------------
# forward passes

def _stage(x, conv: ConvPair, norm: NormPair, dilation: int = 1):
    # conv -> relu -> norm, the unit every block is assembled from
    pad = same_padding(conv.w.shape[2], dilation)
    h = conv2d(x, conv.w, conv.b, padding=pad, dilation=dilation)
    return instance_norm(relu(h), norm.gamma, norm.beta)


def morph_perturb(x: Tensor, mode: str) -> Tensor:
    """Grey-scale 3x3 dilation or erosion on feature maps, same padding.

    Border windows are padded with -inf (dilate) / +inf (erode) so the pad
    never wins. Gradient routes to the selected element per window, first
    index on ties, like max pooling.
    """
    if mode not in ("dilate", "erode"):
        raise ParameterError(f"morph_perturb: unknown mode {mode!r}")
    if x.data.ndim != 4:
        raise DimensionError("morph_perturb expects NCHW input")
    n, c, h, w = x.shape
    fill = -np.inf if mode == "dilate" else np.inf
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win.reshape(n, c, h, w, 9)
    idx = win.argmax(axis=-1) if mode == "dilate" else win.argmin(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        nn, cc, ii, jj = np.ogrid[:n, :c, :h, :w]
        np.add.at(gp, (nn, cc, ii + idx // 3, jj + idx % 3), g)
        return (gp[:, :, 1:-1, 1:-1],)

    return record_op(f"morph_{mode}", (x,), out, bw)


def standard_block(x: Tensor, p: BlockParams, morph_mode: str | None = None,
                   capture: dict | None = None) -> Tensor:
    """Two conv/relu/norm stages. With morph_mode set, each stage output is
    morphologically perturbed (two morph_perturb calls per block)."""
    if p.block_kind != "standard":
        raise ContractError(f"standard_block got a {p.block_kind!r} block")
    h = _stage(x, p.main_conv1, p.main_norm1)
    if morph_mode is not None:
        h = morph_perturb(h, morph_mode)
    out = _stage(h, p.main_conv2, p.main_norm2)
    if morph_mode is not None:
        out = morph_perturb(out, morph_mode)
    if capture is not None:
        capture["m"] = out
    return out


def pasb(x: Tensor, p: BlockParams, capture: dict | None = None) -> Tensor:
    """Positive attention shifting block: out = m + m*a.

    The side branch runs two dilated conv stages (rate 5, effective extent
    11) over the first main stage's output and squashes to an attention
    map a in (0,1); attention above 0.5 inflates the main features.
    """
    if p.block_kind != "pasb":
        raise ContractError(f"pasb got a {p.block_kind!r} block")
    h = _stage(x, p.main_conv1, p.main_norm1)
    m = _stage(h, p.main_conv2, p.main_norm2)
    s = _stage(h, p.side_conv1, p.side_norm1, dilation=p.side_dilation)
    s = _stage(s, p.side_conv2, p.side_norm2, dilation=p.side_dilation)
    a = sigmoid(s)
    if capture is not None:
        capture["m"], capture["a"] = m, a
    return add(m, mul(m, a))


def nasb(x: Tensor, p: BlockParams, capture: dict | None = None) -> Tensor:
    """Negative attention shifting block: out = m + m*a with a residual
    side branch.

    Each side conv stage carries an identity skip: h2 = h + stage(h),
    s = h2 + stage(h2), a = sigmoid(s). With zero side weights the skips
    pass h straight through, so a = sigmoid(h).
    """
    if p.block_kind != "nasb":
        raise ContractError(f"nasb got a {p.block_kind!r} block")
    h = _stage(x, p.main_conv1, p.main_norm1)
    m = _stage(h, p.main_conv2, p.main_norm2)
    h2 = add(h, _stage(h, p.side_conv1, p.side_norm1))
    s = add(h2, _stage(h2, p.side_conv2, p.side_norm2))
    a = sigmoid(s)
    if capture is not None:
        capture["m"], capture["a"] = m, a
    return add(m, mul(m, a))


def encoder_forward(image: Tensor, blocks: list[BlockParams]):
    """Three standard blocks with 2x2 max pooling between them.

    Returns (bottleneck, [skip1, skip2]) where skips keep the two upper
    resolutions for the decoders. Spatial dims must be divisible by 4.
    """
    if image.data.ndim != 4:
        raise DimensionError("encoder_forward expects an NCHW image")
    h, w = image.shape[2], image.shape[3]
    if h % 4 or w % 4:
        raise DimensionError(f"encoder needs spatial dims divisible by 4, "
                             f"got {h}x{w}")
    s1 = standard_block(image, blocks[0])
    s2 = standard_block(maxpool2(s1), blocks[1])
    bottleneck = standard_block(maxpool2(s2), blocks[2])
    return bottleneck, [s1, s2]


_MORPH_MODES = {"morph_dilate": "dilate", "morph_erode": "erode"}


def _block_forward(x, p: BlockParams, decoder_kind: str):
    if decoder_kind in ("standard", "morph_dilate", "morph_erode"):
        return standard_block(x, p, morph_mode=_MORPH_MODES.get(decoder_kind))
    if decoder_kind == "pasb":
        return pasb(x, p)
    if decoder_kind == "nasb":
        return nasb(x, p)
    raise ContractError(f"unknown decoder kind {decoder_kind!r}")


def decoder_forward(bottleneck: Tensor, skips: list[Tensor],
                    dec: DecoderParams) -> Tensor:
    """Upsample/concat/block twice, one more block, then a 1x1 conv head
    with sigmoid. Output is a probability map in (0,1), input-sized."""
    h = concat_channels(upsample_bilinear2(bottleneck), skips[1])
    h = _block_forward(h, dec.blocks[0], dec.kind)
    h = concat_channels(upsample_bilinear2(h), skips[0])
    h = _block_forward(h, dec.blocks[1], dec.kind)
    h = _block_forward(h, dec.blocks[2], dec.kind)
    logits = conv2d(h, dec.head.w, dec.head.b, padding=0, dilation=1)
    return sigmoid(logits)


def model_forward(params: ModelParams, image: Tensor) -> list[Tensor]:
    """Run the shared encoder once and every decoder on its outputs."""
    bottleneck, skips = encoder_forward(image, params.encoder)
    return [decoder_forward(bottleneck, skips, d) for d in params.decoders]


def average_prediction(probs: list[Tensor]) -> Tensor:
    if len(probs) == 1:
        return probs[0]
    if len(probs) != 2:
        raise ContractError(f"expected 1 or 2 heads, got {len(probs)}")
    return scale(add(probs[0], probs[1]), 0.5)


def mismatch_forward(image: Tensor, params: ModelParams):
    """Forward pass of a two-headed model: (p1, p2, averaged prediction)."""
    if len(params.decoders) != 2:
        raise ContractError("mismatch_forward needs a two-decoder model")
    probs = model_forward(params, image)
    return probs[0], probs[1], average_prediction(probs)


# ---------------------------------------------------------------------------
# initialisation

def _init_conv(rng, c_out: int, c_in: int, k: int, dtype) -> ConvPair:
    # Kaiming fan-in scaling for relu stages; biases start at zero
    fan_in = c_in * k * k
    std = np.sqrt(2.0 / fan_in)
    w = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
    return ConvPair(Tensor(w, requires_grad=True),
                    Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))


def _init_norm(c: int, dtype) -> NormPair:
    return NormPair(Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                    Tensor(np.zeros(c, dtype=dtype), requires_grad=True))


def _init_block(rng, kind: str, c_in: int, c_work: int, dtype,
                side_dilation: int = 1) -> BlockParams:
    if kind not in BLOCK_KINDS:
        raise ContractError(f"unknown block kind {kind!r}")
    p = BlockParams(
        block_kind=kind,
        main_conv1=_init_conv(rng, c_work, c_in, 3, dtype),
        main_norm1=_init_norm(c_work, dtype),
        main_conv2=_init_conv(rng, c_work, c_work, 3, dtype),
        main_norm2=_init_norm(c_work, dtype),
        side_dilation=side_dilation,
    )
    if kind in ("pasb", "nasb"):
        p.side_conv1 = _init_conv(rng, c_work, c_work, 3, dtype)
        p.side_norm1 = _init_norm(c_work, dtype)
        p.side_conv2 = _init_conv(rng, c_work, c_work, 3, dtype)
        p.side_norm2 = _init_norm(c_work, dtype)
    return p


def init_encoder_params(channels: int, in_channels: int, seed,
                        dtype=np.float32) -> list[BlockParams]:
    """Three standard blocks at widths [C, 2C, 4C]."""
    rng = np.random.default_rng(seed)
    c = channels
    return [
        _init_block(rng, "standard", in_channels, c, dtype),
        _init_block(rng, "standard", c, 2 * c, dtype),
        _init_block(rng, "standard", 2 * c, 4 * c, dtype),
    ]


def init_decoder_params(kind: str, channels: int, seed,
                        dtype=np.float32) -> DecoderParams:
    """Decoder blocks at (6C->2C, 3C->C, C->C) plus the 1x1 head."""
    if kind not in DECODER_LAYOUTS["MM"] + ("standard", "morph_dilate",
                                            "morph_erode"):
        raise ConfigError(f"unknown decoder kind {kind!r}")
    rng = np.random.default_rng(seed)
    c = channels
    block_kind = kind if kind in ("pasb", "nasb") else "standard"
    dil = PASB_SIDE_DILATION if kind == "pasb" else 1
    blocks = [
        _init_block(rng, block_kind, 6 * c, 2 * c, dtype, side_dilation=dil),
        _init_block(rng, block_kind, 3 * c, c, dtype, side_dilation=dil),
        _init_block(rng, block_kind, c, c, dtype, side_dilation=dil),
    ]
    head = _init_conv(rng, 1, c, 1, dtype)
    return DecoderParams(kind=kind, blocks=blocks, head=head)


def init_params(variant: str, channels: int, in_channels: int = 1,
                seed: int = 0, dtype=np.float32) -> ModelParams:
    """Build a full model for an experiment variant.

    Encoder and each decoder draw from independent child seeds, so two
    decoders of the same kind still start at different weights.
    """
    if variant not in DECODER_LAYOUTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of "
                          f"{sorted(DECODER_LAYOUTS)}")
    if channels < 1:
        raise ParameterError("channels must be >= 1")
    kinds = DECODER_LAYOUTS[variant]
    children = np.random.SeedSequence(seed).spawn(1 + len(kinds))
    encoder = init_encoder_params(channels, in_channels, children[0], dtype)
    decoders = [init_decoder_params(kind, channels, child, dtype)
                for kind, child in zip(kinds, children[1:])]
    return ModelParams(encoder=encoder, decoders=decoders,
                       in_channels=in_channels, base_width=channels)


# ---------------------------------------------------------------------------
# parameter traversal

def _block_items(prefix: str, p: BlockParams):
    yield f"{prefix}.main1.w", p.main_conv1.w
    yield f"{prefix}.main1.b", p.main_conv1.b
    yield f"{prefix}.main1.gamma", p.main_norm1.gamma
    yield f"{prefix}.main1.beta", p.main_norm1.beta
    yield f"{prefix}.main2.w", p.main_conv2.w
    yield f"{prefix}.main2.b", p.main_conv2.b
    yield f"{prefix}.main2.gamma", p.main_norm2.gamma
    yield f"{prefix}.main2.beta", p.main_norm2.beta
    if p.side_conv1 is not None:
        yield f"{prefix}.side1.w", p.side_conv1.w
        yield f"{prefix}.side1.b", p.side_conv1.b
        yield f"{prefix}.side1.gamma", p.side_norm1.gamma
        yield f"{prefix}.side1.beta", p.side_norm1.beta
        yield f"{prefix}.side2.w", p.side_conv2.w
        yield f"{prefix}.side2.b", p.side_conv2.b
        yield f"{prefix}.side2.gamma", p.side_norm2.gamma
        yield f"{prefix}.side2.beta", p.side_norm2.beta


def named_params(model: ModelParams) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) listing; the order defines checkpoint layout."""
    items: list[tuple[str, Tensor]] = []
    for i, blk in enumerate(model.encoder):
        items.extend(_block_items(f"enc{i}", blk))
    for j, dec in enumerate(model.decoders):
        for i, blk in enumerate(dec.blocks):
            items.extend(_block_items(f"dec{j}.block{i}", blk))
        items.append((f"dec{j}.head.w", dec.head.w))
        items.append((f"dec{j}.head.b", dec.head.b))
    return items


def decoder_param_names(model: ModelParams, index: int) -> list[str]:
    return [n for n, _ in named_params(model) if n.startswith(f"dec{index}.")]


def _clone_conv(cp: ConvPair) -> ConvPair:
    return ConvPair(Tensor(cp.w.data.copy(), requires_grad=True),
                    Tensor(cp.b.data.copy(), requires_grad=True))


def _clone_norm(npair: NormPair) -> NormPair:
    return NormPair(Tensor(npair.gamma.data.copy(), requires_grad=True),
                    Tensor(npair.beta.data.copy(), requires_grad=True))


def _clone_block(p: BlockParams) -> BlockParams:
    q = BlockParams(
        block_kind=p.block_kind,
        main_conv1=_clone_conv(p.main_conv1), main_norm1=_clone_norm(p.main_norm1),
        main_conv2=_clone_conv(p.main_conv2), main_norm2=_clone_norm(p.main_norm2),
        side_dilation=p.side_dilation,
    )
    if p.side_conv1 is not None:
        q.side_conv1 = _clone_conv(p.side_conv1)
        q.side_norm1 = _clone_norm(p.side_norm1)
        q.side_conv2 = _clone_conv(p.side_conv2)
        q.side_norm2 = _clone_norm(p.side_norm2)
    return q


def clone_params(model: ModelParams) -> ModelParams:
    """Deep copy; snapshots stay frozen while training keeps mutating."""
    return ModelParams(
        encoder=[_clone_block(b) for b in model.encoder],
        decoders=[DecoderParams(kind=d.kind,
                                blocks=[_clone_block(b) for b in d.blocks],
                                head=_clone_conv(d.head))
                  for d in model.decoders],
        in_channels=model.in_channels,
        base_width=model.base_width,
    )
