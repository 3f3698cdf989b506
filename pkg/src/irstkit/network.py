"""U-shaped small-target segmentation network.

Four-stage (configurable) encoder-decoder: each encoder stage is two 3x3
conv+BN+LeakyReLU layers, optionally followed by phase rectification and style
recomposition; skips are taken after those and before pooling. Decoding
upsamples, projects channels with a 1x1 conv, refines the skip through
orthogonal attention, concatenates and applies one 3x3 conv+BN+LeakyReLU.
A 1x1 conv plus sigmoid produces the probability map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import style as style_mod
from .spectral import PrmParams, prm_forward
from .tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    Tensor,
    axis_mean,
    batch_norm,
    concat_channels,
    conv2d,
    leaky_relu,
    maxpool2,
    sigmoid,
    upsample,
)


@dataclass
class ModelConfig:
    stages: int = 4
    base_channels: int = 16
    in_channels: int = 1
    input_size: tuple[int, int] = (256, 256)
    prm: bool | tuple[bool, ...] = True
    oam: bool = True
    ssr: bool = True
    ssr_stages: tuple[int, ...] = (1, 2)
    tau: float = 0.3
    lam: float = 0.3
    alpha: float = 0.95
    upsample_mode: str = "bilinear"
    ssr_rank_by: str = "sigma"
    zero_init: bool = False
    residual_init: bool = True  # zero the last conv of each branch: identity start
    dtype: type = np.float32

    def prm_flags(self) -> tuple[bool, ...]:
        if isinstance(self.prm, (tuple, list)):
            flags = tuple(bool(v) for v in self.prm)
            if len(flags) != self.stages:
                raise ValueError(f"prm flags must have {self.stages} entries")
            return flags
        return (bool(self.prm),) * self.stages

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * (2 ** (stage - 1))

    def validate(self) -> None:
        if self.stages < 2:
            raise ValueError("stages must be >= 2")
        h, w = self.input_size
        for n in (h, w):
            if n < 1 or (n & (n - 1)) != 0:
                raise ValueError(f"input size must be powers of two, got {h}x{w}")
        if h % (2 ** (self.stages - 1)) or w % (2 ** (self.stages - 1)):
            raise ValueError("input size must be divisible by 2^(stages-1)")
        if not set(self.ssr_stages) <= set(range(1, self.stages + 1)):
            raise ValueError(f"ssr_stages {self.ssr_stages} outside 1..{self.stages}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0,1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0,1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0,1)")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")


# -- parameter construction ----------------------------------------------------


def _make_conv(rng, c_in: int, c_out: int, k: int, dtype, zero: bool = False) -> ConvParams:
    if zero:
        w = np.zeros((c_out, c_in, k, k), dtype=dtype)
    else:
        bound = np.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    b = np.zeros((1, c_out, 1, 1), dtype=dtype)
    return ConvParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(b, requires_grad=True),
        stride=1,
        padding=(k - 1) // 2,
    )


def make_prm_params(rng, channels: int, dtype, zero: bool = False,
                    residual: bool = False) -> PrmParams:
    hidden = PrmParams.hidden_width(channels)
    return PrmParams(
        bn=BatchNormParams.create(channels, dtype=dtype),
        phase_c1=_make_conv(rng, channels, hidden, 1, dtype, zero),
        phase_c2=_make_conv(rng, hidden, channels, 1, dtype, zero or residual),
        amp_c1=_make_conv(rng, channels, hidden, 1, dtype, zero),
        amp_c2=_make_conv(rng, hidden, channels, 1, dtype, zero or residual),
    )


@dataclass
class OamParams:
    """Directional 1x1-conv branches: each maps 2C -> C/2 -> C."""

    h1: ConvParams
    h2: ConvParams
    w1: ConvParams
    w2: ConvParams


def make_oam_params(rng, channels: int, dtype, zero: bool = False,
                    residual: bool = False) -> OamParams:
    hidden = max(1, channels // 2)
    return OamParams(
        h1=_make_conv(rng, 2 * channels, hidden, 1, dtype, zero),
        h2=_make_conv(rng, hidden, channels, 1, dtype, zero or residual),
        w1=_make_conv(rng, 2 * channels, hidden, 1, dtype, zero),
        w2=_make_conv(rng, hidden, channels, 1, dtype, zero or residual),
    )


@dataclass
class EncoderBlock:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams


@dataclass
class DecoderStage:
    proj: ConvParams          # 1x1, halves channels after upsampling
    oam: OamParams | None
    conv: ConvParams          # 3x3 on the concatenated features
    bn: BatchNormParams


# -- attention ----------------------------------------------------------------


def oam_refine(skip: Tensor, dec: Tensor, p: OamParams) -> tuple[Tensor, Tensor]:
    """Gate the skip with a mask built from orthogonal axis descriptors.

    Height and width descriptors are means over the opposite axis of both
    inputs, concatenated channel-wise and passed through per-direction 1x1
    bottlenecks; their broadcast sum is squashed to the mask. Positions along
    the kept axis are never mixed, so row/column structure survives.
    """
    if skip.shape != dec.shape:
        raise ShapeError(f"oam_refine: shape mismatch {skip.shape} vs {dec.shape}")
    gh = concat_channels(axis_mean(skip, "width"), axis_mean(dec, "width"))
    gw = concat_channels(axis_mean(skip, "height"), axis_mean(dec, "height"))
    bh = conv2d(leaky_relu(conv2d(gh, p.h1)), p.h2)
    bw = conv2d(leaky_relu(conv2d(gw, p.w1)), p.w2)
    mask = sigmoid(bh + bw)
    return mask * skip, mask


def pooled_mask(skip: Tensor, dec: Tensor, p: OamParams) -> Tensor:
    """Ablation baseline: 2-D global pooling instead of orthogonal descriptors.

    The resulting mask is constant over space, hence invariant to any spatial
    permutation of the inputs; the contrast with oam_refine is what the
    permutation tests check.
    """
    g = concat_channels(axis_mean(skip, "spatial"), axis_mean(dec, "spatial"))
    b = conv2d(leaky_relu(conv2d(g, p.h1)), p.h2)
    return sigmoid(b + Tensor.zeros((1, 1) + skip.shape[2:], dtype=skip.dtype))


# -- the model -----------------------------------------------------------------


class SmallTargetNet:
    def __init__(self, cfg: ModelConfig, domains: tuple[str, ...] = (), seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.domains = tuple(domains)
        rng = np.random.default_rng(seed)
        dt = cfg.dtype
        prm_flags = cfg.prm_flags()

        self.encoder: list[EncoderBlock] = []
        self.prm: list[PrmParams | None] = []
        c_prev = cfg.in_channels
        for l in range(1, cfg.stages + 1):
            c = cfg.stage_channels(l)
            self.encoder.append(
                EncoderBlock(
                    conv1=_make_conv(rng, c_prev, c, 3, dt),
                    bn1=BatchNormParams.create(c, dtype=dt),
                    conv2=_make_conv(rng, c, c, 3, dt),
                    bn2=BatchNormParams.create(c, dtype=dt),
                )
            )
            self.prm.append(
                make_prm_params(rng, c, dt, zero=cfg.zero_init, residual=cfg.residual_init)
                if prm_flags[l - 1]
                else None
            )
            c_prev = c

        self.decoder: list[DecoderStage] = []
        for l in range(cfg.stages - 1, 0, -1):
            c = cfg.stage_channels(l)
            c_up = cfg.stage_channels(l + 1)
            self.decoder.append(
                DecoderStage(
                    proj=_make_conv(rng, c_up, c, 1, dt),
                    oam=make_oam_params(rng, c, dt, zero=cfg.zero_init,
                                        residual=cfg.residual_init) if cfg.oam else None,
                    conv=_make_conv(rng, 2 * c, c, 3, dt),
                    bn=BatchNormParams.create(c, dtype=dt),
                )
            )
        self.head = _make_conv(rng, cfg.base_channels, 1, 1, dt)

        self.ssr_sites: dict[int, style_mod.SsrSite] = {}
        if cfg.ssr and self.domains:
            for l in cfg.ssr_stages:
                self.ssr_sites[l] = style_mod.SsrSite(
                    stage=l,
                    prototypes=[style_mod.StylePrototype(domain_id=d) for d in self.domains],
                    tau=cfg.tau,
                    lam=cfg.lam,
                    alpha=cfg.alpha,
                    rank_by=cfg.ssr_rank_by,
                )

    # -- bookkeeping -----------------------------------------------------------

    def _conv_items(self):
        for l, blk in enumerate(self.encoder, start=1):
            yield f"enc{l}.conv1", blk.conv1
            yield f"enc{l}.conv2", blk.conv2
        for l, p in enumerate(self.prm, start=1):
            if p is not None:
                yield f"prm{l}.phase1", p.phase_c1
                yield f"prm{l}.phase2", p.phase_c2
                yield f"prm{l}.amp1", p.amp_c1
                yield f"prm{l}.amp2", p.amp_c2
        for i, stage in enumerate(self.decoder):
            l = self.cfg.stages - 1 - i
            yield f"dec{l}.proj", stage.proj
            if stage.oam is not None:
                yield f"dec{l}.oam.h1", stage.oam.h1
                yield f"dec{l}.oam.h2", stage.oam.h2
                yield f"dec{l}.oam.w1", stage.oam.w1
                yield f"dec{l}.oam.w2", stage.oam.w2
            yield f"dec{l}.conv", stage.conv
        yield "head", self.head

    def _bn_items(self):
        for l, blk in enumerate(self.encoder, start=1):
            yield f"enc{l}.bn1", blk.bn1
            yield f"enc{l}.bn2", blk.bn2
        for l, p in enumerate(self.prm, start=1):
            if p is not None:
                yield f"prm{l}.bn", p.bn
        for i, stage in enumerate(self.decoder):
            l = self.cfg.stages - 1 - i
            yield f"dec{l}.bn", stage.bn

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, conv in self._conv_items():
            out.append((f"{name}.weight", conv.weight))
            out.append((f"{name}.bias", conv.bias))
        for name, bn in self._bn_items():
            out.append((f"{name}.gamma", bn.gamma))
            out.append((f"{name}.beta", bn.beta))
        return out

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        for _, bn in self._bn_items():
            bn.mode = mode

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.values for name, p in self.named_parameters()}
        for name, bn in self._bn_items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
            state[f"{name}.initialized"] = np.array([1.0 if bn.initialized else 0.0])
        for site in self.ssr_sites.values():
            state.update(style_mod.site_state_arrays(site))
        for m, dom in enumerate(self.domains):
            state[f"meta.domain.{m}.{dom}"] = np.array([1.0])
        return state

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        dt = self.cfg.dtype
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            p.values = arrays[name].reshape(p.shape).astype(dt)
        for name, bn in self._bn_items():
            bn.running_mean = arrays[f"{name}.running_mean"].reshape(-1).astype(dt)
            bn.running_var = arrays[f"{name}.running_var"].reshape(-1).astype(dt)
            bn.initialized = bool(arrays.get(f"{name}.initialized", np.zeros(1)).reshape(-1)[0])
        for site in self.ssr_sites.values():
            style_mod.load_site_state(site, arrays)

    # -- forward paths -----------------------------------------------------------

    def _block(self, x: Tensor, blk: EncoderBlock) -> Tensor:
        x = leaky_relu(batch_norm(conv2d(x, blk.conv1), blk.bn1))
        return leaky_relu(batch_norm(conv2d(x, blk.conv2), blk.bn2))

    def encode(self, x: Tensor, mode: str = "train", domain_ids=None, capture=None):
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if mode == "train" and self.ssr_sites and domain_ids is None:
            raise ValueError("encode: domain ids required in train mode with SSR enabled")
        self.set_mode(mode)
        skips = []
        for l in range(1, self.cfg.stages + 1):
            if l > 1:
                x = maxpool2(x)
            x = self._block(x, self.encoder[l - 1])
            if self.prm[l - 1] is not None:
                x = prm_forward(x, self.prm[l - 1])
            site = self.ssr_sites.get(l)
            if site is not None:
                x = style_mod.recompose(x, site, mode=mode, domain_ids=domain_ids)
            if capture is not None:
                capture.append((f"enc{l}", x))
            skips.append(x)
        return skips

    def decode_stage(self, d_next: Tensor, skip: Tensor, stage: DecoderStage) -> Tensor:
        d_up = conv2d(upsample(d_next, self.cfg.upsample_mode), stage.proj)
        if d_up.shape != skip.shape:
            raise ShapeError(f"decode_stage: {d_up.shape} does not match skip {skip.shape}")
        if stage.oam is not None:
            refined, _ = oam_refine(skip, d_up, stage.oam)
        else:
            refined = skip
        return leaky_relu(batch_norm(conv2d(concat_channels(refined, d_up), stage.conv), stage.bn))

    def forward(self, x: Tensor, mode: str = "train", domain_ids=None, capture=None) -> Tensor:
        skips = self.encode(x, mode=mode, domain_ids=domain_ids, capture=capture)
        d = skips[-1]
        for i, stage in enumerate(self.decoder):
            l = self.cfg.stages - 1 - i
            d = self.decode_stage(d, skips[l - 1], stage)
            if capture is not None:
                capture.append((f"dec{l}", d))
        out = sigmoid(conv2d(d, self.head))
        if capture is not None:
            capture.append(("head", out))
        return out


def predict_mask(prob, threshold: float = 0.5) -> np.ndarray:
    """Binarize a probability map: pixels strictly above the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    v = prob.values if isinstance(prob, Tensor) else np.asarray(prob)
    return (v > threshold).astype(np.uint8)
