"""Network assembly, configuration, analytic cost model and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.nn import Conv2d, Module, as_input
from .autodiff.tensor import Tensor
from .decoder import ConcatFusion, FusionInfo, SegHead, SpatialRefinementFusion
from .degconv import DEGConv, DegConfig, DegInfo
from .exceptions import ConfigError
from .transmixer import BlockInfo, TransMixerConfig, TransMixerStage

STRIDE = 32
FUSIONS = ("srf", "concat")
ARCHITECTURES = ("mixercseg", "cnn")


@dataclass
class ModelConfig:
    widths: Tuple[int, int, int, int] = (8, 16, 32, 64)
    state_dim: int = 4
    transmixer: TransMixerConfig = field(default_factory=TransMixerConfig)
    deg: DegConfig = field(default_factory=DegConfig)
    input_size: Tuple[int, int] = (64, 64)
    use_degconv: bool = True
    fusion: str = "srf"
    head_hidden: int = 64
    architecture: str = "mixercseg"

    def validate(self) -> "ModelConfig":
        widths = tuple(int(w) for w in self.widths)
        if len(widths) != 4:
            raise ConfigError(f"widths must list 4 stage widths, got {widths}")
        if min(widths) < 1:
            raise ConfigError(f"stage widths must be positive, got {widths}")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"stage widths must be strictly increasing, got {widths}")
        h, w = self.input_size
        if h % STRIDE or w % STRIDE or h < STRIDE or w < STRIDE:
            raise ConfigError(f"input size {(h, w)} must be a positive multiple of {STRIDE}")
        if self.state_dim < 1:
            raise ConfigError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.head_hidden < 1:
            raise ConfigError("head_hidden must be >= 1")
        self.transmixer.validate()
        self.deg.validate()
        for c in widths:
            if c % self.deg.reduce_r:
                raise ConfigError(f"width {c} is not divisible by reduce_r={self.deg.reduce_r}")
        return self

    def stage_sizes(self, height: Optional[int] = None, width: Optional[int] = None) -> List[Tuple[int, int]]:
        h, w = (height, width) if height is not None else self.input_size
        return [(h // (4 * 2 ** i), w // (4 * 2 ** i)) for i in range(4)]

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "state_dim": self.state_dim,
            "gamma": self.transmixer.gamma,
            "heads": self.transmixer.heads,
            "rank_direction": self.transmixer.rank_direction,
            "local_pool": self.transmixer.local_pool,
            "depth": self.transmixer.depth,
            "literal_delta": self.transmixer.literal_delta,
            "scan_directions": self.transmixer.scan_directions,
            "nbins": self.deg.n_bins,
            "cell_h": self.deg.cell[0],
            "cell_w": self.deg.cell[1],
            "view_h": self.deg.view[0],
            "view_w": self.deg.view[1],
            "strip_k": self.deg.strip_k,
            "reduce_r": self.deg.reduce_r,
            "input_size": list(self.input_size),
            "use_degconv": self.use_degconv,
            "fusion": self.fusion,
            "head_hidden": self.head_hidden,
            "architecture": self.architecture,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = set(cls().to_dict())
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        d = cls().to_dict()
        d.update(raw)
        try:
            cfg = cls(
                widths=tuple(int(w) for w in d["widths"]),
                state_dim=int(d["state_dim"]),
                transmixer=TransMixerConfig(
                    gamma=float(d["gamma"]), heads=int(d["heads"]), rank_direction=str(d["rank_direction"]),
                    local_pool=str(d["local_pool"]), depth=int(d["depth"]),
                    literal_delta=bool(d["literal_delta"]), scan_directions=int(d["scan_directions"]),
                ),
                deg=DegConfig(
                    view=(int(d["view_h"]), int(d["view_w"])), cell=(int(d["cell_h"]), int(d["cell_w"])),
                    n_bins=int(d["nbins"]), strip_k=int(d["strip_k"]), reduce_r=int(d["reduce_r"]),
                ),
                input_size=(int(d["input_size"][0]), int(d["input_size"][1])),
                use_degconv=bool(d["use_degconv"]),
                fusion=str(d["fusion"]),
                head_hidden=int(d["head_hidden"]),
                architecture=str(d["architecture"]),
            )
        except (TypeError, ValueError, IndexError) as err:
            raise ConfigError(f"malformed model config: {err}") from None
        return cfg.validate()

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw.get("model", raw))


@dataclass
class ForwardAux:
    pyramid: List[Tensor]
    refined: List[Tensor]
    blocks: List[List[BlockInfo]]
    deg: List[Optional[DegInfo]]
    fusion: FusionInfo


class Stem(Module):
    def __init__(self, out_ch: int, rng: np.random.Generator) -> None:
        self.conv1 = Conv2d(3, out_ch, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return ops.silu(self.conv2(ops.silu(self.conv1(x))))


class MixerCSeg(Module):
    """Stem, four TransMixer stages, per-level DEGConv, fusion and head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.widths
        self.stem = Stem(c[0], rng)
        self.stages = [TransMixerStage(c[i], cfg.state_dim, cfg.transmixer, rng) for i in range(4)]
        self.downs = [Conv2d(c[i], c[i + 1], 3, rng, stride=2, padding=1) for i in range(3)]
        self.degs = [DEGConv(c[i], cfg.deg, rng) for i in range(4)] if cfg.use_degconv else []
        self.fusion = SpatialRefinementFusion(c[0], rng) if cfg.fusion == "srf" else ConcatFusion()
        self.head = SegHead(sum(c), rng, cfg.head_hidden)

    def encode(self, x: Tensor) -> Tuple[List[Tensor], List[List[BlockInfo]]]:
        feats, infos = [], []
        f = self.stem(x)
        for i, stage in enumerate(self.stages):
            if i:
                f = self.downs[i - 1](f)
            f, info = stage(f)
            feats.append(f)
            infos.append(info)
        return feats, infos

    def forward(self, image, return_aux: bool = False):
        x = as_input(image, self)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ConfigError(f"expected a [3, H, W] image, got shape {x.shape}")
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ConfigError(f"image size {(h, w)} must be divisible by {STRIDE}")
        feats, infos = self.encode(x)
        refined, deg_infos = [], []
        for i, f in enumerate(feats):
            if self.degs:
                module = self.degs[i]
                module.cfg = self.cfg.deg.for_resolution(*f.shape[-2:])
                f2, dinfo = module(f)
            else:
                f2, dinfo = f, None
            refined.append(f2)
            deg_infos.append(dinfo)
        fused, finfo = self.fusion(refined)
        logits = self.head(fused, (h, w))
        if return_aux:
            return logits, ForwardAux(feats, refined, infos, deg_infos, finfo)
        return logits


class ConvStage(Module):
    """Residual pair of 3x3 convolutions (baseline encoder stage)."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tuple[Tensor, list]:
        return x + self.conv2(ops.silu(self.conv1(x))), []


class PlainCNN(MixerCSeg):
    """Same stem, widths, downsampling and head; convolutional stages, concat fusion."""

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.widths
        self.stem = Stem(c[0], rng)
        self.stages = [ConvStage(c[i], rng) for i in range(4)]
        self.downs = [Conv2d(c[i], c[i + 1], 3, rng, stride=2, padding=1) for i in range(3)]
        self.degs = []
        self.fusion = ConcatFusion()
        self.head = SegHead(sum(c), rng, cfg.head_hidden)


def build_model(cfg: ModelConfig, seed: int = 0) -> MixerCSeg:
    return PlainCNN(cfg, seed) if cfg.architecture == "cnn" else MixerCSeg(cfg, seed)


# ---------------------------------------------------------------------------
# analytic parameter and FLOP counts
# ---------------------------------------------------------------------------

def _conv_params(cin, cout, kh, kw, groups=1, bias=True) -> int:
    return cout * (cin // groups) * kh * kw + (cout if bias else 0)


def _edge_conv_params(c: int, k: int, r: int) -> int:
    mid = c // r
    return (_conv_params(c, mid, 1, 1) + 2 * _conv_params(mid, mid, 1, k, groups=mid)
            + _conv_params(2 * mid, 2 * mid, 3, 3, groups=2 * mid) + _conv_params(2 * mid, c, 1, 1))


def degconv_param_count(c: int, deg: DegConfig) -> int:
    embed = _conv_params(deg.n_bins, c, 1, 1) + _conv_params(c, c, 3, 3, groups=c) + 2 * c
    return embed + 3 * _edge_conv_params(c, deg.strip_k, deg.reduce_r)


def transmixer_param_count(d: int, n: int, tm: TransMixerConfig) -> int:
    dg = tm.global_width(d)
    dl = d - dg
    mamba = 3 * (d * d + d) + 4 * d + 2 * (d * n + n) + d * n
    if not tm.literal_delta:
        mamba += d * d + d
    attn = 4 * (dg * dg + dg) if dg else 0
    refine = (2 * dl + dl * dl + dl) if dl else 0
    return 2 * d + mamba + attn + refine


def param_breakdown(cfg: ModelConfig) -> Dict[str, int]:
    cfg.validate()
    c = cfg.widths
    parts = {
        "stem": _conv_params(3, c[0], 3, 3) + _conv_params(c[0], c[0], 3, 3),
        "downsample": sum(_conv_params(c[i], c[i + 1], 3, 3) for i in range(3)),
        "head": _conv_params(sum(c), cfg.head_hidden, 1, 1) + _conv_params(cfg.head_hidden, 1, 1, 1),
    }
    if cfg.architecture == "cnn":
        parts["encoder"] = sum(2 * _conv_params(ch, ch, 3, 3) for ch in c)
        parts["degconv"] = 0
        parts["fusion"] = 0
        return parts
    parts["encoder"] = cfg.transmixer.depth * sum(transmixer_param_count(ch, cfg.state_dim, cfg.transmixer) for ch in c)
    parts["degconv"] = sum(degconv_param_count(ch, cfg.deg) for ch in c) if cfg.use_degconv else 0
    parts["fusion"] = _conv_params(c[0], 1, 1, 1) if cfg.fusion == "srf" else 0
    return parts


def param_count(cfg: ModelConfig) -> int:
    return int(sum(param_breakdown(cfg).values()))


def _conv_flops(cin, cout, kh, kw, ho, wo, groups=1) -> int:
    return 2 * cout * (cin // groups) * kh * kw * ho * wo


def _upsample_flops(c, h, w) -> int:
    # four taps, one multiply-add each, per output element
    return 8 * c * h * w


def _edge_conv_flops(c, k, r, h, w) -> int:
    mid = c // r
    return (_conv_flops(c, mid, 1, 1, h, w) + 2 * _conv_flops(mid, mid, 1, k, h, w, groups=mid)
            + _conv_flops(2 * mid, 2 * mid, 3, 3, h, w, groups=2 * mid) + _conv_flops(2 * mid, c, 1, 1, h, w))


def head_flops(cfg: ModelConfig, height: int, width: int) -> int:
    """Hidden 1x1 conv at fusion resolution, resize of the hidden map, ReLU, output conv."""
    total = sum(cfg.widths)
    h1, w1 = cfg.stage_sizes(height, width)[0]
    hw = height * width
    return (_conv_flops(total, cfg.head_hidden, 1, 1, h1, w1) + _upsample_flops(cfg.head_hidden, height, width)
            + cfg.head_hidden * hw + _conv_flops(cfg.head_hidden, 1, 1, 1, height, width))


def decoder_flops(cfg: ModelConfig, height: int, width: int) -> int:
    """Fusion plus segmentation head."""
    c = cfg.widths
    h1, w1 = cfg.stage_sizes(height, width)[0]
    flops = head_flops(cfg, height, width)
    for ch in c[1:]:
        flops += _upsample_flops(ch, h1, w1)
        if cfg.fusion == "srf":
            flops += ch * h1 * w1
    if cfg.fusion == "srf":
        flops += _conv_flops(c[0], 1, 1, 1, h1, w1) + 4 * h1 * w1
    return flops


def dense_decoder_flops(cfg: ModelConfig, height: int, width: int) -> int:
    """Reference decoder: upsample-concat to full size, one dense 3x3 conv, same head."""
    total = sum(cfg.widths)
    h1, w1 = cfg.stage_sizes(height, width)[0]
    ups = sum(_upsample_flops(ch, h1, w1) for ch in cfg.widths[1:])
    return ups + _conv_flops(total, total, 3, 3, height, width) + head_flops(cfg, height, width)


def flop_breakdown(cfg: ModelConfig, height: Optional[int] = None, width: Optional[int] = None) -> Dict[str, int]:
    cfg.validate()
    height, width = (height, width) if height is not None else cfg.input_size
    if height % STRIDE or width % STRIDE:
        raise ConfigError(f"size {(height, width)} must be divisible by {STRIDE}")
    c = cfg.widths
    n = cfg.state_dim
    sizes = cfg.stage_sizes(height, width)
    out = {"conv": 0, "linear": 0, "scan": 0, "attention": 0, "elementwise": 0, "upsample": 0}
    out["conv"] += _conv_flops(3, c[0], 3, 3, height // 2, width // 2)
    out["conv"] += _conv_flops(c[0], c[0], 3, 3, *sizes[0])
    out["elementwise"] += 4 * c[0] * (height // 2) * (width // 2 + sizes[0][0] * sizes[0][1])
    for i in range(3):
        out["conv"] += _conv_flops(c[i], c[i + 1], 3, 3, *sizes[i + 1])
    for i, (h, w) in enumerate(sizes):
        d, length = c[i], h * w
        if cfg.architecture == "cnn":
            out["conv"] += 2 * _conv_flops(d, d, 3, 3, h, w)
            out["elementwise"] += 5 * d * length
            continue
        tm = cfg.transmixer
        dg = tm.global_width(d)
        dl = d - dg
        per_block = {"linear": 0, "scan": 0, "attention": 0, "elementwise": 0, "conv": 0}
        per_block["linear"] += 2 * length * d * d * (3 + (0 if tm.literal_delta else 1)) + 2 * 2 * length * d * n
        per_block["elementwise"] += length * d * (8 + 6 + 6 + 3 + 2)  # norms, SiLUs, conv1d, softplus, gating
        per_block["scan"] += tm.scan_directions * (7 * length * d * n)
        if dg:
            per_block["linear"] += 4 * 2 * length * dg * dg
            per_block["attention"] += 2 * 2 * length * length * dg + 4 * tm.heads * length * length
        if dl:
            per_block["conv"] += _conv_flops(dl, dl, 1, 1, h, w)
            per_block["elementwise"] += length * dl * (8 + 9 + 5)
        for k, v in per_block.items():
            out[k] += tm.depth * v
        if cfg.use_degconv:
            dcfg = cfg.deg.for_resolution(h, w)
            vh, vw = dcfg.view
            ph, pw = -(-h // vh) * vh, -(-w // vw) * vw
            views = (ph // vh) * (pw // vw)
            cells = views * (vh // dcfg.cell[0]) * (vw // dcfg.cell[1])
            out["conv"] += views * (_conv_flops(dcfg.n_bins, d, 1, 1, 1, cells // views)
                                    + _conv_flops(d, d, 3, 3, 1, cells // views, groups=d))
            out["conv"] += 2 * _edge_conv_flops(d, dcfg.strip_k, dcfg.reduce_r, ph, pw)
            out["conv"] += _edge_conv_flops(d, dcfg.strip_k, dcfg.reduce_r, h, w)
            out["elementwise"] += 16 * ph * pw + d * ph * pw * 6 + cells * d * 8
    dec = decoder_flops(cfg, height, width)
    head_convs = (_conv_flops(sum(c), cfg.head_hidden, 1, 1, *sizes[0])
                  + _conv_flops(cfg.head_hidden, 1, 1, 1, height, width))
    h1, w1 = sizes[0]
    fusion_conv = _conv_flops(c[0], 1, 1, 1, h1, w1) if (cfg.fusion == "srf" and cfg.architecture != "cnn") else 0
    ups = _upsample_flops(cfg.head_hidden, height, width) + sum(_upsample_flops(ch, h1, w1) for ch in c[1:])
    out["conv"] += head_convs + fusion_conv
    out["upsample"] += ups
    out["elementwise"] += dec - head_convs - fusion_conv - ups
    return out


def flop_count(cfg: ModelConfig, height: Optional[int] = None, width: Optional[int] = None) -> int:
    return int(sum(flop_breakdown(cfg, height, width).values()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: MixerCSeg, extra: Optional[dict] = None) -> None:
    meta = {"model": model.cfg.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.state_dict(), metadata=meta)


def load_model(path, dtype=None) -> Tuple[MixerCSeg, dict]:
    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ConfigError(f"{path}: checkpoint carries no model config")
    cfg = ModelConfig.from_dict(meta["model"])
    model = build_model(cfg)
    if dtype is not None:
        model.astype(dtype)
    else:
        first = next(iter(tensors.values()))
        model.astype(first.dtype)
    model.load_state_dict(tensors)
    return model, meta
