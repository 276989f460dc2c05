"""Encoder/FPN/head segmentation model family.

A declarative ``ModelSpec`` drives two independent code paths: an executable
torch network (``build_model``) and an analytic layer walk that counts
parameters and per-sample multiply-accumulates without instantiating any
weights (``count_params`` / ``count_macs``). The two must agree exactly on
parameter counts, which the test suite verifies.

Encoder: stem (7x7/2 conv + norm + relu + 3x3/2 maxpool) and four residual
stages. Decoder: FPN with 1x1 lateral projections, nearest x2 top-down
upsampling with sum merge, and per-level segmentation blocks
(3x3 conv -> group norm -> relu, upsampled to stride 4) whose outputs are
summed. Head: 1x1 conv to class logits, bilinearly upsampled x4.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from tipseg.errors import ConfigurationError, DataValidationError, SpecMismatchError

FAMILIES = ("resnet_basic", "resnet_bottleneck", "resnext_bottleneck")

# Segmentation-block layout per pyramid level, ordered P2..P5:
# (number of conv units, number of x2 upsamples interleaved after units).
_SEG_UNITS = (1, 1, 2, 3)
_SEG_UPS = (0, 1, 2, 3)

_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "resnet_bottleneck"
    stage_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    cardinality: int = 1
    base_width: int = 64
    in_channels: int = 1
    stem_channels: int = 64

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown backbone family {self.family!r}")
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise ConfigurationError("stage_blocks must be 4 integers >= 1")
        if self.cardinality < 1 or self.base_width < 1:
            raise ConfigurationError("cardinality and base_width must be >= 1")
        if self.family == "resnet_basic" and self.cardinality != 1:
            raise ConfigurationError("basic blocks do not support cardinality > 1")
        if self.in_channels < 1 or self.stem_channels < 1:
            raise ConfigurationError("in_channels and stem_channels must be >= 1")

    @property
    def expansion(self) -> int:
        return 1 if self.family == "resnet_basic" else 4

    def stage_planes(self, i: int) -> int:
        return self.stem_channels * (2 ** i)

    def stage_out_channels(self, i: int) -> int:
        return self.stage_planes(i) * self.expansion

    def inner_width(self, i: int) -> int:
        """Width of the 3x3 conv inside a bottleneck block (all paths combined)."""
        return int(self.stage_planes(i) * self.base_width / 64.0) * self.cardinality

    def pyramid_channels(self) -> tuple[int, int, int, int]:
        return tuple(self.stage_out_channels(i) for i in range(4))


@dataclass(frozen=True)
class DecoderSpec:
    pyramid_channels: int = 256
    segmentation_channels: int = 128
    norm_groups: int = 32
    merge: str = "sum"
    final_upsample_factor: int = 4

    def validate(self):
        if self.norm_groups > self.segmentation_channels:
            raise ConfigurationError("norm_groups must not exceed segmentation_channels")
        if self.segmentation_channels % self.norm_groups != 0:
            raise ConfigurationError("segmentation_channels must be divisible by norm_groups")
        if self.merge != "sum":
            raise ConfigurationError(f"unsupported merge {self.merge!r}")
        if self.final_upsample_factor != 4:
            raise ConfigurationError("final_upsample_factor must be 4 (stride-4 decoder output)")


@dataclass(frozen=True)
class ModelSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    num_classes: int = 9
    input_size: int = 224

    def validate(self):
        self.backbone.validate()
        self.decoder.validate()
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.input_size % 32 != 0 or self.input_size <= 0:
            raise ConfigurationError("input_size must be a positive multiple of 32")


BACKBONE_PRESETS: dict[str, BackboneSpec] = {
    "resnet34": BackboneSpec("resnet_basic", (3, 4, 6, 3)),
    "resnet50": BackboneSpec("resnet_bottleneck", (3, 4, 6, 3)),
    "resnet101": BackboneSpec("resnet_bottleneck", (3, 4, 23, 3)),
    "resnext101_32x48d": BackboneSpec("resnext_bottleneck", (3, 4, 23, 3),
                                      cardinality=32, base_width=48),
    # Desk-scale and test-scale variants.
    "reduced": BackboneSpec("resnet_basic", (2, 2, 2, 2), stem_channels=32),
    "tiny": BackboneSpec("resnet_basic", (1, 1, 1, 1), stem_channels=8),
}


def model_preset(name: str, *, num_classes: int = 9, input_size: int = 224,
                 in_channels: int | None = None,
                 decoder: DecoderSpec | None = None) -> ModelSpec:
    if name not in BACKBONE_PRESETS:
        raise ConfigurationError(
            f"unknown model preset {name!r}; available: {sorted(BACKBONE_PRESETS)}")
    backbone = BACKBONE_PRESETS[name]
    if in_channels is not None:
        backbone = replace(backbone, in_channels=in_channels)
    spec = ModelSpec(backbone=backbone, decoder=decoder or DecoderSpec(),
                     num_classes=num_classes, input_size=input_size)
    spec.validate()
    return spec


@dataclass
class FeaturePyramid:
    """Encoder stage outputs at strides 4, 8, 16, 32."""

    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor

    def as_list(self) -> list[torch.Tensor]:
        return [self.c2, self.c3, self.c4, self.c5]


# ---------------------------------------------------------------------------
# torch modules


class BasicBlock(nn.Module):
    def __init__(self, cin, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or cin != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class BottleneckBlock(nn.Module):
    """1x1 reduce -> 3x3 (grouped, carries the stride) -> 1x1 expand."""

    def __init__(self, cin, width, cout, stride=1, groups=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, width, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, groups=groups, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class Encoder(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.conv1 = nn.Conv2d(spec.in_channels, spec.stem_channels, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(spec.stem_channels)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.stages = nn.ModuleList()
        cin = spec.stem_channels
        for i, n_blocks in enumerate(spec.stage_blocks):
            blocks = []
            cout = spec.stage_out_channels(i)
            for b in range(n_blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                if spec.family == "resnet_basic":
                    blocks.append(BasicBlock(cin, spec.stage_planes(i), stride))
                else:
                    blocks.append(BottleneckBlock(cin, spec.inner_width(i), cout,
                                                  stride, spec.cardinality))
                cin = cout
            self.stages.append(nn.Sequential(*blocks))

    def forward(self, x) -> FeaturePyramid:
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)


class SegBlockUnit(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, 1, 1, bias=False)
        self.norm = nn.GroupNorm(groups, cout)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class FpnDecoder(nn.Module):
    def __init__(self, encoder_channels, spec: DecoderSpec):
        super().__init__()
        self.spec = spec
        pc, sc = spec.pyramid_channels, spec.segmentation_channels
        self.laterals = nn.ModuleList(
            [nn.Conv2d(c, pc, 1) for c in encoder_channels])
        self.seg_paths = nn.ModuleList()
        for level in range(4):
            units = [SegBlockUnit(pc if j == 0 else sc, sc, spec.norm_groups)
                     for j in range(_SEG_UNITS[level])]
            self.seg_paths.append(nn.ModuleList(units))

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        feats = pyramid.as_list()
        p = [None] * 4
        p[3] = self.laterals[3](feats[3])
        for i in (2, 1, 0):
            up = F.interpolate(p[i + 1], scale_factor=2, mode="nearest")
            p[i] = up + self.laterals[i](feats[i])
        fused = None
        for level in range(4):
            y = p[level]
            for j, unit in enumerate(self.seg_paths[level]):
                y = unit(y)
                if j < _SEG_UPS[level]:
                    y = F.interpolate(y, scale_factor=2, mode="nearest")
            fused = y if fused is None else fused + y
        return fused


class SegHead(nn.Module):
    def __init__(self, cin, num_classes, upsample_factor):
        super().__init__()
        self.conv = nn.Conv2d(cin, num_classes, 1)
        self.upsample_factor = upsample_factor

    def forward(self, x):
        return F.interpolate(self.conv(x), scale_factor=self.upsample_factor,
                             mode="bilinear", align_corners=False)


class SegModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.encoder = Encoder(spec.backbone)
        self.decoder = FpnDecoder(spec.backbone.pyramid_channels(), spec.decoder)
        self.head = SegHead(spec.decoder.segmentation_channels, spec.num_classes,
                            spec.decoder.final_upsample_factor)

    def forward(self, x):
        self._check_input(x)
        return self.head(self.decoder(self.encoder(x)))

    def _check_input(self, x):
        cin = self.spec.backbone.in_channels
        if x.ndim != 4 or x.shape[1] != cin:
            raise DataValidationError(
                f"expected input of shape (B, {cin}, H, W), got {tuple(x.shape)}")


def build_model(spec: ModelSpec, seed: int = 0) -> SegModel:
    """Instantiate the network with deterministic He fan-out initialization."""
    model = SegModel(spec)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_out), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return model


def encoder_forward(model: SegModel, batch: torch.Tensor) -> FeaturePyramid:
    model._check_input(batch)
    return model.encoder(batch)


def decoder_forward(model: SegModel, pyramid: FeaturePyramid) -> torch.Tensor:
    return model.decoder(pyramid)


def seg_head(model: SegModel, fused: torch.Tensor) -> torch.Tensor:
    return model.head(fused)


def forward(model: SegModel, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


# ---------------------------------------------------------------------------
# analytic parameter / MAC accounting


@dataclass(frozen=True)
class LayerStats:
    name: str
    params: int
    macs: int


def _conv_stats(name, cin, cout, k, out_hw, groups=1, bias=False) -> LayerStats:
    params = k * k * (cin // groups) * cout + (cout if bias else 0)
    macs = k * k * (cin // groups) * cout * out_hw * out_hw
    return LayerStats(name, params, macs)


def _norm_stats(name, channels) -> LayerStats:
    return LayerStats(name, 2 * channels, 0)


def _encoder_layers(spec: ModelSpec) -> list[LayerStats]:
    bb = spec.backbone
    size = spec.input_size
    out = [
        _conv_stats("stem.conv", bb.in_channels, bb.stem_channels, 7, size // 2),
        _norm_stats("stem.norm", bb.stem_channels),
    ]
    cin = bb.stem_channels
    spatial = size // 4
    for i, n_blocks in enumerate(bb.stage_blocks):
        cout = bb.stage_out_channels(i)
        if i > 0:
            spatial //= 2
        for b in range(n_blocks):
            stride = 2 if (i > 0 and b == 0) else 1
            in_spatial = spatial * stride
            prefix = f"stage{i + 1}.block{b + 1}"
            if bb.family == "resnet_basic":
                planes = bb.stage_planes(i)
                out += [
                    _conv_stats(f"{prefix}.conv1", cin, planes, 3, spatial),
                    _norm_stats(f"{prefix}.norm1", planes),
                    _conv_stats(f"{prefix}.conv2", planes, planes, 3, spatial),
                    _norm_stats(f"{prefix}.norm2", planes),
                ]
            else:
                width = bb.inner_width(i)
                out += [
                    _conv_stats(f"{prefix}.conv1", cin, width, 1, in_spatial),
                    _norm_stats(f"{prefix}.norm1", width),
                    _conv_stats(f"{prefix}.conv2", width, width, 3, spatial,
                                groups=bb.cardinality),
                    _norm_stats(f"{prefix}.norm2", width),
                    _conv_stats(f"{prefix}.conv3", width, cout, 1, spatial),
                    _norm_stats(f"{prefix}.norm3", cout),
                ]
            if stride != 1 or cin != cout:
                out += [
                    _conv_stats(f"{prefix}.down.conv", cin, cout, 1, spatial),
                    _norm_stats(f"{prefix}.down.norm", cout),
                ]
            cin = cout
    return out


def _decoder_layers(spec: ModelSpec) -> list[LayerStats]:
    dec = spec.decoder
    pc, sc = dec.pyramid_channels, dec.segmentation_channels
    channels = spec.backbone.pyramid_channels()
    sizes = [spec.input_size // (2 ** (i + 2)) for i in range(4)]
    out = []
    for i in range(4):
        out.append(_conv_stats(f"lateral.p{i + 2}", channels[i], pc, 1, sizes[i], bias=True))
    for level in range(4):
        spatial = sizes[level]
        for j in range(_SEG_UNITS[level]):
            cin = pc if j == 0 else sc
            out.append(_conv_stats(f"seg.p{level + 2}.conv{j + 1}", cin, sc, 3, spatial))
            out.append(_norm_stats(f"seg.p{level + 2}.norm{j + 1}", sc))
            if j < _SEG_UPS[level]:
                spatial *= 2
    return out


def _head_layers(spec: ModelSpec) -> list[LayerStats]:
    return [_conv_stats("head.conv", spec.decoder.segmentation_channels,
                        spec.num_classes, 1, spec.input_size // 4, bias=True)]


_PART_WALKS = {"encoder": _encoder_layers, "decoder": _decoder_layers, "head": _head_layers}


def iter_layer_stats(spec: ModelSpec, part: str = "total") -> list[LayerStats]:
    spec.validate()
    if part == "total":
        return [s for name in ("encoder", "decoder", "head")
                for s in _PART_WALKS[name](spec)]
    if part not in _PART_WALKS:
        raise ConfigurationError(f"unknown model part {part!r}")
    return _PART_WALKS[part](spec)


def count_params(spec: ModelSpec, part: str = "total") -> int:
    """Analytic learnable-parameter count; no weights are instantiated."""
    return sum(s.params for s in iter_layer_stats(spec, part))


def count_macs(spec: ModelSpec, part: str = "total", input_size: int | None = None) -> int:
    """Per-sample multiply-accumulates; convolutions only, norms/upsamples free."""
    if input_size is not None and input_size != spec.input_size:
        spec = replace(spec, input_size=input_size)
    return sum(s.macs for s in iter_layer_stats(spec, part))


def stats_table(named_specs: list[tuple[str, ModelSpec]], batch: int = 8):
    """Rows (model, part, params, macs, flops_batch8) for each spec."""
    rows = []
    for name, spec in named_specs:
        for part in ("encoder", "decoder", "head", "total"):
            p = count_params(spec, part)
            m = count_macs(spec, part)
            rows.append((name, part, p, m, m * batch))
    return rows


def stats_csv(rows) -> str:
    lines = ["model,part,params,macs,flops_batch8"]
    lines += [f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]}" for r in rows]
    return "\n".join(lines) + "\n"


def stats_text(rows) -> str:
    header = ("model", "part", "params", "macs", "flops_batch8")
    table = [header] + [(r[0], r[1], f"{r[2]:,}", f"{r[3]:,}", f"{r[4]:,}") for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(5)]
    out = []
    for row in table:
        out.append("  ".join(str(v).rjust(w) if i >= 2 else str(v).ljust(w)
                             for i, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# checkpoint container


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["backbone"]["stage_blocks"] = list(d["backbone"]["stage_blocks"])
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    try:
        backbone = BackboneSpec(**{**d["backbone"],
                                   "stage_blocks": tuple(d["backbone"]["stage_blocks"])})
        decoder = DecoderSpec(**d["decoder"])
        spec = ModelSpec(backbone=backbone, decoder=decoder,
                         num_classes=d["num_classes"], input_size=d["input_size"])
    except (KeyError, TypeError) as e:
        raise DataValidationError(f"malformed model spec in checkpoint: {e}") from None
    spec.validate()
    return spec


def save_weights(model: SegModel, path):
    """Write a checkpoint: header (version + spec) plus named little-endian arrays.

    Output bytes are deterministic (fixed zip timestamps, stored entries), so
    identical models produce identical files on any platform.
    """
    header = {"format_version": _CHECKPOINT_VERSION, "spec": spec_to_dict(model.spec)}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            dtype = "<i8" if arr.dtype.kind in "iu" else "<f4"
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=dtype))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_weights(path, spec: ModelSpec | None = None) -> SegModel:
    """Rebuild a model from a checkpoint; `spec`, when given, must match."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format_version") != _CHECKPOINT_VERSION:
                raise DataValidationError(
                    f"unsupported checkpoint version {header.get('format_version')!r}")
            stored = spec_from_dict(header["spec"])
            if spec is not None and spec != stored:
                raise SpecMismatchError(
                    f"checkpoint spec {stored} does not match expected {spec}")
            model = build_model(stored, seed=0)
            state = {}
            for name, tensor in model.state_dict().items():
                data = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")))
                state[name] = torch.from_numpy(np.ascontiguousarray(data)).to(tensor.dtype)
            model.load_state_dict(state)
            return model
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataValidationError(f"corrupt checkpoint {path}: {e}") from None
