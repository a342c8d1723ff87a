"""Anatomy-guided encoder, reconstruction/segmentation decoders and the
two-branch downstream predictor.

Parameters live in flat ``{dotted.name: Tensor}`` dicts.  The name prefix
(``encoder.``, ``decoder_rec.``, ``decoder_seg.``, ``predictor.``) is what
checkpoints filter on when transferring the encoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import functional as F
from .tensor import Tensor, add_residual

ENCODER_CHANNELS = (64, 128, 256, 512, 512, 512, 1024, 1024)
DECODER_CHANNELS = (256, 128, 64)
PREDICTOR_CHANNELS = 256
SEG_CLASSES = 4
DOWNSAMPLE = 16
PRELU_INIT = 0.25

TASKS = ("both", "rec_only", "seg_only")


def _scale(c: int, w: float) -> int:
    return max(1, int(round(c * w)))


@dataclass(frozen=True)
class ModelConfig:
    width_factor: float = 0.125
    input_dims: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 2
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "width_factor", float(Fraction(str(self.width_factor))))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.width_factor <= 0:
            raise ValueError(f"width_factor must be positive, got {self.width_factor}")
        if len(self.input_dims) != 3 or any(d <= 0 or d % DOWNSAMPLE for d in self.input_dims):
            raise ValueError(f"input_dims must be 3 positive multiples of {DOWNSAMPLE}, got {self.input_dims}")
        if self.encoder_channels[-1] % 2:
            raise ValueError(f"final encoder channel count {self.encoder_channels[-1]} must be even")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        return tuple(_scale(c, self.width_factor) for c in ENCODER_CHANNELS)

    @property
    def decoder_rec_channels(self) -> tuple[int, ...]:
        return tuple(_scale(c, self.width_factor) for c in DECODER_CHANNELS) + (1,)

    @property
    def decoder_seg_channels(self) -> tuple[int, ...]:
        return tuple(_scale(c, self.width_factor) for c in DECODER_CHANNELS) + (SEG_CLASSES,)

    @property
    def predictor_branch_channels(self) -> int:
        return _scale(PREDICTOR_CHANNELS, self.width_factor)

    @property
    def feature_channels(self) -> int:
        return self.encoder_channels[-1] // 2

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        return tuple(d // DOWNSAMPLE for d in self.input_dims)


# ---------------------------------------------------------------- init


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _conv_params(rng, name: str, cin: int, cout: int, k: int = 3, prelu: bool = True) -> dict[str, Tensor]:
    p = {
        f"{name}.conv.weight": Tensor(_kaiming(rng, (cout, cin, k, k, k), cin * k ** 3), requires_grad=True),
        f"{name}.conv.bias": Tensor(np.zeros(cout, np.float32), requires_grad=True),
    }
    if prelu:
        p[f"{name}.prelu.slope"] = Tensor(np.full(cout, PRELU_INIT, np.float32), requires_grad=True)
    return p


def _deconv_params(rng, name: str, cin: int, cout: int, prelu: bool = True) -> dict[str, Tensor]:
    p = {
        f"{name}.deconv.weight": Tensor(_kaiming(rng, (cin, cout, 3, 3, 3), cin * 27), requires_grad=True),
        f"{name}.deconv.bias": Tensor(np.zeros(cout, np.float32), requires_grad=True),
    }
    if prelu:
        p[f"{name}.prelu.slope"] = Tensor(np.full(cout, PRELU_INIT, np.float32), requires_grad=True)
    return p


def init_encoder(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    chans = config.encoder_channels
    params: dict[str, Tensor] = {}
    cin = 1
    for i, cout in enumerate(chans, start=1):
        params.update(_conv_params(rng, f"encoder.block{i}", cin, cout))
        cin = cout
    if chans[5] != chans[7]:
        params["encoder.proj.conv.weight"] = Tensor(
            _kaiming(rng, (chans[7], chans[5], 1, 1, 1), chans[5]), requires_grad=True)
        params["encoder.proj.conv.bias"] = Tensor(np.zeros(chans[7], np.float32), requires_grad=True)
    return params


def init_decoder(config: ModelConfig, rng: np.random.Generator, head: str) -> dict[str, Tensor]:
    chans = config.decoder_rec_channels if head == "reconstruction" else config.decoder_seg_channels
    prefix = _decoder_prefix(head)
    params: dict[str, Tensor] = {}
    cin = config.feature_channels
    for i, cout in enumerate(chans, start=1):
        params.update(_deconv_params(rng, f"{prefix}.block{i}", cin, cout, prelu=i < len(chans)))
        cin = cout
    return params


def init_predictor(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cb = config.predictor_branch_channels
    params: dict[str, Tensor] = {}
    for branch in ("branch_rec", "branch_seg"):
        params.update(_conv_params(rng, f"predictor.{branch}.blockA", config.feature_channels, cb))
        params.update(_conv_params(rng, f"predictor.{branch}.blockB", cb, cb))
    params["predictor.fc.weight"] = Tensor(_kaiming(rng, (config.num_classes, cb), cb), requires_grad=True)
    params["predictor.fc.bias"] = Tensor(np.zeros(config.num_classes, np.float32), requires_grad=True)
    return params


def _decoder_prefix(head: str) -> str:
    if head == "reconstruction":
        return "decoder_rec"
    if head == "segmentation":
        return "decoder_seg"
    raise ValueError(f"unknown decoder head {head!r}")


# ---------------------------------------------------------------- forward


def conv_block(x: Tensor, params, name: str, stride: int, eps: float = 1e-5) -> Tensor:
    """conv3d -> instance norm -> PReLU.

    A single-voxel map is left un-normalised: standardising one value gives
    identically zero and would cut the block off from its input.
    """
    h = F.conv3d(x, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"], stride=stride, padding=1)
    if int(np.prod(h.shape[2:])) > 1:
        h = F.instance_norm(h, eps)
    return F.prelu(h, params[f"{name}.prelu.slope"])


def check_input_dims(shape) -> None:
    sp = tuple(shape[2:])
    bad = [d for d in sp if d % DOWNSAMPLE]
    if len(sp) != 3 or bad:
        need = tuple(-(-d // DOWNSAMPLE) * DOWNSAMPLE for d in sp)
        raise ValueError(
            f"spatial dims {sp} must be divisible by {DOWNSAMPLE}; pad to {need} (see pad_to_multiple)")


def encoder_forward(x: Tensor, params, eps: float = 1e-5) -> Tensor:
    check_input_dims(x.shape)
    h = x
    for i in range(1, 5):
        h = conv_block(h, params, f"encoder.block{i}", stride=2, eps=eps)
    x4 = h
    out6 = add_residual(conv_block(conv_block(x4, params, "encoder.block5", 1, eps), params, "encoder.block6", 1, eps),
                        x4)
    body = conv_block(conv_block(out6, params, "encoder.block7", 1, eps), params, "encoder.block8", 1, eps)
    if "encoder.proj.conv.weight" in params:
        skip = F.conv3d(out6, params["encoder.proj.conv.weight"], params["encoder.proj.conv.bias"], 1, 0)
    else:
        skip = out6
    return add_residual(body, skip)


def split_features(encoder_out: Tensor) -> tuple[Tensor, Tensor]:
    """First channel half feeds reconstruction, second half segmentation."""
    c = encoder_out.shape[1]
    if c % 2:
        raise ValueError(f"cannot split {c} channels into two halves")
    return F.channel_slice(encoder_out, 0, c // 2), F.channel_slice(encoder_out, c // 2, c)


def decoder_forward(features: Tensor, params, head: str, eps: float = 1e-5, out_dims=None) -> Tensor:
    prefix = _decoder_prefix(head)
    if out_dims is not None:
        expected = tuple(d // DOWNSAMPLE for d in out_dims)
        if tuple(features.shape[2:]) != expected:
            raise ValueError(f"{head} decoder expects feature dims {expected}, got {tuple(features.shape[2:])}")
    h = features
    for i in range(1, 5):
        name = f"{prefix}.block{i}"
        h = F.conv_transpose3d(h, params[f"{name}.deconv.weight"], params[f"{name}.deconv.bias"],
                               stride=2, padding=1, output_padding=1)
        if i < 4:
            h = F.instance_norm(h, eps)
            h = F.prelu(h, params[f"{name}.prelu.slope"])
    if head == "segmentation":
        h = F.softmax_channels(h)
    return h


def _branch(x: Tensor, params, name: str, eps: float) -> Tensor:
    a = conv_block(x, params, f"{name}.blockA", stride=2, eps=eps)
    b = conv_block(a, params, f"{name}.blockB", stride=2, eps=eps)
    return add_residual(b, F.avg_pool2(a))


def predictor_forward(pair: tuple[Tensor, Tensor], params, eps: float = 1e-5) -> Tensor:
    f_rec, f_seg = pair
    if f_rec.shape != f_seg.shape:
        raise ValueError(f"feature pair shapes differ: {f_rec.shape} vs {f_seg.shape}")
    fused = add_residual(_branch(f_rec, params, "predictor.branch_rec", eps),
                         _branch(f_seg, params, "predictor.branch_seg", eps))
    pooled = F.global_avg_pool(fused)
    return F.fully_connected(pooled, params["predictor.fc.weight"], params["predictor.fc.bias"])


# ---------------------------------------------------------------- models


@dataclass
class PretextModel:
    """Encoder plus the decoder(s) selected by ``tasks``."""

    config: ModelConfig
    tasks: str = "both"
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.tasks not in TASKS:
            raise ValueError(f"tasks must be one of {TASKS}, got {self.tasks!r}")
        if not self.params:
            rng = np.random.default_rng(self.seed)
            self.params = init_encoder(self.config, rng)
            if self.tasks in ("both", "rec_only"):
                self.params.update(init_decoder(self.config, rng, "reconstruction"))
            if self.tasks in ("both", "seg_only"):
                self.params.update(init_decoder(self.config, rng, "segmentation"))

    def forward(self, x: Tensor) -> tuple[Tensor | None, Tensor | None]:
        eps = self.config.norm_eps
        f_rec, f_seg = split_features(encoder_forward(x, self.params, eps))
        rec = decoder_forward(f_rec, self.params, "reconstruction", eps) if self.tasks != "seg_only" else None
        seg = decoder_forward(f_seg, self.params, "segmentation", eps) if self.tasks != "rec_only" else None
        return rec, seg


@dataclass
class DownstreamModel:
    """Encoder plus two-branch predictor producing class logits."""

    config: ModelConfig
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            rng = np.random.default_rng(self.seed)
            self.params = init_encoder(self.config, rng)
            self.params.update(init_predictor(self.config, rng))

    @property
    def encoder_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("encoder.")]

    def freeze_encoder(self) -> None:
        for k in self.encoder_names:
            self.params[k].requires_grad = False

    def forward(self, x: Tensor) -> Tensor:
        eps = self.config.norm_eps
        return predictor_forward(split_features(encoder_forward(x, self.params, eps)), self.params, eps)


def load_encoder(params: dict[str, Tensor], entries: dict[str, np.ndarray]) -> None:
    """Copy encoder entries into ``params``; every encoder tensor must be present
    with a matching shape."""
    wanted = [k for k in params if k.startswith("encoder.")]
    missing = [k for k in wanted if k not in entries]
    if missing:
        raise KeyError(f"checkpoint lacks encoder parameters: {missing[:3]}{'...' if len(missing) > 3 else ''}")
    unexpected = [k for k in entries if k.startswith("encoder.") and k not in params]
    if unexpected:
        raise KeyError(f"checkpoint has encoder parameters this model does not: {unexpected[:3]}")
    for k in wanted:
        if tuple(entries[k].shape) != params[k].shape:
            raise ValueError(f"shape mismatch for {k}: expected {params[k].shape}, found {tuple(entries[k].shape)}")
        params[k].data = np.array(entries[k], dtype=np.float32)


def parameter_count(params) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------- padding


@dataclass(frozen=True)
class CropRecord:
    before: tuple[int, int, int]
    original: tuple[int, int, int]
    padded: tuple[int, int, int]

    @property
    def is_empty(self) -> bool:
        return self.padded == self.original

    def crop(self, arr: np.ndarray) -> np.ndarray:
        """Undo the padding on the trailing three axes."""
        sl = tuple(slice(b, b + n) for b, n in zip(self.before, self.original))
        return arr[(Ellipsis,) + sl]


def pad_to_multiple(volume, multiple: int = DOWNSAMPLE) -> tuple[Tensor, CropRecord]:
    """Zero-pad a 3D array symmetrically up to the next multiple; returns a
    1 x 1 x D x H x W tensor and the record that inverts the padding."""
    arr = np.asarray(getattr(volume, "data", volume), dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {arr.shape}")
    target = [-(-d // multiple) * multiple for d in arr.shape]
    before = tuple((t - d) // 2 for t, d in zip(target, arr.shape))
    widths = [(b, t - d - b) for b, t, d in zip(before, target, arr.shape)]
    padded = np.pad(arr, widths) if any(t != d for t, d in zip(target, arr.shape)) else arr
    return Tensor(padded[None, None]), CropRecord(before, tuple(arr.shape), tuple(target))
