"""
Pan-Density Network
Front-end feature extractor, density-aware subnetworks, feature enhancement
layer (spatial pyramid pooling + FC + softmax) and the fusion network with its
skip connection.

Subnetwork i (0-based) is specialised for density level i; level 0 is the
sparsest and uses the largest kernels and the most filters.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tensor_core import (
    DEFAULT_DTYPE,
    BatchNormLayer,
    ConvLayer,
    LinearLayer,
    Module,
    Tensor,
    backward,
    concat,
    cross_entropy_loss,
    max_pool2,
    mse_loss,
    region_avg_pool,
    relu,
    softmax,
)

logger = logging.getLogger(__name__)

# Subnetwork layouts, level 1 (sparsest) to level 4
DAN_KERNELS = {
    1: [9, 9, 7, 5, 1],
    2: [7, 7, 5, 3, 1],
    3: [5, 5, 3, 3, 1],
    4: [5, 5, 3, 3, 1],
}
DAN_CHANNELS = {
    1: [384, 256, 128, 64],
    2: [256, 128, 64, 32],
    3: [128, 64, 32, 16],
    4: [128, 64, 32, 16],
}
FFN_KERNELS = [7, 5, 3]
FFN_CHANNELS = [64, 32, 32]
VGG_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512]

FEN_MODES = ("desk", "vgg")
DAN_CHANNEL_MODES = ("descend", "ascend", "equal", "double")
WEIGHTING_MODES = ("one_plus_w", "w")


@dataclass
class ModelSpec:
    N: int = 2
    channel_scale: float = 0.125
    fen: str = "desk"
    fen_channels: List[int] = field(default_factory=lambda: [16, 32])
    input_channels: int = 1
    spp_scales: List[int] = field(default_factory=lambda: [1, 2, 3])
    spp_pool: str = "avg"
    dan_channels: str = "descend"
    weighting: str = "one_plus_w"
    ablate_fel: bool = False
    ablate_skip: bool = False

    def validate(self) -> "ModelSpec":
        if not 1 <= self.N <= 4:
            raise ValueError(f"N must be between 1 and 4 (four subnetwork configurations exist), got {self.N}")
        if self.channel_scale <= 0:
            raise ValueError(f"channel_scale must be positive, got {self.channel_scale}")
        if self.fen not in FEN_MODES:
            raise ValueError(f"fen must be one of {FEN_MODES}, got {self.fen!r}")
        if self.fen == "desk" and (len(self.fen_channels) != 2 or min(self.fen_channels) < 1):
            raise ValueError(f"fen_channels must list two positive widths, got {self.fen_channels}")
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if not self.spp_scales or min(self.spp_scales) < 1:
            raise ValueError(f"spp_scales must be positive integers, got {self.spp_scales}")
        if self.spp_pool not in ("avg", "max"):
            raise ValueError(f"spp_pool must be 'avg' or 'max', got {self.spp_pool!r}")
        if self.dan_channels not in DAN_CHANNEL_MODES:
            raise ValueError(f"dan_channels must be one of {DAN_CHANNEL_MODES}, got {self.dan_channels!r}")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"weighting must be one of {WEIGHTING_MODES}, got {self.weighting!r}")
        return self

    @property
    def downsample(self) -> int:
        return 8 if self.fen == "vgg" else 4

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {unknown}")
        return cls(**data).validate()


def scaled(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


def dan_channel_plan(spec: ModelSpec) -> List[List[int]]:
    """Scaled hidden widths of each instantiated subnetwork (final Conv(1,1) excluded)."""
    levels = list(range(1, spec.N + 1))
    plan = [list(DAN_CHANNELS[level]) for level in levels]
    if spec.dan_channels == "ascend":
        plan = plan[::-1]
    elif spec.dan_channels == "equal":
        plan = [list(DAN_CHANNELS[2]) for _ in levels]
    elif spec.dan_channels == "double":
        if spec.N >= 3:
            plan[2] = [2 * c for c in plan[2]]
        else:
            logger.warning(f"⚠️ dan_channels='double' widens level 3, which a PaDNet-{spec.N} does not have")
    return [[scaled(c, spec.channel_scale) for c in widths] for widths in plan]


class ConvBlock(Module):
    """Conv followed by batch normalization and ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv = ConvLayer(c_in, c_out, kernel_size, rng, dtype, bias=False)
        self.bn = BatchNormLayer(c_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class FrontEnd(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        if spec.fen == "vgg":
            plan = VGG_PLAN
        else:
            c0, c1 = spec.fen_channels
            plan = [c0, c0, "M", c1, c1, "M"]
        self.blocks: List[ConvBlock] = []
        self.pool_after: List[bool] = []
        c_in = spec.input_channels
        for item in plan:
            if item == "M":
                self.pool_after[-1] = True
                continue
            self.blocks.append(ConvBlock(c_in, item, 3, rng, dtype))
            self.pool_after.append(False)
            c_in = item
        self.out_channels = c_in

    def forward(self, x: Tensor) -> Tensor:
        for block, pool in zip(self.blocks, self.pool_after):
            x = block(x)
            if pool:
                x = max_pool2(x)
        return x


class Subnetwork(Module):
    """One density-aware column: BN+ReLU convs and a linear Conv(1, 1) head, no pooling."""

    def __init__(self, c_in: int, kernels: Sequence[int], widths: Sequence[int], rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.blocks: List[ConvBlock] = []
        for k, width in zip(kernels[:-1], widths):
            self.blocks.append(ConvBlock(c_in, width, k, rng, dtype))
            c_in = width
        self.head = ConvLayer(c_in, 1, kernels[-1], rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.head(x)


class FeatureEnhancement(Module):
    def __init__(self, N: int, spp_scales: Sequence[int], rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_features = N * sum(g * g for g in spp_scales)
        self.fc = LinearLayer(self.in_features, N, rng, dtype)


class FusionNetwork(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.blocks: List[ConvBlock] = []
        c_in = spec.N
        for k, width in zip(FFN_KERNELS, FFN_CHANNELS):
            c_out = scaled(width, spec.channel_scale)
            self.blocks.append(ConvBlock(c_in, c_out, k, rng, dtype))
            c_in = c_out
        self.head_in = c_in if spec.ablate_skip else c_in + spec.N
        self.head = ConvLayer(self.head_in, 1, 1, rng, dtype)


class PaDNetModel(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        self.fen = FrontEnd(spec, rng, dtype)
        widths = dan_channel_plan(spec)
        self.dan: List[Subnetwork] = [
            Subnetwork(self.fen.out_channels, DAN_KERNELS[level + 1], widths[level], rng, dtype)
            for level in range(spec.N)
        ]
        self.fel: Optional[FeatureEnhancement] = None
        self.ffn: Optional[FusionNetwork] = None
        if spec.N >= 2:
            if not spec.ablate_fel:
                self.fel = FeatureEnhancement(spec.N, spec.spp_scales, rng, dtype)
            self.ffn = FusionNetwork(spec, rng, dtype)
        self.pretrained_levels: List[int] = []

    @property
    def downsample(self) -> int:
        return self.spec.downsample

    def forward(self, image: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        return padnet_forward(self, image)

    def level_parameters(self, level: int, include_fen: bool = True) -> List:
        params = self.fen.parameters() if include_fen else []
        return params + self.dan[level].parameters()


def parameter_count(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def fen_forward(model: PaDNetModel, image: Tensor) -> Tensor:
    """Shared base feature at 1/downsample resolution."""
    if image.ndim != 4 or image.shape[1] != model.spec.input_channels:
        raise ValueError(f"expected [B, {model.spec.input_channels}, H, W] input, got {image.shape}")
    ds = model.downsample
    if image.shape[2] % ds or image.shape[3] % ds:
        raise ValueError(f"input {image.shape[2]}x{image.shape[3]} must be divisible by {ds}; pad it first")
    return model.fen(image)


def dan_forward(model: PaDNetModel, features: Tensor) -> List[Tensor]:
    """One single-channel density-specific map per subnetwork."""
    return [subnet(features) for subnet in model.dan]


def spp_vector(maps: Sequence[Tensor], scales: Sequence[int], mode: str = "avg") -> Tensor:
    """Level-major, then scale, then row-major cells."""
    parts = []
    for m in maps:
        batch = m.shape[0]
        for g in scales:
            parts.append(region_avg_pool(m, g, mode=mode).reshape(batch, g * g))
    return concat(parts, axis=1)


def fel_forward(model: PaDNetModel, maps: Sequence[Tensor]) -> Tuple[Tensor, List[Tensor]]:
    """
    Weight each density-specific map by its softmax importance.

    Args:
        model: PaDNet with N >= 2
        maps: the N raw subnetwork outputs, each [B, 1, h, w]

    Returns:
        (w [B, N], refined maps); refined_i = map_i * (1 + w_i), or map_i * w_i
        under the "w" weighting ablation
    """
    spec = model.spec
    if spec.N < 2 or len(maps) < 2:
        raise ValueError("the feature enhancement layer needs at least two density levels")
    batch, _, height, width = maps[0].shape
    largest = max(spec.spp_scales)
    if height < largest or width < largest:
        raise ValueError(f"map {height}x{width} is smaller than the largest pyramid scale {largest}")

    if model.fel is None:
        w = Tensor(np.full((batch, spec.N), 1.0 / spec.N, dtype=maps[0].dtype))
    else:
        pooled = spp_vector(maps, spec.spp_scales, spec.spp_pool)
        w = softmax(model.fel.fc(pooled))

    multipliers = w + 1.0 if spec.weighting == "one_plus_w" else w
    refined = [m * multipliers[:, i:i + 1].reshape(batch, 1, 1, 1) for i, m in enumerate(maps)]
    return w, refined


def ffn_forward(model: PaDNetModel, refined: Sequence[Tensor], raw: Sequence[Tensor]) -> Tensor:
    """Fuse refined maps, re-attach the raw maps through the skip connection, emit a non-negative map."""
    if len(refined) != len(raw) or len(refined) != model.spec.N:
        raise ValueError(f"expected {model.spec.N} refined and raw maps, got {len(refined)} and {len(raw)}")
    x = concat(list(refined), axis=1)
    for block in model.ffn.blocks:
        x = block(x)
    if not model.spec.ablate_skip:
        x = concat([x] + list(raw), axis=1)
    return relu(model.ffn.head(x))


def padnet_forward(model: PaDNetModel, image: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
    """Full pipeline; returns the density map at 1/downsample resolution and the FEL weights."""
    features = fen_forward(model, image)
    maps = dan_forward(model, features)
    if model.spec.N == 1:
        return maps[0], None
    w, refined = fel_forward(model, maps)
    return ffn_forward(model, refined, maps), w


def check_gradient_flow(model: PaDNetModel, seed: int = 0, size: int = 32) -> List[str]:
    """
    Run one train-mode forward/backward on random data and list parameters
    whose gradient is missing or all zero. BN statistics and grads are restored.
    """
    rng = np.random.default_rng(seed)
    was_training = model.training
    buffers = {name: buf.copy() for name, buf in model.named_buffers()}
    dtype = model.fen.blocks[0].conv.weight.dtype
    size = max(size, model.downsample * max(model.spec.spp_scales))
    size -= size % model.downsample
    image = Tensor(rng.standard_normal((1, model.spec.input_channels, size, size)).astype(dtype))
    out_size = size // model.downsample
    target = Tensor(rng.random((1, 1, out_size, out_size)).astype(dtype))

    model.train()
    model.zero_grad()
    pred, w = padnet_forward(model, image)
    loss = mse_loss(pred, target)
    if w is not None and model.fel is not None:
        loss = loss + cross_entropy_loss(w, [0])
    backward(loss)
    dead = [name for name, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]

    model.zero_grad()
    model.load_state_dict(buffers, strict=False)
    model.train(was_training)
    if dead:
        logger.warning(f"⚠️ {len(dead)} parameters received no gradient at build time: {dead[:8]}")
    return dead


def build_model(spec: ModelSpec, seed: int = 0, dtype=DEFAULT_DTYPE, check_flow: bool = True) -> PaDNetModel:
    """
    Instantiate PaDNet-N with He-normal weights drawn from a seeded generator.

    Args:
        spec: architecture description (validated here)
        seed: same seed gives bit-identical parameters
        dtype: np.float32 for training, np.float64 for gradient checks
        check_flow: run the dead-gradient check once after construction

    Returns:
        PaDNetModel in train mode
    """
    spec.validate()
    model = PaDNetModel(spec, np.random.default_rng(seed), dtype)
    logger.info(
        f"Built PaDNet-{spec.N} ({spec.fen} front-end, scale {spec.channel_scale}) "
        f"with {parameter_count(model)} parameters"
    )
    if check_flow:
        check_gradient_flow(model, seed=seed + 1)
    return model
