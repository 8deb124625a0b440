"""Dual-branch multi-resolution encoder with per-stage fusion.

Each modality runs through a stride-4 stem and a stack of stages. A stage
appends one lower-resolution stream, refines every stream with windowed
attention blocks, and exchanges information across resolutions through a
convolutional fusion. In dual-branch mode the two modalities are fused
per stage by channel concatenation, and the fused pyramid feeds a head
that upsamples all streams to the top resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import RTBlock
from .layers import Conv1x1, Conv3x3, Module
from .region_context import RegionContextHead, RegionHeadOutput
from .tensor import ShapeError, Tensor, concat

__all__ = [
    "ConfigError",
    "NetworkConfig",
    "INPUT_MODES",
    "Branch",
    "StreamFusion",
    "CrossModalFusion",
    "SegmentationHead",
    "TerraceModel",
    "ModelOutput",
    "add_branch",
    "prepare_inputs",
]

INPUT_MODES = ("rgb_only", "dem_only", "single_branch_4ch", "dual_branch")


class ConfigError(ValueError):
    """Configuration violates a structural constraint."""


@dataclass
class NetworkConfig:
    input_size: int = 64
    base_channels: int = 16
    stages: int = 3
    heads: tuple = (2, 2, 2)
    window_sizes: tuple = (8, 4, 2)
    blocks_per_stream: int = 1
    input_mode: str = "dual_branch"
    stsro_enabled: bool = True
    dropout: float = 0.6
    head_channels: int = 64
    expansion: int = 4
    n_classes: int = 2
    # contour evolution head
    vertex_count: int = 64
    evolve_steps: int = 100
    delta_t: float = 0.1
    beta_max: float = 1.0
    mu_max: float = 2.0

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError(f"need at least one stage, got {self.stages}")
        divisor = 4 * 2 ** (self.stages - 1)
        if self.input_size % divisor != 0:
            raise ConfigError(
                f"input size {self.input_size} is not divisible by {divisor} "
                f"(4 x 2^(stages-1))"
            )
        if len(self.heads) < self.stages or len(self.window_sizes) < self.stages:
            raise ConfigError("heads and window_sizes must cover every stream")
        for s in range(self.stages):
            c = self.stream_channels(s)
            if c % self.heads[s] != 0:
                raise ConfigError(
                    f"stream {s} channels {c} not divisible by {self.heads[s]} heads"
                )
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"unknown input mode {self.input_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.beta_max * self.delta_t ** 2 > 1.0 + 1e-12:
            raise ConfigError(
                f"beta_max * delta_t^2 = {self.beta_max * self.delta_t ** 2:.3f} "
                "violates the evolution stability bound (must be <= 1)"
            )

    def stream_channels(self, stream: int) -> int:
        return self.base_channels * 2 ** stream

    def stream_size(self, stream: int) -> int:
        return self.input_size // 4 // 2 ** stream

    def in_channels(self) -> int:
        return {"rgb_only": 3, "dem_only": 1, "single_branch_4ch": 4,
                "dual_branch": 3}[self.input_mode]

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["heads"] = list(self.heads)
        d["window_sizes"] = list(self.window_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("heads", "window_sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class Stem(Module):
    """Two stride-2 3x3 conv + norm + ReLU blocks; spatial reduction 4x."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv1 = Conv3x3(rng, c_in, c_out, stride=2)
        self.conv2 = Conv3x3(rng, c_out, c_out, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 4 != 0 or x.shape[2] % 4 != 0:
            raise ConfigError(f"stem input {x.shape} is not divisible by 4")
        return self.conv2(self.conv1(x))


class StreamFusion(Module):
    """Every output stream is the sum of resampled projections of all inputs.

    Down paths chain stride-2 convolutions (channel-doubling per step), up
    paths apply a pointwise projection followed by bilinear upsampling,
    and the same-resolution path is the identity.
    """

    def __init__(self, rng, channels: list[int]):
        self.n = len(channels)
        paths = []
        for t in range(self.n):
            row = []
            for s in range(self.n):
                if s == t:
                    row.append(None)
                elif s < t:
                    chain = [
                        Conv3x3(rng, channels[s] * 2 ** i, channels[s] * 2 ** (i + 1),
                                stride=2, norm_relu=False)
                        for i in range(t - s)
                    ]
                    row.append(chain)
                else:
                    row.append(Conv1x1(rng, channels[s], channels[t], bias=False))
            paths.append(row)
        self.paths = paths

    def named_params(self, prefix: str = ""):
        for t, row in enumerate(self.paths):
            for s, path in enumerate(row):
                if path is None:
                    continue
                if isinstance(path, list):
                    for i, conv in enumerate(path):
                        yield from conv.named_params(f"{prefix}paths.{t}.{s}.{i}.")
                else:
                    yield from path.named_params(f"{prefix}paths.{t}.{s}.")

    def __call__(self, streams: list[Tensor]) -> list[Tensor]:
        if len(streams) != self.n:
            raise ShapeError(f"fusion built for {self.n} streams, got {len(streams)}")
        outputs = []
        for t in range(self.n):
            acc = streams[t]
            for s in range(self.n):
                if s == t:
                    continue
                path = self.paths[t][s]
                if isinstance(path, list):
                    y = streams[s]
                    for conv in path:
                        y = conv(y)
                else:
                    y = path.project(streams[s])
                    y = ops.bilinear_resize(y, streams[t].shape[1], streams[t].shape[2])
                acc = acc + y
            outputs.append(acc)
        return outputs


class CrossModalFusion(Module):
    """Concatenate matching streams of two branches and project back."""

    def __init__(self, rng, channels: list[int]):
        self.projections = [Conv1x1(rng, 2 * c, c, norm_relu=True) for c in channels]

    def __call__(self, a: list[Tensor], b: list[Tensor]) -> list[Tensor]:
        if len(a) != len(b) or len(a) != len(self.projections):
            raise ShapeError(
                f"cross-modal fusion expects {len(self.projections)} stream pairs, "
                f"got {len(a)} and {len(b)}"
            )
        fused = []
        for t, (x, y) in enumerate(zip(a, b)):
            if x.shape != y.shape:
                raise ShapeError(
                    f"stream {t} shapes disagree across branches: {x.shape} vs {y.shape}"
                )
            fused.append(self.projections[t](concat([x, y], axis=0)))
        return fused


def add_branch(streams: list[Tensor], down: Conv3x3) -> list[Tensor]:
    """Append a half-resolution, double-channel stream; existing streams untouched."""
    return list(streams) + [down(streams[-1])]


class Branch(Module):
    """One modality: stem, per-stage downsamplers, attention blocks, fusions."""

    def __init__(self, rng, cfg: NetworkConfig, c_in: int):
        self.stem = Stem(rng, c_in, cfg.base_channels)
        self.downs = [
            Conv3x3(rng, cfg.stream_channels(s - 1), cfg.stream_channels(s), stride=2)
            for s in range(1, cfg.stages)
        ]
        self.blocks = []
        self.fusions = []
        for stage in range(cfg.stages):
            stage_blocks = []
            for t in range(stage + 1):
                k_eff = max(1, min(cfg.window_sizes[t], cfg.stream_size(t)))
                stage_blocks.append([
                    RTBlock(rng, cfg.stream_channels(t), cfg.heads[t], k_eff,
                            cfg.expansion)
                    for _ in range(cfg.blocks_per_stream)
                ])
            self.blocks.append(stage_blocks)
            self.fusions.append(
                StreamFusion(rng, [cfg.stream_channels(t) for t in range(stage + 1)])
            )

    def named_params(self, prefix: str = ""):
        yield from self.stem.named_params(f"{prefix}stem.")
        for i, d in enumerate(self.downs):
            yield from d.named_params(f"{prefix}downs.{i}.")
        for stage, stage_blocks in enumerate(self.blocks):
            for t, blocks in enumerate(stage_blocks):
                for j, b in enumerate(blocks):
                    yield from b.named_params(f"{prefix}blocks.{stage}.{t}.{j}.")
        for stage, fusion in enumerate(self.fusions):
            yield from fusion.named_params(f"{prefix}fusions.{stage}.")

    def run_stage(self, streams: list[Tensor], stage: int) -> list[Tensor]:
        if stage > 0:
            if len(streams) != stage:
                raise ValueError(
                    f"stage {stage} expects {stage} incoming streams, got {len(streams)}"
                )
            streams = add_branch(streams, self.downs[stage - 1])
        streams = [
            _apply_blocks(self.blocks[stage][t], streams[t])
            for t in range(len(streams))
        ]
        return self.fusions[stage](streams)


def _apply_blocks(blocks, x):
    for b in blocks:
        x = b(x)
    return x


class SegmentationHead(Module):
    """Upsample all streams to the top grid, concatenate, project, dropout."""

    def __init__(self, rng, channels: list[int], out_dim: int):
        self.proj = Conv1x1(rng, sum(channels), out_dim)

    def __call__(self, streams: list[Tensor], dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        top_h, top_w = streams[0].shape[1], streams[0].shape[2]
        lifted = [streams[0]]
        for s in streams[1:]:
            lifted.append(ops.bilinear_resize(s, top_h, top_w))
        feats = self.proj(concat(lifted, axis=0))
        if training and dropout_rate > 0.0:
            feats = ops.dropout(feats, dropout_rate, rng, training=True)
        return feats


@dataclass
class ModelOutput:
    pixel_features: Tensor          # (D, S/4, S/4)
    soft_scores: Tensor             # (n_classes, S/4, S/4)
    logits: Tensor                  # (n_classes, S, S)
    aux_logits: Tensor | None       # (n_classes, S, S) when region context is on
    beta: Tensor                    # (S, S), in [0, beta_max]
    mu: Tensor                      # (S, S), in [0, mu_max]
    region: RegionHeadOutput | None


class TerraceModel(Module):
    """Encoder plus classification and contour-field heads."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        if cfg.input_mode == "dual_branch":
            self.branch_img = Branch(rng, cfg, 3)
            self.branch_dem = Branch(rng, cfg, 1)
            self.cross = [
                CrossModalFusion(rng, [cfg.stream_channels(t) for t in range(stage + 1)])
                for stage in range(cfg.stages)
            ]
        else:
            self.branch = Branch(rng, cfg, cfg.in_channels())
        pyramid_channels = [cfg.stream_channels(t) for t in range(cfg.stages)]
        self.head = SegmentationHead(rng, pyramid_channels, cfg.head_channels)
        self.soft_conv = Conv1x1(rng, cfg.head_channels, cfg.n_classes)
        if cfg.stsro_enabled:
            self.region_head = RegionContextHead(rng, cfg.head_channels, cfg.n_classes)
            field_in = 2 * cfg.head_channels
        else:
            self.plain_classifier = Conv1x1(rng, cfg.head_channels, cfg.n_classes)
            field_in = cfg.head_channels
        self.field_conv = Conv1x1(rng, field_in, 2)

    # -- forward -------------------------------------------------------------

    def encode(self, inputs: dict, training: bool = False,
               rng: np.random.Generator | None = None):
        """Run the encoder; returns (pixel_features, soft_scores)."""
        cfg = self.cfg
        if cfg.input_mode == "dual_branch":
            streams_img = [self.branch_img.stem(inputs["rgb"])]
            streams_dem = [self.branch_dem.stem(inputs["dem"])]
            fused = None
            for stage in range(cfg.stages):
                streams_img = self.branch_img.run_stage(streams_img, stage)
                streams_dem = self.branch_dem.run_stage(streams_dem, stage)
                fused = self.cross[stage](streams_img, streams_dem)
                if stage + 1 < cfg.stages:
                    streams_img = [a + f for a, f in zip(streams_img, fused)]
                    streams_dem = [a + f for a, f in zip(streams_dem, fused)]
            pyramid = fused
        else:
            x = inputs[{"rgb_only": "rgb", "dem_only": "dem",
                        "single_branch_4ch": "stacked"}[cfg.input_mode]]
            streams = [self.branch.stem(x)]
            for stage in range(cfg.stages):
                streams = self.branch.run_stage(streams, stage)
            pyramid = streams
        features = self.head(pyramid, cfg.dropout, rng, training)
        soft_scores = self.soft_conv(features)
        return features, soft_scores

    def forward(self, inputs: dict, training: bool = False,
                rng: np.random.Generator | None = None) -> ModelOutput:
        cfg = self.cfg
        features, soft_scores = self.encode(inputs, training, rng)
        size = inputs.get("label_size", cfg.input_size)
        if cfg.stsro_enabled:
            region = self.region_head(features, soft_scores, size)
            logits = region.logits
            aux_logits = ops.bilinear_resize(soft_scores, size, size)
            field_src = region.augmented
        else:
            region = None
            logits = ops.bilinear_resize(self.plain_classifier(features), size, size)
            aux_logits = None
            field_src = features
        field = ops.bilinear_resize(self.field_conv(field_src), size, size)
        beta = field[0].sigmoid() * cfg.beta_max
        mu = field[1].sigmoid() * cfg.mu_max
        return ModelOutput(features, soft_scores, logits, aux_logits, beta, mu, region)

    def named_params(self, prefix: str = ""):
        if self.cfg.input_mode == "dual_branch":
            yield from self.branch_img.named_params(f"{prefix}branch_img.")
            yield from self.branch_dem.named_params(f"{prefix}branch_dem.")
            for i, c in enumerate(self.cross):
                yield from c.named_params(f"{prefix}cross.{i}.")
        else:
            yield from self.branch.named_params(f"{prefix}branch.")
        yield from self.head.named_params(f"{prefix}head.")
        yield from self.soft_conv.named_params(f"{prefix}soft_conv.")
        if self.cfg.stsro_enabled:
            yield from self.region_head.named_params(f"{prefix}region_head.")
        else:
            yield from self.plain_classifier.named_params(f"{prefix}plain_classifier.")
        yield from self.field_conv.named_params(f"{prefix}field_conv.")


def prepare_inputs(tile, cfg: NetworkConfig) -> dict:
    """Resample tile rasters onto the network grid and normalize the DEM.

    The DEM is bilinearly lifted to the imagery grid when its stored
    resolution differs, then standardized per tile. Returns plain arrays.
    """
    s = cfg.input_size
    rgb = np.asarray(tile.rgb, dtype=np.float64)
    dem = np.asarray(tile.dem, dtype=np.float64)
    if rgb.shape[1] != s or rgb.shape[2] != s:
        rgb = ops.bilinear_resize(Tensor(rgb), s, s).data
    if dem.shape[1] != s or dem.shape[2] != s:
        dem = ops.bilinear_resize(Tensor(dem), s, s).data
    std = dem.std()
    dem = (dem - dem.mean()) / (std if std > 1e-9 else 1.0)

    out = {"label_size": s}
    mode = cfg.input_mode
    if mode in ("rgb_only", "dual_branch"):
        out["rgb"] = Tensor(rgb)
    if mode in ("dem_only", "dual_branch"):
        out["dem"] = Tensor(dem)
    if mode == "single_branch_4ch":
        out["stacked"] = Tensor(np.concatenate([rgb, dem], axis=0))
    return out


def network_cases():
    """Gradient-check builders for this module."""
    from .gradcheck import _leaf

    small = NetworkConfig(
        input_size=16, base_channels=4, stages=2, heads=(2, 2),
        window_sizes=(2, 2), head_channels=8, dropout=0.0,
        input_mode="dual_branch", stsro_enabled=True,
    )

    def c_stem(seed):
        rng = np.random.default_rng(seed)
        stem = Stem(rng, 3, 4)
        x = _leaf(rng, 3, 8, 8, scale=0.8)
        wt = Tensor(rng.standard_normal((4, 2, 2)))
        return lambda x: (stem(x) * wt).sum(), [x]

    def c_stream_fusion(seed):
        rng = np.random.default_rng(seed)
        fusion = StreamFusion(rng, [3, 6])
        a = _leaf(rng, 3, 6, 6, scale=0.8)
        b = _leaf(rng, 6, 3, 3, scale=0.8)
        w0 = Tensor(rng.standard_normal((3, 6, 6)))
        w1 = Tensor(rng.standard_normal((6, 3, 3)))

        def fn(a, b):
            o = fusion([a, b])
            return (o[0] * w0).sum() + (o[1] * w1).sum()

        return fn, [a, b]

    def c_model_end_to_end(seed):
        rng = np.random.default_rng(seed)
        model = TerraceModel(small, seed=seed)
        rgb = _leaf(rng, 3, 16, 16, scale=0.5)
        dem = _leaf(rng, 1, 16, 16, scale=0.5)
        wt = Tensor(rng.standard_normal((2, 16, 16)))

        def fn(rgb, dem):
            out = model.forward({"rgb": rgb, "dem": dem, "label_size": 16})
            return (out.logits * wt).sum() + out.beta.mean() + out.mu.mean()

        return fn, [rgb, dem]

    return {
        "network.stem": c_stem,
        "network.stream_fusion": c_stream_fusion,
        "network.model_end_to_end": c_model_end_to_end,
    }
