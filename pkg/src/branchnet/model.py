"""Branched residual network: shared trunk, independent upper branches.

A network is a stem (conv+BN+relu, optionally a max pool), a sequence of
residual blocks, and per-branch classifier heads (global average pool +
linear). Blocks 1..B are shared; blocks B+1..total plus the head are
replicated per branch with independent parameters.

Branch-point convention: the stem belongs to the shared prefix whenever
B >= 1. B == 0 means nothing is shared at all (each branch materializes
its own stem), so the B=0 network is exactly an ensemble of independent
nets and its parameter sharing ratio is 1.0.

Layer bookkeeping: the conv-layer count follows the depth-naming convention
(stem conv + main-path convs of one root-to-head path); projection shortcut
convs carry parameters but do not count toward depth. Weighted layers add
the classifier. The default big preset reports 199 convs / 200 weighted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

from .tensor import (Tensor, batch_norm2d, conv2d, global_avg_pool, linear,
                     pool2d, relu, residual_add)

BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class BranchedNetConfig:
    """Declarative topology: stages, widths, branch point, branch count."""

    stage_blocks: tuple[int, ...]
    stage_widths: tuple[int, ...]
    bottleneck: bool
    branch_after_block: int
    num_branches: int
    num_classes: int
    input_channels: int = 3
    input_height: int = 32
    input_width: int = 32
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(v) for v in self.stage_blocks))
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        if len(self.stage_blocks) != len(self.stage_widths):
            raise ValueError(
                f"stage_blocks ({len(self.stage_blocks)}) and stage_widths "
                f"({len(self.stage_widths)}) must have the same length")
        if not self.stage_blocks:
            raise ValueError("at least one stage is required")
        if any(b < 1 for b in self.stage_blocks) or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage block counts and widths must be positive")
        if not 0 <= self.branch_after_block <= self.total_blocks:
            raise ValueError(
                f"branch_after_block must be in [0, {self.total_blocks}], "
                f"got {self.branch_after_block}")
        if self.num_branches < 1:
            raise ValueError(f"num_branches must be >= 1, got {self.num_branches}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("input_channels", "input_height", "input_width",
                     "stem_kernel", "stem_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def total_blocks(self) -> int:
        return sum(self.stage_blocks)

    @property
    def convs_per_block(self) -> int:
        return 3 if self.bottleneck else 2


def mini_config(num_classes: int = 10, num_branches: int = 2,
                branch_after_block: int = 4, input_size: int = 32,
                input_channels: int = 3) -> BranchedNetConfig:
    """Desk-scale default: stages [2,2,2], widths [16,32,64], basic blocks."""
    return BranchedNetConfig(
        stage_blocks=(2, 2, 2), stage_widths=(16, 32, 64), bottleneck=False,
        branch_after_block=branch_after_block, num_branches=num_branches,
        num_classes=num_classes, input_channels=input_channels,
        input_height=input_size, input_width=input_size)


def paper_scale_config(num_classes: int = 1000) -> BranchedNetConfig:
    """Big preset: 66 bottleneck blocks in stages [3,24,36,3], branch after 39."""
    return BranchedNetConfig(
        stage_blocks=(3, 24, 36, 3), stage_widths=(64, 128, 256, 512),
        bottleneck=True, branch_after_block=39, num_branches=2,
        num_classes=num_classes, input_channels=3,
        input_height=224, input_width=224,
        stem_kernel=7, stem_stride=2, stem_pool=True)


# ---------------------------------------------------------------------------
# topology arithmetic

@dataclass(frozen=True)
class BlockTopology:
    shared_blocks: int
    per_branch_blocks: int
    total_blocks_materialized: int


def block_topology(config: BranchedNetConfig) -> BlockTopology:
    """Shared/per-branch/materialized block arithmetic for a config."""
    total = config.total_blocks
    b = config.branch_after_block
    return BlockTopology(
        shared_blocks=b,
        per_branch_blocks=total - b,
        total_blocks_materialized=b + config.num_branches * (total - b))


@dataclass(frozen=True)
class LayerCounts:
    conv_layers: int
    weighted_layers: int


def layer_counts(config: BranchedNetConfig) -> LayerCounts:
    """Depth along one root-to-head path (projection convs excluded)."""
    convs = 1 + config.convs_per_block * config.total_blocks
    return LayerCounts(conv_layers=convs, weighted_layers=convs + 1)


@dataclass(frozen=True)
class _BlockPlan:
    index: int          # 1-based position in the base network
    in_channels: int
    width: int
    out_channels: int
    stride: int
    has_projection: bool


def _block_plans(config: BranchedNetConfig) -> list[_BlockPlan]:
    plans = []
    in_ch = config.stage_widths[0]
    index = 0
    for stage, (count, width) in enumerate(zip(config.stage_blocks, config.stage_widths)):
        out_ch = width * BOTTLENECK_EXPANSION if config.bottleneck else width
        for b in range(count):
            index += 1
            stride = 2 if (b == 0 and stage > 0) else 1
            plans.append(_BlockPlan(
                index=index, in_channels=in_ch, width=width, out_channels=out_ch,
                stride=stride, has_projection=(stride != 1 or in_ch != out_ch)))
            in_ch = out_ch
    return plans


def _iter_param_shapes(config: BranchedNetConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    """(name, shape) for every learnable parameter, in registry order."""
    def stem(scope: str):
        k, cin, cout = config.stem_kernel, config.input_channels, config.stage_widths[0]
        yield f"{scope}.conv.weight", (cout, cin, k, k)
        yield f"{scope}.bn.gamma", (cout,)
        yield f"{scope}.bn.beta", (cout,)

    def block(scope: str, plan: _BlockPlan):
        if config.bottleneck:
            convs = [("conv1", plan.width, plan.in_channels, 1),
                     ("conv2", plan.width, plan.width, 3),
                     ("conv3", plan.out_channels, plan.width, 1)]
        else:
            convs = [("conv1", plan.width, plan.in_channels, 3),
                     ("conv2", plan.out_channels, plan.width, 3)]
        for tag, cout, cin, k in convs:
            yield f"{scope}.{tag}.weight", (cout, cin, k, k)
            yield f"{scope}.{tag.replace('conv', 'bn')}.gamma", (cout,)
            yield f"{scope}.{tag.replace('conv', 'bn')}.beta", (cout,)
        if plan.has_projection:
            yield f"{scope}.proj.weight", (plan.out_channels, plan.in_channels, 1, 1)
            yield f"{scope}.proj_bn.gamma", (plan.out_channels,)
            yield f"{scope}.proj_bn.beta", (plan.out_channels,)

    def head(scope: str, in_features: int):
        yield f"{scope}.head.weight", (config.num_classes, in_features)
        yield f"{scope}.head.bias", (config.num_classes,)

    plans = _block_plans(config)
    b = config.branch_after_block
    final_features = plans[-1].out_channels
    if b >= 1:
        yield from stem("stem")
        for plan in plans[:b]:
            yield from block(f"trunk.block{plan.index:02d}", plan)
    for br in range(config.num_branches):
        scope = f"branch{br}"
        if b == 0:
            yield from stem(f"{scope}.stem")
        for plan in plans[b:]:
            yield from block(f"{scope}.block{plan.index:02d}", plan)
        yield from head(scope, final_features)


# ---------------------------------------------------------------------------
# parameterized network

class _BatchNorm:
    def __init__(self, channels: int, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm2d(x, self.gamma, self.beta,
                            self.running_mean, self.running_var, mode=mode)


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> Tensor:
    fan_in = cin * k * k
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype),
                  requires_grad=True)


class _Stem:
    def __init__(self, config: BranchedNetConfig, rng: np.random.Generator, dtype):
        k = config.stem_kernel
        self.weight = _he_conv(rng, config.stage_widths[0], config.input_channels, k, dtype)
        self.bn = _BatchNorm(config.stage_widths[0], dtype)
        self.stride = config.stem_stride
        self.pad = k // 2
        self.pool = config.stem_pool

    def forward(self, x: Tensor, mode: str) -> Tensor:
        out = relu(self.bn(conv2d(x, self.weight, stride=self.stride, pad=self.pad), mode))
        if self.pool:
            out = pool2d(out, "max", window=2, stride=2)
        return out

    def named_params(self):
        yield "conv.weight", self.weight
        yield "bn.gamma", self.bn.gamma
        yield "bn.beta", self.bn.beta

    def named_buffers(self):
        yield "bn.running_mean", self.bn.running_mean
        yield "bn.running_var", self.bn.running_var


class ResidualBlock:
    """Pre-classifier unit computing F(x) + shortcut(x), post-activation style.

    Basic: 3x3 conv -> BN -> relu -> 3x3 conv -> BN. Bottleneck: 1x1 -> 3x3
    (carries the stride) -> 1x1 with 4x expansion. The shortcut is the
    identity unless channels or stride change, in which case a 1x1
    projection conv + BN is used.
    """

    def __init__(self, plan: _BlockPlan, bottleneck: bool,
                 rng: np.random.Generator, dtype):
        self.plan = plan
        self.bottleneck = bottleneck
        self.eval_count = 0  # forward invocations, for trunk-reuse instrumentation
        if bottleneck:
            self.conv1 = _he_conv(rng, plan.width, plan.in_channels, 1, dtype)
            self.conv2 = _he_conv(rng, plan.width, plan.width, 3, dtype)
            self.conv3 = _he_conv(rng, plan.out_channels, plan.width, 1, dtype)
            self.bn1 = _BatchNorm(plan.width, dtype)
            self.bn2 = _BatchNorm(plan.width, dtype)
            self.bn3 = _BatchNorm(plan.out_channels, dtype)
        else:
            self.conv1 = _he_conv(rng, plan.width, plan.in_channels, 3, dtype)
            self.conv2 = _he_conv(rng, plan.out_channels, plan.width, 3, dtype)
            self.bn1 = _BatchNorm(plan.width, dtype)
            self.bn2 = _BatchNorm(plan.out_channels, dtype)
        if plan.has_projection:
            self.proj = _he_conv(rng, plan.out_channels, plan.in_channels, 1, dtype)
            self.proj_bn = _BatchNorm(plan.out_channels, dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor, mode: str) -> Tensor:
        self.eval_count += 1
        s = self.plan.stride
        if self.bottleneck:
            out = relu(self.bn1(conv2d(x, self.conv1, stride=1, pad=0), mode))
            out = relu(self.bn2(conv2d(out, self.conv2, stride=s, pad=1), mode))
            out = self.bn3(conv2d(out, self.conv3, stride=1, pad=0), mode)
        else:
            out = relu(self.bn1(conv2d(x, self.conv1, stride=s, pad=1), mode))
            out = self.bn2(conv2d(out, self.conv2, stride=1, pad=1), mode)
        if self.proj is not None:
            shortcut = self.proj_bn(conv2d(x, self.proj, stride=s, pad=0), mode)
        else:
            shortcut = x
        return relu(residual_add(out, shortcut))

    def named_params(self):
        convs = ("conv1", "conv2", "conv3") if self.bottleneck else ("conv1", "conv2")
        for tag in convs:
            yield f"{tag}.weight", getattr(self, tag)
            bn = getattr(self, tag.replace("conv", "bn"))
            yield f"{tag.replace('conv', 'bn')}.gamma", bn.gamma
            yield f"{tag.replace('conv', 'bn')}.beta", bn.beta
        if self.proj is not None:
            yield "proj.weight", self.proj
            yield "proj_bn.gamma", self.proj_bn.gamma
            yield "proj_bn.beta", self.proj_bn.beta

    def named_buffers(self):
        bns = ("bn1", "bn2", "bn3") if self.bottleneck else ("bn1", "bn2")
        for tag in bns:
            bn = getattr(self, tag)
            yield f"{tag}.running_mean", bn.running_mean
            yield f"{tag}.running_var", bn.running_var
        if self.proj_bn is not None:
            yield "proj_bn.running_mean", self.proj_bn.running_mean
            yield "proj_bn.running_var", self.proj_bn.running_var


class _Head:
    def __init__(self, in_features: int, num_classes: int,
                 rng: np.random.Generator, dtype):
        std = np.sqrt(2.0 / in_features)
        self.weight = Tensor((rng.standard_normal((num_classes, in_features)) * std).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return linear(global_avg_pool(x), self.weight, self.bias)

    def named_params(self):
        yield "head.weight", self.weight
        yield "head.bias", self.bias


class BranchedNetwork:
    """Instantiated parameters plus the forward plumbing.

    The parameter registry maps stable dotted names to tensors; trunk
    parameters appear exactly once, branch parameters under branch-scoped
    names. All branches share one architecture with independent values.
    """

    def __init__(self, config: BranchedNetConfig, seed: int, dtype=np.float64):
        self.config = config
        self.seed = seed
        plans = _block_plans(config)
        b = config.branch_after_block
        root = np.random.SeedSequence(seed)
        streams = root.spawn(1 + config.num_branches)

        self.stem: Optional[_Stem] = None
        self.trunk: list[ResidualBlock] = []
        if b >= 1:
            trunk_rng = np.random.default_rng(streams[0])
            self.stem = _Stem(config, trunk_rng, dtype)
            self.trunk = [ResidualBlock(p, config.bottleneck, trunk_rng, dtype)
                          for p in plans[:b]]

        self.branch_stems: list[Optional[_Stem]] = []
        self.branches: list[list[ResidualBlock]] = []
        self.heads: list[_Head] = []
        final_features = plans[-1].out_channels
        for br in range(config.num_branches):
            rng = np.random.default_rng(streams[1 + br])
            self.branch_stems.append(_Stem(config, rng, dtype) if b == 0 else None)
            self.branches.append([ResidualBlock(p, config.bottleneck, rng, dtype)
                                  for p in plans[b:]])
            self.heads.append(_Head(final_features, config.num_classes, rng, dtype))

    # -- registries --------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.stem is not None:
            for name, t in self.stem.named_params():
                out[f"stem.{name}"] = t
            for blk in self.trunk:
                for name, t in blk.named_params():
                    out[f"trunk.block{blk.plan.index:02d}.{name}"] = t
        for br, (bstem, blocks, head) in enumerate(
                zip(self.branch_stems, self.branches, self.heads)):
            scope = f"branch{br}"
            if bstem is not None:
                for name, t in bstem.named_params():
                    out[f"{scope}.stem.{name}"] = t
            for blk in blocks:
                for name, t in blk.named_params():
                    out[f"{scope}.block{blk.plan.index:02d}.{name}"] = t
            for name, t in head.named_params():
                out[f"{scope}.{name}"] = t
        return out

    def named_buffers(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.stem is not None:
            for name, t in self.stem.named_buffers():
                out[f"stem.{name}"] = t
            for blk in self.trunk:
                for name, t in blk.named_buffers():
                    out[f"trunk.block{blk.plan.index:02d}.{name}"] = t
        for br, (bstem, blocks) in enumerate(zip(self.branch_stems, self.branches)):
            scope = f"branch{br}"
            if bstem is not None:
                for name, t in bstem.named_buffers():
                    out[f"{scope}.stem.{name}"] = t
            for blk in blocks:
                for name, t in blk.named_buffers():
                    out[f"{scope}.block{blk.plan.index:02d}.{name}"] = t
        return out

    def state(self) -> dict[str, Tensor]:
        merged = dict(self.named_parameters())
        merged.update(self.named_buffers())
        return merged

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # -- forward -----------------------------------------------------------

    def forward_trunk(self, batch: Tensor, mode: str) -> Tensor:
        x = batch
        if self.stem is not None:
            x = self.stem.forward(x, mode)
            for blk in self.trunk:
                x = blk.forward(x, mode)
        return x

    def forward_branch(self, br: int, trunk_out: Tensor, mode: str) -> Tensor:
        x = trunk_out
        if self.branch_stems[br] is not None:
            x = self.branch_stems[br].forward(x, mode)
        for blk in self.branches[br]:
            x = blk.forward(x, mode)
        return self.heads[br].forward(x)

    def forward_all_branches(self, batch: Tensor, mode: str = "eval") -> list[Tensor]:
        trunk_out = self.forward_trunk(batch, mode)
        return [self.forward_branch(br, trunk_out, mode)
                for br in range(self.config.num_branches)]


def build_branched_net(config: BranchedNetConfig, seed: int,
                       dtype=np.float64) -> BranchedNetwork:
    """He-initialized network; each branch drawn from an independent
    sub-stream of the seed, so same-seed builds are bitwise identical and
    branches are decorrelated by construction."""
    return BranchedNetwork(config, seed, dtype=dtype)


def forward_all_branches(net: BranchedNetwork, batch: Tensor,
                         mode: str = "eval") -> list[Tensor]:
    """Evaluate the trunk once and every branch on the shared trunk output."""
    if batch.data.ndim != 4:
        raise ValueError(f"batch must be 4-D [N,C,H,W], got {batch.shape}")
    cfg = net.config
    if batch.shape[1:] != (cfg.input_channels, cfg.input_height, cfg.input_width):
        raise ValueError(
            f"batch shape {batch.shape[1:]} does not match configured input "
            f"({cfg.input_channels}, {cfg.input_height}, {cfg.input_width})")
    return net.forward_all_branches(batch, mode=mode)


# ---------------------------------------------------------------------------
# parameter accounting

@dataclass(frozen=True)
class ParamReport:
    stem_params: int
    shared_params: int
    per_branch_params: tuple[int, ...]
    head_params: tuple[int, ...]
    total_params: int
    equivalent_independent_ensemble_params: int
    sharing_ratio: float


def count_parameters(net_or_config: Union[BranchedNetwork, BranchedNetConfig]) -> ParamReport:
    """Exact learnable-parameter counts per registry scope.

    ``equivalent_independent_ensemble_params`` is num_branches times the
    size of one full single-head network; ``sharing_ratio`` = total over
    that, 1.0 exactly when nothing is shared (B = 0).
    """
    config = net_or_config if isinstance(net_or_config, BranchedNetConfig) \
        else net_or_config.config
    if isinstance(net_or_config, BranchedNetwork):
        sizes = {name: t.size for name, t in net_or_config.named_parameters().items()}
    else:
        sizes = {name: int(np.prod(shape)) for name, shape in _iter_param_shapes(config)}

    kb = config.num_branches
    stem = sum(v for k, v in sizes.items() if k.startswith("stem."))
    shared = sum(v for k, v in sizes.items() if k.startswith("trunk."))
    per_branch = []
    heads = []
    for br in range(kb):
        scope = f"branch{br}."
        head = sizes[f"branch{br}.head.weight"] + sizes[f"branch{br}.head.bias"]
        branch_total = sum(v for k, v in sizes.items() if k.startswith(scope))
        per_branch.append(branch_total - head)
        heads.append(head)
    total = sum(sizes.values())

    single = BranchedNetConfig(
        stage_blocks=config.stage_blocks, stage_widths=config.stage_widths,
        bottleneck=config.bottleneck, branch_after_block=config.total_blocks,
        num_branches=1, num_classes=config.num_classes,
        input_channels=config.input_channels, input_height=config.input_height,
        input_width=config.input_width, stem_kernel=config.stem_kernel,
        stem_stride=config.stem_stride, stem_pool=config.stem_pool)
    single_total = sum(int(np.prod(shape)) for _, shape in _iter_param_shapes(single))
    equivalent = kb * single_total

    return ParamReport(
        stem_params=stem, shared_params=shared,
        per_branch_params=tuple(per_branch), head_params=tuple(heads),
        total_params=total,
        equivalent_independent_ensemble_params=equivalent,
        sharing_ratio=total / equivalent)
