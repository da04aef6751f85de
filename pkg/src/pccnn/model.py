"""Network assembly: continuous-convolution layers stacked for angular
super-resolution.

The first layer is spatially pointwise and maps the input angular point set
onto the target set, so every later layer shares the target geometry. A stack
of further pointwise layers feeds residual blocks, each a spatially pointwise
branch in parallel with an axis-factorized 3x3x3 branch; branch outputs are
summed, an identity skip is added when channel widths match, and a ReLU
follows every layer or block except the final pointwise projection to one
channel. All weights initialize uniformly in (-sqrt(1/k_in), +sqrt(1/k_in)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .conv import (
    AngularSet,
    AxisFactorizedLayer,
    PCConvLayer,
    PCConvLayerConfig,
    axis_neighborhood,
    grid_neighborhood,
)
from .embedding import EmbeddingConfig
from .geometry import QSpacePoint

MAX_INPUT_SLOTS = 20


@dataclass(frozen=True)
class PCCNNConfig:
    """Hyperparameters of the toy-scale network.

    c1 is the channel width of the leading pointwise stack, c3 the width of
    the residual-block branches. d_max applies to every layer.
    """

    n_pointwise: int = 2
    n_blocks: int = 2
    c1: int = 16
    c3: int = 16
    hyper_width: int = 32
    fourier_bands: int = 4
    k_q: int = 20
    variant: str = "standard"
    weight_mode: str = "per_channel"
    d_max: float = math.pi
    b_scale: float = 3000.0
    use_dcos: bool = True
    use_fourier: bool = True
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.k_q < 1 or self.k_q > MAX_INPUT_SLOTS:
            raise ValueError(f"k_q must lie in [1, {MAX_INPUT_SLOTS}], got {self.k_q}")
        for field_name in ("n_pointwise", "n_blocks", "c1", "c3", "hyper_width", "fourier_bands"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(
            variant=self.variant,
            L=self.fourier_bands,
            b_scale=self.b_scale,
            use_dcos=self.use_dcos,
            use_fourier=self.use_fourier,
        )

    def layer_cfg(self, extent, c_in, c_out) -> PCConvLayerConfig:
        return PCConvLayerConfig(
            spatial_extent=extent,
            k_q=self.k_q,
            d_max=self.d_max,
            in_channels=c_in,
            out_channels=c_out,
            weight_mode=self.weight_mode,
            embedding=self.embedding,
        )


@dataclass
class ResidualBlock:
    pointwise: PCConvLayer
    factorized: AxisFactorizedLayer
    has_skip: bool


class PCCNN:
    """The assembled network; immutable during forward."""

    def __init__(self, config: PCCNNConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        wm = config.weight_mode

        self.head_layers = [
            PCConvLayer(config.layer_cfg((1, 1, 1), 1, config.c1), config.hyper_width, rng, self.dtype, "head0")
        ]
        for i in range(1, config.n_pointwise):
            self.head_layers.append(
                PCConvLayer(
                    config.layer_cfg((1, 1, 1), config.c1, config.c1),
                    config.hyper_width, rng, self.dtype, f"head{i}",
                )
            )
        self.blocks: list[ResidualBlock] = []
        c_in = config.c1
        for b in range(config.n_blocks):
            pw = PCConvLayer(
                config.layer_cfg((1, 1, 1), c_in, config.c3),
                config.hyper_width, rng, self.dtype, f"block{b}.pw",
            )
            fact_cfg = config.layer_cfg((3, 3, 3), c_in, config.c3)
            if wm == "full":
                fact_cfg = replace(fact_cfg, weight_mode="per_channel")
            fact = AxisFactorizedLayer(fact_cfg, config.hyper_width, rng, self.dtype, f"block{b}.fact")
            self.blocks.append(ResidualBlock(pw, fact, has_skip=c_in == config.c3))
            c_in = config.c3
        self.final_layer = PCConvLayer(
            config.layer_cfg((1, 1, 1), c_in, 1), config.hyper_width, rng, self.dtype, "final"
        )

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.head_layers:
            out += layer.parameters()
        for block in self.blocks:
            out += block.pointwise.parameters()
            out += block.factorized.parameters()
        out += self.final_layer.parameters()
        return out

    def set_cache_enabled(self, enabled: bool) -> None:
        layers = list(self.head_layers) + [self.final_layer]
        for block in self.blocks:
            layers += [block.pointwise, block.factorized]
        for layer in layers:
            if enabled:
                layer.enable_cache()
            else:
                layer.disable_cache()

    def forward(
        self,
        patch: np.ndarray,
        in_points: Sequence[QSpacePoint],
        padding_mask,
        out_points: Sequence[QSpacePoint],
        centroid=None,
    ) -> Tensor:
        """Predict intensities at every (voxel, target point).

        patch is [nx, ny, nz, q_slots] with zero-filled padding slots flagged
        in padding_mask; returns a [n_voxels, len(out_points)] tensor.
        """
        patch = np.asarray(patch)
        if patch.ndim != 4 or patch.shape[3] != len(in_points):
            raise ValueError(f"patch shape {patch.shape} does not match {len(in_points)} input points")
        if self.config.embedding.uses_centroid and centroid is None:
            raise ValueError(f"variant {self.config.variant!r} requires a patch centroid")
        in_set = AngularSet.from_points(in_points, padding_mask)
        out_set = AngularSet.from_points(out_points)
        if np.any(patch[..., ~in_set.active] != 0):
            raise ValueError("padding slots must be zero-filled")
        shape = patch.shape[:3]
        nvox = int(np.prod(shape))
        q_out = len(out_points)

        # geometry is shared by every layer with the same point sets
        geom_cfg = self.config.layer_cfg((1, 1, 1), 1, 1)
        nb_in = grid_neighborhood(shape, in_set, out_set, geom_cfg, centroid)
        nb_out = grid_neighborhood(shape, out_set, out_set, geom_cfg, centroid)
        nb_axes = [axis_neighborhood(shape, out_set, a, geom_cfg, centroid) for a in range(3)]

        h = Tensor(patch.reshape(nvox * len(in_points), 1).astype(self.dtype))
        h = ad.relu(self.head_layers[0].forward(h, nb_in))
        for layer in self.head_layers[1:]:
            h = ad.relu(layer.forward(h, nb_out))
        for block in self.blocks:
            branch = ad.add(
                block.pointwise.forward(h, nb_out),
                block.factorized.forward(h, nb_axes + [nb_out]),
            )
            if block.has_skip:
                branch = ad.add(branch, h)
            h = ad.relu(branch)
        h = self.final_layer.forward(h, nb_out)
        return ad.reshape(h, (nvox, q_out))


def build(config: PCCNNConfig, seed: int) -> PCCNN:
    """Construct a network with seeded uniform initialization."""
    return PCCNN(config, seed)


def param_count(model: PCCNN) -> int:
    """Number of scalar trainable parameters."""
    return sum(p.data.size for p in model.parameters())
