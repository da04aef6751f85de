"""Central finite-difference verification of reverse-mode gradients.

A check rebuilds the loss from scratch for every probe, perturbing one
parameter entry at a time, so it is independent of the backward rules it
verifies. Relative error uses an absolute floor (tiny true gradients are
compared absolutely, since finite differences bottom out near 1e-10).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Parameter, Tensor, backward, zero_grads

REL_ERR_FLOOR = 1e-3


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> ParamCheck | None:
        if not self.checks:
            return None
        return max(self.checks, key=lambda c: c.max_rel_err)


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return np.abs(a - b) / denom


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Parameter, step: float) -> np.ndarray:
    """Central-difference gradient of loss_fn with respect to one parameter."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of loss_fn against central differences.

    loss_fn must rebuild the graph on each call and return a scalar Tensor.
    """
    zero_grads(params)
    backward(loss_fn())
    analytic = {p.name: p.grad.astype(np.float64).copy() for p in params}
    report = GradCheckReport()
    for p in params:
        numeric = numeric_gradient(loss_fn, p, step)
        err = float(rel_err(analytic[p.name], numeric).max()) if p.data.size else 0.0
        report.checks.append(ParamCheck(name=p.name, max_rel_err=err, passed=err < tol))
    return report


def standard_suite(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    """The full finite-difference battery: ops, conv layers, and a small
    end-to-end network on a 2x2x2 patch with four directions."""
    from . import autodiff as ad
    from . import geometry as geo
    from .conv import AxisFactorizedLayer, PCConvLayer, PCConvLayerConfig, axis_neighborhood, grid_neighborhood
    from .conv import AngularSet
    from .embedding import EmbeddingConfig
    from .model import PCCNNConfig, build

    rng = np.random.default_rng(seed)
    checks: list[tuple[str, GradCheckReport]] = []

    def add(name, loss_fn, params):
        checks.append((name, check_gradients(loss_fn, params, step=step, tol=tol)))

    a = Parameter(rng.standard_normal((5, 4)), "a")
    b = Parameter(rng.standard_normal((4, 3)), "b")
    proj = rng.standard_normal((5, 3))
    add("op:matmul", lambda: ad.sum_all(ad.mul_const(ad.matmul(a, b), proj)), [a, b])

    x = Parameter(rng.standard_normal(24) + np.sign(rng.standard_normal(24)) * 0.4, "x")
    proj_x = rng.standard_normal(24)
    add("op:leaky_relu", lambda: ad.sum_all(ad.mul_const(ad.leaky_relu(x, 0.1), proj_x)), [x])

    f = Parameter(rng.standard_normal((6, 3)), "f")
    w = Parameter(rng.standard_normal((6, 3)), "w")
    gmask = rng.random(6) > 0.3
    proj_g = rng.standard_normal(3)
    add(
        "op:gather_weighted_sum",
        lambda: ad.sum_all(ad.mul_const(ad.gather_weighted_sum(f, w, gmask), proj_g)),
        [f, w],
    )

    pred = Parameter(rng.standard_normal((4, 3)), "pred")
    target = pred.data + np.sign(rng.standard_normal((4, 3))) * 0.8
    add("op:l1_loss", lambda: ad.l1_loss(pred, target), [pred])

    seg = Parameter(rng.standard_normal((7, 2)), "seg")
    starts = np.array([0, 3, 3, 7])
    proj_s = rng.standard_normal((3, 2))
    add("op:segment_sum", lambda: ad.sum_all(ad.mul_const(ad.segment_sum(seg, starts, 3), proj_s)), [seg])

    fp = Parameter(rng.standard_normal((5, 3)), "fp")
    wp = Parameter(rng.standard_normal((5, 3, 2)), "wp")
    proj_p = rng.standard_normal((5, 2))
    add("op:pair_contract", lambda: ad.sum_all(ad.mul_const(ad.pair_contract(fp, wp), proj_p)), [fp, wp])

    units = geo.fibonacci_directions(4) @ geo.random_rotation(rng).T
    aset = AngularSet(units=units, rhos=np.full(4, 1000.0), active=np.ones(4, dtype=bool))
    emb = EmbeddingConfig(variant="standard", L=2)
    for mode in ("full", "per_channel", "scalar"):
        cfg = PCConvLayerConfig((3, 1, 1), 3, 2.5, 2, 2, mode, emb)
        layer = PCConvLayer(cfg, hyper_width=4, rng=rng, dtype=np.float64, name=f"layer_{mode}")
        nbhd = grid_neighborhood((3, 1, 1), aset, aset, cfg)
        feats = Parameter(rng.standard_normal((12, 2)), f"features_{mode}")
        tgt = rng.standard_normal((12, 2)) * 2.0
        add(
            f"layer:{mode}",
            lambda layer=layer, nbhd=nbhd, feats=feats, tgt=tgt: ad.l1_loss(layer.forward(feats, nbhd), tgt),
            layer.parameters() + [feats],
        )

    fact_cfg = PCConvLayerConfig((3, 3, 3), 3, np.pi, 2, 2, "per_channel", emb)
    fact = AxisFactorizedLayer(fact_cfg, hyper_width=4, rng=rng, dtype=np.float64)
    nbhds = [axis_neighborhood((2, 2, 1), aset, axis, fact_cfg) for axis in range(3)]
    nbhds.append(grid_neighborhood((2, 2, 1), aset, aset, fact_cfg))
    feats_f = Parameter(rng.standard_normal((16, 2)), "features_fact")
    tgt_f = rng.standard_normal((16, 2)) * 2.0
    add(
        "layer:axis_factorized",
        lambda: ad.l1_loss(fact.forward(feats_f, nbhds), tgt_f),
        fact.parameters() + [feats_f],
    )

    cfg = PCCNNConfig(
        n_pointwise=1, n_blocks=1, c1=4, c3=4, hyper_width=6, fourier_bands=2, k_q=4, dtype="float64"
    )
    model = build(cfg, seed=seed + 1)
    patch = rng.standard_normal((2, 2, 2, 4))
    shell = geo.make_shell(1000.0, 4, seed=seed + 2)
    in_pts = [geo.QSpacePoint(0, 0, 0, 1000.0, d) for d in shell.directions]
    out_shell = geo.make_shell(1000.0, 3, seed=seed + 3)
    out_pts = [geo.QSpacePoint(0, 0, 0, 1000.0, d) for d in out_shell.directions]
    mask = np.zeros(4, dtype=bool)
    tgt_m = rng.standard_normal((8, 3)) * 2.0
    add(
        "model:end_to_end",
        lambda: ad.l1_loss(model.forward(patch, in_pts, mask, out_pts), tgt_m),
        model.parameters(),
    )
    return checks
