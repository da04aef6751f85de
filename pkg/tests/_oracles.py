"""Independent reference implementations shared by the unit and acceptance
tests. Everything here is deliberately written with plain loops and direct
formulas, separate from the library code paths it verifies."""

import numpy as np

from pccnn import geometry as geo
from pccnn.conv import AngularSet, HyperNet, PCConvLayer, PCConvLayerConfig
from pccnn.embedding import EmbeddingConfig, embed


def angular_set(n_dirs, seed=0, rho=1000.0, n_padding=0):
    units = geo.fibonacci_directions(n_dirs) @ geo.random_rotation(np.random.default_rng(seed)).T
    units /= np.linalg.norm(units, axis=1, keepdims=True)
    if n_padding:
        units = np.vstack([units, np.tile([0.0, 0.0, 1.0], (n_padding, 1))])
    rhos = np.full(n_dirs + n_padding, rho)
    active = np.array([True] * n_dirs + [False] * n_padding)
    return AngularSet(units=units, rhos=rhos, active=active)


def layer_cfg(extent=(1, 1, 1), k_q=8, d_max=np.pi, c=2, k=2, mode="per_channel", emb=None):
    return PCConvLayerConfig(
        spatial_extent=extent,
        k_q=k_q,
        d_max=d_max,
        in_channels=c,
        out_channels=k,
        weight_mode=mode,
        embedding=emb or EmbeddingConfig(variant="standard", L=2),
    )


def naive_hyper(net: HyperNet, e: np.ndarray, head=0) -> np.ndarray:
    """Independent re-evaluation of the weight MLP."""
    h = e @ net.w1.data + net.b1.data
    h = np.where(h > 0, h, 0.1 * h)
    h = h @ net.w2.data + net.b2.data
    h = np.where(h > 0, h, 0.1 * h)
    hw, hb = net.heads[head]
    return h @ hw.data + hb.data


def random_full_instance(rng, n, o, c, k):
    """Single-voxel point sets: every pair is in the neighborhood."""
    in_units = rng.standard_normal((n, 3))
    in_units /= np.linalg.norm(in_units, axis=1, keepdims=True)
    out_units = rng.standard_normal((o, 3))
    out_units /= np.linalg.norm(out_units, axis=1, keepdims=True)
    rhos_in = rng.choice([1000.0, 2000.0, 3000.0], size=n)
    rhos_out = rng.choice([1000.0, 2000.0, 3000.0], size=o)
    in_set = AngularSet(units=in_units, rhos=rhos_in, active=np.ones(n, dtype=bool))
    out_set = AngularSet(units=out_units, rhos=rhos_out, active=np.ones(o, dtype=bool))
    cfg = layer_cfg(k_q=n, c=c, k=k, mode="full")
    layer = PCConvLayer(cfg, hyper_width=6, rng=rng, dtype=np.float64, name="full")
    features = rng.standard_normal((n, c))
    return in_set, out_set, cfg, layer, features


def naive_full_forward(layer, features, in_set, out_set):
    """Literal double-sum evaluation: h[j,k] = sum_c sum_i f[i,c] g_ck(e_ij)."""
    c_dim, k_dim = layer.cfg.in_channels, layer.cfg.out_channels
    o = len(out_set)
    out = np.zeros((o, k_dim))
    for j in range(o):
        y = geo.QSpacePoint(0, 0, 0, out_set.rhos[j], geo.Direction.from_unit(out_set.units[j]))
        for i in range(len(in_set)):
            x = geo.QSpacePoint(0, 0, 0, in_set.rhos[i], geo.Direction.from_unit(in_set.units[i]))
            g = naive_hyper(layer.hyper, embed(x, y, layer.cfg.embedding)[None, :])[0]
            for k in range(k_dim):
                for c in range(c_dim):
                    out[j, k] += features[i, c] * g[c * k_dim + k]
    return out


def brute_force_greedy(units, q0, n):
    """Exhaustive argmax-min farthest-point reference."""
    import math

    chosen = [q0]
    while len(chosen) < n:
        best, best_d = None, -1.0
        for j in range(len(units)):
            if j in chosen:
                continue
            dj = min(
                math.acos(max(-1.0, min(1.0, float(np.dot(units[i], units[j])))))
                for i in chosen
            )
            if dj > best_d:
                best, best_d = j, dj
        chosen.append(best)
    return chosen
