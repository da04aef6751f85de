"""Training, evaluation protocols, ablations, and checkpointing.

Optimization is AdamW (decoupled weight decay) on an L1 objective over
sampled patch pairs. Everything is driven by a single seed: example sampling,
initialization, and validation draws, so runs are bitwise reproducible in
single-threaded mode.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import metrics as met
from .autodiff import Parameter
from .data import (
    INPUT_SLOTS,
    PATCH_SIZE,
    PatchPair,
    VolumeSet,
    extract_patches,
    sample_training_example,
)
from .geometry import QSpacePoint
from .model import PCCNN, PCCNNConfig, build

ABLATIONS = ("none", "no_fourier", "no_bvectors", "dmax_quarter_pi", "dmax_eighth_pi")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0
    ablation: str = "none"
    q_out: int = 10
    patch_size: int = PATCH_SIZE
    val_every: int = 50
    n_val_examples: int = 4
    overfit: bool = False

    def __post_init__(self) -> None:
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr/eps/weight_decay out of range")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.iterations < 0 or self.q_out < 1:
            raise ValueError("batch_size/iterations/q_out out of range")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")


def apply_ablation(model_cfg: PCCNNConfig, ablation: str) -> PCCNNConfig:
    """Model config with exactly one factor ablated."""
    if ablation == "none":
        return model_cfg
    if ablation == "no_fourier":
        return dataclasses.replace(model_cfg, use_fourier=False)
    if ablation == "no_bvectors":
        return dataclasses.replace(model_cfg, use_dcos=False)
    if ablation == "dmax_quarter_pi":
        return dataclasses.replace(model_cfg, d_max=math.pi / 4)
    if ablation == "dmax_eighth_pi":
        return dataclasses.replace(model_cfg, d_max=math.pi / 8)
    raise ValueError(f"unknown ablation {ablation!r}")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: Sequence[Parameter]) -> "AdamWState":
        return cls(
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params},
        )


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamWState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    The decay term theta -= lr * wd * theta is applied separately from the
    bias-corrected gradient term.
    """
    beta1, beta2 = cfg.betas
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name}")
        if ad.finite_checks_enabled() and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {p.name}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data -= cfg.lr * update
        p.data -= cfg.lr * cfg.weight_decay * p.data


def _example_loss(model: PCCNN, example: PatchPair) -> ad.Tensor:
    pred = model.forward(
        example.x_in, example.in_points, example.padding_mask, example.out_points, example.centroid
    )
    nvox = pred.data.shape[0]
    target = example.x_out.reshape(nvox, -1).astype(model.dtype)
    mask = np.broadcast_to(example.valid_mask.reshape(nvox, 1), target.shape)
    return ad.l1_loss(pred, target, mask)


def _batch_loss(model: PCCNN, examples: Sequence[PatchPair]) -> ad.Tensor:
    total = _example_loss(model, examples[0])
    for ex in examples[1:]:
        total = ad.add(total, _example_loss(model, ex))
    return ad.scale(total, 1.0 / len(examples))


@dataclass
class TrainResult:
    model: PCCNN
    history: list[tuple[int, float, float | None]] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    best_val: float | None = None
    best_params: dict[str, np.ndarray] | None = None

    def restore_best(self) -> None:
        if self.best_params is None:
            return
        for p in self.model.parameters():
            p.data[...] = self.best_params[p.name]


def train(
    model: PCCNN,
    train_vols: VolumeSet | Sequence[VolumeSet],
    cfg: TrainConfig,
    val_vols: VolumeSet | Sequence[VolumeSet] | None = None,
    overfit_example: PatchPair | None = None,
) -> TrainResult:
    """Optimize the model on sampled patch pairs; deterministic given the seed.

    With cfg.overfit (or an explicit example) the same single example is used
    at every step. Validation examples are drawn once up front; the best
    validation parameters are kept.
    """
    subjects = [train_vols] if isinstance(train_vols, VolumeSet) else list(train_vols)
    patch_lists = [extract_patches(v, size=cfg.patch_size) for v in subjects]
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamWState.init(params)
    result = TrainResult(model=model)

    if cfg.overfit and overfit_example is None:
        sub = int(rng.integers(len(subjects)))
        overfit_example = sample_training_example(
            subjects[sub], rng, q_out=cfg.q_out, size=cfg.patch_size, patches=patch_lists[sub]
        )

    val_examples: list[PatchPair] = []
    if val_vols is not None:
        val_subjects = [val_vols] if isinstance(val_vols, VolumeSet) else list(val_vols)
        val_rng = np.random.default_rng(cfg.seed + 1)
        val_patches = [extract_patches(v, size=cfg.patch_size) for v in val_subjects]
        for _ in range(cfg.n_val_examples):
            i = int(val_rng.integers(len(val_subjects)))
            val_examples.append(
                sample_training_example(
                    val_subjects[i], val_rng, q_out=cfg.q_out, size=cfg.patch_size, patches=val_patches[i]
                )
            )

    def validation_loss() -> float:
        losses = [float(_example_loss(model, ex).data) for ex in val_examples]
        return float(np.mean(losses))

    for step in range(1, cfg.iterations + 1):
        if overfit_example is not None:
            batch = [overfit_example]
        else:
            batch = []
            for _ in range(cfg.batch_size):
                i = int(rng.integers(len(subjects)))
                batch.append(
                    sample_training_example(
                        subjects[i], rng, q_out=cfg.q_out, size=cfg.patch_size, patches=patch_lists[i]
                    )
                )
        loss = _batch_loss(model, batch)
        loss_value = float(loss.data)
        if math.isnan(result.initial_loss):
            result.initial_loss = loss_value
        ad.zero_grads(params)
        ad.backward(loss)
        adamw_step(params, [p.grad for p in params], state, cfg)

        val_value: float | None = None
        if val_examples and (step % cfg.val_every == 0 or step == cfg.iterations):
            val_value = validation_loss()
            if result.best_val is None or val_value < result.best_val:
                result.best_val = val_value
                result.best_params = {p.name: p.data.copy() for p in params}
        result.history.append((step, loss_value, val_value))
        result.final_loss = loss_value
    return result


def write_loss_log(history: Sequence[tuple[int, float, float | None]], path) -> None:
    lines = ["step,loss,val_loss"]
    for step, loss, val in history:
        lines.append(f"{step},{loss:.9g},{'' if val is None else format(val, '.9g')}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def _config_digest(config: PCCNNConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, model: PCCNN, state: AdamWState | None = None, iteration: int = 0) -> None:
    """Directory checkpoint: descriptor.json + params.bin (little-endian)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    entries = []
    blobs = []
    for p in params:
        arr = p.data
        entries.append({"name": p.name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    opt = None
    if state is not None:
        opt = {"step": state.step, "slots": []}
        for slot, table in (("m", state.m), ("v", state.v)):
            for name in sorted(table):
                arr = table[name]
                opt["slots"].append({"slot": slot, "name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
                blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    descriptor = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "config_digest": _config_digest(model.config),
        "seed": model.seed,
        "iteration": iteration,
        "params": entries,
        "opt": opt,
    }
    (path / "descriptor.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True))
    (path / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> tuple[PCCNN, AdamWState | None, int]:
    path = Path(path)
    descriptor = json.loads((path / "descriptor.json").read_text())
    config = PCCNNConfig(**descriptor["config"])
    model = build(config, descriptor["seed"])
    raw = (path / "params.bin").read_bytes()
    params = {p.name: p for p in model.parameters()}
    offset = 0

    def take(shape, dtype):
        nonlocal offset
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"), count=int(np.prod(shape)), offset=offset)
        offset += arr.nbytes
        return arr.reshape(shape).astype(dtype)

    for entry in descriptor["params"]:
        params[entry["name"]].data = take(entry["shape"], entry["dtype"])
    state = None
    if descriptor["opt"] is not None:
        state = AdamWState(m={}, v={}, step=descriptor["opt"]["step"])
        for entry in descriptor["opt"]["slots"]:
            table = state.m if entry["slot"] == "m" else state.v
            table[entry["name"]] = take(entry["shape"], entry["dtype"])
    return model, state, descriptor["iteration"]


# ---------------------------------------------------------------------------
# evaluation protocols


PROTOCOLS = ("single_shell", "multi_shell")
BASELINES = ("sh", "lowres", "truth")


def _held_out_targets(vols: VolumeSet, q_in: int, protocol: str, input_bval: float, rng) -> tuple[list[int], list[QSpacePoint], list[int]]:
    shells = {s.bval: s for s in vols.shells()}
    if input_bval not in shells:
        raise ValueError(f"dataset has no b={input_bval} shell")
    shell_in = shells[input_bval]
    if q_in > len(shell_in) or q_in > INPUT_SLOTS:
        raise ValueError(f"q_in={q_in} exceeds the available directions")
    q0 = int(rng.integers(len(shell_in)))
    in_idx = geo.farthest_point_subset(shell_in, q0, q_in)
    held_out = [i for i in range(len(shell_in)) if i not in in_idx]
    vol_of = {b: vols.volume_indices(b) for b in shells}
    targets: list[QSpacePoint] = []
    target_vols: list[int] = []
    for i in held_out:
        targets.append(QSpacePoint(0, 0, 0, input_bval, shell_in.directions[i]))
        target_vols.append(vol_of[input_bval][i])
    if protocol == "multi_shell":
        for bval, shell in sorted(shells.items()):
            if bval == input_bval:
                continue
            for i, d in enumerate(shell.directions):
                targets.append(QSpacePoint(0, 0, 0, bval, d))
                target_vols.append(vol_of[bval][i])
    return in_idx, targets, target_vols


def predict_volume(
    model: PCCNN,
    vols: VolumeSet,
    in_idx: Sequence[int],
    input_bval: float,
    targets: Sequence[QSpacePoint],
    chunk: int = 32,
    patch_size: int = PATCH_SIZE,
    threads: int = 1,
) -> np.ndarray:
    """Tile the volume with patches and average overlapping predictions.

    With threads > 1, patch forwards run on a thread pool (the model is
    read-only during inference); accumulation always happens in patch order,
    so the result does not depend on the thread count or completion order.
    """
    shell = {s.bval: s for s in vols.shells()}[input_bval]
    in_vols = vols.volume_indices(input_bval)
    q_in = len(in_idx)
    in_points = [QSpacePoint(0, 0, 0, input_bval, shell.directions[i]) for i in in_idx]
    in_points += [QSpacePoint(0, 0, 0, 0.0, geo.PLACEHOLDER_DIRECTION)] * (INPUT_SLOTS - q_in)
    padding = np.array([False] * q_in + [True] * (INPUT_SLOTS - q_in))
    targets = list(targets)

    def patch_prediction(desc):
        ou, ov, ow = desc.origin
        sl = (slice(ou, ou + patch_size), slice(ov, ov + patch_size), slice(ow, ow + patch_size))
        block = vols.intensities[sl]
        x_in = np.zeros((patch_size,) * 3 + (INPUT_SLOTS,), dtype=np.float64)
        for slot, i in enumerate(in_idx):
            x_in[..., slot] = block[..., in_vols[i]]
        parts = []
        for lo in range(0, len(targets), chunk):
            part = targets[lo : lo + chunk]
            out = model.forward(x_in, in_points, padding, part, desc.centroid)
            parts.append(out.data.reshape((patch_size,) * 3 + (len(part),)))
        return sl, np.concatenate(parts, axis=3)

    descs = extract_patches(vols, size=patch_size)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(patch_prediction, descs))
    else:
        results = [patch_prediction(d) for d in descs]

    pred_sum = np.zeros(vols.shape + (len(targets),), dtype=np.float64)
    counts = np.zeros(vols.shape, dtype=np.float64)
    for sl, block_pred in results:
        pred_sum[sl] += block_pred
        counts[sl] += 1.0
    covered = counts > 0
    pred = np.zeros_like(pred_sum)
    pred[covered] = pred_sum[covered] / counts[covered][:, None]
    return pred


def _lowres_predict(vols: VolumeSet, in_idx, input_bval, targets) -> np.ndarray:
    """Nearest acquired input direction stands in for each target."""
    shell = {s.bval: s for s in vols.shells()}[input_bval]
    in_vols = vols.volume_indices(input_bval)
    in_units = shell.units[list(in_idx)]
    out = np.empty(vols.shape + (len(targets),), dtype=np.float64)
    for t, point in enumerate(targets):
        dists = geo.dang_matrix(point.dir.unit[None, :], in_units)[0]
        nearest = int(np.argmin(dists))
        out[..., t] = vols.intensities[..., in_vols[in_idx[nearest]]]
    return out


def evaluate(
    predictor: PCCNN | str,
    vols: VolumeSet,
    q_in: int,
    protocol: str = "single_shell",
    seed: int = 0,
    input_bval: float = 1000.0,
    acc_order: int = 8,
    chunk: int = 32,
    threads: int = 1,
    patch_size: int = PATCH_SIZE,
) -> dict[str, float]:
    """Run one super-resolution protocol and score against ground truth.

    predictor is a trained model or a baseline tag ('sh', 'lowres'). The
    single-shell protocol predicts the held-out directions of the input
    shell; multi-shell adds every direction of the other shells. ACC compares
    order-8 SH fits of predicted and true signals per shell whenever enough
    directions are held out to support the fit.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if isinstance(predictor, str) and predictor not in BASELINES:
        raise ValueError(f"unknown baseline {predictor!r}, expected one of {BASELINES}")
    rng = np.random.default_rng(seed)
    in_idx, targets, target_vols = _held_out_targets(vols, q_in, protocol, input_bval, rng)
    truth = vols.intensities[..., target_vols]

    if isinstance(predictor, PCCNN):
        # tile with the same patch size the model was trained on: the border
        # truncation statistics of the 3^3 kernels are part of what it learned
        pred = predict_volume(
            predictor, vols, in_idx, input_bval, targets, chunk=chunk, threads=threads, patch_size=patch_size
        )
    elif predictor == "truth":
        pred = truth.copy()
    elif predictor == "sh":
        if protocol != "single_shell":
            raise ValueError("the SH baseline is single-shell only")
        shell = {s.bval: s for s in vols.shells()}[input_bval]
        in_vols = vols.volume_indices(input_bval)
        sub = vols.intensities[..., [in_vols[i] for i in in_idx]]
        units_out = np.array([p.dir.unit for p in targets])
        pred = met.sh_predict(sub, shell.units[in_idx], units_out, order=2)
    else:
        pred = _lowres_predict(vols, in_idx, input_bval, targets)

    mask = vols.brain_mask
    report = {
        "mae": met.mae(pred, truth, mask),
        "psnr": met.psnr(pred, truth, mask),
        "mssim": met.mssim(pred, truth, mask),
    }
    acc_values = []
    rhos = np.array([p.rho for p in targets])
    for bval in np.unique(rhos):
        sel = np.flatnonzero(rhos == bval)
        if sel.size < met.sh_basis_size(acc_order):
            continue
        units = np.array([targets[i].dir.unit for i in sel])
        fit_pred = met.sh_fit(pred[..., sel], units, acc_order)
        fit_true = met.sh_fit(truth[..., sel], units, acc_order)
        amap = met.acc_map(fit_pred, fit_true)
        acc_values.append(amap[mask & np.isfinite(amap)])
    if acc_values:
        report["acc"] = float(np.concatenate(acc_values).mean())
    return report


def evaluate_subjects(
    predictor: PCCNN | str,
    subjects: Sequence[VolumeSet],
    q_in: int,
    protocol: str = "single_shell",
    seed: int = 0,
    **kwargs,
) -> dict[str, met.MetricSummary]:
    """Per-subject evaluation rolled up into mean and population std."""
    rows = [evaluate(predictor, v, q_in, protocol, seed=seed + i, **kwargs) for i, v in enumerate(subjects)]
    report: dict[str, met.MetricSummary] = {}
    for key in rows[0]:
        vals = [r[key] for r in rows if key in r]
        arr = np.asarray(vals)
        with np.errstate(invalid="ignore"):  # std of an all-inf PSNR column
            report[key] = met.MetricSummary(per_subject=vals, mean=float(arr.mean()), std=float(arr.std()))
    return report


def run_ablation(
    model_cfg: PCCNNConfig,
    train_cfg: TrainConfig,
    train_vols: VolumeSet | Sequence[VolumeSet],
    eval_vols: VolumeSet,
    arms: Sequence[str],
    q_in: int = 6,
    protocol: str = "single_shell",
    eval_seed: int = 0,
    model_seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Train and evaluate each arm identically except the ablated factor."""
    out: dict[str, dict[str, float]] = {}
    for arm in arms:
        cfg_arm = apply_ablation(model_cfg, arm)
        arm_train = dataclasses.replace(train_cfg, ablation=arm)
        model = build(cfg_arm, seed=model_seed)
        train(model, train_vols, arm_train)
        out[arm] = evaluate(model, eval_vols, q_in, protocol, seed=eval_seed)
    return out
