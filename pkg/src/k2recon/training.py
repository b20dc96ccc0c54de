"""Self-supervised (and supervised) training of the unrolled network.

One tape per sample; parameter gradients are averaged over the batch,
clipped at a global norm and fed to Adam.  Per-epoch randomness (sample
order, input/supervision splits, calibration draws) derives statelessly
from (seed, epoch), so a run resumed from a checkpoint continues on the
exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import complexops as cx
from . import ndgrad
from .data import Sample, read_array_container, write_array_container
from .errors import ConfigurationError, NumericalBreakdownError
from .linops import CoilSensitivities, EncodingOperator
from .metrics import psnr, ssim
from .sampling import CalibrationSchedule, split_mask
from .unrolled import DenoiserParams, UnrollConfig, unrolled_forward

LOSS_KINDS = ("l2", "l1", "mixed")
_DENOM_FLOOR = 1e-12


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 2
    epochs: int = 100
    loss_kind: str = "mixed"
    rho: float = 0.4
    schedule: CalibrationSchedule = field(default_factory=CalibrationSchedule)
    seed: int = 0
    supervision: str = "self"
    unroll_k: int = 5
    cg_tol: float = 1e-6
    cg_max_iter: int = 15
    n_lambda: int = 1
    lambda_init: float = 0.05
    leaky_slope: float = 0.01
    grad_clip: float = 1.0

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.rho < 1.0):
            raise ConfigurationError(f"rho must be in (0,1), got {self.rho}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.supervision not in ("self", "full"):
            raise ConfigurationError(
                f"supervision must be 'self' or 'full', got {self.supervision!r}"
            )
        if self.unroll_k < 1:
            raise ConfigurationError(f"unroll_k must be >= 1, got {self.unroll_k}")
        if self.schedule.enabled_steps > self.unroll_k:
            raise ConfigurationError(
                f"k2c steps {self.schedule.enabled_steps} exceed unroll depth {self.unroll_k}"
            )


# ---------------------------------------------------------------------------
# losses


def self_supervised_loss(x_out: cx.ComplexTensor, y_omega: np.ndarray,
                         lambda_mask: np.ndarray, coils: CoilSensitivities,
                         kind: str = "mixed") -> ndgrad.Tensor:
    """Normalized k-space distance restricted to the supervision set.

    The network output is transformed to coil k-space and compared with the
    acquired data on lambda locations only; content anywhere else cannot
    change the value.
    """
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"loss kind must be one of {LOSS_KINDS}")
    m = lambda_mask.astype(np.float64)
    if not m.any():
        raise ConfigurationError("self-supervised loss undefined: lambda set is empty")
    parts = []
    yhat = cx.to_kspace(x_out, coils)
    for i, k in enumerate(yhat):
        r = cx.csub(k, cx.ComplexTensor.from_numpy(y_omega[i]))
        rm = cx.mul_real(r, m)
        parts.extend([rm.re, rm.im])
    vec = ndgrad.concat(parts)
    y_l = y_omega * m
    terms = []
    if kind in ("l2", "mixed"):
        denom = max(float(np.linalg.norm(y_l)), _DENOM_FLOOR)
        terms.append(ndgrad.smul(ndgrad.reduce(vec, "l2norm"), 1.0 / denom))
    if kind in ("l1", "mixed"):
        denom = max(float(np.abs(y_l.real).sum() + np.abs(y_l.imag).sum()), _DENOM_FLOOR)
        terms.append(ndgrad.smul(ndgrad.reduce(vec, "l1norm"), 1.0 / denom))
    loss = terms[0]
    for t in terms[1:]:
        loss = ndgrad.add(loss, t)
    return loss


def supervised_loss(x_out: cx.ComplexTensor, x_ref: np.ndarray,
                    kind: str = "mixed") -> ndgrad.Tensor:
    """Normalized image-domain distance to a reference."""
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"loss kind must be one of {LOSS_KINDS}")
    ref = np.asarray(x_ref, dtype=np.complex128)
    if ref.shape != x_out.shape:
        raise ConfigurationError(
            f"supervised loss: shape mismatch {x_out.shape} vs {ref.shape}"
        )
    r = cx.csub(x_out, cx.ComplexTensor.from_numpy(ref))
    vec = ndgrad.concat([r.re, r.im])
    terms = []
    if kind in ("l2", "mixed"):
        denom = max(float(np.linalg.norm(ref)), _DENOM_FLOOR)
        terms.append(ndgrad.smul(ndgrad.reduce(vec, "l2norm"), 1.0 / denom))
    if kind in ("l1", "mixed"):
        denom = max(float(np.abs(ref.real).sum() + np.abs(ref.imag).sum()), _DENOM_FLOOR)
        terms.append(ndgrad.smul(ndgrad.reduce(vec, "l1norm"), 1.0 / denom))
    loss = terms[0]
    for t in terms[1:]:
        loss = ndgrad.add(loss, t)
    return loss


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def initialize(params: dict, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Standard Adam update with bias correction; mutates params in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalBreakdownError(
                f"non-finite gradient for parameter {name!r}; step aborted"
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            continue
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_KIND = "checkpoint"


def save_checkpoint(path, params: DenoiserParams, adam: AdamState | None,
                    config: TrainConfig, epoch: int, extra: dict | None = None):
    arrays = {}
    for name, t in params.named_parameters().items():
        arrays[f"param.{name}"] = t.data
    if adam is not None:
        for name in adam.m:
            arrays[f"adam_m.{name}"] = adam.m[name]
            arrays[f"adam_v.{name}"] = adam.v[name]
    meta = {
        "config": _config_to_dict(config),
        "epoch": epoch,
        "adam": None if adam is None else {
            "step": adam.step, "beta1": adam.beta1,
            "beta2": adam.beta2, "eps": adam.eps,
        },
        "lambda_values": params.lambda_values().tolist(),
        "extra": extra or {},
    }
    return write_array_container(path, CHECKPOINT_KIND, meta, arrays)


def load_checkpoint(path):
    """Returns (params, adam_state_or_None, meta)."""
    meta, arrays = read_array_container(path, expect_kind=CHECKPOINT_KIND)
    cfg = config_from_dict(meta["config"])
    params = DenoiserParams.initialize(
        seed=cfg.seed, n_lambda=cfg.n_lambda,
        lambda_init=cfg.lambda_init, leaky_slope=cfg.leaky_slope,
    )
    for name, t in params.named_parameters().items():
        t.data = arrays[f"param.{name}"].copy()
    adam = None
    if meta.get("adam"):
        a = meta["adam"]
        adam = AdamState(
            m={k: arrays[f"adam_m.{k}"].copy() for k in params.named_parameters()},
            v={k: arrays[f"adam_v.{k}"].copy() for k in params.named_parameters()},
            step=int(a["step"]), beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
        )
    return params, adam, meta


def _config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["schedule"] = asdict(cfg.schedule)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    sched = d.pop("schedule", {})
    cfg = TrainConfig(schedule=CalibrationSchedule(**sched), **d)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# evaluation helpers


def reconstruct_sample(params: DenoiserParams, sample: Sample, cfg: TrainConfig,
                       keep_trace: bool = False):
    """Evaluation-mode reconstruction from the full acquired set."""
    ucfg = UnrollConfig(K=cfg.unroll_k, mode="eval", schedule=cfg.schedule,
                        cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter,
                        keep_trace=keep_trace)
    op = EncodingOperator(sample.coils, sample.omega.grid)
    x, trace = unrolled_forward(params, ucfg, op, sample.y_omega())
    return x.numpy(), trace


def evaluate_params(params: DenoiserParams, samples: list, cfg: TrainConfig):
    """Mean PSNR/SSIM against ground truth; falls back to a held-out
    self-supervision loss when no ground truth is stored."""
    per_sample = []
    have_gt = all(s.ground_truth is not None for s in samples)
    for s in samples:
        recon, _ = reconstruct_sample(params, s, cfg)
        if have_gt:
            per_sample.append({
                "id": s.id,
                "psnr_db": psnr(recon, s.ground_truth),
                "ssim": ssim(recon, s.ground_truth),
            })
        else:
            split = split_mask(s.omega, cfg.rho, seed=cfg.seed + 104729)
            loss = self_supervised_loss(
                cx.ComplexTensor.from_numpy(recon), s.y_omega(),
                split.lambda_, s.coils, cfg.loss_kind)
            per_sample.append({"id": s.id, "holdout_loss": float(loss.data)})
    if have_gt:
        mean_psnr = float(np.mean([p["psnr_db"] for p in per_sample]))
        mean_ssim = float(np.mean([p["ssim"] for p in per_sample]))
        score = mean_psnr
    else:
        mean_psnr = float("nan")
        mean_ssim = float("nan")
        score = -float(np.mean([p["holdout_loss"] for p in per_sample]))
    return {"psnr": mean_psnr, "ssim": mean_ssim, "score": score,
            "per_sample": per_sample}


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    params: DenoiserParams
    log: list
    best_score: float
    best_epoch: int
    checkpoint_last: Path | None
    checkpoint_best: Path | None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE9, epoch]))


def train(samples: list, cfg: TrainConfig, out_dir=None,
          resume_from=None, log_fn=None) -> TrainResult:
    cfg.validate()
    train_samples = [s for s in samples if s.role == "train"]
    val_samples = [s for s in samples if s.role == "val"]
    if not train_samples:
        raise ConfigurationError("dataset has no training samples")
    if cfg.supervision == "full":
        missing = [s.id for s in train_samples if s.ground_truth is None]
        if missing:
            raise ConfigurationError(
                f"supervised training needs ground truth; missing for {missing[:3]}"
            )

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    if resume_from is not None:
        params, adam, meta = load_checkpoint(resume_from)
        start_epoch = int(meta["epoch"]) + 1
        best_score = float(meta["extra"].get("best_score", -np.inf))
        best_epoch = int(meta["extra"].get("best_epoch", -1))
    else:
        params = DenoiserParams.initialize(
            seed=cfg.seed, n_lambda=cfg.n_lambda,
            lambda_init=cfg.lambda_init, leaky_slope=cfg.leaky_slope)
        adam = AdamState.initialize(params.named_parameters())
        best_score = -np.inf
        best_epoch = -1

    named = params.named_parameters()
    ucfg_train = UnrollConfig(K=cfg.unroll_k, mode="train", schedule=cfg.schedule,
                              cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter)
    log: list[dict] = []
    log_path = out_path / "train_log.ndjson" if out_path is not None else None

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            acc = {name: np.zeros_like(t.data) for name, t in named.items()}
            batch_loss = 0.0
            for idx in batch:
                s = train_samples[idx]
                y_omega = s.y_omega()
                with ndgrad.Tape() as tape:
                    if cfg.supervision == "self":
                        split_seed = int(rng.integers(0, 2**62))
                        split = split_mask(s.omega, cfg.rho, split_seed)
                        op = EncodingOperator(s.coils, split.theta)
                        x, _ = unrolled_forward(params, ucfg_train, op,
                                                s.kspace * split.theta,
                                                batch_rng=rng)
                        loss = self_supervised_loss(x, y_omega, split.lambda_,
                                                    s.coils, cfg.loss_kind)
                    else:
                        op = EncodingOperator(s.coils, s.omega.grid)
                        x, _ = unrolled_forward(params, ucfg_train, op, y_omega,
                                                batch_rng=rng)
                        loss = supervised_loss(x, s.ground_truth, cfg.loss_kind)
                grads = tape.backward(loss)
                for name, t in named.items():
                    g = grads.get(t)
                    if g is not None:
                        acc[name] += g
                batch_loss += float(loss.data)
            nb = len(batch)
            for name in acc:
                acc[name] /= nb
            clip_global_norm(acc, cfg.grad_clip)
            adam_step(named, acc, adam, cfg.lr)
            epoch_loss += batch_loss / nb
            n_batches += 1

        val = evaluate_params(params, val_samples, cfg) if val_samples else None
        record = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_psnr": None if val is None else val["psnr"],
            "val_ssim": None if val is None else val["ssim"],
            "lr": cfg.lr,
            "seconds": round(time.time() - t0, 3),
        }
        log.append(record)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if log_fn is not None:
            log_fn(record)

        score = val["score"] if val is not None else -record["train_loss"]
        if score > best_score:
            best_score = score
            best_epoch = epoch
            if out_path is not None:
                save_checkpoint(out_path / "checkpoint_best", params, adam, cfg,
                                epoch, {"best_score": best_score,
                                        "best_epoch": best_epoch})
        if out_path is not None:
            save_checkpoint(out_path / "checkpoint_last", params, adam, cfg,
                            epoch, {"best_score": best_score,
                                    "best_epoch": best_epoch})

    return TrainResult(
        params=params,
        log=log,
        best_score=float(best_score),
        best_epoch=best_epoch,
        checkpoint_last=None if out_path is None else out_path / "checkpoint_last",
        checkpoint_best=None if out_path is None else out_path / "checkpoint_best",
    )
