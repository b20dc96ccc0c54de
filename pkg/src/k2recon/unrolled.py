"""The unrolled reconstruction network.

K alternations of a shared residual convolutional denoiser and a conjugate
gradient data-consistency solve, with optional per-iteration Bernoulli
k-space calibration of the denoiser output during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import complexops as cx
from . import ndgrad
from .errors import ConfigurationError, ContractViolation
from .linops import CoilSensitivities, EncodingOperator, to_coil_kspace
from .sampling import CalibrationSchedule, apply_kspace_mask, calib_mask

N_LAYERS = 9
HIDDEN_CHANNELS = 64
KERNEL = 3
IO_CHANNELS = 2  # real and imaginary planes


def _softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class DenoiserParams:
    """Weights of the shared 9-layer denoiser plus the DC weight.

    Layers 1..8 output 64 channels, the final layer maps back to the two
    real/imaginary planes; every kernel is 3x3.  ``raw_lambda`` holds one
    entry for a shared DC weight or one per unrolled step; the positive
    weight itself is softplus(raw_lambda).
    """

    weights: list
    biases: list
    raw_lambda: ndgrad.Tensor
    leaky_slope: float = 0.01

    def __post_init__(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise ContractViolation(
                f"denoiser needs {N_LAYERS} conv layers, got {len(self.weights)}"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out_ch = HIDDEN_CHANNELS if i < N_LAYERS - 1 else IO_CHANNELS
            in_ch = IO_CHANNELS if i == 0 else HIDDEN_CHANNELS
            expect = (out_ch, in_ch, KERNEL, KERNEL)
            if w.data.shape != expect:
                raise ContractViolation(
                    f"layer {i}: weight shape {w.data.shape}, expected {expect}"
                )
            if b.data.shape != (out_ch,):
                raise ContractViolation(
                    f"layer {i}: bias shape {b.data.shape}, expected ({out_ch},)"
                )

    @staticmethod
    def initialize(seed: int = 0, n_lambda: int = 1, lambda_init: float = 0.05,
                   leaky_slope: float = 0.01) -> "DenoiserParams":
        """Kaiming-uniform fan-in weights, zero biases."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD3]))
        weights, biases = [], []
        for i in range(N_LAYERS):
            out_ch = HIDDEN_CHANNELS if i < N_LAYERS - 1 else IO_CHANNELS
            in_ch = IO_CHANNELS if i == 0 else HIDDEN_CHANNELS
            fan_in = in_ch * KERNEL * KERNEL
            bound = np.sqrt(6.0 / ((1.0 + leaky_slope**2) * fan_in))
            weights.append(ndgrad.param(
                rng.uniform(-bound, bound, size=(out_ch, in_ch, KERNEL, KERNEL))))
            biases.append(ndgrad.param(np.zeros(out_ch)))
        raw = ndgrad.param(np.full(n_lambda, _softplus_inverse(lambda_init)))
        return DenoiserParams(weights, biases, raw, leaky_slope)

    def named_parameters(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        out["raw_lambda"] = self.raw_lambda
        return out

    @property
    def n_lambda(self) -> int:
        return self.raw_lambda.data.shape[0]

    def lambda_values(self) -> np.ndarray:
        return np.logaddexp(0.0, self.raw_lambda.data)


@dataclass
class UnrollConfig:
    K: int = 5
    mode: str = "train"
    schedule: CalibrationSchedule = field(default_factory=CalibrationSchedule)
    cg_tol: float = 1e-6
    cg_max_iter: int = 15
    keep_trace: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError(f"unroll depth K must be >= 1, got {self.K}")
        if self.mode not in ("train", "eval"):
            raise ConfigurationError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.schedule.enabled_steps > self.K:
            raise ConfigurationError(
                f"enabled_steps {self.schedule.enabled_steps} exceeds K={self.K}"
            )


@dataclass
class StepRecord:
    step: int
    cg_iterations: int
    cg_residual: float
    lambda_value: float
    calibrated: bool
    calib_mask: np.ndarray | None = None


def denoise(params: DenoiserParams, x: cx.ComplexTensor) -> cx.ComplexTensor:
    """Residual denoiser z = x - N(x); N sees the two real planes."""
    h = x.to_channels()
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ndgrad.conv2d(h, w, b)
        if i < N_LAYERS - 1:
            h = ndgrad.leaky_relu(h, params.leaky_slope)
    return cx.csub(x, cx.ComplexTensor.from_channels(h))


def _lambda_for_step(params: DenoiserParams, k: int) -> ndgrad.Tensor:
    idx = min(k, params.n_lambda - 1)
    return ndgrad.softplus(ndgrad.channel(params.raw_lambda, idx))


def unrolled_forward(params: DenoiserParams, config: UnrollConfig,
                     op: EncodingOperator, y_in: np.ndarray,
                     batch_rng: np.random.Generator | None = None):
    """Run the K-step alternation from the zero-filled adjoint.

    ``y_in`` must already be restricted to the network-input k-space set
    (theta during training, the full acquired set at evaluation) and ``op``
    must carry the matching mask.  Returns the final image estimate and a
    per-step trace; full calibration masks are retained in the trace only
    when the config asks for them.
    """
    y_in = np.asarray(y_in, dtype=np.complex128)
    training = config.mode == "train"
    x = cx.ComplexTensor.from_numpy(op.adjoint(y_in))
    trace: list[StepRecord] = []
    for k in range(config.K):
        z = denoise(params, x)
        calibrated = training and k < config.schedule.enabled_steps
        mask_used = None
        if calibrated:
            grid = calib_mask(op.mask, config.schedule, k, batch_rng=batch_rng,
                              training=True)
            z = apply_kspace_mask(z, grid, op.coils)
            mask_used = grid if config.keep_trace else None
        lam = _lambda_for_step(params, k)
        x, info = cx.dc_layer(op, y_in, z, lam,
                              tol=config.cg_tol, max_iter=config.cg_max_iter)
        trace.append(StepRecord(k, info.iterations, info.residual,
                                float(lam.item()), calibrated, mask_used))
    return x, trace


def noise_energy_report(x_k, reference, theta: np.ndarray,
                        coils: CoilSensitivities):
    """Mean squared coil-k-space error over sampled vs unsampled locations.

    Empirical check that data consistency pins down the acquired set: the
    residual energy on theta should sit far below the energy elsewhere.
    """
    x_arr = x_k.numpy() if isinstance(x_k, cx.ComplexTensor) else np.asarray(x_k)
    ref = (reference.numpy() if isinstance(reference, cx.ComplexTensor)
           else np.asarray(reference))
    err = to_coil_kspace(x_arr - ref, coils)
    on = theta.astype(bool)
    e2 = np.abs(err) ** 2
    e_sampled = float(e2[:, on].mean()) if on.any() else 0.0
    e_unsampled = float(e2[:, ~on].mean()) if (~on).any() else 0.0
    return e_sampled, e_unsampled
