"""EDM noise schedule, preconditioning, loss and deterministic ODE samplers.

Nothing here depends on a concrete network. A *denoiser* is any callable
``D(x, cond, sigma) -> Tensor`` returning an estimate of the clean target;
:class:`Preconditioned` turns a raw network ``F(input, c_noise)`` into one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
SIGMA_DATA = 0.5
RHO = 7.0


class Denoiser(Protocol):
    def __call__(self, x: torch.Tensor, cond: torch.Tensor, sigma: float) -> torch.Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray  # [N + 1], float64, terminal 0
    sigma_min: float
    sigma_max: float
    rho: float

    @property
    def n_steps(self) -> int:
        return len(self.sigmas) - 1


@dataclass(frozen=True)
class PrecondCoeffs:
    c_skip: float
    c_in: float
    c_out: float
    c_noise: float
    sigma: float
    sigma_data: float


@dataclass(frozen=True)
class SigmaDistribution:
    p_mean: float = -1.2
    p_std: float = 1.2


def karras_schedule(
    n: int,
    sigma_min: float = SIGMA_MIN,
    sigma_max: float = SIGMA_MAX,
    rho: float = RHO,
) -> NoiseSchedule:
    """Power-law interpolation from ``sigma_max`` to ``sigma_min`` plus a final 0."""
    if n < 1:
        raise ValueError(f"need at least one step, got {n}")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if n == 1:
        sigmas = np.array([sigma_max, 0.0])
    else:
        ramp = np.arange(n, dtype=np.float64) / (n - 1)
        lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
        sigmas = (hi + ramp * (lo - hi)) ** rho
        # pin endpoints against pow round-off
        sigmas[0], sigmas[-1] = sigma_max, sigma_min
        sigmas = np.append(sigmas, 0.0)
    return NoiseSchedule(sigmas, sigma_min, sigma_max, rho)


def precond_coeffs(sigma: float, sigma_data: float = SIGMA_DATA) -> PrecondCoeffs:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if sigma_data <= 0:
        raise ValueError(f"sigma_data must be positive, got {sigma_data}")
    total = sigma**2 + sigma_data**2
    return PrecondCoeffs(
        c_skip=sigma_data**2 / total,
        c_in=1 / math.sqrt(total),
        c_out=sigma * sigma_data / math.sqrt(total),
        c_noise=math.log(sigma) / 4,
        sigma=sigma,
        sigma_data=sigma_data,
    )


def _coeff_tensors(sigma: torch.Tensor, sigma_data: float):
    total = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / total
    c_in = total.rsqrt()
    c_out = sigma * sigma_data * total.rsqrt()
    c_noise = sigma.log() / 4
    return c_skip, c_in, c_out, c_noise


def _sigma_tensor(sigma, x: torch.Tensor) -> torch.Tensor:
    """Broadcastable per-item sigma of shape [B, 1, 1, 1] (or scalar-shaped)."""
    s = torch.as_tensor(sigma, dtype=x.dtype, device=x.device)
    if s.ndim == 0:
        s = s.expand(x.shape[0]) if x.ndim == 4 else s
    if s.ndim == 1 and x.ndim == 4:
        s = s.reshape(-1, 1, 1, 1)
    return s


def denoise(
    net: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    cond: torch.Tensor,
    sigma,
    sigma_data: float = SIGMA_DATA,
) -> torch.Tensor:
    """Preconditioned denoiser ``c_skip x + c_out F(concat(c_in x, cond); c_noise)``.

    ``x`` and ``cond`` are ``[B, C, F', T]``; ``sigma`` is a scalar or ``[B]``.
    The conditioning mixture is concatenated unscaled.
    """
    if x.shape[0] != cond.shape[0] or x.shape[2:] != cond.shape[2:]:
        raise ValueError(f"state {tuple(x.shape)} and condition {tuple(cond.shape)} differ")
    s = _sigma_tensor(sigma, x)
    if torch.any(s <= 0):
        raise ValueError("sigma must be positive")
    c_skip, c_in, c_out, c_noise = _coeff_tensors(s, sigma_data)
    out = net(torch.cat([c_in * x, cond], dim=1), c_noise.reshape(-1))
    return c_skip * x + c_out * out.to(x.dtype)


class Preconditioned:
    """Bind a raw network to the EDM preconditioning so it acts as a denoiser."""

    def __init__(self, net, sigma_data: float = SIGMA_DATA):
        self.net = net
        self.sigma_data = sigma_data

    def __call__(self, x, cond, sigma):
        return denoise(self.net, x, cond, sigma, self.sigma_data)


def sample_sigma(
    dist: SigmaDistribution,
    generator: torch.Generator | None = None,
    size: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Log-normal noise levels ``exp(p_mean + p_std * eps)``."""
    eps = torch.randn(() if size is None else (size,), generator=generator, dtype=dtype)
    return (dist.p_mean + dist.p_std * eps).exp()


def loss_weight(sigma, sigma_data: float = SIGMA_DATA):
    """``(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2``, i.e. ``1 / c_out^2``."""
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def training_loss(
    net,
    target: torch.Tensor,
    cond: torch.Tensor,
    sigma,
    generator: torch.Generator | None = None,
    sigma_data: float = SIGMA_DATA,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Weighted denoising score matching loss, averaged over the batch."""
    s = _sigma_tensor(sigma, target)
    if noise is None:
        noise = torch.randn(
            target.shape, generator=generator, dtype=target.dtype, device=target.device
        )
    denoised = denoise(net, target + noise * s, cond, s.reshape(-1), sigma_data)
    err = (denoised - target) ** 2
    per_item = err.reshape(err.shape[0], -1).mean(dim=1)
    return (loss_weight(s.reshape(-1), sigma_data) * per_item).mean()


def _initial_state(cond, schedule, generator, shape):
    if shape is None:
        shape = cond.shape[:1] + (cond.shape[1],) + cond.shape[2:]
    eps = torch.randn(shape, generator=generator, dtype=cond.dtype, device=cond.device)
    return eps * schedule.sigmas[0]


@torch.no_grad()
def euler_sampler(
    denoiser: Denoiser,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    shape: tuple[int, ...] | None = None,
    trajectory: list | None = None,
) -> torch.Tensor:
    """First-order probability-flow ODE integration over ``schedule``.

    Each step is written as ``D + (s_next / s) * (x - D)``, algebraically the
    Euler update, which lands exactly on the denoised estimate at ``s_next = 0``.
    ``trajectory``, when given, collects the state after every step.
    """
    x = _initial_state(cond, schedule, generator, shape)
    sig = schedule.sigmas
    for i in range(schedule.n_steps):
        d_hat = denoiser(x, cond, float(sig[i]))
        x = d_hat + (sig[i + 1] / sig[i]) * (x - d_hat)
        if trajectory is not None:
            trajectory.append(x.clone())
    return x


@torch.no_grad()
def heun_sampler(
    denoiser: Denoiser,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    shape: tuple[int, ...] | None = None,
    trajectory: list | None = None,
) -> torch.Tensor:
    """Second-order (trapezoidal) ODE integration; the step to sigma=0 is Euler."""
    x = _initial_state(cond, schedule, generator, shape)
    sig = schedule.sigmas
    for i in range(schedule.n_steps):
        s, s_next = float(sig[i]), float(sig[i + 1])
        d_hat = denoiser(x, cond, s)
        if s_next == 0.0:
            x = d_hat
        else:
            slope = (x - d_hat) / s
            x_pred = x + (s_next - s) * slope
            slope_next = (x_pred - denoiser(x_pred, cond, s_next)) / s_next
            x = x + (s_next - s) * 0.5 * (slope + slope_next)
        if trajectory is not None:
            trajectory.append(x.clone())
    return x


SAMPLERS = {"euler": euler_sampler, "heun": heun_sampler}
