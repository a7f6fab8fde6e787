"""Selective state-space temporal block: input-dependent step size and
input/output projections, diagonal negative-real state generator.

Discretization: exact exponential for the state transition, Euler for the
input term. The recurrence, for input x_t of width E and N states per
channel:

    delta_t = softplus(W_delta x_t + delta_bias)        (E,)
    Abar_t  = exp(delta_t[:, None] * A)                 (E, N)
    Bbar_t  = delta_t[:, None] * (W_B x_t)[None, :]     (E, N)
    h_t     = Abar_t * h_{t-1} + Bbar_t * x_t[:, None]  (E, N), h_0 = 0
    y_t     = (W_C x_t) . h_t + D_skip * x_t            (E,)

The scan is vectorized over channels, states, and any leading batch
dimensions; only the time axis is sequential.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class ScanError(ValueError):
    pass


class SelectiveScan(nn.Module):
    """One selective-scan block over sequences shaped (..., t, E).

    Negativity of the state generator is kept under training by storing
    log(-A); entries initialize to -1..-N per channel.
    """

    def __init__(self, channel_dim: int, state_dim: int, dt_range=(0.01, 1.0)):
        super().__init__()
        if channel_dim < 1 or state_dim < 1:
            raise ScanError(f"invalid dims E={channel_dim}, N={state_dim}")
        self.channel_dim = channel_dim
        self.state_dim = state_dim

        a_init = torch.arange(1, state_dim + 1, dtype=torch.float32)
        self.A_log = nn.Parameter(torch.log(a_init).repeat(channel_dim, 1))
        self.D_skip = nn.Parameter(torch.ones(channel_dim))
        self.W_B = nn.Parameter(torch.randn(state_dim, channel_dim) / math.sqrt(channel_dim))
        self.W_C = nn.Parameter(torch.randn(state_dim, channel_dim) / math.sqrt(channel_dim))
        self.W_delta = nn.Parameter(torch.zeros(channel_dim, channel_dim))
        # bias chosen so softplus lands log-uniformly inside dt_range
        dt = torch.exp(
            torch.rand(channel_dim)
            * (math.log(dt_range[1]) - math.log(dt_range[0]))
            + math.log(dt_range[0])
        )
        self.delta_bias = nn.Parameter(torch.log(torch.expm1(dt)))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channel_dim:
            raise ScanError(
                f"input channel dim {x.shape[-1]} != block channel dim {self.channel_dim}"
            )
        if x.ndim < 2 or x.shape[-2] < 1:
            raise ScanError("input must be (..., t, E) with t >= 1")

        delta = F.softplus(x @ self.W_delta.T + self.delta_bias)  # (..., t, E)
        B = x @ self.W_B.T  # (..., t, N)
        C = x @ self.W_C.T  # (..., t, N)
        A = self.A  # (E, N)

        abar = torch.exp(delta.unsqueeze(-1) * A)  # (..., t, E, N)
        bbar_x = (delta * x).unsqueeze(-1) * B.unsqueeze(-2)  # (..., t, E, N)

        t = x.shape[-2]
        h = x.new_zeros(x.shape[:-2] + (self.channel_dim, self.state_dim))
        ys = []
        for i in range(t):
            h = abar[..., i, :, :] * h + bbar_x[..., i, :, :]
            y = (h * C[..., i, :].unsqueeze(-2)).sum(-1) + self.D_skip * x[..., i, :]
            ys.append(y)
        return torch.stack(ys, dim=-2)


def selective_scan(x: torch.Tensor, params: SelectiveScan) -> torch.Tensor:
    """Functional entry point; ``x`` is (..., t, E)."""
    return params(x)
