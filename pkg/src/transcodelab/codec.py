"""Toy overfitting video codec plus the perceptual loss-mixing contract.

The codec represents a clip as a positional-encoded coordinate MLP,
overfits it by gradient descent against the (possibly degraded) reference,
quantizes the weights, and accounts rate as quantized parameter bits per
pixel. The mixer blends a fidelity term with a negated quality-net score,
aligning magnitudes over the first few iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .bdrate import RDCurve, RDPoint
from .media import VideoClip, round_half_away
from .metrics import compute_metric
from .network import (
    QualityNet,
    load_tensor_archive,
    pool_clip,
    save_tensor_archive,
)

INR_SCHEMA = "toy-inr-weights-v1"
DEFAULT_ALIGNMENT_WINDOW = 5


class CodecError(RuntimeError):
    pass


class DegeneratePTError(CodecError):
    pass


@dataclass
class LossMixer:
    """Blend total = (1-alpha)*base + alpha*s*pt with s fixed from the ratio
    of mean magnitudes over the first ``alignment_window`` iterations."""

    alpha: float = 0.2
    base_kind: str = "mse"
    alignment_window: int = DEFAULT_ALIGNMENT_WINDOW
    scale: float | None = None
    _base_sum: float = 0.0
    _pt_sum: float = 0.0
    _seen: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise CodecError(f"alpha {self.alpha} outside [0, 1]")
        if self.base_kind not in ("mse", "l1"):
            raise CodecError(f"base_kind must be 'mse' or 'l1', got {self.base_kind!r}")
        if self.alignment_window < 1:
            raise CodecError("alignment_window must be >= 1")

    def fresh(self) -> "LossMixer":
        """Unfrozen copy with the same alpha/base settings (one per encode)."""
        return LossMixer(
            alpha=self.alpha, base_kind=self.base_kind, alignment_window=self.alignment_window
        )

    @property
    def frozen(self) -> bool:
        return self.scale is not None


def mix_loss(mixer: LossMixer, base_value, pt_value, iteration: int):
    """One mixing step. During the alignment window the scale is the running
    mean ratio; once the window completes the scale is frozen permanently.

    ``base_value``/``pt_value`` may be floats or grad-enabled tensors; the
    alignment statistics use detached magnitudes so the scale is a constant.
    """
    base_f = float(base_value.detach() if torch.is_tensor(base_value) else base_value)
    pt_f = float(pt_value.detach() if torch.is_tensor(pt_value) else pt_value)
    if not (np.isfinite(base_f) and np.isfinite(pt_f)):
        raise CodecError(f"non-finite loss terms: base={base_f}, pt={pt_f}")

    if not mixer.frozen:
        if iteration != mixer._seen:
            raise CodecError(
                f"alignment iterations must arrive in order: expected {mixer._seen}, got {iteration}"
            )
        mixer._base_sum += base_f
        mixer._pt_sum += pt_f
        mixer._seen += 1
        if mixer._pt_sum == 0.0 and mixer.alpha > 0.0:
            raise DegeneratePTError(
                f"PT mean is zero after {mixer._seen} iterations; the quality "
                "term provides no signal"
            )
        s = 0.0 if mixer._pt_sum == 0.0 else mixer._base_sum / mixer._pt_sum
        if mixer._seen == mixer.alignment_window:
            mixer.scale = s
    else:
        if iteration < mixer.alignment_window:
            raise CodecError(
                f"iteration {iteration} arrived after the alignment window closed"
            )
        s = mixer.scale

    return (1.0 - mixer.alpha) * base_value + mixer.alpha * s * pt_value


@dataclass(frozen=True)
class CodecConfig:
    """One rate point of the toy INR codec: MLP size plus weight bit depth."""

    width: int = 24
    depth: int = 3
    pe_bands: int = 4
    weight_bits: int = 8
    codec_id: str = "toy-inr"

    def __post_init__(self):
        if self.width < 1 or self.depth < 2:
            raise CodecError("width >= 1 and depth >= 2 required")
        if not 1 <= self.weight_bits <= 16:
            raise CodecError("weight_bits must lie in [1, 16]")

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.pe_bands

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "depth": self.depth,
            "pe_bands": self.pe_bands,
            "weight_bits": self.weight_bits,
            "codec_id": self.codec_id,
        }

    @staticmethod
    def from_json(obj: dict) -> "CodecConfig":
        return CodecConfig(**obj)


class CoordinateMLP(nn.Module):
    """(x, y, t) -> pixel regressor with sinusoidal positional encoding and a
    linear output head (all-zero weights decode to an all-zero clip)."""

    def __init__(self, cfg: CodecConfig, out_channels: int):
        super().__init__()
        layers: list[nn.Module] = [nn.Linear(cfg.input_dim, cfg.width), nn.SiLU()]
        for _ in range(cfg.depth - 2):
            layers += [nn.Linear(cfg.width, cfg.width), nn.SiLU()]
        layers.append(nn.Linear(cfg.width, out_channels))
        self.net = nn.Sequential(*layers)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return self.net(coords)


def param_count(cfg: CodecConfig, out_channels: int) -> int:
    n = (cfg.input_dim + 1) * cfg.width
    n += (cfg.depth - 2) * (cfg.width + 1) * cfg.width
    n += (cfg.width + 1) * out_channels
    return n


def bits_per_pixel(cfg: CodecConfig, out_channels: int, dims: tuple[int, int, int]) -> float:
    t, h, w = dims
    return param_count(cfg, out_channels) * cfg.weight_bits / (t * h * w)


def _coordinate_grid(dims: tuple[int, int, int], pe_bands: int, dtype: torch.dtype) -> torch.Tensor:
    t, h, w = dims

    def axis(n):
        if n == 1:
            return torch.zeros(1, dtype=dtype)
        return torch.linspace(-1.0, 1.0, n, dtype=dtype)

    tt, yy, xx = torch.meshgrid(axis(t), axis(h), axis(w), indexing="ij")
    coords = torch.stack([xx, yy, tt], dim=-1).reshape(-1, 3)
    feats = [coords]
    for k in range(pe_bands):
        freq = (2.0**k) * torch.pi
        feats.append(torch.sin(freq * coords))
        feats.append(torch.cos(freq * coords))
    return torch.cat(feats, dim=-1)


def _quantize_state(state: dict[str, torch.Tensor], bits: int) -> dict[str, np.ndarray]:
    qmax = 2 ** (bits - 1) - 1
    out = {}
    for name, w in state.items():
        arr = w.detach().cpu().numpy().astype(np.float64)
        peak = np.abs(arr).max()
        if peak == 0.0:
            out[name] = np.zeros_like(arr, dtype=np.float32)
            continue
        scale = peak / qmax
        q = np.clip(round_half_away(arr / scale), -qmax, qmax)
        out[name] = (q * scale).astype(np.float32)
    return out


def decode(
    weights: dict[str, np.ndarray],
    cfg: CodecConfig,
    dims: tuple[int, int, int],
    out_channels: int = 1,
    frame_rate: float = 30.0,
    clip_id: str = "decoded",
    dtype: torch.dtype = torch.float32,
) -> VideoClip:
    """Deterministic grid evaluation of the weights; clamp to [0,1], 8-bit."""
    model = CoordinateMLP(cfg, out_channels).to(dtype)
    try:
        model.load_state_dict({k: torch.from_numpy(v).to(dtype) for k, v in weights.items()})
    except RuntimeError as exc:
        raise CodecError(f"weights do not match codec config: {exc}") from exc
    t, h, w = dims
    with torch.no_grad():
        coords = _coordinate_grid(dims, cfg.pe_bands, dtype)
        out = model(coords).reshape(t, h, w, out_channels)
        out = torch.clamp(out, 0.0, 1.0).cpu().numpy().astype(np.float64)
    frames = np.clip(round_half_away(out * 255.0), 0, 255).astype(np.uint8)
    return VideoClip(frames=frames, frame_rate=frame_rate, clip_id=clip_id)


class EncodeResult(NamedTuple):
    weights: dict[str, np.ndarray]
    bpp: float
    decoded: VideoClip


def overfit_encode(
    reference: VideoClip,
    cfg: CodecConfig,
    mixer: LossMixer,
    steps: int,
    seed: int,
    quality_net: QualityNet | None = None,
    pt_windows: int = 2,
    pt_window_shape: tuple[int, int, int] | None = None,
    learning_rate: float = 2e-3,
) -> EncodeResult:
    """Overfit the coordinate MLP to the reference under the mixed loss.

    The perceptual term scores a fixed seeded set of co-located windows of
    (reference, decoded) through the frozen quality net and negates the
    pooled score; it is only evaluated when alpha > 0.
    """
    if mixer._seen > 0 or mixer.frozen:
        raise CodecError("mixer already used; pass a fresh one per encode")
    t, h, w, c = reference.shape
    use_pt = mixer.alpha > 0.0
    if use_pt and quality_net is None:
        raise CodecError("alpha > 0 requires a quality net")

    torch.manual_seed(seed)
    model = CoordinateMLP(cfg, c)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    coords = _coordinate_grid((t, h, w), cfg.pe_bands, torch.float32)
    target = torch.from_numpy(reference.normalized()).to(torch.float32)

    windows: list[tuple[int, int, int]] = []
    win_shape = pt_window_shape
    if use_pt:
        quality_net.eval()
        for p in quality_net.parameters():
            p.requires_grad_(False)
        if win_shape is None:
            div = 2 ** quality_net.config.n_levels
            win_shape = (min(t, 4), min(h // div * div, 32), min(w // div * div, 32))
        wt, wh, ww = win_shape
        if wt > t or wh > h or ww > w:
            raise CodecError(f"pt window {win_shape} larger than clip {(t, h, w)}")
        wrng = np.random.default_rng(seed)
        for _ in range(pt_windows):
            windows.append(
                (
                    int(wrng.integers(0, t - wt + 1)),
                    int(wrng.integers(0, h - wh + 1)),
                    int(wrng.integers(0, w - ww + 1)),
                )
            )

    initial = None
    final = None
    for step in range(steps):
        decoded = model(coords).reshape(t, h, w, c)
        if mixer.base_kind == "mse":
            base = ((decoded - target) ** 2).mean()
        else:
            base = (decoded - target).abs().mean()

        if use_pt:
            scores = []
            for t0, y0, x0 in windows:
                wt, wh, ww = win_shape
                ref_win = target[t0 : t0 + wt, y0 : y0 + wh, x0 : x0 + ww, :]
                dec_win = decoded[t0 : t0 + wt, y0 : y0 + wh, x0 : x0 + ww, :]
                to_net = lambda v: v.permute(0, 3, 1, 2).unsqueeze(0).to(quality_net._dtype)
                scores.append(quality_net(to_net(ref_win), to_net(dec_win))[0])
            pt = -pool_clip(scores, quality_net.config.pooling)
        else:
            pt = 0.0

        loss = mix_loss(mixer, base, pt, step)
        if not torch.isfinite(loss):
            raise CodecError(f"non-finite loss at step {step}")
        val = float(loss.detach())
        initial = val if initial is None else initial
        final = val
        opt.zero_grad()
        loss.backward()
        opt.step()

    if steps > 0 and initial is not None and abs(final) > 10.0 * abs(initial) + 1e-12:
        raise CodecError(
            f"diverged: final loss {final:.4g} exceeds 10x initial {initial:.4g}"
        )

    weights = _quantize_state(model.state_dict(), cfg.weight_bits)
    bpp = bits_per_pixel(cfg, c, (t, h, w))
    decoded_clip = decode(
        weights,
        cfg,
        (t, h, w),
        out_channels=c,
        frame_rate=reference.frame_rate,
        clip_id=f"{reference.clip_id}_inr_w{cfg.width}d{cfg.depth}",
    )
    return EncodeResult(weights=weights, bpp=bpp, decoded=decoded_clip)


def save_inr_weights(result: EncodeResult, cfg: CodecConfig, path) -> None:
    save_tensor_archive(result.weights, cfg.to_json(), INR_SCHEMA, path)


def load_inr_weights(path) -> tuple[CodecConfig, dict[str, np.ndarray]]:
    config, tensors = load_tensor_archive(path, INR_SCHEMA)
    return CodecConfig.from_json(config), tensors


class SweepResult(NamedTuple):
    curve: RDCurve
    curve_vs_ref: RDCurve | None


def rd_sweep(
    reference: VideoClip,
    size_grid: list[CodecConfig],
    mixer: LossMixer,
    seeds: int | list[int],
    quality_net: QualityNet | None = None,
    source: VideoClip | None = None,
    metric: str = "psnr",
    steps: int = 300,
    pt_windows: int = 2,
    pt_window_shape: tuple[int, int, int] | None = None,
    learning_rate: float = 2e-3,
    label: str = "",
) -> SweepResult:
    """One RD point per size config; quality is anchored to the pristine
    source when given, else to the reference. When the source is supplied
    the reference-anchored curve is recorded alongside for comparison."""
    if len(size_grid) < 3:
        raise CodecError(f"need >= 3 size configs, got {len(size_grid)}")
    if isinstance(seeds, int):
        seeds = [seeds + i for i in range(len(size_grid))]
    if len(seeds) != len(size_grid):
        raise CodecError("seeds must match the size grid length")

    anchor = source if source is not None else reference
    points, ref_points = [], []
    for cfg, seed in zip(size_grid, seeds):
        result = overfit_encode(
            reference,
            cfg,
            mixer.fresh(),
            steps=steps,
            seed=seed,
            quality_net=quality_net,
            pt_windows=pt_windows,
            pt_window_shape=pt_window_shape,
            learning_rate=learning_rate,
        )
        points.append(
            RDPoint(
                bpp=result.bpp,
                quality=compute_metric(metric, anchor, result.decoded),
                metric_id=metric,
                codec_id=cfg.codec_id,
                alpha=mixer.alpha,
                seed=seed,
            )
        )
        if source is not None:
            ref_points.append(
                RDPoint(
                    bpp=result.bpp,
                    quality=compute_metric(metric, reference, result.decoded),
                    metric_id=metric,
                    codec_id=cfg.codec_id,
                    alpha=mixer.alpha,
                    seed=seed,
                )
            )

    order = np.argsort([p.bpp for p in points])
    curve = RDCurve(points=[points[i] for i in order], label=label or f"alpha={mixer.alpha}")
    curve_vs_ref = None
    if ref_points:
        curve_vs_ref = RDCurve(
            points=[ref_points[i] for i in order], label=(label or f"alpha={mixer.alpha}") + " (vs ref)"
        )
    return SweepResult(curve=curve, curve_vs_ref=curve_vs_ref)
