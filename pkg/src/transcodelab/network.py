"""Siamese quality network: per-frame convolutional pyramid, per-level
selective-scan temporal mixing, multi-level fusion, scalar quality head,
and differentiable clip pooling.

Scores are 0-d torch tensors (value + grad flag), higher = better. The
network is shape-agnostic past the config's divisibility constraint, so
one set of weights scores any patch size.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .media import Patch
from .scan import SelectiveScan

CHECKPOINT_SCHEMA = "qualitynet-checkpoint-v1"


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Channel widths per pyramid level plus head/pooling knobs.

    The default full-size settings are tuned so that one scored pair at
    12x256x256 stays within a ~1.5 GMAC / ~0.5M parameter budget.
    """

    channels: tuple[int, ...] = (12, 24, 48, 96)
    state_dim: int = 8
    head_hidden: int = 1280
    input_channels: int = 1
    pooling: str = "mean"

    def __post_init__(self):
        if len(self.channels) < 2:
            raise NetworkError("need at least 2 pyramid levels")
        if self.input_channels not in (1, 3):
            raise NetworkError("input_channels must be 1 or 3")
        if self.pooling not in ("mean", "softmax"):
            raise NetworkError(f"unknown pooling mode {self.pooling!r}")

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    @property
    def fusion_dim(self) -> int:
        return 2 * sum(self.channels)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @staticmethod
    def from_json(obj: dict) -> "NetConfig":
        return NetConfig(
            channels=tuple(obj["channels"]),
            state_dim=obj["state_dim"],
            head_hidden=obj["head_hidden"],
            input_channels=obj["input_channels"],
            pooling=obj["pooling"],
        )


class SpatialEncoder(nn.Module):
    """Per-frame stride-2 conv pyramid; the temporal axis is untouched."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        convs = []
        c_in = config.input_channels
        for c_out in config.channels:
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x: (B, t, C, h, w) -> list of (B, t, c_l, h_l, w_l)."""
        b, t, c, h, w = x.shape
        div = 2 ** self.config.n_levels
        if h % div or w % div:
            raise NetworkError(
                f"spatial dims {h}x{w} not divisible by 2^{self.config.n_levels}"
            )
        y = x.reshape(b * t, c, h, w)
        levels = []
        for conv in self.convs:
            y = F.silu(conv(y))
            _, cl, hl, wl = y.shape
            levels.append(y.reshape(b, t, cl, hl, wl))
        return levels


class TemporalEncoder(nn.Module):
    """Selective scan over the frame axis at every spatial position."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            [SelectiveScan(c, config.state_dim) for c in config.channels]
        )

    def forward(self, levels: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(levels) != len(self.blocks):
            raise NetworkError(
                f"pyramid has {len(levels)} levels but {len(self.blocks)} scan blocks"
            )
        out = []
        for x, block in zip(levels, self.blocks):
            b, t, c, h, w = x.shape
            seq = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, t, c)
            y = block(seq)
            out.append(y.reshape(b, h, w, t, c).permute(0, 3, 4, 1, 2))
        return out


class QualityNet(nn.Module):
    """Shared-weight encoder for both patches, |difference|+distorted fusion,
    2-layer MLP head emitting one scalar per pair."""

    def __init__(self, config: NetConfig | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config or NetConfig()
        self.spatial = SpatialEncoder(self.config)
        self.temporal = TemporalEncoder(self.config)
        self.head = nn.Sequential(
            nn.Linear(self.config.fusion_dim, self.config.head_hidden),
            nn.SiLU(),
            nn.Linear(self.config.head_hidden, 1),
        )
        self.to(dtype)
        self._dtype = dtype

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Pooled per-level feature vectors, (B, c_l) each."""
        levels = self.temporal(self.spatial(x))
        return [lv.mean(dim=(1, 3, 4)) for lv in levels]

    def forward(self, ref: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
        """ref/dist: (B, t, C, h, w) in [0, 1] -> (B,) scores."""
        if ref.shape != dist.shape:
            raise NetworkError(f"patch shape mismatch: {ref.shape} vs {dist.shape}")
        f_ref = self.encode(ref)
        f_dist = self.encode(dist)
        fused = torch.cat(
            [torch.cat([(r - d).abs(), d], dim=1) for r, d in zip(f_ref, f_dist)],
            dim=1,
        )
        return self.head(fused).squeeze(-1)

    def score_pair(self, ref: Patch | torch.Tensor, dist: Patch | torch.Tensor) -> torch.Tensor:
        """Score one co-located pair; returns a 0-d tensor, higher = better."""
        r = self.patch_tensor(ref) if isinstance(ref, Patch) else ref
        d = self.patch_tensor(dist) if isinstance(dist, Patch) else dist
        if r.ndim == 4:
            r, d = r.unsqueeze(0), d.unsqueeze(0)
        return self.forward(r, d)[0]

    def patch_tensor(self, patch: Patch) -> torch.Tensor:
        """Patch -> (t, C, h, w) tensor in [0, 1] with the net's dtype."""
        arr = patch.normalized()
        if arr.shape[-1] != self.config.input_channels:
            raise NetworkError(
                f"patch has {arr.shape[-1]} channels, net expects {self.config.input_channels}"
            )
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self._dtype)


def pool_clip(patch_scores: list[torch.Tensor] | torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """Aggregate patch scores into one clip score, differentiably."""
    if isinstance(patch_scores, (list, tuple)):
        if len(patch_scores) == 0:
            raise NetworkError("cannot pool an empty score list")
        scores = torch.stack(list(patch_scores))
    else:
        scores = patch_scores
        if scores.numel() == 0:
            raise NetworkError("cannot pool an empty score list")
    if mode == "mean":
        return scores.mean()
    if mode == "softmax":
        return (torch.softmax(scores, dim=0) * scores).sum()
    raise NetworkError(f"unknown pooling mode {mode!r}")


def save_tensor_archive(
    tensors: dict[str, np.ndarray], config: dict, schema: str, path: str | Path
) -> Path:
    """Single-archive format shared by all weight files: a JSON config block
    plus one .npy entry per named tensor, schema-tagged.

    Zip timestamps are pinned so identical weights give identical bytes.
    """
    path = Path(path)
    meta = {"schema": schema, "config": config, "tensors": sorted(tensors.keys())}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("config.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, indent=1, sort_keys=True))
        for name in meta["tensors"]:
            buf = io.BytesIO()
            np.save(buf, tensors[name])
            info = zipfile.ZipInfo(f"tensors/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    return path


def load_tensor_archive(path: str | Path, schema: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise NetworkError(f"missing checkpoint: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("config.json"))
        if meta.get("schema") != schema:
            raise NetworkError(
                f"checkpoint schema {meta.get('schema')!r} does not match {schema!r}"
            )
        tensors = {
            name: np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")))
            for name in meta["tensors"]
        }
    return meta["config"], tensors


def save_checkpoint(net: QualityNet, path: str | Path) -> Path:
    state = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    return save_tensor_archive(state, net.config.to_json(), CHECKPOINT_SCHEMA, path)


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> QualityNet:
    config, tensors = load_tensor_archive(path, CHECKPOINT_SCHEMA)
    net = QualityNet(NetConfig.from_json(config), dtype=dtype)
    net.load_state_dict({k: torch.from_numpy(v).to(dtype) for k, v in tensors.items()})
    return net


# --- complexity accounting -------------------------------------------------
# MAC conventions: a kxk conv costs k*k*C_in*C_out per output pixel; a linear
# layer costs in*out; one scan step per position costs E*E (step projection)
# + 2*N*E (B/C projections) + 4*N*E (state update and readout) + E (skip).


def conv_macs(k: int, c_in: int, c_out: int, h_out: int, w_out: int, t: int = 1) -> int:
    return k * k * c_in * c_out * h_out * w_out * t


def conv_params(k: int, c_in: int, c_out: int) -> int:
    return k * k * c_in * c_out + c_out


def scan_macs_per_step(e: int, n: int) -> int:
    return e * e + 6 * n * e + e


def scan_params(e: int, n: int) -> int:
    # A_log, D_skip, W_B, W_C, W_delta, delta_bias
    return e * n + e + 2 * n * e + e * e + e


def count_complexity(
    config: NetConfig, patch_shape: tuple[int, int, int] = (12, 256, 256)
) -> tuple[int, int]:
    """Exact (MACs, params) for one scored pair at the given (t, h, w).

    MACs count both Siamese encoder passes plus the head; parameters are
    counted once (the encoder weights are shared).
    """
    t, h, w = patch_shape
    div = 2 ** config.n_levels
    if h % div or w % div:
        raise NetworkError(f"patch {h}x{w} not divisible by 2^{config.n_levels}")

    enc_macs = 0
    params = 0
    c_in = config.input_channels
    hl, wl = h, w
    for c_out in config.channels:
        hl, wl = hl // 2, wl // 2
        enc_macs += conv_macs(3, c_in, c_out, hl, wl, t)
        params += conv_params(3, c_in, c_out)
        enc_macs += t * hl * wl * scan_macs_per_step(c_out, config.state_dim)
        params += scan_params(c_out, config.state_dim)
        c_in = c_out

    head_macs = config.fusion_dim * config.head_hidden + config.head_hidden
    params += config.fusion_dim * config.head_hidden + config.head_hidden
    params += config.head_hidden + 1

    return 2 * enc_macs + head_macs, params
