"""Siamese ranking optimization of the quality network.

Stage 1 trains on mixed single/cross-source ranked pairs; stage 2
fine-tunes on single-source pairs only. All batch order flows from the
config seed, so identical (data, seed, config) gives identical weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr

from .network import QualityNet, save_checkpoint
from .sampling import PatchPair, RankedPair


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    margin: float = 1.0
    epochs_stage1: int = 6
    epochs_stage2: int = 3
    seed: int = 0
    tau: float = 6.0
    cross_ratio: float = 0.2
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise TrainingError("margin must be positive")
        if not 0.0 <= self.cross_ratio <= 1.0:
            raise TrainingError("cross_ratio must lie in [0, 1]")


@dataclass
class TrainReport:
    stage: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    accuracy: float | None = None
    spearman: float | None = None
    ties: int = 0
    n_pairs: int = 0

    def __post_init__(self):
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise TrainingError("accuracy must lie in [0, 1]")
        if self.spearman is not None and not -1.0 <= self.spearman <= 1.0:
            raise TrainingError("spearman must lie in [-1, 1]")

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "epoch_losses": self.epoch_losses,
            "accuracy": self.accuracy,
            "spearman": self.spearman,
            "ties": self.ties,
            "n_pairs": self.n_pairs,
        }


def ranking_loss(
    s_a: torch.Tensor, s_b: torch.Tensor, rank_label: int | torch.Tensor, margin: float = 1.0
) -> torch.Tensor:
    """Hinge ranking loss max(0, m - label*(s_a - s_b)); label is +1/-1."""
    if margin <= 0:
        raise TrainingError("margin must be positive")
    label = torch.as_tensor(rank_label, dtype=s_a.dtype, device=s_a.device)
    if not torch.all(torch.abs(label) == 1):
        raise TrainingError("rank_label entries must be +1 or -1")
    return torch.clamp(margin - label * (s_a - s_b), min=0.0)


def pair_keys(ranked: list[RankedPair]) -> set[str]:
    keys = set()
    for rp in ranked:
        keys.add(rp.pair_a.key())
        keys.add(rp.pair_b.key())
    return keys


class _TensorCache:
    """Patch tensors are reused across many ranked pairs; convert once."""

    def __init__(self, net: QualityNet):
        self.net = net
        self.cache: dict[int, torch.Tensor] = {}

    def get(self, pp: PatchPair) -> tuple[torch.Tensor, torch.Tensor]:
        out = []
        for patch in (pp.ref_patch, pp.dist_patch):
            k = id(patch)
            if k not in self.cache:
                self.cache[k] = self.net.patch_tensor(patch)
            out.append(self.cache[k])
        return out[0], out[1]


def _batch_scores(
    net: QualityNet, cache: _TensorCache, batch: list[RankedPair]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    a_ref, a_dist, b_ref, b_dist = [], [], [], []
    for rp in batch:
        r, d = cache.get(rp.pair_a)
        a_ref.append(r)
        a_dist.append(d)
        r, d = cache.get(rp.pair_b)
        b_ref.append(r)
        b_dist.append(d)
    s_a = net(torch.stack(a_ref), torch.stack(a_dist))
    s_b = net(torch.stack(b_ref), torch.stack(b_dist))
    labels = torch.tensor([rp.rank_label for rp in batch], dtype=s_a.dtype)
    return s_a, s_b, labels


def train_stage(
    model: QualityNet,
    pairs: list[RankedPair],
    cfg: TrainConfig,
    stage: int,
    progress: bool = True,
) -> tuple[QualityNet, TrainReport]:
    """Mini-batch Adam on the hinge ranking objective.

    Aborts with DivergenceError when an epoch's mean loss exceeds 10x the
    first epoch's. Writes a checkpoint per epoch when checkpoint_dir is set.
    """
    if stage not in (1, 2):
        raise TrainingError(f"stage must be 1 or 2, got {stage}")
    if not pairs:
        raise TrainingError("no ranked pairs to train on")
    if stage == 2 and any(rp.cross_source for rp in pairs):
        raise TrainingError("stage 2 requires single-source pairs only")

    epochs = cfg.epochs_stage1 if stage == 1 else cfg.epochs_stage2
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    order_rng = np.random.default_rng(cfg.seed * 7919 + stage)
    cache = _TensorCache(model)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    report = TrainReport(stage=stage, n_pairs=len(pairs))
    initial = None
    model.train()
    for epoch in range(epochs):
        order = order_rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            s_a, s_b, labels = _batch_scores(model, cache, batch)
            loss = ranking_loss(s_a, s_b, labels, cfg.margin).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses))
        report.epoch_losses.append(mean_loss)
        if initial is None:
            initial = mean_loss
        elif initial > 0 and mean_loss > DIVERGENCE_FACTOR * initial:
            raise DivergenceError(
                f"stage {stage} epoch {epoch}: mean loss {mean_loss:.4g} exceeds "
                f"{DIVERGENCE_FACTOR}x initial {initial:.4g}"
            )
        if ckpt_dir:
            save_checkpoint(model, ckpt_dir / f"stage{stage}_epoch{epoch:03d}.ckpt")
        if progress:
            print(json.dumps({"stage": stage, "epoch": epoch, "mean_loss": mean_loss}))
    model.eval()
    return model, report


def evaluate_ranking(
    model: QualityNet,
    held_out: list[RankedPair],
    train_keys: set[str] | None = None,
) -> TrainReport:
    """Pairwise accuracy (strict sign; ties count as wrong and are reported)
    plus Spearman correlation of per-patch scores against proxy labels."""
    if not held_out:
        raise TrainingError("held-out set is empty")
    if train_keys is not None:
        overlap = pair_keys(held_out) & train_keys
        if overlap:
            raise TrainingError(
                f"held-out pairs overlap the training set ({len(overlap)} shared origins)"
            )

    cache = _TensorCache(model)
    model.eval()
    correct = ties = 0
    uniq: dict[str, tuple[PatchPair, float]] = {}
    with torch.no_grad():
        for rp in held_out:
            sa = float(_score_one(model, cache, rp.pair_a))
            sb = float(_score_one(model, cache, rp.pair_b))
            if sa == sb:
                ties += 1
            elif (1 if sa > sb else -1) == rp.rank_label:
                correct += 1
            for pp, s in ((rp.pair_a, sa), (rp.pair_b, sb)):
                uniq.setdefault(pp.key(), (pp, s))

    scores = [s for _, s in uniq.values()]
    labels = [pp.q for pp, _ in uniq.values()]
    rho = float(spearmanr(scores, labels).statistic) if len(uniq) > 2 else None
    if rho is not None and np.isnan(rho):
        rho = None
    return TrainReport(
        stage=0,
        accuracy=correct / len(held_out),
        spearman=rho,
        ties=ties,
        n_pairs=len(held_out),
    )


def _score_one(model: QualityNet, cache: _TensorCache, pp: PatchPair) -> torch.Tensor:
    r, d = cache.get(pp)
    return model(r.unsqueeze(0), d.unsqueeze(0))[0]
