"""Co-located patch-pair extraction, proxy quality labels, ranked pairs.

Labels are always computed between the pristine source patch and the
distorted patch; the reference patch travels along as context only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .degrade import TranscodeRecord, load_record_clip
from .media import Patch, VideoClip, crop_patch
from .metrics import psnr_patch, vmaf_external

DEFAULT_TAU = 6.0
PSNR_LOW_DB, PSNR_HIGH_DB = 20.0, 50.0


class SamplingError(RuntimeError):
    pass


@dataclass
class PatchPair:
    """Reference/distorted patch pair with a source-anchored proxy label."""

    ref_patch: Patch
    dist_patch: Patch
    src_patch: Patch | None
    source_id: str
    q: float | None = None

    def key(self) -> str:
        """Stable identity hash over lineage and origin (for split checks)."""
        cid_r, x, y, t0 = self.ref_patch.origin
        cid_d = self.dist_patch.origin[0]
        cid_s = self.src_patch.origin[0] if self.src_patch else ""
        tag = f"{cid_s}|{cid_r}|{cid_d}|{x}|{y}|{t0}|{self.ref_patch.shape}"
        return hashlib.sha256(tag.encode()).hexdigest()[:16]


@dataclass
class RankedPair:
    pair_a: PatchPair
    pair_b: PatchPair
    rank_label: int  # +1 when pair_a is the higher-quality side
    cross_source: bool

    def __post_init__(self):
        if self.rank_label not in (+1, -1):
            raise SamplingError(f"rank_label must be +1 or -1, got {self.rank_label}")


def extract_pairs_from_clips(
    src: VideoClip,
    ref: VideoClip,
    dist: VideoClip,
    n: int,
    shape: tuple[int, int, int],
    seed: int,
) -> list[PatchPair]:
    """Draw n co-located (S, R, D) patch triples at seeded random origins."""
    if not (src.shape == ref.shape == dist.shape):
        raise SamplingError(
            f"chain clips disagree in dims: {src.shape} / {ref.shape} / {dist.shape}"
        )
    pt, ph, pw = shape
    T, H, W, _ = src.shape
    if pt > T or ph > H or pw > W:
        raise SamplingError(f"clip {src.shape} smaller than patch shape {shape}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        x = int(rng.integers(0, W - pw + 1))
        y = int(rng.integers(0, H - ph + 1))
        t0 = int(rng.integers(0, T - pt + 1))
        pairs.append(
            PatchPair(
                ref_patch=crop_patch(ref, x, y, t0, shape),
                dist_patch=crop_patch(dist, x, y, t0, shape),
                src_patch=crop_patch(src, x, y, t0, shape),
                source_id=src.clip_id,
            )
        )
    return pairs


def extract_pairs(
    chain: tuple[TranscodeRecord, TranscodeRecord, TranscodeRecord],
    manifest_dir: str | Path,
    n: int,
    shape: tuple[int, int, int],
    seed: int,
    luma_only: bool = True,
) -> list[PatchPair]:
    """Record-level wrapper: loads the (S, R, D) chain clips then samples."""
    s_rec, r_rec, d_rec = chain
    if (s_rec.role, r_rec.role, d_rec.role) != ("S", "R", "D"):
        raise SamplingError(
            f"chain roles must be (S, R, D), got ({s_rec.role}, {r_rec.role}, {d_rec.role})"
        )
    src = load_record_clip(s_rec, manifest_dir, luma_only=luma_only)
    ref = load_record_clip(r_rec, manifest_dir, luma_only=luma_only)
    dist = load_record_clip(d_rec, manifest_dir, luma_only=luma_only)
    return extract_pairs_from_clips(src, ref, dist, n, shape, seed)


def psnr_to_quality(psnr_db: float) -> float:
    """Affine map of PSNR clamped to [20, 50] dB onto [0, 100]."""
    clamped = min(max(psnr_db, PSNR_LOW_DB), PSNR_HIGH_DB)
    return (clamped - PSNR_LOW_DB) / (PSNR_HIGH_DB - PSNR_LOW_DB) * 100.0


def _patch_clip(patch: Patch) -> VideoClip:
    return VideoClip(frames=patch.samples, clip_id="patch")


def label_with_proxy(pairs: list[PatchPair], metric: str = "psnr") -> list[PatchPair]:
    """Attach q = proxy(src_patch, dist_patch) in [0, 100] to every pair."""
    if metric not in ("psnr", "vmaf"):
        raise SamplingError(f"unknown proxy metric id {metric!r}")
    for pair in pairs:
        if pair.src_patch is None:
            raise SamplingError("labeling requires the source patch")
        if metric == "psnr":
            pair.q = psnr_to_quality(psnr_patch(pair.src_patch, pair.dist_patch))
        else:
            score = vmaf_external(_patch_clip(pair.src_patch), _patch_clip(pair.dist_patch))
            pair.q = min(max(score, 0.0), 100.0)
    return pairs


_MAX_ATTEMPTS_PER_SLOT = 1000


def make_ranked_pairs(
    pairs: list[PatchPair],
    tau: float = DEFAULT_TAU,
    cross_ratio: float = 0.2,
    count: int = 1000,
    seed: int = 0,
) -> list[RankedPair]:
    """Assemble confidently ordered pairs-of-pairs from labeled patches.

    Each slot first decides single- vs cross-source by a Bernoulli draw with
    p = cross_ratio, then rejection-samples candidates of that type until
    |q_a - q_b| >= tau, so the emitted composition concentrates on the
    requested ratio regardless of per-type acceptance rates.
    """
    if not 0.0 <= cross_ratio <= 1.0:
        raise SamplingError(f"cross_ratio {cross_ratio} outside [0, 1]")
    if any(p.q is None for p in pairs):
        raise SamplingError("pairs must be labeled before ranking")

    by_source: dict[str, list[int]] = {}
    for i, p in enumerate(pairs):
        by_source.setdefault(p.source_id, []).append(i)
    sources = sorted(by_source)
    multi = [s for s in sources if len(by_source[s]) >= 2]
    if cross_ratio < 1.0 and not multi:
        raise SamplingError("single-source pairs requested but no source has >= 2 patches")
    if cross_ratio > 0.0 and len(sources) < 2:
        raise SamplingError("cross-source pairs requested but only one source present")

    rng = np.random.default_rng(seed)
    out: list[RankedPair] = []
    for _ in range(count):
        want_cross = bool(rng.random() < cross_ratio)
        for _ in range(_MAX_ATTEMPTS_PER_SLOT):
            if want_cross:
                sa, sb = rng.choice(len(sources), size=2, replace=False)
                ia = by_source[sources[sa]][rng.integers(len(by_source[sources[sa]]))]
                ib = by_source[sources[sb]][rng.integers(len(by_source[sources[sb]]))]
            else:
                s = multi[rng.integers(len(multi))]
                ia, ib = (by_source[s][j] for j in rng.choice(len(by_source[s]), size=2, replace=False))
            qa, qb = pairs[ia].q, pairs[ib].q
            if abs(qa - qb) >= tau:
                out.append(
                    RankedPair(
                        pair_a=pairs[ia],
                        pair_b=pairs[ib],
                        rank_label=+1 if qa > qb else -1,
                        cross_source=want_cross,
                    )
                )
                break
        else:
            raise SamplingError(
                f"insufficient candidates with |dq| >= {tau} after "
                f"{_MAX_ATTEMPTS_PER_SLOT} draws ({len(out)}/{count} assembled)"
            )
    return out


def make_finetune_pairs(
    pairs: list[PatchPair], tau: float = DEFAULT_TAU, count: int = 1000, seed: int = 0
) -> list[RankedPair]:
    """Single-source-only ranked pairs (fine-tuning stage)."""
    return make_ranked_pairs(pairs, tau=tau, cross_ratio=0.0, count=count, seed=seed)


def split_pairs(
    pairs: list[PatchPair], holdout_fraction: float, seed: int
) -> tuple[list[PatchPair], list[PatchPair]]:
    """Disjoint train/holdout split of labeled pairs, seeded."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(pairs))
    n_hold = int(round(len(pairs) * holdout_fraction))
    hold = {int(i) for i in idx[:n_hold]}
    train = [p for i, p in enumerate(pairs) if i not in hold]
    held = [p for i, p in enumerate(pairs) if i in hold]
    return train, held


def save_pairs(pairs: list[PatchPair], path: str | Path) -> Path:
    """Persist labeled pairs as JSON lines of origin records (no pixel blobs)."""
    path = Path(path)
    with open(path, "w") as fh:
        for p in pairs:
            cid_r, x, y, t0 = p.ref_patch.origin
            t, h, w, _ = p.ref_patch.shape
            fh.write(
                json.dumps(
                    {
                        "source_id": p.source_id,
                        "src_clip": p.src_patch.origin[0] if p.src_patch else None,
                        "ref_clip": cid_r,
                        "dist_clip": p.dist_patch.origin[0],
                        "x": x,
                        "y": y,
                        "t0": t0,
                        "t": t,
                        "h": h,
                        "w": w,
                        "q": p.q,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def load_pairs(
    path: str | Path,
    records: list[TranscodeRecord],
    manifest_dir: str | Path,
    luma_only: bool = True,
) -> list[PatchPair]:
    """Rehydrate persisted pairs by re-cropping from the corpus clips."""
    by_id = {r.clip_id: r for r in records}
    cache: dict[str, VideoClip] = {}

    def clip_of(cid: str) -> VideoClip:
        if cid not in cache:
            if cid not in by_id:
                raise SamplingError(f"pair references unknown clip {cid!r}")
            cache[cid] = load_record_clip(by_id[cid], manifest_dir, luma_only=luma_only)
        return cache[cid]

    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        shape = (row["t"], row["h"], row["w"])
        x, y, t0 = row["x"], row["y"], row["t0"]
        src = clip_of(row["src_clip"]) if row.get("src_clip") else None
        pairs.append(
            PatchPair(
                ref_patch=crop_patch(clip_of(row["ref_clip"]), x, y, t0, shape),
                dist_patch=crop_patch(clip_of(row["dist_clip"]), x, y, t0, shape),
                src_patch=crop_patch(src, x, y, t0, shape) if src else None,
                source_id=row["source_id"],
                q=row["q"],
            )
        )
    return pairs
