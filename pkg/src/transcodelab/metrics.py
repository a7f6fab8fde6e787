"""Full-reference quality metrics anchored to the pristine source."""

from __future__ import annotations

import json
import subprocess
import tempfile
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .degrade import TranscodeRecord, load_record_clip
from .media import Patch, VideoClip, luma_array, save_clip

PSNR_CAP_DB = 99.0
PEAK = 255.0


class EvaluationError(RuntimeError):
    pass


def _check_dims(a, b):
    if a.shape != b.shape:
        raise EvaluationError(f"dimension mismatch: {a.shape} vs {b.shape}")


def psnr_arrays(a: np.ndarray, b: np.ndarray, peak: float = PEAK) -> float:
    """PSNR over raw sample arrays, capped at 99 dB for zero MSE."""
    _check_dims(a, b)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def psnr(a: VideoClip, b: VideoClip, luma: bool = False) -> float:
    """PSNR in dB over all 8-bit samples; ``luma=True`` collapses color first."""
    if luma:
        from .media import to_luma

        a, b = to_luma(a), to_luma(b)
    return psnr_arrays(a.frames, b.frames)


def psnr_patch(a: Patch, b: Patch) -> float:
    return psnr_arrays(a.samples, b.samples)


SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW = 8


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    # uniform 8x8 windows, interior (valid) region only
    mu_x = uniform_filter(x, SSIM_WINDOW)
    mu_y = uniform_filter(y, SSIM_WINDOW)
    xx = uniform_filter(x * x, SSIM_WINDOW)
    yy = uniform_filter(y * y, SSIM_WINDOW)
    xy = uniform_filter(x * y, SSIM_WINDOW)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    half = SSIM_WINDOW // 2
    h, w = ssim_map.shape
    if h > 2 * half and w > 2 * half:
        ssim_map = ssim_map[half : h - half, half : w - half]
    return float(np.mean(ssim_map))


def ssim_proxy(a: VideoClip, b: VideoClip) -> float:
    """Mean windowed structural similarity on luma, in [0, 1]."""
    _check_dims(a.frames, b.frames)
    la = luma_array(a) * PEAK
    lb = luma_array(b) * PEAK
    return float(np.mean([_ssim_plane(la[t], lb[t]) for t in range(la.shape[0])]))


METRIC_IDS = ("psnr", "ssim")


def compute_metric(metric_id: str, ref: VideoClip, dist: VideoClip) -> float:
    if metric_id == "psnr":
        return psnr(ref, dist)
    if metric_id == "ssim":
        return ssim_proxy(ref, dist)
    raise EvaluationError(f"unknown metric id {metric_id!r}")


def quality_vs_source(
    record: TranscodeRecord,
    records: list[TranscodeRecord],
    manifest_dir: str | Path,
    metrics: tuple[str, ...] = ("psnr",),
    include_reference: bool = False,
) -> dict[str, float]:
    """Metrics between a distorted clip and its pristine S ancestor (never R).

    With ``include_reference`` the same metrics anchored to the immediate R
    parent are added under ``<metric>_vs_ref`` keys, for comparison.
    """
    by_id = {r.clip_id: r for r in records}
    node = record
    seen = set()
    while node.role != "S":
        if node.parent_id is None or node.parent_id not in by_id or node.clip_id in seen:
            raise EvaluationError(f"broken lineage for {record.clip_id}")
        seen.add(node.clip_id)
        node = by_id[node.parent_id]
    source = load_record_clip(node, manifest_dir)
    dist = load_record_clip(record, manifest_dir)

    out = {m: compute_metric(m, source, dist) for m in metrics}
    if include_reference and record.parent_id:
        parent = load_record_clip(by_id[record.parent_id], manifest_dir)
        for m in metrics:
            out[f"{m}_vs_ref"] = compute_metric(m, parent, dist)
    return out


def vmaf_external(
    ref: VideoClip,
    dist: VideoClip,
    command_template: str = "vmaf --reference {ref} --distorted {dist} --json --output {out}",
) -> float:
    """Adapter for an external VMAF tool; reads its JSON score output.

    Expects the pooled score under ``pooled_metrics.vmaf.mean`` (libvmaf
    layout) or a top-level ``vmaf`` key.
    """
    with tempfile.TemporaryDirectory(prefix="vmaf_") as tmp:
        tmp = Path(tmp)
        ref_p, dist_p, out_p = tmp / "ref.y4m", tmp / "dist.y4m", tmp / "scores.json"
        save_clip(ref, ref_p, "y4m")
        save_clip(dist, dist_p, "y4m")
        cmd = command_template.format(ref=ref_p, dist=dist_p, out=out_p)
        proc = subprocess.run(cmd.split(), capture_output=True, text=True)
        if proc.returncode != 0:
            raise EvaluationError(f"vmaf tool failed: {proc.stderr.strip()[:500]}")
        payload = json.loads(out_p.read_text())
    if "pooled_metrics" in payload:
        return float(payload["pooled_metrics"]["vmaf"]["mean"])
    if "vmaf" in payload:
        return float(payload["vmaf"])
    raise EvaluationError("vmaf output missing a recognizable score field")
