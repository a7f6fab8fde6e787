"""Two-stage degradation corpus: on-device compression of pristine sources
into references, then transcoding of references into distorted clips.

The default degrader is a hermetic blockwise-DCT codec so corpora are
reproducible without external binaries; an external encoder adapter covers
real codecs when available.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from .media import MediaError, VideoClip, load_clip, round_half_away, save_clip


class CorpusError(RuntimeError):
    pass


BLOCK = 8
QP_MIN, QP_MAX = 0, 63


@dataclass(frozen=True)
class DegraderSpec:
    """One degradation step: hermetic synthetic codec or external encoder."""

    kind: str = "synthetic-dct"
    qp: int = 32
    encoder_name: str | None = None
    extra_args: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("synthetic-dct", "external-encoder"):
            raise CorpusError(f"unknown degrader kind {self.kind!r}")
        if not (QP_MIN <= self.qp <= QP_MAX):
            raise CorpusError(f"qp {self.qp} outside [{QP_MIN}, {QP_MAX}]")
        if self.kind == "external-encoder" and not self.encoder_name:
            raise CorpusError("external-encoder spec requires encoder_name")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "qp": self.qp,
            "encoder_name": self.encoder_name,
            "extra_args": list(self.extra_args),
        }

    @staticmethod
    def from_json(obj: dict) -> "DegraderSpec":
        return DegraderSpec(
            kind=obj["kind"],
            qp=obj["qp"],
            encoder_name=obj.get("encoder_name"),
            extra_args=tuple(obj.get("extra_args") or ()),
        )


@dataclass
class TranscodeRecord:
    """One manifest row: a clip, its role in the S->R->D chain, and lineage."""

    clip_id: str
    role: str  # S, R, or D
    source_id: str
    parent_id: str | None
    stage: int
    spec: DegraderSpec | None
    path: str

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "role": self.role,
            "source_id": self.source_id,
            "parent_id": self.parent_id,
            "stage": self.stage,
            "spec": self.spec.to_json() if self.spec else None,
            "path": self.path,
        }

    @staticmethod
    def from_json(obj: dict) -> "TranscodeRecord":
        return TranscodeRecord(
            clip_id=obj["clip_id"],
            role=obj["role"],
            source_id=obj["source_id"],
            parent_id=obj.get("parent_id"),
            stage=obj["stage"],
            spec=DegraderSpec.from_json(obj["spec"]) if obj.get("spec") else None,
            path=obj["path"],
        )


def qp_to_step(qp: int) -> float:
    """Quantizer step doubling every 6 QP, unity at qp=4."""
    return float(2.0 ** ((qp - 4) / 6.0))


def _pad_to_blocks(plane: np.ndarray) -> tuple[np.ndarray, int, int]:
    h, w = plane.shape
    ph = (-h) % BLOCK
    pw = (-w) % BLOCK
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane, h, w


def synthetic_dct_degrade(clip: VideoClip, qp: int) -> VideoClip:
    """Blockwise 8x8 DCT, uniform quantization at step 2^((qp-4)/6), inverse.

    Deterministic (round-half-away-from-zero); output dims equal input dims
    (edge blocks are replication-padded and the padding discarded).
    """
    if not (QP_MIN <= qp <= QP_MAX):
        raise CorpusError(f"qp {qp} outside [{QP_MIN}, {QP_MAX}]")
    step = qp_to_step(qp)
    t, h, w, c = clip.shape
    out = np.empty_like(clip.frames)
    for ti in range(t):
        for ci in range(c):
            plane, oh, ow = _pad_to_blocks(clip.frames[ti, :, :, ci].astype(np.float64))
            hb, wb = plane.shape[0] // BLOCK, plane.shape[1] // BLOCK
            blocks = plane.reshape(hb, BLOCK, wb, BLOCK).transpose(0, 2, 1, 3)
            coeffs = dctn(blocks, axes=(2, 3), norm="ortho")
            coeffs = round_half_away(coeffs / step) * step
            rec = idctn(coeffs, axes=(2, 3), norm="ortho")
            rec = rec.transpose(0, 2, 1, 3).reshape(hb * BLOCK, wb * BLOCK)
            rec = np.clip(round_half_away(rec[:oh, :ow]), 0, 255)
            out[ti, :, :, ci] = rec.astype(np.uint8)
    return clip.with_frames(out)


class EncoderUnavailableError(CorpusError):
    pass


def external_encode(
    clip: VideoClip,
    spec: DegraderSpec,
    command_template: str,
    fallback_to_synthetic: bool = True,
) -> tuple[VideoClip, dict]:
    """Pipe a clip through an external encode/decode command.

    ``command_template`` is formatted with {input}, {output}, {qp} and
    optionally {bitstream}; input/output are Y4M paths. Returns the decoded
    clip plus an info dict (bitstream size when captured). When the binary
    is missing, falls back to the synthetic codec or raises, per flag.
    """
    if spec.kind != "external-encoder":
        raise CorpusError("external_encode requires an external-encoder spec")
    binary = command_template.split()[0]
    if shutil.which(binary) is None:
        if fallback_to_synthetic:
            return synthetic_dct_degrade(clip, spec.qp), {"fallback": True}
        raise EncoderUnavailableError(f"encoder unavailable: {binary}")

    with tempfile.TemporaryDirectory(prefix="extenc_") as tmp:
        tmp = Path(tmp)
        in_path = tmp / "in.y4m"
        out_path = tmp / "out.y4m"
        bs_path = tmp / "stream.bin"
        save_clip(clip, in_path, "y4m")
        cmd = command_template.format(
            input=in_path, output=out_path, qp=spec.qp, bitstream=bs_path
        )
        argv = cmd.split() + list(spec.extra_args)
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise CorpusError(
                f"encoder exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
            )
        decoded = load_clip(out_path, "y4m", luma_only=clip.shape[-1] == 1)
        if decoded.shape != clip.shape:
            raise CorpusError(
                f"encoder changed dimensions: {clip.shape} -> {decoded.shape}"
            )
        info = {"fallback": False}
        if "{bitstream}" in command_template and bs_path.exists():
            info["bitstream_bytes"] = bs_path.stat().st_size
        decoded.clip_id = clip.clip_id
        decoded.frame_rate = clip.frame_rate
        return decoded, info


def _apply_spec(clip: VideoClip, spec: DegraderSpec, command_template: str | None) -> VideoClip:
    if spec.kind == "synthetic-dct":
        return synthetic_dct_degrade(clip, spec.qp)
    if command_template is None:
        raise CorpusError(
            f"no command template configured for encoder {spec.encoder_name!r}"
        )
    decoded, _ = external_encode(clip, spec, command_template)
    return decoded


def build_corpus(
    sources: list[VideoClip],
    stage1_qps: list[int],
    stage2_specs: list[DegraderSpec],
    out_dir: str | Path,
    encoder_templates: dict[str, str] | None = None,
    jobs: int = 1,
) -> list[TranscodeRecord]:
    """Synthesize the full S->R->D corpus and write every clip to out_dir.

    Produces one R per (source, stage-1 QP) and one D per (R, stage-2 spec):
    len(sources) * (1 + len(stage1_qps) + len(stage1_qps)*len(stage2_specs))
    records in total.
    """
    if not sources:
        raise CorpusError("no source clips given")
    if not stage1_qps:
        raise CorpusError("stage1_qps must be nonempty")
    ids = [c.clip_id for c in sources]
    if len(set(ids)) != len(ids):
        raise CorpusError(f"duplicate clip_ids among sources: {sorted(ids)}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    templates = encoder_templates or {}

    records: list[TranscodeRecord] = []
    written: list[Path] = []

    def _save(clip: VideoClip, name: str) -> str:
        path = out_dir / f"{name}.y4m"
        save_clip(clip, path, "y4m")
        written.append(path)
        return path.name

    # stage-1 tasks are independent per (source, qp); stage-2 per (R, spec)
    try:
        stage1_tasks = [(src, qp) for src in sources for qp in stage1_qps]

        def _run_stage1(task):
            src, qp = task
            spec = DegraderSpec(kind="synthetic-dct", qp=qp)
            return _apply_spec(src, spec, None), spec

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                stage1_results = list(pool.map(_run_stage1, stage1_tasks))
        else:
            stage1_results = [_run_stage1(t) for t in stage1_tasks]

        refs: list[tuple[VideoClip, TranscodeRecord]] = []
        for src in sources:
            rel = _save(src, src.clip_id)
            records.append(
                TranscodeRecord(
                    clip_id=src.clip_id,
                    role="S",
                    source_id=src.clip_id,
                    parent_id=None,
                    stage=0,
                    spec=None,
                    path=rel,
                )
            )
        for (src, qp), (ref_clip, spec) in zip(stage1_tasks, stage1_results):
            ref_id = f"{src.clip_id}_r_qp{qp}"
            ref_clip.clip_id = ref_id
            rel = _save(ref_clip, ref_id)
            rec = TranscodeRecord(
                clip_id=ref_id,
                role="R",
                source_id=src.clip_id,
                parent_id=src.clip_id,
                stage=1,
                spec=spec,
                path=rel,
            )
            records.append(rec)
            refs.append((ref_clip, rec))

        stage2_tasks = [(ref_clip, rec, spec) for ref_clip, rec in refs for spec in stage2_specs]

        def _run_stage2(task):
            ref_clip, _, spec = task
            template = templates.get(spec.encoder_name or "")
            return _apply_spec(ref_clip, spec, template)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                stage2_results = list(pool.map(_run_stage2, stage2_tasks))
        else:
            stage2_results = [_run_stage2(t) for t in stage2_tasks]

        for (ref_clip, ref_rec, spec), dist in zip(stage2_tasks, stage2_results):
            tag = spec.encoder_name or "sdct"
            dist_id = f"{ref_rec.clip_id}_d_{tag}_qp{spec.qp}"
            dist.clip_id = dist_id
            rel = _save(dist, dist_id)
            records.append(
                TranscodeRecord(
                    clip_id=dist_id,
                    role="D",
                    source_id=ref_rec.source_id,
                    parent_id=ref_rec.clip_id,
                    stage=2,
                    spec=spec,
                    path=rel,
                )
            )
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise

    return records


def save_manifest(records: list[TranscodeRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([r.to_json() for r in records], indent=1) + "\n")
    return path


def load_manifest(path: str | Path) -> list[TranscodeRecord]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"missing manifest: {path}")
    return [TranscodeRecord.from_json(obj) for obj in json.loads(path.read_text())]


def load_record_clip(record: TranscodeRecord, manifest_dir: str | Path, luma_only: bool = False) -> VideoClip:
    return load_clip(Path(manifest_dir) / record.path, "y4m", luma_only=luma_only)


@dataclass
class ManifestReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def verify_manifest(records: list[TranscodeRecord], manifest_dir: str | Path | None = None) -> ManifestReport:
    """Check lineage invariants, payload existence, and dimension agreement."""
    violations: list[str] = []
    by_id = {r.clip_id: r for r in records}
    if len(by_id) != len(records):
        violations.append("duplicate clip_ids in manifest")

    for r in records:
        if r.role == "S":
            if r.stage != 0 or r.spec is not None or r.parent_id is not None:
                violations.append(f"{r.clip_id}: role S requires stage 0, no spec, no parent")
        elif r.role in ("R", "D"):
            want_stage = 1 if r.role == "R" else 2
            if r.stage != want_stage:
                violations.append(f"{r.clip_id}: role {r.role} requires stage {want_stage}")
            if r.spec is None:
                violations.append(f"{r.clip_id}: role {r.role} requires a degrader spec")
            parent = by_id.get(r.parent_id or "")
            if parent is None:
                violations.append(f"{r.clip_id}: missing parent {r.parent_id!r}")
            else:
                want_parent = "S" if r.role == "R" else "R"
                if parent.role != want_parent:
                    violations.append(
                        f"{r.clip_id}: chain must be S->R->D, parent has role {parent.role}"
                    )
                if parent.source_id != r.source_id:
                    violations.append(f"{r.clip_id}: source_id disagrees with parent")
        else:
            violations.append(f"{r.clip_id}: unknown role {r.role!r}")

    if manifest_dir is not None:
        base = Path(manifest_dir)
        dims: dict[str, tuple] = {}
        for r in records:
            p = base / r.path
            if not p.exists():
                violations.append(f"{r.clip_id}: missing payload {r.path}")
                continue
            try:
                dims[r.clip_id] = load_clip(p, "y4m").shape
            except MediaError as exc:
                violations.append(f"{r.clip_id}: unreadable payload ({exc})")
        for r in records:
            if r.parent_id and r.clip_id in dims and r.parent_id in dims:
                if dims[r.clip_id] != dims[r.parent_id]:
                    violations.append(
                        f"{r.clip_id}: dimensions {dims[r.clip_id]} differ from parent {dims[r.parent_id]}"
                    )

    return ManifestReport(ok=not violations, violations=violations)
