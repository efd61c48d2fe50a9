"""On-disk dataset layout.

    root/manifest.json           list of {id, eeg, video, emb_img, emb_txt, emb_cat,
                                          concept_id, coarse_id, subject_id}
    root/dataset.json            optional: sample_rate_hz, channel_names, fps, concept_table
    root/eeg/<id>.f32            uint32 C, uint32 T, then C*T float32 (row-major, little-endian)
    root/video/<id>.f32          uint32 N, H, W, 3, then float32 payload
    root/emb/<id>.{img,txt,cat}.f32  uint32 length, then float32 payload
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ..errors import LoadError, ValidationError
from .tables import load_concept_table
from .types import EEGRecording, TrialPair, VideoClip

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


def write_array(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=_F32)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(np.asarray(arr.shape, dtype=_U32).tobytes())
        fh.write(arr.tobytes())


def read_array(path: Path, ndim: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"missing file: {path}") from exc
    header = 4 * ndim
    if len(raw) < header:
        raise LoadError(f"truncated header in {path}")
    shape = tuple(int(d) for d in np.frombuffer(raw[:header], dtype=_U32))
    payload = np.frombuffer(raw[header:], dtype=_F32)
    if payload.size != int(np.prod(shape)):
        raise LoadError(f"{path}: header says {shape} but payload has {payload.size} values")
    return payload.reshape(shape).copy()


def write_video(path: Path, clip: VideoClip) -> None:
    write_array(path, clip.frames)


def read_video(path: Path, fps: float = 3.0) -> VideoClip:
    return VideoClip(read_array(path, 4), fps=fps)


def write_dataset(trials: list[TrialPair], root: str | Path, *, concept_table: str | None = None) -> Path:
    """Write trials in the directory layout above; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for tr in trials:
        rel = {
            "eeg": f"eeg/{tr.trial_id}.f32",
            "video": f"video/{tr.trial_id}.f32",
            "emb_img": f"emb/{tr.trial_id}.img.f32",
            "emb_txt": f"emb/{tr.trial_id}.txt.f32",
            "emb_cat": f"emb/{tr.trial_id}.cat.f32",
        }
        write_array(root / rel["eeg"], tr.eeg.data)
        write_video(root / rel["video"], tr.video)
        write_array(root / rel["emb_img"], tr.emb_image)
        write_array(root / rel["emb_txt"], tr.emb_text)
        write_array(root / rel["emb_cat"], tr.emb_category)
        entries.append({"id": tr.trial_id, **rel, "concept_id": int(tr.concept_id),
                        "coarse_id": int(tr.coarse_id), "subject_id": int(tr.subject_id)})
    meta = {}
    if trials:
        meta = {"sample_rate_hz": trials[0].eeg.sample_rate_hz,
                "channel_names": list(trials[0].eeg.channel_names),
                "fps": trials[0].video.fps}
    if concept_table:
        meta["concept_table"] = concept_table
    (root / "dataset.json").write_text(json.dumps(meta, indent=1))
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def _load_one(root: Path, entry: dict, meta: dict, table) -> TrialPair:
    tid = entry.get("id", "?")
    try:
        data = read_array(root / entry["eeg"], 2)
        frames = read_array(root / entry["video"], 4)
        embs = [read_array(root / entry[k], 1) for k in ("emb_img", "emb_txt", "emb_cat")]
    except KeyError as exc:
        raise LoadError(f"trial '{tid}': manifest entry lacks {exc}") from exc
    except LoadError as exc:
        raise LoadError(f"trial '{tid}': {exc}") from exc

    concept, coarse = int(entry["concept_id"]), int(entry["coarse_id"])
    if not 0 <= concept < table.num_concepts:
        raise ValidationError(f"trial '{tid}': concept_id {concept} outside [0, {table.num_concepts})")
    if not 0 <= coarse < table.num_coarse:
        raise ValidationError(f"trial '{tid}': coarse_id {coarse} outside [0, {table.num_coarse})")
    if table.coarse_of(concept) != coarse:
        raise ValidationError(f"trial '{tid}': coarse_id {coarse} inconsistent with concept {concept}")

    names = meta.get("channel_names") or [f"ch{i}" for i in range(data.shape[0])]
    try:
        eeg = EEGRecording(data, float(meta.get("sample_rate_hz", 200.0)), tuple(names))
        video = VideoClip(frames, fps=float(meta.get("fps", 3.0)))
        return TrialPair(tid, eeg, video, concept, coarse, *embs, subject_id=int(entry.get("subject_id", 0)))
    except ValidationError as exc:
        raise ValidationError(f"trial '{tid}': {exc}") from exc


def load_dataset(root_dir: str | Path, manifest: str | Path | None = None, *, workers: int = 1) -> list[TrialPair]:
    """Load every trial listed in the manifest, preserving manifest order."""
    root = Path(root_dir)
    manifest = Path(manifest) if manifest is not None else root / "manifest.json"
    try:
        entries = json.loads(manifest.read_text())
    except FileNotFoundError as exc:
        raise LoadError(f"missing manifest: {manifest}") from exc
    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    table = load_concept_table(meta.get("concept_table"))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda e: _load_one(root, e, meta, table), entries))
    return [_load_one(root, e, meta, table) for e in entries]
