"""Feature interchange format, dataset manifests, moment normalization,
deterministic batching, and the planted-correlation synthetic dataset.

Feature file layout (little-endian):
    magic   4s   b"MGSV"
    version u16  (currently 1)
    dtype   u16  (0 = float32)
    rows    u32
    cols    u32  (512 for video frames, 768 for music segments)
    duration f32 (seconds, > 0)
    payload rows*cols float32, row-major

Manifests are JSON-lines: one header record carrying split name, D_max and
the candidate track list, then one record per (video, track, moment) entry.
Feature files live under <root>/features/<id>.feat by convention.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ManifestError

MAGIC = b"MGSV"
FORMAT_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHHIIf")

VIDEO_WIDTH = 512
MUSIC_WIDTH = 768
TOKEN_WIDTHS = (VIDEO_WIDTH, MUSIC_WIDTH)

MIN_MOMENT_SEC = 0.5

SEGMENT_WINDOW_SEC = 10.0
SEGMENT_HOP_SEC = 5.0

SYNTH_VERSION = 1


@dataclass
class TokenSequence:
    """Time-ordered feature tokens plus the source media duration."""

    tokens: np.ndarray  # (rows, cols) float32
    duration: float

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2:
            raise DataError(f"token matrix must be 2-D, got {self.tokens.shape}")
        if self.duration <= 0:
            raise DataError(f"duration must be positive, got {self.duration}")

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def cols(self) -> int:
        return self.tokens.shape[1]


def frame_count(duration: float) -> int:
    """Frames at 1 FPS: floor(duration), at least one."""
    return max(1, int(math.floor(duration)))


def segment_count(duration: float) -> int:
    """Windows of 10 s with 5 s hop: floor((duration-10)/5)+1, at least one."""
    return max(1, int(math.floor((duration - SEGMENT_WINDOW_SEC) / SEGMENT_HOP_SEC)) + 1)


def write_features(path, tokens: np.ndarray, duration: float) -> None:
    tokens = np.ascontiguousarray(tokens, dtype=np.float32)
    if tokens.ndim != 2:
        raise FormatError(f"token matrix must be 2-D, got shape {tokens.shape}")
    rows, cols = tokens.shape
    if cols not in TOKEN_WIDTHS:
        raise FormatError(f"token width must be one of {TOKEN_WIDTHS}, got {cols}")
    if duration <= 0:
        raise FormatError(f"duration must be positive, got {duration}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, rows, cols, duration)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tokens.astype("<f4", copy=False).tobytes())


def read_features(path) -> TokenSequence:
    """Read and validate a feature file; lossless inverse of write_features."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise FormatError(f"feature file not found: {path}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header in {path}")
    magic, version, dtype, rows, cols, duration = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} in {path}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype} in {path}")
    if cols not in TOKEN_WIDTHS:
        raise FormatError(f"token width must be one of {TOKEN_WIDTHS}, got {cols}")
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise FormatError(f"payload size mismatch in {path}: {len(raw)} != {expected}")
    tokens = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return TokenSequence(tokens=tokens.copy(), duration=float(duration))


# -- moments ---------------------------------------------------------------


def normalize_moment(start_sec: float, width_sec: float, d_max: float) -> tuple[float, float]:
    """Moment (start, width) in seconds -> normalized (center, width)."""
    if d_max <= 0:
        raise DataError(f"normalizer must be positive, got {d_max}")
    if width_sec <= 0:
        raise DataError(f"moment width must be positive, got {width_sec}")
    if start_sec < 0:
        raise DataError(f"moment start must be non-negative, got {start_sec}")
    return (start_sec + width_sec / 2.0) / d_max, width_sec / d_max


def denormalize_moment(p_c: float, p_w: float, d_max: float,
                       track_duration: float) -> tuple[float, float]:
    """Normalized (center, width) -> (start, end) seconds on the track.

    The interval is clamped to [0, track_duration] and widened (within the
    track) to at least MIN_MOMENT_SEC so no degenerate moment is emitted.
    """
    if d_max <= 0 or track_duration <= 0:
        raise DataError("normalizer and track duration must be positive")
    center = p_c * d_max
    width = max(p_w * d_max, 0.0)
    start = max(0.0, center - width / 2.0)
    end = min(track_duration, center + width / 2.0)
    if end < start:
        start = end = min(max(center, 0.0), track_duration)
    min_width = min(MIN_MOMENT_SEC, track_duration)
    if end - start < min_width:
        mid = (start + end) / 2.0
        mid = min(max(mid, min_width / 2.0), track_duration - min_width / 2.0)
        start, end = mid - min_width / 2.0, mid + min_width / 2.0
    return start, end


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestEntry:
    video_id: str
    track_id: str
    moment_start_sec: float
    moment_width_sec: float
    video_duration: float
    track_duration: float

    def validate(self) -> None:
        if self.moment_start_sec < 0:
            raise ManifestError(f"{self.video_id}: negative moment start")
        if self.moment_width_sec <= 0:
            raise ManifestError(f"{self.video_id}: non-positive moment width")
        if self.moment_start_sec + self.moment_width_sec > self.track_duration + 1e-6:
            raise ManifestError(f"{self.video_id}: moment exceeds track duration")
        if self.video_duration <= 0 or self.track_duration <= 0:
            raise ManifestError(f"{self.video_id}: non-positive duration")

    def to_record(self) -> dict:
        return {
            "kind": "entry",
            "video_id": self.video_id,
            "track_id": self.track_id,
            "moment_start_sec": self.moment_start_sec,
            "moment_width_sec": self.moment_width_sec,
            "video_duration": self.video_duration,
            "track_duration": self.track_duration,
        }


@dataclass
class Manifest:
    split: str
    entries: list[ManifestEntry]
    candidate_tracks: list[str]
    d_max: float

    def validate(self) -> None:
        if self.d_max <= 0:
            raise ManifestError("D_max must be positive")
        seen_videos = set()
        candidates = set(self.candidate_tracks)
        for entry in self.entries:
            entry.validate()
            if entry.video_id in seen_videos:
                raise ManifestError(f"duplicate video id '{entry.video_id}'")
            seen_videos.add(entry.video_id)
            if entry.track_id not in candidates:
                raise ManifestError(
                    f"track '{entry.track_id}' missing from candidate list")
            if entry.track_duration > self.d_max + 1e-6:
                raise ManifestError(
                    f"track '{entry.track_id}' longer than D_max {self.d_max}")

    def save(self, path) -> None:
        self.validate()
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "kind": "manifest",
                "split": self.split,
                "d_max": self.d_max,
                "candidate_tracks": list(self.candidate_tracks),
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for entry in self.entries:
                fh.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        entries = []
        header = None
        if not Path(path).exists():
            raise ManifestError(f"manifest not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record.get("kind") == "manifest":
                    if header is not None:
                        raise ManifestError(f"duplicate manifest header in {path}")
                    header = record
                elif record.get("kind") == "entry":
                    entries.append(ManifestEntry(
                        video_id=record["video_id"],
                        track_id=record["track_id"],
                        moment_start_sec=float(record["moment_start_sec"]),
                        moment_width_sec=float(record["moment_width_sec"]),
                        video_duration=float(record["video_duration"]),
                        track_duration=float(record["track_duration"]),
                    ))
                else:
                    raise ManifestError(f"unknown record kind in {path}: {record}")
        if header is None:
            raise ManifestError(f"missing manifest header in {path}")
        manifest = cls(split=header["split"], entries=entries,
                       candidate_tracks=list(header["candidate_tracks"]),
                       d_max=float(header["d_max"]))
        manifest.validate()
        return manifest


def manifest_path(root, split: str) -> Path:
    return Path(root) / f"{split}.manifest.jsonl"


def features_dir(root) -> Path:
    return Path(root) / "features"


def feature_path(root, item_id: str) -> Path:
    return features_dir(root) / f"{item_id}.feat"


def load_split(root, split: str) -> tuple[Manifest, dict]:
    """Load a split's manifest and every referenced feature file."""
    manifest = Manifest.load(manifest_path(root, split))
    features: dict[str, TokenSequence] = {}
    for entry in manifest.entries:
        if entry.video_id not in features:
            features[entry.video_id] = read_features(feature_path(root, entry.video_id))
    for tid in manifest.candidate_tracks:
        if tid not in features:
            features[tid] = read_features(feature_path(root, tid))
    return manifest, features


# -- synthetic dataset -------------------------------------------------------


@dataclass
class SynthConfig:
    """Planted-correlation generator configuration.

    Track segments carry latent = track base + shared position code; music
    tokens are a fixed random 768-d lift of segment latents, video frames a
    fixed random 512-d lift of the mean latent over the target moment's
    segments, both plus Gaussian noise. The lifts are shared dataset-wide,
    so both matching and localization are learnable from the features.
    """

    n_tracks: int = 8
    videos_per_track: int = 4
    latent_dim: int = 32
    noise_sigma: float = 0.1
    track_duration_range: tuple[float, float] = (60.0, 180.0)
    video_duration_range: tuple[float, float] = (10.0, 30.0)
    seed: int = 0

    def validate(self) -> None:
        if self.n_tracks < 1 or self.videos_per_track < 1:
            raise ConfigError("need at least one track and one video per track")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        lo, hi = self.track_duration_range
        vlo, vhi = self.video_duration_range
        if not (0 < lo <= hi) or not (0 < vlo <= vhi):
            raise ConfigError("invalid duration ranges")
        if vhi + SEGMENT_WINDOW_SEC > lo:
            raise ConfigError("tracks too short to contain the longest video moment")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        cfg = cls(**{k: tuple(v) if k.endswith("_range") else v for k, v in raw.items()})
        cfg.validate()
        return cfg


def _segment_overlap_set(start: float, width: float, n_segments: int) -> list[int]:
    """Indices of 10s/5s-hop segments with positive overlap with the moment."""
    out = []
    for p in range(n_segments):
        seg_start = p * SEGMENT_HOP_SEC
        seg_end = seg_start + SEGMENT_WINDOW_SEC
        if seg_start < start + width and seg_end > start:
            out.append(p)
    return out


@dataclass
class SynthTruth:
    """Generator-side ground truth used by oracle checks in tests."""

    lift_video: np.ndarray   # (latent_dim, 512)
    lift_music: np.ndarray   # (latent_dim, 768)
    position_codes: np.ndarray  # (max_segments, latent_dim)
    track_latents: dict = field(default_factory=dict)  # track_id -> (S, latent_dim)


def synth_generate(cfg: SynthConfig, out_dir) -> SynthTruth:
    """Write feature files plus train/val/test manifests under out_dir.

    Deterministic: identical (SYNTH_VERSION, cfg.seed, cfg) regenerate the
    dataset bit-for-bit. Splits are 80/10/10 by video; all tracks appear in
    every split's candidate list.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    feat_dir = features_dir(out_dir)
    feat_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([SYNTH_VERSION, cfg.seed])
    lat = cfg.latent_dim
    scale = 1.0 / math.sqrt(lat)
    lift_video = rng.normal(0.0, scale, size=(lat, VIDEO_WIDTH))
    lift_music = rng.normal(0.0, scale, size=(lat, MUSIC_WIDTH))

    max_segments = segment_count(cfg.track_duration_range[1])
    position_codes = rng.normal(0.0, 1.0, size=(max_segments, lat))

    truth = SynthTruth(lift_video=lift_video, lift_music=lift_music,
                       position_codes=position_codes)

    track_ids = [f"t{j:04d}" for j in range(cfg.n_tracks)]
    track_durations: dict[str, float] = {}
    for tid in track_ids:
        duration = float(rng.uniform(*cfg.track_duration_range))
        n_seg = segment_count(duration)
        base = rng.normal(0.0, 1.0, size=(lat,))
        latents = base[None, :] + position_codes[:n_seg]
        tokens = latents @ lift_music
        tokens = tokens + rng.normal(0.0, cfg.noise_sigma, size=tokens.shape)
        write_features(feature_path(out_dir, tid), tokens.astype(np.float32), duration)
        track_durations[tid] = duration
        truth.track_latents[tid] = latents

    entries: list[ManifestEntry] = []
    n_videos = cfg.n_tracks * cfg.videos_per_track
    for i in range(n_videos):
        vid = f"v{i:05d}"
        tid = track_ids[i % cfg.n_tracks]
        track_dur = track_durations[tid]
        video_dur = float(rng.uniform(*cfg.video_duration_range))
        # moment start is hop-aligned so the planted latent is segment-exact
        max_start_steps = int(math.floor((track_dur - video_dur) / SEGMENT_HOP_SEC))
        start = SEGMENT_HOP_SEC * int(rng.integers(0, max_start_steps + 1))
        n_seg = segment_count(track_dur)
        covered = _segment_overlap_set(start, video_dur, n_seg)
        mean_latent = truth.track_latents[tid][covered].mean(axis=0)
        frames = frame_count(video_dur)
        tokens = np.tile(mean_latent @ lift_video, (frames, 1))
        tokens = tokens + rng.normal(0.0, cfg.noise_sigma, size=tokens.shape)
        write_features(feature_path(out_dir, vid), tokens.astype(np.float32), video_dur)
        entries.append(ManifestEntry(
            video_id=vid, track_id=tid,
            moment_start_sec=start, moment_width_sec=video_dur,
            video_duration=video_dur, track_duration=track_dur,
        ))

    d_max = max(track_durations.values())
    order = rng.permutation(n_videos)
    n_val = max(1, n_videos // 10) if n_videos >= 10 else 0
    n_test = n_val
    split_of = {}
    for rank, idx in enumerate(order):
        if rank < n_test:
            split_of[idx] = "test"
        elif rank < n_test + n_val:
            split_of[idx] = "val"
        else:
            split_of[idx] = "train"
    for split in ("train", "val", "test"):
        split_entries = [e for i, e in enumerate(entries) if split_of[i] == split]
        manifest = Manifest(split=split, entries=split_entries,
                            candidate_tracks=list(track_ids), d_max=d_max)
        if split_entries:
            manifest.save(manifest_path(out_dir, split))
    return truth


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    video: np.ndarray        # (B, Fmax, 512) float32, zero-padded
    video_mask: np.ndarray   # (B, Fmax) bool, True on valid rows
    music: np.ndarray        # (B, Smax, 768) float32
    music_mask: np.ndarray   # (B, Smax) bool
    video_ids: list
    track_ids: list
    target_center: np.ndarray  # (B,) normalized by D_max
    target_width: np.ndarray   # (B,)
    video_durations: np.ndarray
    track_durations: np.ndarray

    @property
    def size(self) -> int:
        return len(self.video_ids)


def _pad_stack(seqs: list[np.ndarray], width: int) -> tuple[np.ndarray, np.ndarray]:
    max_len = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), max_len, width), dtype=np.float32)
    mask = np.zeros((len(seqs), max_len), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def build_batch(entries: list[ManifestEntry], features: dict, d_max: float) -> Batch:
    videos = [features[e.video_id].tokens for e in entries]
    musics = [features[e.track_id].tokens for e in entries]
    video, video_mask = _pad_stack(videos, VIDEO_WIDTH)
    music, music_mask = _pad_stack(musics, MUSIC_WIDTH)
    centers, widths = [], []
    for e in entries:
        c, w = normalize_moment(e.moment_start_sec, e.moment_width_sec, d_max)
        centers.append(c)
        widths.append(w)
    return Batch(
        video=video, video_mask=video_mask, music=music, music_mask=music_mask,
        video_ids=[e.video_id for e in entries],
        track_ids=[e.track_id for e in entries],
        target_center=np.asarray(centers, dtype=np.float32),
        target_width=np.asarray(widths, dtype=np.float32),
        video_durations=np.asarray([e.video_duration for e in entries], dtype=np.float32),
        track_durations=np.asarray([e.track_duration for e in entries], dtype=np.float32),
    )


def make_batches(manifest: Manifest, features: dict, batch_size: int,
                 seed: int, epoch: int) -> list[Batch]:
    """Deterministic per-epoch batches; every entry appears exactly once.

    The shuffle is keyed by (seed, epoch). Sequences are zero-padded to the
    batch maximum with validity masks. A trailing single-entry batch would
    break the InfoNCE precondition, so one entry is rebalanced from the
    previous batch in that case.
    """
    if batch_size < 2:
        raise DataError(f"batch_size must be >= 2 for contrastive training, got {batch_size}")
    n = len(manifest.entries)
    if n < 2:
        raise DataError("need at least two entries to form a training batch")
    rng = np.random.default_rng([int(seed), int(epoch), 0xBA7C])
    order = rng.permutation(n)
    chunks = [order[i: i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        if len(chunks[-2]) > 2:
            chunks[-1] = np.concatenate([chunks[-2][-1:], chunks[-1]])
            chunks[-2] = chunks[-2][:-1]
        else:
            # stealing would shrink the previous batch below two entries
            chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
            chunks.pop()
    return [
        build_batch([manifest.entries[i] for i in chunk], features, manifest.d_max)
        for chunk in chunks
    ]


def nearest_segment_oracle(truth: SynthTruth, manifest: Manifest,
                           features: dict) -> float:
    """mIoU of a latent-space oracle that knows the generator's lifts.

    Recovers each video's latent with the lift pseudo-inverse and slides a
    hop-aligned window over the ground-truth track's true segment latents,
    predicting the window whose mean latent is nearest. Confirms the planted
    signal suffices for localization before any model training.
    """
    pinv = np.linalg.pinv(truth.lift_video)
    total = 0.0
    for entry in manifest.entries:
        video = features[entry.video_id]
        z_hat = video.tokens.mean(axis=0).astype(np.float64) @ pinv
        latents = truth.track_latents[entry.track_id]
        n_seg = latents.shape[0]
        width = entry.moment_width_sec
        max_steps = int(math.floor((entry.track_duration - width) / SEGMENT_HOP_SEC))
        best_start, best_dist = 0.0, np.inf
        for j in range(max_steps + 1):
            start = j * SEGMENT_HOP_SEC
            covered = _segment_overlap_set(start, width, n_seg)
            mean_latent = latents[covered].mean(axis=0)
            dist = float(np.linalg.norm(mean_latent - z_hat))
            if dist < best_dist:
                best_start, best_dist = start, dist
        gt = (entry.moment_start_sec, entry.moment_start_sec + width)
        total += max(0.0, min(gt[1], best_start + width) - max(gt[0], best_start)) / (
            (gt[1] - gt[0]) + width - max(0.0, min(gt[1], best_start + width) - max(gt[0], best_start))
        )
    return total / len(manifest.entries)
