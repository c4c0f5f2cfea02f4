"""Build grounding-stack manifests from editing-log records.

Input: JSON-lines records, one per (video, track, moment) association:
    {"video_id", "track_id", "start_sec", "width_sec",
     "video_duration", "track_duration"}
Invalid records (moment outside its track, non-positive widths, duplicate
video ids) are rejected with a reason rather than aborting the whole build.
Output is the primary stack's manifest format: one header line with split
name, D_max and the candidate track list, then one line per entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .featfile import ExtractError


@dataclass
class BuildResult:
    accepted: int = 0
    rejected: list = field(default_factory=list)  # (video_id, reason)


def _check_record(record: dict, seen_videos: set) -> str | None:
    required = ("video_id", "track_id", "start_sec", "width_sec",
                "video_duration", "track_duration")
    for key in required:
        if key not in record:
            return f"missing field '{key}'"
    if record["video_id"] in seen_videos:
        return "duplicate video id"
    if record["start_sec"] < 0:
        return "negative moment start"
    if record["width_sec"] <= 0:
        return "non-positive moment width"
    if record["video_duration"] <= 0 or record["track_duration"] <= 0:
        return "non-positive duration"
    if record["start_sec"] + record["width_sec"] > record["track_duration"] + 1e-6:
        return "moment exceeds track duration"
    return None


def build_manifest(log_path, out_path, split: str = "train") -> BuildResult:
    result = BuildResult()
    entries = []
    tracks: dict[str, float] = {}
    seen_videos: set[str] = set()
    with open(log_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            reason = _check_record(record, seen_videos)
            if reason is not None:
                result.rejected.append((record.get("video_id", "?"), reason))
                continue
            seen_videos.add(record["video_id"])
            tracks[record["track_id"]] = max(tracks.get(record["track_id"], 0.0),
                                             float(record["track_duration"]))
            entries.append(record)
            result.accepted += 1
    if not entries:
        raise ExtractError(f"no valid records in {log_path}")
    d_max = max(tracks.values())
    with open(out_path, "w", encoding="utf-8") as fh:
        header = {"kind": "manifest", "split": split, "d_max": d_max,
                  "candidate_tracks": sorted(tracks)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in entries:
            fh.write(json.dumps({
                "kind": "entry",
                "video_id": r["video_id"],
                "track_id": r["track_id"],
                "moment_start_sec": float(r["start_sec"]),
                "moment_width_sec": float(r["width_sec"]),
                "video_duration": float(r["video_duration"]),
                "track_duration": float(r["track_duration"]),
            }, sort_keys=True) + "\n")
    return result
