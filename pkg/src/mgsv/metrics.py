"""Evaluation protocol: temporal IoU / mIoU for single-music grounding,
Recall@k for retrieval, and Moment-Recall@k (IoU strictly above 0.7) for
music-set grounding, with the unified one-moment-per-top-k-track
post-processing.

Everything here is pure and deterministic: candidate ranking breaks score
ties by ascending track id so reports are byte-identical across runs.
Retrieval metrics are reported in percent, mIoU as a unit fraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import DataError

MOMENT_IOU_THRESHOLD = 0.7  # strict: IoU exactly at the threshold does not count
RECALL_KS = (1, 5, 10)
MOMENT_RECALL_KS = (1, 10, 100)


def iou_1d(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal IoU of two (start, end) intervals in seconds; 0 when disjoint."""
    a_start, a_end = a
    b_start, b_end = b
    if a_end < a_start or b_end < b_start:
        raise DataError(f"interval end precedes start: {a}, {b}")
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def miou(preds: dict, gts: dict) -> float:
    """Mean IoU over all query videos; every query needs one prediction."""
    if not gts:
        raise DataError("no queries to evaluate")
    total = 0.0
    for qid, gt in gts.items():
        if qid not in preds:
            raise DataError(f"missing prediction for query '{qid}'")
        total += iou_1d(preds[qid], gt)
    return total / len(gts)


def rank_tracks(scores: dict) -> list:
    """Order track ids by descending score, ties by ascending track id."""
    return [tid for tid, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def recall_at_k(rankings: dict, gt_tracks: dict, k: int) -> float:
    """Percentage of queries whose positive track ranks within the top k."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not gt_tracks:
        raise DataError("no queries to evaluate")
    hits = 0
    for qid, gt_track in gt_tracks.items():
        ranking = rankings[qid]
        if gt_track not in ranking:
            raise DataError(f"positive track '{gt_track}' absent from candidates of '{qid}'")
        if ranking.index(gt_track) < k:
            hits += 1
    return 100.0 * hits / len(gt_tracks)


def topk_postprocess(ranking: list, per_track_moments: dict, k: int) -> list:
    """One (track, moment) per top-k ranked track, in rank order.

    Truncates to the candidate count when k exceeds it.
    """
    out = []
    for tid in ranking[: min(k, len(ranking))]:
        if tid not in per_track_moments:
            raise DataError(f"no detected moment for ranked track '{tid}'")
        out.append((tid, per_track_moments[tid]))
    return out


def moment_recall_at_k(rankings: dict, moments: dict, gts: dict, k: int,
                       iou_threshold: float = MOMENT_IOU_THRESHOLD) -> float:
    """Percentage of queries whose positive moment is recalled in the top k.

    A query counts iff its positive track appears among the top-k ranked
    tracks and the moment detected on that track has IoU strictly greater
    than `iou_threshold` with the ground truth.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not gts:
        raise DataError("no queries to evaluate")
    hits = 0
    for qid, (gt_track, gt_moment) in gts.items():
        ranking = rankings[qid]
        if gt_track not in ranking:
            raise DataError(f"positive track '{gt_track}' absent from candidates of '{qid}'")
        selected = topk_postprocess(ranking, moments[qid], k)
        for tid, moment in selected:
            if tid == gt_track and iou_1d(moment, gt_moment) > iou_threshold:
                hits += 1
                break
    return 100.0 * hits / len(gts)


@dataclass
class RankedPrediction:
    """Per-query output: candidates ordered by descending score, with the
    moment detected on each candidate track."""

    query_id: str
    # (track_id, score, start_sec, end_sec) in rank order
    items: list = field(default_factory=list)

    def ranking(self) -> list:
        return [item[0] for item in self.items]

    def moments(self) -> dict:
        return {tid: (start, end) for tid, _, start, end in self.items}

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "ranked": [[tid, float(score), float(s), float(e)]
                       for tid, score, s, e in self.items],
        }

    @classmethod
    def from_record(cls, record: dict) -> "RankedPrediction":
        items = [(tid, float(score), float(s), float(e))
                 for tid, score, s, e in record["ranked"]]
        return cls(query_id=record["query_id"], items=items)


def write_predictions(path, predictions: list[RankedPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pred in predictions:
            fh.write(json.dumps(pred.to_record(), sort_keys=True) + "\n")


def read_predictions(path) -> list[RankedPrediction]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(RankedPrediction.from_record(json.loads(line)))
    return out


@dataclass
class EvalReport:
    """Per-mode metric table; retrieval numbers in percent, mIoU in [0, 1]."""

    mode: str
    miou: float | None = None
    recall_at: dict | None = None
    moment_recall_at: dict | None = None
    per_query: list = field(default_factory=list)

    def validate(self) -> None:
        if self.recall_at and self.moment_recall_at:
            for k, mor in self.moment_recall_at.items():
                if k in self.recall_at and mor > self.recall_at[k] + 1e-9:
                    raise DataError(f"MoR@{k}={mor} exceeds R@{k}={self.recall_at[k]}")

    def to_json(self) -> str:
        payload = {"mode": self.mode, "miou": self.miou, "per_query": self.per_query}
        if self.recall_at is not None:
            payload["recall_at"] = {str(k): v for k, v in sorted(self.recall_at.items())}
        if self.moment_recall_at is not None:
            payload["moment_recall_at"] = {
                str(k): v for k, v in sorted(self.moment_recall_at.items())
            }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [f"mode: {self.mode}"]
        if self.miou is not None:
            lines.append(f"mIoU: {self.miou:.4f}")
        if self.recall_at:
            lines.append("  ".join(f"R@{k}: {v:.1f}" for k, v in sorted(self.recall_at.items())))
        if self.moment_recall_at:
            lines.append("  ".join(f"MoR@{k}: {v:.1f}"
                                   for k, v in sorted(self.moment_recall_at.items())))
        return "\n".join(lines)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


def build_report(mode: str, predictions: list[RankedPrediction], gts: dict,
                 recall_ks=RECALL_KS, moment_ks=MOMENT_RECALL_KS) -> EvalReport:
    """Assemble the metric table from per-query ranked predictions.

    `gts` maps query_id -> (gt_track, (gt_start, gt_end)). In smg mode only
    the positive pair's moment is scored and retrieval metrics are omitted.
    """
    rankings = {p.query_id: p.ranking() for p in predictions}
    moments = {p.query_id: p.moments() for p in predictions}

    gt_moment_preds = {}
    per_query = []
    for qid, (gt_track, gt_moment) in gts.items():
        if qid not in moments or gt_track not in moments[qid]:
            raise DataError(f"no prediction on positive track for query '{qid}'")
        pred_moment = moments[qid][gt_track]
        gt_moment_preds[qid] = pred_moment
        per_query.append({
            "query_id": qid,
            "gt_track": gt_track,
            "iou": iou_1d(pred_moment, gt_moment),
            "rank_of_gt": rankings[qid].index(gt_track) + 1 if gt_track in rankings[qid] else None,
        })
    per_query.sort(key=lambda item: item["query_id"])

    report = EvalReport(mode=mode, per_query=per_query)
    report.miou = miou(gt_moment_preds, {q: m for q, (_, m) in gts.items()})
    if mode == "msg":
        gt_tracks = {q: t for q, (t, _) in gts.items()}
        report.recall_at = {k: recall_at_k(rankings, gt_tracks, k) for k in recall_ks}
        report.moment_recall_at = {
            k: moment_recall_at_k(rankings, moments, gts, k) for k in moment_ks
        }
    report.validate()
    return report
