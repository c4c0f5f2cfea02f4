"""Deterministic training loop and evaluation drivers.

Adam (0.9/0.999/1e-8) minimizes the equally combined matching + detection
loss under a linear-warmup cosine learning-rate schedule, with global-norm
gradient clipping (disable via clip_norm=None). Everything is keyed off the
config seed: initialization, batch order, and dropout draw from separate
streams, so two runs with one seed produce identical loss curves and
byte-identical reports, and checkpoint resume is bit-exact.

Desk-scale defaults (epochs 40, batch 32) keep runs tractable; the
published-recipe scale (epochs 100, batch 512) stays selectable through the
same fields.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (Batch, Manifest, TokenSequence, build_batch, denormalize_moment,
                   make_batches)
from .errors import ConfigError, DataError, FormatError, NonFiniteError
from .losses import (GIOU_WEIGHT, L1_WEIGHT, MatchingLoss, MatchingLossConfig,
                     detection_loss, giou_1d, total_loss)
from .metrics import EvalReport, RankedPrediction, build_report, rank_tracks
from .model import GroundingModel, ModelConfig

SCORE_CHUNK = 32    # candidate tracks scored per matrix block
DECODE_BATCH = 64   # (query, track) pairs decoded per forward


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_proportion: float = 0.02
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    clip_norm: float | None = 1.0
    val_every: int = 1
    select_metric: str = "miou"  # validation model selection: "miou" or "r1"
    model: ModelConfig = field(default_factory=ModelConfig)
    matching: MatchingLossConfig = field(default_factory=MatchingLossConfig)

    def validate(self) -> None:
        if not 0.0 < self.warmup_proportion < 1.0:
            raise ConfigError("warmup_proportion must lie in (0, 1)")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("need at least one epoch")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for contrastive training")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")
        if self.select_metric not in ("miou", "r1"):
            raise ConfigError("select_metric must be 'miou' or 'r1'")
        self.model.validate()
        self.matching.validate()

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k not in ("model", "matching")}
        out["model"] = self.model.to_dict()
        out["matching"] = dict(self.matching.__dict__)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        model = ModelConfig.from_dict(raw.pop("model", {}))
        matching = MatchingLossConfig(**raw.pop("matching", {}))
        known = set(cls.__dataclass_fields__) - {"model", "matching"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        cfg = cls(model=model, matching=matching, **raw)
        cfg.validate()
        return cfg


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over warmup_proportion of training, then cosine
    decay to exactly 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = max(1, round(cfg.warmup_proportion * total_steps))
    if step <= warmup:
        return cfg.lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam with bias correction; updates are in-place and deterministic."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_global_norm(named_params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = np.asarray(max_norm / norm)
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale.astype(p.grad.dtype)
    return norm


def _np_detection_cost(centers, widths, tc, tw):
    """Per-token detection cost in plain numpy, used only to pick the
    best-matching token in multi-query configurations."""
    l1 = np.abs(centers - tc[:, None]) + np.abs(widths - tw[:, None])
    s1, e1 = centers - widths / 2, centers + widths / 2
    s2, e2 = (tc - tw / 2)[:, None], (tc + tw / 2)[:, None]
    inter = np.maximum(np.minimum(e1, e2) - np.maximum(s1, s2), 0.0)
    union = widths + tw[:, None] - inter
    hull = np.maximum(e1, e2) - np.minimum(s1, s2)
    giou = inter / union - (hull - union) / hull
    return L1_WEIGHT * l1 + GIOU_WEIGHT * (1.0 - giou)


class Trainer:
    """Owns the model, loss, optimizer, and RNG streams for one run."""

    def __init__(self, cfg: TrainConfig, train_manifest: Manifest, features: dict,
                 val_manifest: Manifest | None = None, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.train_manifest = train_manifest
        self.features = features
        self.val_manifest = val_manifest
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        self.model = GroundingModel(cfg.model, seed=cfg.seed,
                                    d_max=train_manifest.d_max)
        self.mloss = MatchingLoss(cfg.matching)
        self.named_params = self.model.named_parameters() + [
            (f"match_loss.{n}", p) for n, p in self.mloss.named_parameters()
        ]
        self.optimizer = Adam(self.named_params)
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.start_epoch = 0
        self.best_metric: float | None = None
        n = len(train_manifest.entries)
        self.steps_per_epoch = math.ceil(n / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch

    # -- one optimization step -----------------------------------------------

    def _detection_terms(self, det, batch: Batch) -> Tensor:
        tc = batch.target_center.astype(self.model.dtype)
        tw = batch.target_width.astype(self.model.dtype)
        heads = [(det.centers, det.widths)] + list(det.aux)
        conf_target = None
        if det.confidences is not None:
            cost = _np_detection_cost(det.centers.data, det.widths.data, tc, tw)
            best = np.argmin(cost, axis=-1)
            conf_target = np.zeros(det.confidences.shape, dtype=self.model.dtype)
            conf_target[np.arange(len(best)), best] = 1.0

        loss = None
        for centers, widths in heads:
            if centers.shape[-1] == 1:
                c = ad.select(centers, 0, axis=-1)
                w = ad.select(widths, 0, axis=-1)
            else:
                pick = Tensor(conf_target)
                c = ad.reduce_sum(ad.mul(centers, pick), axis=-1)
                w = ad.reduce_sum(ad.mul(widths, pick), axis=-1)
            term = detection_loss((c, w), (tc, tw))
            loss = term if loss is None else ad.add(loss, term)
        if det.confidences is not None:
            eps = 1e-6
            squeezed = ad.add(ad.mul(det.confidences, 1.0 - 2 * eps), eps)
            target = Tensor(conf_target)
            bce = ad.neg(ad.reduce_mean(ad.add(
                ad.mul(target, ad.log(squeezed)),
                ad.mul(ad.sub(1.0, target), ad.log(ad.sub(1.0, squeezed))))))
            loss = ad.add(loss, bce)
        return loss

    def train_step(self, batch: Batch) -> dict:
        model, cfg = self.model, self.cfg
        rng = self.dropout_rng
        fv = model.enhance_video(batch.video, mask=batch.video_mask, train=True, rng=rng)
        fm = model.enhance_music(batch.music, mask=batch.music_mask, train=True, rng=rng)
        hv = model.pool(fv, batch.video_mask)
        h0 = model.pool(fm, batch.music_mask)
        sims = model.match_matrix(hv, h0, fm, batch.music_mask)
        m_loss = self.mloss(sims, batch.track_ids, cfg.model.loss_mode)
        phi0 = model.initial_content_token(hv, h0, fm, batch.music_mask)
        det = model.detect(fv, fm, phi0, v_mask=batch.video_mask,
                           m_mask=batch.music_mask,
                           video_durations=batch.video_durations,
                           train=True, rng=rng)
        d_loss = self._detection_terms(det, batch)
        loss = total_loss(m_loss, d_loss)
        loss.backward()
        grad_norm = None
        if cfg.clip_norm is not None:
            grad_norm = clip_global_norm(self.named_params, cfg.clip_norm)
        lr = cosine_lr(self.step, self.total_steps, cfg)
        self.optimizer.step(lr)
        self.optimizer.zero_grad()
        self.step += 1
        return {
            "loss": loss.item(), "matching": m_loss.item(),
            "detection": d_loss.item(), "lr": lr, "grad_norm": grad_norm,
        }

    # -- training loop ---------------------------------------------------------

    def run(self, on_epoch=None) -> dict:
        """Train per the config; returns a run summary.

        `on_epoch(trainer, epoch, record) -> bool` may stop training early.
        """
        cfg = self.cfg
        history = []
        t0 = time.perf_counter()
        for epoch in range(self.start_epoch, cfg.epochs):
            batches = make_batches(self.train_manifest, self.features,
                                   cfg.batch_size, cfg.seed, epoch)
            epoch_logs = []
            for batch in batches:
                try:
                    epoch_logs.append(self.train_step(batch))
                except NonFiniteError:
                    self._dump_diagnostics(epoch, batch)
                    raise
            record = {
                "epoch": epoch,
                "step": self.step,
                "loss": float(np.mean([l["loss"] for l in epoch_logs])),
                "matching": float(np.mean([l["matching"] for l in epoch_logs])),
                "detection": float(np.mean([l["detection"] for l in epoch_logs])),
                "lr": epoch_logs[-1]["lr"],
            }
            validate_now = self.val_manifest is not None and (
                (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1)
            if validate_now:
                val = self.validate()
                record.update(val)
                metric = val["val_miou"] if cfg.select_metric == "miou" else val["val_r1"]
                if self.best_metric is None or metric > self.best_metric:
                    self.best_metric = metric
                    record["improved"] = True
                    if self.out_dir is not None:
                        save_checkpoint(self.out_dir / "best.ckpt",
                                        self._checkpoint(epoch + 1))
            self._log(record)
            history.append(record)
            if self.out_dir is not None:
                save_checkpoint(self.out_dir / "last.ckpt", self._checkpoint(epoch + 1))
            if on_epoch is not None and on_epoch(self, epoch, record):
                break
        return {
            "steps": self.step,
            "epochs_run": len(history),
            "history": history,
            "best_metric": self.best_metric,
            "wall_time_sec": time.perf_counter() - t0,
        }

    def _log(self, record: dict) -> None:
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _dump_diagnostics(self, epoch: int, batch: Batch) -> None:
        if self.out_dir is None:
            return
        dump = {
            "step": self.step, "epoch": epoch,
            "video_ids": list(batch.video_ids), "track_ids": list(batch.track_ids),
        }
        with open(self.out_dir / "diagnostic_dump.json", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(dump, sort_keys=True, indent=2) + "\n")

    # -- validation -------------------------------------------------------------

    def validate(self) -> dict:
        report, _ = evaluate_model(self.model, self.val_manifest, self.features,
                                   mode="smg")
        r1 = msg_recall_at_1(self.model, self.val_manifest, self.features)
        return {"val_miou": report.miou, "val_r1": r1}

    # -- checkpointing ------------------------------------------------------------

    def _checkpoint(self, next_epoch: int) -> Checkpoint:
        tensors = {name: p.data for name, p in self.named_params}
        for name, _ in self.named_params:
            tensors[f"adam.m.{name}"] = self.optimizer.m[name]
            tensors[f"adam.v.{name}"] = self.optimizer.v[name]
        return Checkpoint(
            model_config=self.cfg.model.to_dict(),
            tensors=tensors,
            d_max=self.train_manifest.d_max,
            step=self.step,
            epoch=next_epoch,
            rng_state=self.dropout_rng.bit_generator.state,
            best_metric=self.best_metric,
            train_config=self.cfg.to_dict(),
            meta={"adam_t": self.optimizer.t},
        )

    @classmethod
    def from_checkpoint(cls, path, train_manifest: Manifest, features: dict,
                        val_manifest: Manifest | None = None, out_dir=None) -> "Trainer":
        """Rebuild a trainer whose continued run is bit-identical to the
        uninterrupted original."""
        ckpt = load_checkpoint(path)
        if ckpt.train_config is None:
            raise FormatError("checkpoint carries no training config; cannot resume")
        cfg = TrainConfig.from_dict(ckpt.train_config)
        trainer = cls(cfg, train_manifest, features, val_manifest, out_dir)
        for name, p in trainer.named_params:
            if name not in ckpt.tensors:
                raise FormatError(f"checkpoint missing tensor '{name}'")
            if tuple(ckpt.tensors[name].shape) != p.shape:
                raise FormatError(f"checkpoint tensor '{name}' has wrong shape")
            p.data[...] = ckpt.tensors[name]
            trainer.optimizer.m[name][...] = ckpt.tensors[f"adam.m.{name}"]
            trainer.optimizer.v[name][...] = ckpt.tensors[f"adam.v.{name}"]
        trainer.optimizer.t = int(ckpt.meta.get("adam_t", ckpt.step))
        trainer.step = ckpt.step
        trainer.start_epoch = ckpt.epoch
        trainer.best_metric = ckpt.best_metric
        if ckpt.rng_state is not None:
            trainer.dropout_rng.bit_generator.state = ckpt.rng_state
        return trainer


def model_from_checkpoint(path_or_ckpt) -> tuple[GroundingModel, Checkpoint]:
    """Instantiate an eval-ready model from a checkpoint file."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) \
        else load_checkpoint(path_or_ckpt)
    config = ModelConfig.from_dict(ckpt.model_config)
    model = GroundingModel(config, seed=0, d_max=ckpt.d_max)
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise FormatError(f"checkpoint missing tensor '{name}'")
        if tuple(ckpt.tensors[name].shape) != p.shape:
            raise FormatError(f"checkpoint tensor '{name}' has wrong shape")
        p.data[...] = ckpt.tensors[name]
    return model, ckpt


# -- evaluation ----------------------------------------------------------------


def _gts_from_manifest(manifest: Manifest) -> dict:
    return {
        e.video_id: (e.track_id,
                     (e.moment_start_sec, e.moment_start_sec + e.moment_width_sec))
        for e in manifest.entries
    }


def _pad_rows(arrays: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = arrays[0].shape[1]
    max_len = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), max_len, width), dtype=arrays[0].dtype)
    mask = np.zeros((len(arrays), max_len), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return out, mask


def _forward_pairs(model: GroundingModel, batch: Batch) -> tuple[np.ndarray, ...]:
    """Eval-mode scores and denormalized moments for aligned pairs."""
    with ad.no_grad():
        fv = model.enhance_video(batch.video, mask=batch.video_mask)
        fm = model.enhance_music(batch.music, mask=batch.music_mask)
        matched = model.match(fv, fm, v_mask=batch.video_mask, m_mask=batch.music_mask)
        phi0 = model.initial_content_token(matched.h_v, matched.h0, fm, batch.music_mask)
        det = model.detect(fv, fm, phi0, v_mask=batch.video_mask,
                           m_mask=batch.music_mask,
                           video_durations=batch.video_durations)
        center, width = det.selected()
    d_max = model.d_max if model.d_max is not None else float("nan")
    starts, ends = [], []
    for i in range(batch.size):
        s, e = denormalize_moment(float(center.data[i]), float(width.data[i]),
                                  d_max, float(batch.track_durations[i]))
        starts.append(s)
        ends.append(e)
    return matched.score.data, np.asarray(starts), np.asarray(ends)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i: i + size]


class _TrackCache:
    """Per-track enhanced tokens and pooled embeddings for msg evaluation."""

    def __init__(self, model: GroundingModel, track_ids: list, features: dict):
        self.tokens: dict[str, np.ndarray] = {}
        self.h0: dict[str, np.ndarray] = {}
        self.duration: dict[str, float] = {}
        with ad.no_grad():
            for chunk in _chunks(track_ids, SCORE_CHUNK):
                raw = [features[tid].tokens for tid in chunk]
                padded, mask = _pad_rows(raw)
                enhanced = model.enhance_music(padded, mask=mask)
                pooled = model.pool(enhanced, mask)
                for i, tid in enumerate(chunk):
                    rows = raw[i].shape[0]
                    self.tokens[tid] = enhanced.data[i, :rows].copy()
                    self.h0[tid] = pooled.data[i].copy()
                    self.duration[tid] = features[tid].duration


def _score_queries(model: GroundingModel, hv: np.ndarray, cache: _TrackCache,
                   track_ids: list) -> np.ndarray:
    """Relevance of every (query, candidate) pair: (n_queries, n_tracks)."""
    out = np.zeros((hv.shape[0], len(track_ids)), dtype=np.float64)
    with ad.no_grad():
        hv_t = Tensor(hv)
        for j0 in range(0, len(track_ids), SCORE_CHUNK):
            chunk = track_ids[j0: j0 + SCORE_CHUNK]
            padded, mask = _pad_rows([cache.tokens[tid] for tid in chunk])
            h0 = np.stack([cache.h0[tid] for tid in chunk])
            sims = model.match_matrix(hv_t, Tensor(h0), Tensor(padded), mask)
            total = sims[0].data.astype(np.float64)
            for s in sims[1:]:
                total = total + s.data
            out[:, j0: j0 + len(chunk)] = total
    return out


def _decode_pairs(model: GroundingModel, pairs: list, cache: _TrackCache,
                  video_tokens: dict, video_durations: dict) -> dict:
    """Detect one moment per (query, track) pair; returns (qid, tid) -> (s, e)."""
    moments = {}
    with ad.no_grad():
        for chunk in _chunks(pairs, DECODE_BATCH):
            v_padded, v_mask = _pad_rows([video_tokens[q] for q, _ in chunk])
            m_padded, m_mask = _pad_rows([cache.tokens[t] for _, t in chunk])
            h0 = np.stack([cache.h0[t] for _, t in chunk])
            fv, fm = Tensor(v_padded), Tensor(m_padded)
            hv = model.pool(fv, v_mask)
            phi0 = model.initial_content_token(hv, Tensor(h0), fm, m_mask)
            durations = np.asarray([video_durations[q] for q, _ in chunk])
            det = model.detect(fv, fm, phi0, v_mask=v_mask, m_mask=m_mask,
                               video_durations=durations)
            center, width = det.selected()
            for i, (qid, tid) in enumerate(chunk):
                moments[(qid, tid)] = denormalize_moment(
                    float(center.data[i]), float(width.data[i]),
                    model.d_max, cache.duration[tid])
    return moments


def evaluate_model(model: GroundingModel, manifest: Manifest, features: dict,
                   mode: str) -> tuple[EvalReport, list[RankedPrediction]]:
    """Run the full evaluation protocol on one split.

    smg: grounds each ground-truth pair only (relevance ignored).
    msg: scores every candidate track per query, ranks by relevance with
    ascending-id tie-breaks, detects one moment per candidate, and reports
    retrieval and moment recall alongside mIoU on the positive pairs.
    """
    if mode not in ("smg", "msg"):
        raise ConfigError(f"mode must be 'smg' or 'msg', got '{mode}'")
    if not manifest.entries:
        raise DataError("empty evaluation split")
    if model.d_max is None:
        model.d_max = manifest.d_max
    gts = _gts_from_manifest(manifest)

    predictions = []
    if mode == "smg":
        for chunk in _chunks(manifest.entries, DECODE_BATCH):
            batch = build_batch(list(chunk), features, manifest.d_max)
            scores, starts, ends = _forward_pairs(model, batch)
            for i, entry in enumerate(chunk):
                predictions.append(RankedPrediction(
                    entry.video_id,
                    [(entry.track_id, float(scores[i]), float(starts[i]), float(ends[i]))],
                ))
    else:
        track_ids = sorted(manifest.candidate_tracks)
        if not track_ids:
            raise DataError("empty candidate track set")
        cache = _TrackCache(model, track_ids, features)
        video_tokens: dict[str, np.ndarray] = {}
        video_durations: dict[str, float] = {}
        query_ids = [e.video_id for e in manifest.entries]
        with ad.no_grad():
            hv_rows = []
            for chunk in _chunks(manifest.entries, DECODE_BATCH):
                padded, mask = _pad_rows([features[e.video_id].tokens for e in chunk])
                enhanced = model.enhance_video(padded, mask=mask)
                pooled = model.pool(enhanced, mask)
                for i, e in enumerate(chunk):
                    rows = features[e.video_id].rows
                    video_tokens[e.video_id] = enhanced.data[i, :rows].copy()
                    video_durations[e.video_id] = features[e.video_id].duration
                    hv_rows.append(pooled.data[i].copy())
        hv = np.stack(hv_rows)
        scores = _score_queries(model, hv.astype(model.dtype), cache, track_ids)
        pairs = [(qid, tid) for qid in query_ids for tid in track_ids]
        moments = _decode_pairs(model, pairs, cache, video_tokens, video_durations)
        for qi, qid in enumerate(query_ids):
            by_track = {tid: float(scores[qi, j]) for j, tid in enumerate(track_ids)}
            ranked = rank_tracks(by_track)
            items = [(tid, by_track[tid], *moments[(qid, tid)]) for tid in ranked]
            predictions.append(RankedPrediction(qid, items))

    report = build_report(mode, predictions, gts)
    return report, predictions


def msg_recall_at_1(model: GroundingModel, manifest: Manifest, features: dict) -> float:
    """Retrieval-only R@1 (no moment decoding); used for per-epoch validation."""
    track_ids = sorted(manifest.candidate_tracks)
    cache = _TrackCache(model, track_ids, features)
    with ad.no_grad():
        hv_rows = []
        for chunk in _chunks(manifest.entries, DECODE_BATCH):
            padded, mask = _pad_rows([features[e.video_id].tokens for e in chunk])
            pooled = model.pool(model.enhance_video(padded, mask=mask), mask)
            hv_rows.append(pooled.data)
        hv = np.concatenate(hv_rows, axis=0)
    scores = _score_queries(model, hv.astype(model.dtype), cache, track_ids)
    hits = 0
    for qi, entry in enumerate(manifest.entries):
        by_track = {tid: float(scores[qi, j]) for j, tid in enumerate(track_ids)}
        if rank_tracks(by_track)[0] == entry.track_id:
            hits += 1
    return 100.0 * hits / len(manifest.entries)


def predict_ranking(model: GroundingModel, video: TokenSequence,
                    tracks: list) -> RankedPrediction:
    """Rank candidate tracks for one query video and ground each of them.

    `tracks` is a list of (track_id, TokenSequence). Output moments are
    clamped to each track's duration; the ranking is independent of the
    candidate input order.
    """
    if not tracks:
        raise DataError("need at least one candidate track")
    if model.d_max is None:
        raise ConfigError("model carries no D_max normalizer; load a trained checkpoint")
    features = {tid: seq for tid, seq in tracks}
    features["__query__"] = video
    cache = _TrackCache(model, [tid for tid, _ in tracks], features)
    with ad.no_grad():
        enhanced = model.enhance_video(video.tokens[None])
        hv = model.pool(enhanced).data
        video_tokens = {"__query__": enhanced.data[0]}
    track_ids = sorted(tid for tid, _ in tracks)
    scores = _score_queries(model, hv.astype(model.dtype), cache, track_ids)
    moments = _decode_pairs(model, [("__query__", tid) for tid in track_ids], cache,
                            video_tokens, {"__query__": video.duration})
    by_track = {tid: float(scores[0, j]) for j, tid in enumerate(track_ids)}
    ranked = rank_tracks(by_track)
    items = [(tid, by_track[tid], *moments[("__query__", tid)]) for tid in ranked]
    return RankedPrediction("query", items)
