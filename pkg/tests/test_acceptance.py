"""Acceptance gate: one test per criterion, each printing a PASS line.

The training probes (overfit, generalization, ablation ordering) train real
models and are marked slow; `pytest` runs everything, `-m "not slow"` skips
them during development.
"""

import time
from pathlib import Path

import numpy as np
import pytest

import acceptance_report
from gradcheck import check_gradients

import mgsv.autodiff as ad
import mgsv.losses as L
import mgsv.metrics as M
import mgsv.nn as nn
from mgsv.data import (Manifest, SynthConfig, load_split, manifest_path,
                       synth_generate)
from mgsv.model import GroundingModel, ModelConfig
from mgsv.train import (TrainConfig, Trainer, evaluate_model, model_from_checkpoint,
                        msg_recall_at_1)

RNG_SEED = 20240
N_FD_INSTANCES = 20
FD_TOL = 1e-4


def _report(name: str, detail: str = "") -> None:
    # recorded here, printed by conftest's terminal-summary hook
    suffix = f"  ({detail})" if detail else ""
    acceptance_report.record(f"ACCEPTANCE {name}: PASS{suffix}")


def _merged_manifest(root) -> tuple[Manifest, dict]:
    """All splits merged back into one training manifest + features."""
    entries, cands, d_max = [], None, None
    features = {}
    for split in ("train", "val", "test"):
        manifest = Manifest.load(manifest_path(root, split))
        entries.extend(manifest.entries)
        cands, d_max = manifest.candidate_tracks, manifest.d_max
        _, feats = load_split(root, split)
        features.update(feats)
    entries.sort(key=lambda e: e.video_id)
    return Manifest("train", entries, cands, d_max), features


# -- criterion 1: gradient correctness ---------------------------------------


def _block_cases(rng):
    """(name, build_loss, arrays) for every differentiable block."""
    d, heads = 8, 2

    def with_f64(block):
        for _, p in block.named_parameters():
            p.data = p.data.astype(np.float64)
        return block

    def linear_case():
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=(2,))

        def build(ts):
            layer = nn.Linear(4, 2, dtype=np.float64)
            layer.weight, layer.bias = ts[1], ts[2]
            return ad.reduce_sum(ad.mul(nn.linear(ts[0], layer), 0.7))
        return build, [x, w, b]

    def mha_case():
        q = rng.normal(size=(2, d))
        kv = rng.normal(size=(3, d))

        def build(ts):
            blk = with_f64(nn.MultiHeadAttention(d, heads, dtype=np.float64))
            nn.init_parameters(blk.named_parameters(), lambda n: nn.KAIMING, 5)
            out = blk(ts[0], ts[1], ts[1])
            return ad.reduce_sum(ad.mul(out, out))
        return build, [q, kv]

    def encoder_case():
        x = rng.normal(size=(3, d))
        w = rng.normal(size=(3, d))  # weighted readout: post-norm rows sum to ~0

        def build(ts):
            blk = with_f64(nn.EncoderBlock(d, heads, dtype=np.float64))
            nn.init_parameters(blk.named_parameters(), lambda n: nn.KAIMING, 6)
            return ad.reduce_sum(ad.mul(blk(ts[0]), w))
        return build, [x]

    def decoder_case():
        q = rng.normal(size=(1, d))
        mem = rng.normal(size=(4, d))
        w = rng.normal(size=(1, d))

        def build(ts):
            blk = with_f64(nn.DecoderBlock(d, heads, dtype=np.float64))
            nn.init_parameters(blk.named_parameters(), lambda n: nn.XAVIER, 7)
            return ad.reduce_sum(ad.mul(blk(ts[0], ts[1]), w))
        return build, [q, mem]

    def head_case():
        phi = rng.normal(size=(2, d))

        def build(ts):
            head = with_f64(nn.DetectionHead(d, dtype=np.float64))
            nn.init_parameters(head.named_parameters(), lambda n: nn.XAVIER, 8)
            return ad.reduce_sum(head(ts[0]))
        return build, [phi]

    def xpool_case():
        hv = rng.normal(size=(2, d))
        segs = rng.normal(size=(2, 3, d))

        def build(ts):
            model = GroundingModel(ModelConfig(d=d, heads=heads, fusion_sa_layers=1,
                                               decoder_ca_layers=1),
                                   seed=4, dtype=np.float64)
            out = model.xpool(ts[0], ts[1])
            return ad.reduce_sum(ad.mul(out, out))
        return build, [hv, segs]

    def matching_loss_case():
        s0 = rng.normal(size=(3, 3))
        s1 = rng.normal(size=(3, 3))
        log_scale = np.asarray(rng.normal())

        def build(ts):
            tau = ad.div(1.0, ad.minimum(ad.exp(ts[2]), 100.0))
            return L.matching_loss([ts[0], ts[1]], tau)
        return build, [s0, s1, log_scale]

    def detection_loss_case():
        pc = rng.uniform(0.25, 0.75, size=(4,))
        pw = rng.uniform(0.08, 0.35, size=(4,))
        tc = rng.uniform(0.25, 0.75, size=(4,))
        tw = rng.uniform(0.08, 0.35, size=(4,))

        def build(ts):
            return L.detection_loss((ts[0], ts[1]), (tc, tw))
        return build, [pc, pw]

    return [
        ("linear", linear_case), ("mha", mha_case), ("encoder_block", encoder_case),
        ("decoder_block", decoder_case), ("mlp_head", head_case),
        ("xpool", xpool_case), ("matching_loss", matching_loss_case),
        ("detection_loss", detection_loss_case),
    ]


def test_gradient_correctness():
    """Every differentiable block and both losses pass f64 central
    finite-difference checks (h=1e-5, rel err < 1e-4, >=20 instances each)."""
    rng = np.random.default_rng(RNG_SEED)
    t0 = time.perf_counter()
    worst = {}
    for name, case in _block_cases(rng):
        errs = []
        for _ in range(N_FD_INSTANCES):
            build, arrays = case()
            errs.append(check_gradients(build, arrays, rel_tol=FD_TOL))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s (>= 2 min)"
    overall = max(worst.values())
    assert overall < FD_TOL
    _report("gradient-correctness",
            f"max rel err {overall:.2e} over {N_FD_INSTANCES} instances/block, "
            f"{elapsed:.1f}s")


# -- criterion 2: gIoU / IoU oracle -------------------------------------------


def _oracle_interval(rng):
    start = rng.uniform(0.0, 40.0)
    width = rng.uniform(0.01, 20.0)
    return start, start + width


def test_giou_iou_oracle():
    """1,000 random interval pairs match an independent reference to 1e-9;
    the property suite has zero violations."""
    rng = np.random.default_rng(RNG_SEED + 1)
    violations = 0
    for _ in range(1000):
        s1, e1 = _oracle_interval(rng)
        s2, e2 = _oracle_interval(rng)
        inter = max(0.0, min(e1, e2) - max(s1, s2))
        union = (e1 - s1) + (e2 - s2) - inter
        ref_iou = inter / union
        hull = max(e1, e2) - min(s1, s2)
        ref_giou = ref_iou - (hull - union) / hull

        got_iou = M.iou_1d((s1, e1), (s2, e2))
        a = ((s1 + e1) / 2.0, e1 - s1)
        b = ((s2 + e2) / 2.0, e2 - s2)
        got_giou = L.giou_1d(a, b).item()

        assert abs(got_iou - ref_iou) < 1e-9
        assert abs(got_giou - ref_giou) < 1e-9
        symmetric = L.giou_1d(b, a).item()
        touching = min(e1, e2) >= max(s1, s2)
        if not (abs(symmetric - got_giou) < 1e-12
                and got_giou <= got_iou + 1e-12
                and -1.0 < got_giou <= 1.0
                and (not touching or abs(got_giou - got_iou) < 1e-12)):
            violations += 1
    assert violations == 0
    _report("giou-iou-oracle", "1000 pairs to 1e-9, 0 property violations")


# -- criterion 3: metric oracle -------------------------------------------------


def test_metric_oracle():
    """R@k and MoR@k agree exactly with brute-force references on 500 random
    instances, including the strict IoU>0.7 boundary."""
    rng = np.random.default_rng(RNG_SEED + 2)
    checked = 0
    for _ in range(500):
        n_tracks = int(rng.integers(3, 12))
        tracks = [f"t{j:03d}" for j in range(n_tracks)]
        scores = {t: round(float(rng.uniform()), 1) for t in tracks}
        moments = {}
        for t in tracks:
            start = float(rng.uniform(0, 30))
            moments[t] = (start, start + float(rng.uniform(0.5, 20)))
        gt_track = tracks[int(rng.integers(n_tracks))]
        gstart = float(rng.uniform(0, 30))
        gt_moment = (gstart, gstart + float(rng.uniform(0.5, 20)))

        gt_score = scores[gt_track]
        brute_rank = sum(
            1 for t, s in scores.items()
            if t != gt_track and (s > gt_score or (s == gt_score and t < gt_track))
        )
        inter = max(0.0, min(moments[gt_track][1], gt_moment[1])
                    - max(moments[gt_track][0], gt_moment[0]))
        union = (moments[gt_track][1] - moments[gt_track][0]) \
            + (gt_moment[1] - gt_moment[0]) - inter
        brute_hit_iou = inter / union > 0.7

        rankings = {"q": M.rank_tracks(scores)}
        gts = {"q": (gt_track, gt_moment)}
        for k in (1, 2, 5, n_tracks, 50):
            r = M.recall_at_k(rankings, {"q": gt_track}, k)
            assert r == (100.0 if brute_rank < k else 0.0)
            mor = M.moment_recall_at_k(rankings, {"q": moments}, gts, k)
            assert mor == (100.0 if (brute_rank < k and brute_hit_iou) else 0.0)
            checked += 1

    # strict boundary: IoU exactly 0.7 is excluded
    rankings = {"q": ["g"]}
    moments = {"q": {"g": (0.0, 7.0)}}
    gts = {"q": ("g", (0.0, 10.0))}
    assert M.iou_1d((0.0, 7.0), (0.0, 10.0)) == 0.7
    assert M.moment_recall_at_k(rankings, moments, gts, 1) == 0.0
    _report("metric-oracle", f"500 instances exact ({checked} k-checks), "
                             "IoU=0.7 boundary excluded")


# -- criterion 4: overfit probe --------------------------------------------------

OVERFIT_MAX_STEPS = 2000
OVERFIT_TIME_BUDGET_SEC = 600.0
OVERFIT_EPOCHS = 600  # schedule length; the probe stops at the thresholds
OVERFIT_LR = 3e-4
OVERFIT_CHECK_FROM = 300


@pytest.mark.slow
def test_overfit_probe(tmp_path):
    """Default config reaches train mIoU >= 0.90 and train R@1 >= 95% on the
    32-pair / 8-track seed-0 set within 2,000 steps, < 10 min on CPU."""
    root = tmp_path / "overfit"
    synth_generate(SynthConfig(n_tracks=8, videos_per_track=4, seed=0,
                               track_duration_range=(60.0, 80.0),
                               video_duration_range=(10.0, 14.0)), root)
    manifest, features = _merged_manifest(root)
    assert len(manifest.entries) == 32
    assert len(manifest.candidate_tracks) == 8

    cfg = TrainConfig(epochs=OVERFIT_EPOCHS, batch_size=32, seed=0, lr=OVERFIT_LR,
                      model=ModelConfig())
    trainer = Trainer(cfg, manifest, features)
    assert trainer.steps_per_epoch == 1
    t0 = time.perf_counter()
    achieved = {}

    def check(tr, epoch, record):
        if tr.step < OVERFIT_CHECK_FROM or (epoch + 1) % 25 != 0:
            return False
        report, _ = evaluate_model(tr.model, manifest, features, "smg")
        r1 = msg_recall_at_1(tr.model, manifest, features)
        if report.miou >= 0.90 and r1 >= 95.0:
            achieved.update(step=tr.step, miou=report.miou, r1=r1)
            return True
        return tr.step >= OVERFIT_MAX_STEPS

    trainer.run(on_epoch=check)
    elapsed = time.perf_counter() - t0
    assert achieved, "thresholds not reached within 2,000 steps"
    assert achieved["step"] <= OVERFIT_MAX_STEPS
    assert elapsed < OVERFIT_TIME_BUDGET_SEC, f"probe took {elapsed:.0f}s"
    _report("overfit-probe",
            f"mIoU {achieved['miou']:.3f}, R@1 {achieved['r1']:.0f}% "
            f"at step {achieved['step']}, {elapsed:.0f}s")


# -- criterion 5: generalization probe ---------------------------------------------

GEN_EPOCHS = 10
GEN_BATCH = 64
GEN_SEED = 0


def _random_placement_miou(manifest: Manifest, n_samples: int = 100000) -> float:
    """Monte-Carlo oracle: expected mIoU of uniformly placed same-width
    moments, averaged over the split's queries."""
    rng = np.random.default_rng(123)
    per_query = max(1, n_samples // len(manifest.entries))
    total = 0.0
    for entry in manifest.entries:
        width = entry.moment_width_sec
        gt = (entry.moment_start_sec, entry.moment_start_sec + width)
        starts = rng.uniform(0.0, entry.track_duration - width, size=per_query)
        inter = np.maximum(
            0.0, np.minimum(gt[1], starts + width) - np.maximum(gt[0], starts))
        union = 2 * width - inter
        total += float(np.mean(inter / union))
    return total / len(manifest.entries)


@pytest.mark.slow
def test_generalization_probe(tmp_path):
    """On a 2,000-pair / 100-track set, held-out mIoU beats the random
    placement baseline by >= 3x and R@1 beats 1% chance by >= 10x."""
    root = tmp_path / "gen"
    synth_generate(SynthConfig(n_tracks=100, videos_per_track=20, seed=GEN_SEED,
                               track_duration_range=(60.0, 90.0),
                               video_duration_range=(10.0, 15.0)), root)
    train_m, features = load_split(root, "train")
    val_m, val_feats = load_split(root, "val")
    test_m, test_feats = load_split(root, "test")
    features.update(val_feats)
    features.update(test_feats)
    assert len(train_m.entries) + len(val_m.entries) + len(test_m.entries) == 2000
    assert len(train_m.candidate_tracks) == 100

    cfg = TrainConfig(epochs=GEN_EPOCHS, batch_size=GEN_BATCH, seed=GEN_SEED, lr=1e-4,
                      val_every=5, model=ModelConfig())
    trainer = Trainer(cfg, train_m, features, val_m, out_dir=tmp_path / "run")
    trainer.run()

    model, _ = model_from_checkpoint(tmp_path / "run" / "best.ckpt")
    report, _ = evaluate_model(model, test_m, features, "msg")

    baseline = _random_placement_miou(test_m)
    chance_r1 = 100.0 / len(test_m.candidate_tracks)
    assert report.miou >= 3.0 * baseline, \
        f"held-out mIoU {report.miou:.3f} < 3 x baseline {baseline:.3f}"
    assert report.recall_at[1] >= 10.0 * chance_r1, \
        f"held-out R@1 {report.recall_at[1]:.1f}% < 10 x chance {chance_r1:.1f}%"
    _report("generalization-probe",
            f"mIoU {report.miou:.3f} vs baseline {baseline:.3f} "
            f"({report.miou / baseline:.1f}x), R@1 {report.recall_at[1]:.1f}% vs "
            f"chance {chance_r1:.1f}% ({report.recall_at[1] / chance_r1:.1f}x)")


# -- criterion 6: ablation direction check ---------------------------------------

ABLATION_SEEDS = (0, 1, 2)
ABLATION_EPOCHS = 20
ABLATION_NOISE_FLOOR = 5.0  # MoR@1 percentage points on a small held-out split


@pytest.mark.slow
def test_ablation_direction(tmp_path):
    """Zero initial-content-token and single-loss configs never beat the
    default's held-out MoR@1 by more than noise (3 seeds each)."""
    root = tmp_path / "abl"
    synth_generate(SynthConfig(n_tracks=16, videos_per_track=15, seed=1,
                               track_duration_range=(60.0, 90.0),
                               video_duration_range=(10.0, 15.0)), root)
    train_m, features = load_split(root, "train")
    test_m, test_feats = load_split(root, "test")
    features.update(test_feats)

    variants = {
        "default": ModelConfig(),
        "phi0_zero": ModelConfig(phi0_source="zero"),
        "single_loss": ModelConfig(loss_mode="single"),
    }
    mor1 = {name: [] for name in variants}
    for name, model_cfg in variants.items():
        for seed in ABLATION_SEEDS:
            cfg = TrainConfig(epochs=ABLATION_EPOCHS, batch_size=32, seed=seed,
                              lr=1e-4, model=model_cfg)
            trainer = Trainer(cfg, train_m, features)
            trainer.run()
            report, _ = evaluate_model(trainer.model, test_m, features, "msg")
            mor1[name].append(report.moment_recall_at[1])

    means = {name: float(np.mean(vals)) for name, vals in mor1.items()}
    spread = max(float(np.std(vals)) for vals in mor1.values())
    noise = max(2.0 * spread, ABLATION_NOISE_FLOOR)
    for alt in ("phi0_zero", "single_loss"):
        assert means[alt] <= means["default"] + noise, \
            f"{alt} MoR@1 {means[alt]:.1f} beats default {means['default']:.1f} " \
            f"by more than noise {noise:.1f}"
    _report("ablation-direction",
            f"MoR@1 default {means['default']:.1f} vs phi0_zero "
            f"{means['phi0_zero']:.1f} / single_loss {means['single_loss']:.1f}, "
            f"noise {noise:.1f}")


# -- criterion 7: determinism -------------------------------------------------------


@pytest.mark.slow
def test_determinism_and_resume(tmp_path):
    """Identical seeds give byte-identical reports; checkpoint resume is
    bit-exact against the uninterrupted run."""
    root = tmp_path / "det"
    synth_generate(SynthConfig(n_tracks=6, videos_per_track=5, seed=2,
                               track_duration_range=(60.0, 90.0),
                               video_duration_range=(10.0, 15.0)), root)
    train_m, features = load_split(root, "train")
    val_m, val_feats = load_split(root, "val")
    features.update(val_feats)
    cfg_dict = dict(epochs=4, batch_size=8, seed=5,
                    model=ModelConfig(d=32, heads=4, fusion_sa_layers=2,
                                      decoder_ca_layers=3))

    report_bytes = []
    for tag in ("a", "b"):
        trainer = Trainer(TrainConfig(**cfg_dict), train_m, features, val_m,
                          out_dir=tmp_path / tag)
        trainer.run()
        report, _ = evaluate_model(trainer.model, val_m, features, "msg")
        path = tmp_path / tag / "report.json"
        report.save(path)
        report_bytes.append(path.read_bytes())
    assert report_bytes[0] == report_bytes[1]

    full = Trainer(TrainConfig(**cfg_dict), train_m, features, val_m,
                   out_dir=tmp_path / "full")
    full.run()
    part = Trainer(TrainConfig(**cfg_dict), train_m, features, val_m,
                   out_dir=tmp_path / "part")
    part.run(on_epoch=lambda tr, epoch, rec: epoch == 1)
    resumed = Trainer.from_checkpoint(tmp_path / "part" / "last.ckpt",
                                      train_m, features, val_m,
                                      out_dir=tmp_path / "resumed")
    resumed.run()
    for (na, pa), (_, pb) in zip(full.named_params, resumed.named_params):
        assert np.array_equal(pa.data, pb.data), f"parameter {na} diverged"
    _report("determinism", "byte-identical reports; bit-exact resume")


# -- criterion 8: published-number status ------------------------------------------------


def test_published_number_status():
    """The published benchmark numbers are documented as NOT reproducible at
    desk scale and nothing in this suite asserts them."""
    readme = (Path(__file__).parent.parent / "README.md").read_text(encoding="utf-8")
    assert "not reproducible" in readme.lower()
    for number in ("0.722", "8.8", "8.3"):
        assert number in readme, f"documented headline number {number} missing"
    disclaimer_idx = readme.lower().index("not reproducible")
    numbers_idx = readme.index("0.722")
    assert abs(numbers_idx - disclaimer_idx) < 500, \
        "headline numbers not tied to the non-reproducibility disclaimer"
    _report("published-number-status", "documented as not reproducible; "
            "replaced by the property suite above")
