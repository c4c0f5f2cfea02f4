"""The grounding network: per-modality enhancement, mean/attention-pooled
matching, concat + self-attention fusion, and a single-query cross-attention
decoder with a sigmoid MLP head.

For one (video, music) pair the network emits a relevance score (sum of two
cosine similarities in the default configuration), and the normalized center
and width of the detected music moment. Every architecture switch studied in
the ablations is a ModelConfig field; the defaults reproduce the full setup
(1 query token, 6 decoder cross-attention layers, 2 fusion self-attention
layers, width 256, 8 heads).

Batched paths accept zero-padded token arrays with boolean validity masks;
padded rows are excluded from attention normalization and pooling, so
appending padding never changes any output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import TokenSequence, MUSIC_WIDTH, VIDEO_WIDTH
from .errors import ConfigError, DegenerateSimilarityError, ShapeError

PHI0_CHOICES = ("video", "zero", "music_mean", "music_xpool")
MATCHING_CHOICES = ("both", "mean_only", "xpool_only", "feature_add")
LOSS_MODE_CHOICES = ("joint", "single")
ENHANCEMENT_CHOICES = ("sa", "none", "mlp")
PREDICT_CHOICES = ("center_width", "center_only")


@dataclass
class ModelConfig:
    d: int = 256
    heads: int = 8
    enc_sa_layers: int = 1
    fusion_sa_layers: int = 2
    decoder_ca_layers: int = 6
    query_tokens: int = 1
    phi0_source: str = "video"
    matching_mode: str = "both"
    loss_mode: str = "joint"
    enhancement: str = "sa"
    predict: str = "center_width"
    dropout: float = 0.1
    per_layer_detection: bool = False

    def validate(self) -> None:
        if self.d < 2 or self.d % 2 != 0:
            raise ConfigError(f"embed width must be even and >= 2, got {self.d}")
        if self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.decoder_ca_layers < 1:
            raise ConfigError("need at least one decoder cross-attention layer")
        if self.enc_sa_layers < 1:
            raise ConfigError("need at least one enhancement layer (use enhancement='none')")
        if self.fusion_sa_layers < 0:
            raise ConfigError("fusion layer count cannot be negative")
        if self.query_tokens < 1:
            raise ConfigError("need at least one query token")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for value, choices, label in (
            (self.phi0_source, PHI0_CHOICES, "phi0_source"),
            (self.matching_mode, MATCHING_CHOICES, "matching_mode"),
            (self.loss_mode, LOSS_MODE_CHOICES, "loss_mode"),
            (self.enhancement, ENHANCEMENT_CHOICES, "enhancement"),
            (self.predict, PREDICT_CHOICES, "predict"),
        ):
            if value not in choices:
                raise ConfigError(f"{label} must be one of {choices}, got '{value}'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class GroundingOutput:
    """(score, center, width) for one pair: relevance p_s plus the sigmoid
    normalized moment center p_c and width p_w."""

    score: float
    center: float
    width: float


@dataclass
class MatchOutput:
    h_v: Tensor          # (B, d)
    h0: Tensor           # (B, d) mean-pooled track embedding
    h1: Tensor | None    # (B, d) attention-pooled track embedding
    sims: list           # per-mode cosine terms, each (B,)
    score: Tensor        # (B,) = sum of sims


@dataclass
class DetectOutput:
    centers: Tensor              # (B, Q)
    widths: Tensor               # (B, Q)
    confidences: Tensor | None   # (B, Q) for multi-query configs
    aux: list = field(default_factory=list)  # earlier-layer (centers, widths)

    def selected(self) -> tuple[Tensor, Tensor]:
        """Final (center, width) per pair: token 0, or the most confident one."""
        q = self.centers.shape[-1]
        if q == 1:
            return ad.select(self.centers, 0, axis=-1), ad.select(self.widths, 0, axis=-1)
        onehot = np.zeros(self.centers.shape, dtype=self.centers.dtype)
        best = np.argmax(self.confidences.data, axis=-1)
        onehot[np.arange(onehot.shape[0]), best] = 1.0
        pick = Tensor(onehot)
        return (ad.reduce_sum(ad.mul(self.centers, pick), axis=-1),
                ad.reduce_sum(ad.mul(self.widths, pick), axis=-1))


class TwoLayerMlp:
    """Enhancement ablation: replaces the self-attention block."""

    def __init__(self, d: int, dtype=None):
        self.fc1 = nn.Linear(d, d, dtype)
        self.fc2 = nn.Linear(d, d, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def named_parameters(self):
        return [(f"fc1.{n}", p) for n, p in self.fc1.named_parameters()] + \
               [(f"fc2.{n}", p) for n, p in self.fc2.named_parameters()]


class XPool:
    """Single-head attention pooling: four learnable projections, no extra
    norm. The query embedding is unit-normalized before projection so the
    pooled output (and thus the relevance score) is invariant to positive
    rescaling of the query."""

    def __init__(self, d: int, dtype=None):
        self.d = d
        self.wq = nn.Linear(d, d, dtype)
        self.wk = nn.Linear(d, d, dtype)
        self.wv = nn.Linear(d, d, dtype)
        self.wo = nn.Linear(d, d, dtype)

    def named_parameters(self):
        out = []
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out += [(f"{tag}.{n}", p) for n, p in lin.named_parameters()]
        return out


def _l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    sq = ad.reduce_sum(ad.mul(x, x), axis=axis, keepdims=True)
    if (sq.data < 1e-24).any():
        raise DegenerateSimilarityError("zero-norm embedding in cosine similarity")
    return ad.div(x, ad.sqrt(sq))


def _mask_tensor(mask: np.ndarray | None, dtype) -> Tensor | None:
    if mask is None:
        return None
    return Tensor(mask.astype(dtype))


class GroundingModel:
    """End-to-end matching + detection network (see module docstring)."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=None,
                 d_max: float | None = None):
        self.config = config or ModelConfig()
        self.config.validate()
        self.dtype = dtype or ad.DEFAULT_DTYPE
        self.d_max = d_max
        cfg = self.config
        d, heads, drop = cfg.d, cfg.heads, cfg.dropout

        self.video_proj = nn.Linear(VIDEO_WIDTH, d, self.dtype)
        self.music_proj = nn.Linear(MUSIC_WIDTH, d, self.dtype)

        self.video_enh = []
        self.music_enh = []
        self.video_mlp = None
        self.music_mlp = None
        if cfg.enhancement == "sa":
            self.video_enh = [nn.EncoderBlock(d, heads, drop, self.dtype)
                              for _ in range(cfg.enc_sa_layers)]
            self.music_enh = [nn.EncoderBlock(d, heads, drop, self.dtype)
                              for _ in range(cfg.enc_sa_layers)]
        elif cfg.enhancement == "mlp":
            self.video_mlp = TwoLayerMlp(d, self.dtype)
            self.music_mlp = TwoLayerMlp(d, self.dtype)

        needs_xpool = cfg.matching_mode in ("both", "xpool_only", "feature_add") \
            or cfg.phi0_source == "music_xpool"
        self.xpool_block = XPool(d, self.dtype) if needs_xpool else None

        self.fusion = [nn.EncoderBlock(d, heads, drop, self.dtype)
                       for _ in range(cfg.fusion_sa_layers)]
        self.decoder = [nn.DecoderBlock(d, heads, drop, self.dtype)
                        for _ in range(cfg.decoder_ca_layers)]
        self.query_pos = nn.parameter(np.zeros((cfg.query_tokens, d)), self.dtype)
        out_dim = 1 if cfg.predict == "center_only" else 2
        self.head = nn.DetectionHead(d, out_dim, self.dtype)
        self.conf_head = nn.Linear(d, 1, self.dtype) if cfg.query_tokens > 1 else None

        nn.init_parameters(self.named_parameters(), self._scheme_for, seed)

    # -- parameters ------------------------------------------------------

    @staticmethod
    def _scheme_for(name: str) -> str:
        detection = ("query_pos", "decoder.", "head.", "conf_head.")
        return nn.XAVIER if name.startswith(detection) else nn.KAIMING

    def named_parameters(self) -> list:
        out = [(f"video_proj.{n}", p) for n, p in self.video_proj.named_parameters()]
        out += [(f"music_proj.{n}", p) for n, p in self.music_proj.named_parameters()]
        for i, blk in enumerate(self.video_enh):
            out += [(f"video_enh.{i}.{n}", p) for n, p in blk.named_parameters()]
        for i, blk in enumerate(self.music_enh):
            out += [(f"music_enh.{i}.{n}", p) for n, p in blk.named_parameters()]
        if self.video_mlp is not None:
            out += [(f"video_mlp.{n}", p) for n, p in self.video_mlp.named_parameters()]
            out += [(f"music_mlp.{n}", p) for n, p in self.music_mlp.named_parameters()]
        if self.xpool_block is not None:
            out += [(f"xpool.{n}", p) for n, p in self.xpool_block.named_parameters()]
        for i, blk in enumerate(self.fusion):
            out += [(f"fusion.{i}.{n}", p) for n, p in blk.named_parameters()]
        out.append(("query_pos", self.query_pos))
        for i, blk in enumerate(self.decoder):
            out += [(f"decoder.{i}.{n}", p) for n, p in blk.named_parameters()]
        out += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        if self.conf_head is not None:
            out += [(f"conf_head.{n}", p) for n, p in self.conf_head.named_parameters()]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    # -- building blocks ---------------------------------------------------

    def _pe(self, n: int) -> Tensor:
        return nn.sinusoidal_pe(n, self.config.d, self.dtype)

    def _enhance(self, tokens, proj, blocks, mlp, width, mask, train, rng) -> Tensor:
        if not isinstance(tokens, Tensor):
            tokens = Tensor(np.asarray(tokens), dtype=self.dtype)
        if tokens.shape[-1] != width:
            raise ShapeError(f"expected token width {width}, got {tokens.shape[-1]}")
        if tokens.shape[-2] < 1:
            raise ShapeError("token sequence is empty")
        x = proj(tokens)
        if blocks:
            x = ad.add(x, self._pe(x.shape[-2]))
            for blk in blocks:
                x = blk(x, key_mask=mask, train=train, rng=rng)
        elif mlp is not None:
            x = mlp(x)
        return x

    def enhance_video(self, frames, mask=None, train=False, rng=None) -> Tensor:
        """Project 512-d frame tokens to width d and temporally enhance them."""
        return self._enhance(frames, self.video_proj, self.video_enh, self.video_mlp,
                             VIDEO_WIDTH, mask, train, rng)

    def enhance_music(self, segments, mask=None, train=False, rng=None) -> Tensor:
        """Project 768-d segment tokens to width d and temporally enhance them."""
        return self._enhance(segments, self.music_proj, self.music_enh, self.music_mlp,
                             MUSIC_WIDTH, mask, train, rng)

    def pool(self, tokens: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Mean over valid time rows: (..., n, d) -> (..., d)."""
        if mask is None:
            return ad.reduce_mean(tokens, axis=-2)
        weights = _mask_tensor(mask[..., None], tokens.dtype)
        summed = ad.reduce_sum(ad.mul(tokens, weights), axis=-2)
        counts = mask.sum(axis=-1, keepdims=True).astype(tokens.dtype)
        return ad.mul(summed, Tensor(1.0 / counts))

    def xpool(self, h_v: Tensor, segments: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Query-conditioned pooling of aligned pairs: (B,d),(B,S,d) -> (B,d).

        Attention weights are softmax of scaled query/key dot products, so
        segments closer to the video contribute more to the pooled embedding.
        """
        if self.xpool_block is None:
            raise ConfigError("this configuration does not build the attention pool")
        if segments.shape[-2] < 1:
            raise ShapeError("empty segment set")
        xp = self.xpool_block
        b, d = h_v.shape
        q = ad.reshape(xp.wq(_l2_normalize(h_v)), (b, 1, d))
        k = xp.wk(segments)
        v = xp.wv(segments)
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
        key_mask = None if mask is None else mask[:, None, :]
        attn = ad.softmax(logits, axis=-1, mask=key_mask)
        pooled = ad.reshape(ad.matmul(attn, v), (b, d))
        return xp.wo(pooled)

    def xpool_cross(self, h_v: Tensor, segments: Tensor,
                    mask: np.ndarray | None = None) -> Tensor:
        """All-pairs pooling: (Bv,d) queries x (Bm,S,d) tracks -> (Bv,Bm,d)."""
        if self.xpool_block is None:
            raise ConfigError("this configuration does not build the attention pool")
        xp = self.xpool_block
        bv, d = h_v.shape
        bm, s, _ = segments.shape
        q = ad.reshape(xp.wq(_l2_normalize(h_v)), (bv, 1, 1, d))
        k = ad.reshape(ad.transpose(xp.wk(segments), (0, 2, 1)), (1, bm, d, s))
        v = ad.reshape(xp.wv(segments), (1, bm, s, d))
        logits = ad.mul(ad.matmul(q, k), 1.0 / math.sqrt(d))
        key_mask = None if mask is None else mask[None, :, None, :]
        attn = ad.softmax(logits, axis=-1, mask=key_mask)
        pooled = ad.reshape(ad.matmul(attn, v), (bv, bm, d))
        return xp.wo(pooled)

    # -- matching ---------------------------------------------------------

    def match(self, v_tokens: Tensor, m_tokens: Tensor,
              v_mask=None, m_mask=None) -> MatchOutput:
        """Aligned-pair matching: cosine of pooled embeddings per pair."""
        if v_tokens.shape[-2] < 1 or m_tokens.shape[-2] < 1:
            raise ShapeError("matching needs non-empty token sequences")
        squeeze = v_tokens.ndim == 2
        if squeeze:
            v_tokens = ad.reshape(v_tokens, (1, *v_tokens.shape))
            m_tokens = ad.reshape(m_tokens, (1, *m_tokens.shape))
        h_v = self.pool(v_tokens, v_mask)
        h0 = self.pool(m_tokens, m_mask)
        h1 = None
        if self.xpool_block is not None:
            h1 = self.xpool(h_v, m_tokens, m_mask)
        hv_n = _l2_normalize(h_v)

        def cosine(other: Tensor) -> Tensor:
            return ad.reduce_sum(ad.mul(hv_n, _l2_normalize(other)), axis=-1)

        mode = self.config.matching_mode
        if mode == "both":
            sims = [cosine(h0), cosine(h1)]
        elif mode == "mean_only":
            sims = [cosine(h0)]
        elif mode == "xpool_only":
            sims = [cosine(h1)]
        else:  # feature_add
            sims = [cosine(ad.add(h0, h1))]
        score = sims[0]
        for s in sims[1:]:
            score = ad.add(score, s)
        return MatchOutput(h_v=h_v, h0=h0, h1=h1, sims=sims, score=score)

    def match_matrix(self, h_v: Tensor, h0: Tensor, m_tokens: Tensor,
                     m_mask=None) -> list:
        """Cross-pair similarity matrices (Bv, Bm), one per matching term."""
        hv_n = _l2_normalize(h_v)
        mode = self.config.matching_mode
        sims = []
        if mode in ("both", "mean_only"):
            sims.append(ad.matmul(hv_n, ad.transpose(_l2_normalize(h0), (1, 0))))
        if mode in ("both", "xpool_only"):
            h1 = self.xpool_cross(h_v, m_tokens, m_mask)
            hv_exp = ad.reshape(hv_n, (h_v.shape[0], 1, h_v.shape[1]))
            sims.append(ad.reduce_sum(ad.mul(hv_exp, _l2_normalize(h1)), axis=-1))
        if mode == "feature_add":
            h1 = self.xpool_cross(h_v, m_tokens, m_mask)
            h0_exp = ad.reshape(h0, (1, *h0.shape))
            combined = _l2_normalize(ad.add(h0_exp, h1))
            hv_exp = ad.reshape(hv_n, (h_v.shape[0], 1, h_v.shape[1]))
            sims.append(ad.reduce_sum(ad.mul(hv_exp, combined), axis=-1))
        return sims

    def initial_content_token(self, h_v: Tensor, h0: Tensor, m_tokens: Tensor,
                              m_mask=None) -> Tensor:
        src = self.config.phi0_source
        if src == "video":
            return h_v
        if src == "zero":
            return Tensor(np.zeros(h_v.shape), dtype=self.dtype)
        if src == "music_mean":
            return h0
        return self.xpool(h_v, m_tokens, m_mask)  # music_xpool

    # -- detection ----------------------------------------------------------

    def detect(self, v_tokens: Tensor, m_tokens: Tensor, phi0: Tensor,
               v_mask=None, m_mask=None, video_durations=None,
               train: bool = False, rng=None) -> DetectOutput:
        """Fuse both token streams and decode the moment from a query token.

        The decoder query at every layer is the shared positional token plus
        the evolving content token (phi0 at the first layer).
        """
        cfg = self.config
        if v_tokens.shape[-2] + m_tokens.shape[-2] < 2:
            raise ShapeError("need at least two fused tokens to decode")
        f_in = ad.add(v_tokens, self._pe(v_tokens.shape[-2]))
        m_in = ad.add(m_tokens, self._pe(m_tokens.shape[-2]))
        memory = ad.concat_time(f_in, m_in)
        mem_mask = None
        if v_mask is not None or m_mask is not None:
            b, fmax = v_tokens.shape[0], v_tokens.shape[1]
            smax = m_tokens.shape[1]
            vm = v_mask if v_mask is not None else np.ones((b, fmax), dtype=bool)
            mm = m_mask if m_mask is not None else np.ones((b, smax), dtype=bool)
            mem_mask = np.concatenate([vm, mm], axis=1)
        for blk in self.fusion:
            memory = blk(memory, key_mask=mem_mask, train=train, rng=rng)

        b = phi0.shape[0]
        q = cfg.query_tokens
        phi = ad.add(ad.reshape(phi0, (b, 1, cfg.d)),
                     Tensor(np.zeros((q, cfg.d)), dtype=self.dtype))
        aux = []
        for i, block in enumerate(self.decoder):
            query = ad.add(phi, self.query_pos)
            phi = block(query, memory, key_mask=mem_mask, train=train, rng=rng)
            if cfg.per_layer_detection and i < len(self.decoder) - 1:
                aux.append(self._apply_head(phi, video_durations))
        centers, widths = self._apply_head(phi, video_durations)
        conf = None
        if self.conf_head is not None:
            conf = ad.reshape(ad.sigmoid(self.conf_head(phi)), (b, q))
        return DetectOutput(centers=centers, widths=widths, confidences=conf, aux=aux)

    def _apply_head(self, phi: Tensor, video_durations) -> tuple[Tensor, Tensor]:
        out = self.head(phi)  # (B, Q, out_dim)
        centers = ad.select(out, 0, axis=-1)
        if self.config.predict == "center_width":
            widths = ad.select(out, 1, axis=-1)
        else:
            if video_durations is None or self.d_max is None:
                raise ConfigError(
                    "center-only prediction needs video durations and a D_max normalizer")
            fixed = np.asarray(video_durations, dtype=self.dtype) / self.d_max
            widths = Tensor(np.broadcast_to(fixed[:, None], centers.shape).copy(),
                            dtype=self.dtype)
        return centers, widths

    # -- single-pair entry point ---------------------------------------------

    def forward(self, video: TokenSequence, music: TokenSequence) -> GroundingOutput:
        """Score and ground one (video, music) pair in eval mode."""
        if video.cols != VIDEO_WIDTH:
            raise ShapeError(f"video tokens must be {VIDEO_WIDTH}-d, got {video.cols}")
        if music.cols != MUSIC_WIDTH:
            raise ShapeError(f"music tokens must be {MUSIC_WIDTH}-d, got {music.cols}")
        v = self.enhance_video(video.tokens[None, :, :])
        m = self.enhance_music(music.tokens[None, :, :])
        matched = self.match(v, m)
        phi0 = self.initial_content_token(matched.h_v, matched.h0, m)
        det = self.detect(v, m, phi0, video_durations=np.asarray([video.duration]))
        center, width = det.selected()
        return GroundingOutput(score=matched.score.item(),
                               center=center.item(), width=width.item())
