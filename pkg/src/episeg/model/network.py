"""Desk-scale few-shot segmenter.

Shared conv encoder (with augmentation hooks between blocks), masked average
pooling prototypes, memory re-encoding of the query feature, and a pixel-wise
two-layer decoder over ``[re-encoded ; query ; prototype]``.
"""
from dataclasses import dataclass, field

import numpy as np

from .. import augment, memory
from ..numcore import autograd as ag
from ..numcore.autograd import Tensor, as_tensor
from ..numcore.params import Params

PROB_CLIP = 1e-7


@dataclass
class EncoderConfig:
    widths: tuple = (8, 16, 32, 32)
    downsample: tuple = (2, 2, 1, 1)
    in_channels: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.downsample = tuple(int(d) for d in self.downsample)
        if len(self.widths) != len(self.downsample) or not self.widths:
            raise ValueError("widths and downsample must be non-empty and the same length")

    @property
    def num_blocks(self):
        return len(self.widths)

    @property
    def feature_dim(self):
        return self.widths[-1]

    @property
    def stride(self):
        return int(np.prod(self.downsample))

    def feature_size(self, image_size):
        return (image_size // self.stride, image_size // self.stride)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_hidden: int = 32
    ufa_enabled: bool = True
    ufa_positions: tuple = (3,)
    ufa_target: str = "query_only"
    ufa_gamma: float = augment.DEFAULT_GAMMA
    ufa_scale_mode: str = "variance"
    csm_enabled: bool = True
    csm_num_vectors: int = memory.DEFAULT_NUM_VECTORS
    csm_k: object = "all"
    csm_temperature: float = 1.0
    csm_loss_mean: bool = True
    csm_detach_features: bool = True
    csm_recon_loss: bool = True
    recon_weight: float = 1.0

    def __post_init__(self):
        self.ufa_positions = tuple(int(p) for p in self.ufa_positions)
        for p in self.ufa_positions:
            if not 0 <= p < self.encoder.num_blocks:
                raise ValueError(f"ufa position {p} out of range for {self.encoder.num_blocks} encoder blocks")
        if self.csm_k != "all" and not 1 <= int(self.csm_k) <= self.csm_num_vectors:
            raise ValueError(f"csm.k={self.csm_k} out of range for {self.csm_num_vectors} memory vectors")

    @classmethod
    def from_config(cls, cfg):
        return cls(
            encoder=EncoderConfig(cfg["model.widths"], cfg["model.downsample"]),
            decoder_hidden=cfg["model.decoder_hidden"],
            ufa_enabled=cfg["ufa.enabled"],
            ufa_positions=cfg["ufa.positions"],
            ufa_target=cfg["ufa.target"],
            ufa_gamma=cfg["ufa.gamma"],
            ufa_scale_mode=cfg["ufa.scale_mode"],
            csm_enabled=cfg["csm.enabled"],
            csm_num_vectors=cfg["csm.num_vectors"],
            csm_k=cfg["csm.k"],
            csm_temperature=cfg["csm.temperature"],
            csm_loss_mean=cfg["csm.loss_mean"],
            csm_detach_features=cfg["csm.detach_features"],
            csm_recon_loss=cfg["csm.recon_loss"],
            recon_weight=cfg["train.recon_weight"],
        )


@dataclass
class UFAContext:
    mode: str = "eval"
    rng: object = None
    enabled: bool = True
    positions: tuple = (3,)
    target: str = "query_only"
    gamma: float = augment.DEFAULT_GAMMA
    scale_mode: str = "variance"

    @classmethod
    def for_model(cls, mcfg, mode, rng=None):
        return cls(mode, rng, mcfg.ufa_enabled, mcfg.ufa_positions, mcfg.ufa_target,
                   mcfg.ufa_gamma, mcfg.ufa_scale_mode)

    @property
    def active(self):
        return self.enabled and self.mode == "train"


@dataclass
class Prediction:
    prob: Tensor  # (B, H0, W0) foreground probability at image resolution
    low: Tensor  # (B, h, w) at feature resolution


def init_params(mcfg, rng):
    """He-normal conv and dense weights, zero biases, N(0, 1/C) memory bank."""
    enc = mcfg.encoder
    p = Params()
    cin = enc.in_channels
    for i, cout in enumerate(enc.widths):
        p.add(f"encoder.block{i}.weight", rng.normal((3, 3, cin, cout)) * np.sqrt(2.0 / (9 * cin)))
        p.add(f"encoder.block{i}.bias", np.zeros(cout))
        cin = cout
    C, hid = enc.feature_dim, mcfg.decoder_hidden
    p.add("decoder.fc1.weight", rng.normal((3 * C, hid)) * np.sqrt(2.0 / (3 * C)))
    p.add("decoder.fc1.bias", np.zeros(hid))
    p.add("decoder.fc2.weight", rng.normal((hid, 2)) * np.sqrt(1.0 / hid))
    p.add("decoder.fc2.bias", np.zeros(2))
    bank = memory.init_bank(mcfg.csm_num_vectors, C, rng)
    p.add("memory.bank", bank.vectors.data)
    return p


def _block(x, params, i, factor):
    x = ag.conv2d(x, params[f"encoder.block{i}.weight"]) + params[f"encoder.block{i}.bias"]
    return ag.avg_pool(ag.relu(x), factor)


def encode(images, params, enc):
    """Single-stream encoder pass, no augmentation.  ``images`` is (B, H0, W0, ch)."""
    x = as_tensor(images)
    for i, factor in enumerate(enc.downsample):
        x = _block(x, params, i, factor)
    return x


def encode_pair(query, support, params, enc, ufa_ctx=None):
    """Encode query (B,H0,W0,ch) and support (B,K,H0,W0,ch) with shared weights.

    Both streams advance block by block so the augmentation hook after a listed
    block sees the query and support features of the same depth.
    """
    q = as_tensor(query)
    s = as_tensor(support)
    B, K = s.shape[:2]
    s = ag.reshape(s, (B * K,) + s.shape[2:])
    use_ufa = ufa_ctx is not None and ufa_ctx.active
    if use_ufa:
        bad = [p for p in ufa_ctx.positions if not 0 <= p < enc.num_blocks]
        if bad:
            raise ValueError(f"ufa positions {bad} out of range for {enc.num_blocks} blocks")
    for i, factor in enumerate(enc.downsample):
        q = _block(q, params, i, factor)
        s = _block(s, params, i, factor)
        if use_ufa and i in ufa_ctx.positions:
            s5 = ag.reshape(s, (B, K) + s.shape[1:])
            q, s5 = augment.ufa_hook(q, s5, "train", ufa_ctx.rng, ufa_ctx.target,
                                     ufa_ctx.gamma, ufa_ctx.scale_mode)
            s = ag.reshape(s5, (B * K,) + s5.shape[2:])
    return q, ag.reshape(s, (B, K) + s.shape[1:])


def prototype(f_s, mask):
    """Masked average pooling.  ``f_s`` (..., H, W, C), ``mask`` (..., H, W) at feature resolution."""
    f_s = as_tensor(f_s)
    y = np.asarray(mask, dtype=np.float64)
    count = y.sum(axis=(-2, -1))
    if np.any(count <= 0):
        raise ValueError("empty support mask")
    num = ag.sum_(f_s * y[..., None], axis=(-3, -2))
    return num / count[..., None]


def kshot_prototype(prototypes, axis=0):
    """Mean of K prototypes: a list of (C,) tensors, or one tensor stacked along ``axis``."""
    if isinstance(prototypes, (list, tuple)):
        if not prototypes:
            raise ValueError("need at least one prototype")
        prototypes = ag.stack(prototypes, axis=0)
        axis = 0
    return ag.mean(prototypes, axis=axis)


def decode(f_re, f_aug, v, params, out_size):
    """Pixel-wise MLP over the channel concatenation, foreground probability upsampled to ``out_size``."""
    f_re, f_aug, v = as_tensor(f_re), as_tensor(f_aug), as_tensor(v)
    if f_re.shape != f_aug.shape:
        raise ValueError(f"decode: feature shapes differ {f_re.shape} vs {f_aug.shape}")
    B, h, w, C = f_aug.shape
    if v.shape != (B, C):
        raise ValueError(f"decode: prototype shape {v.shape} does not match (B, C)=({B}, {C})")
    vmap = ag.broadcast_to(ag.reshape(v, (B, 1, 1, C)), (B, h, w, C))
    x = ag.reshape(ag.concat([f_re, f_aug, vmap], axis=-1), (B * h * w, 3 * C))
    hdn = ag.relu(x @ params["decoder.fc1.weight"] + params["decoder.fc1.bias"])
    logits = hdn @ params["decoder.fc2.weight"] + params["decoder.fc2.bias"]
    fg = ag.take(ag.softmax(logits, axis=1), [1], axis=1)
    low = ag.reshape(fg, (B, h, w))
    return Prediction(ag.upsample_bilinear(low, out_size), low)


def seg_loss(pred, gt):
    """Mean binary cross-entropy over all pixels; probabilities clipped to [1e-7, 1 - 1e-7]."""
    prob = pred.prob if isinstance(pred, Prediction) else as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if prob.shape != gt.shape:
        raise ValueError(f"seg_loss: shapes differ {prob.shape} vs {gt.shape}")
    p = ag.clip(prob, PROB_CLIP, 1.0 - PROB_CLIP)
    ll = ag.log(p) * gt + ag.log(1.0 - p) * (1.0 - gt)
    return -ag.mean(ll)


def total_loss(seg, recon, recon_weight=1.0):
    if recon is None:
        return as_tensor(seg)
    return as_tensor(seg) + as_tensor(recon) * recon_weight


@dataclass
class ForwardResult:
    pred: Prediction
    seg: Tensor = None
    recon: Tensor = None
    loss: Tensor = None
    query_mask_low: np.ndarray = None


def _recon_batch(f, f_re, masks, mean):
    """Mean over maps of the per-map reconstruction loss; ``f`` is (M, h, w, C)."""
    terms = [memory.recon_loss(ag.index(f, i), ag.index(f_re, i), masks[i], mean=mean)
             for i in range(f.shape[0])]
    return ag.mean(ag.stack(terms))


def forward(params, mcfg, query_img, support_img, support_mask, query_mask=None,
            mode="eval", rng=None, with_recon=None):
    """Run the whole network on a batch of episodes.

    query_img (B,H0,W0,ch), support_img (B,K,H0,W0,ch), support_mask (B,K,H0,W0),
    query_mask (B,H0,W0) or None.  Losses are computed when ``query_mask`` is given.
    The reconstruction term is on by default in train mode only.
    """
    enc = mcfg.encoder
    H0, W0 = np.shape(query_img)[1:3]
    ctx = UFAContext.for_model(mcfg, mode, rng)
    f_q, f_s = encode_pair(query_img, support_img, params, enc, ctx)
    B, K, h, w, C = f_s.shape
    ys = memory.downsample_mask(np.asarray(support_mask), (h, w))
    v = kshot_prototype(prototype(f_s, ys), axis=1)

    bank = params["memory.bank"]
    if mcfg.csm_enabled:
        f_re = memory.reencode(f_q, bank, mcfg.csm_k, mcfg.csm_temperature)
    else:
        f_re = f_q
    pred = decode(f_re, f_q, v, params, (H0, W0))
    out = ForwardResult(pred)
    if query_mask is None:
        return out

    yq = memory.downsample_mask(np.asarray(query_mask), (h, w))
    out.query_mask_low = yq
    out.seg = seg_loss(pred, query_mask)
    if with_recon is None:
        with_recon = mode == "train"
    if mcfg.csm_enabled and mcfg.csm_recon_loss and with_recon:
        fq_src, fs_src = f_q, ag.reshape(f_s, (B * K, h, w, C))
        fq_re = f_re
        if mcfg.csm_detach_features:
            fq_src, fs_src = ag.stop_gradient(fq_src), ag.stop_gradient(fs_src)
            fq_re = memory.reencode(fq_src, bank, mcfg.csm_k, mcfg.csm_temperature)
        fs_re = memory.reencode(fs_src, bank, mcfg.csm_k, mcfg.csm_temperature)
        out.recon = (_recon_batch(fq_src, fq_re, yq, mcfg.csm_loss_mean)
                     + _recon_batch(fs_src, fs_re, ys.reshape(B * K, h, w), mcfg.csm_loss_mean) * float(K))
    out.loss = total_loss(out.seg, out.recon, mcfg.recon_weight)
    return out
