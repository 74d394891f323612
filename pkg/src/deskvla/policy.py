"""Compact visuomotor policy: pixel-shuffle tokenizer, a small pre-norm
transformer with gated MLPs, and a projection head over the action verbs.

LoRA adapters sit on the query, key, value, output, and gating projections;
everything else is frozen.  Two execution paths exist:

* the reference path (this module, numpy): full precision, adapters applied
  unmerged as stored in checkpoints, with a manual backward pass for training;
* the engine path (kernels backend): merged, quantized weights streamed
  through the compiled dequantizing matmuls for deployment.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from . import grammar
from .kernels import impl as default_backend
from .lora import AdaptedLinear, LoRAAdapter, dropout_mask
from .quant import _LEVELS_F32, NF4Tensor, double_quantize_scales, quantize_nf4

LN_EPS = 1e-5

# verb -> (magnitude, duration seconds); magnitudes are m/s for translation
# verbs and rad/s for turns
DEFAULT_ACTION_TABLE = {
    "forward": (0.2, 3.0),
    "backward": (0.2, 3.0),
    "turn_left": (0.1, 2.5),
    "turn_right": (0.1, 2.5),
    "stop": (0.0, 0.5),
}


class PrecisionMode(str, Enum):
    FP32 = "fp32"
    HYBRID = "hybrid"      # NF4 backbone + full-precision projection head
    FULL_NF4 = "nf4"


@dataclass(frozen=True)
class PolicyConfig:
    image_size: int = 32          # desk-scale default; 224 at paper scale
    channels: int = 3
    shuffle_factor: int = 4
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    mlp_hidden: int = 128
    action_vocab: tuple = tuple(grammar.VERBS)
    magnitude_table: dict = field(default_factory=lambda: dict(DEFAULT_ACTION_TABLE))
    default_duration: float = 3.0
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_dropout: float = 0.1
    seed: int = 0
    norm_mean: tuple = (0.5, 0.5, 0.5)   # per-channel stats applied at inference
    norm_std: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.image_size % self.shuffle_factor != 0:
            raise ValueError("image_size must be divisible by shuffle_factor")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.action_vocab) < 2 or "stop" not in self.action_vocab:
            raise ValueError("action_vocab needs >= 2 entries including 'stop'")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.shuffle_factor

    @property
    def n_tokens(self) -> int:
        return self.tokens_per_side ** 2

    @property
    def token_dim(self) -> int:
        return self.channels * self.shuffle_factor ** 2

    @property
    def n_actions(self) -> int:
        return len(self.action_vocab)

    def to_meta(self) -> dict:
        return {
            "image_size": self.image_size, "channels": self.channels,
            "shuffle_factor": self.shuffle_factor, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "mlp_hidden": self.mlp_hidden, "action_vocab": list(self.action_vocab),
            "magnitude_table": {k: list(v) for k, v in self.magnitude_table.items()},
            "default_duration": self.default_duration,
            "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout, "seed": self.seed,
            "norm_mean": list(self.norm_mean), "norm_std": list(self.norm_std),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "PolicyConfig":
        kw = dict(meta)
        kw["action_vocab"] = tuple(kw["action_vocab"])
        kw["magnitude_table"] = {k: tuple(v) for k, v in kw["magnitude_table"].items()}
        kw["norm_mean"] = tuple(kw["norm_mean"])
        kw["norm_std"] = tuple(kw["norm_std"])
        return cls(**kw)


def pixel_shuffle_tokenize(img: np.ndarray, factor: int) -> np.ndarray:
    """Space-to-depth: (..., H, W, C) -> (..., H*W/f^2, C*f^2); lossless."""
    img = np.asarray(img)
    *lead, h, w, c = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image dims ({h}, {w}) not divisible by factor {factor}")
    hs, ws = h // factor, w // factor
    t = img.reshape(*lead, hs, factor, ws, factor, c)
    t = np.moveaxis(t, -4, -3)  # (..., hs, ws, factor, factor, c)
    return np.ascontiguousarray(t.reshape(*lead, hs * ws, factor * factor * c))


def pixel_unshuffle(tokens: np.ndarray, factor: int, height: int, width: int,
                    channels: int) -> np.ndarray:
    """Exact inverse of pixel_shuffle_tokenize."""
    tokens = np.asarray(tokens)
    *lead, n, d = tokens.shape
    hs, ws = height // factor, width // factor
    if n != hs * ws or d != channels * factor * factor:
        raise ValueError("token geometry does not match the target image shape")
    t = tokens.reshape(*lead, hs, ws, factor, factor, channels)
    t = np.moveaxis(t, -3, -4)  # (..., hs, factor, ws, factor, c)
    return np.ascontiguousarray(t.reshape(*lead, height, width, channels))


def sinusoidal_positions(n_tokens: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_tokens)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    out = np.zeros((n_tokens, d_model), dtype=np.float32)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


@dataclass
class TransformerBlock:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    q: AdaptedLinear
    k: AdaptedLinear
    v: AdaptedLinear
    o: AdaptedLinear
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    gate: AdaptedLinear
    up_w: np.ndarray    # (hidden, d)
    down_w: np.ndarray  # (d, hidden)

    def adapted(self):
        return {"attn.q": self.q, "attn.k": self.k, "attn.v": self.v,
                "attn.o": self.o, "mlp.gate": self.gate}


def _ln_forward(x, g, b):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return (xhat * g + b).astype(np.float32), (xhat.astype(np.float32),
                                               inv.astype(np.float32))

def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx.astype(np.float32)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class VisuomotorPolicy:
    """Trainable full-precision policy (reference math path)."""

    def __init__(self, config: PolicyConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        d, hid, tok = cfg.d_model, cfg.mlp_hidden, cfg.token_dim

        def dense(dout, din):
            return (rng.standard_normal((dout, din)) / np.sqrt(din)).astype(np.float32)

        def adapted(dout, din):
            return AdaptedLinear(
                base=dense(dout, din),
                adapter=LoRAAdapter.create(din, dout, rank=cfg.lora_rank,
                                           alpha=cfg.lora_alpha,
                                           dropout_p=cfg.lora_dropout, rng=rng))

        self.embed_w = dense(d, tok)
        self.embed_b = np.zeros(d, dtype=np.float32)
        self.pos = sinusoidal_positions(cfg.n_tokens, d)
        self.blocks = []
        for _ in range(cfg.n_layers):
            self.blocks.append(TransformerBlock(
                ln1_g=np.ones(d, dtype=np.float32), ln1_b=np.zeros(d, dtype=np.float32),
                q=adapted(d, d), k=adapted(d, d), v=adapted(d, d), o=adapted(d, d),
                ln2_g=np.ones(d, dtype=np.float32), ln2_b=np.zeros(d, dtype=np.float32),
                gate=adapted(hid, d), up_w=dense(hid, d), down_w=dense(d, hid)))
        self.lnf_g = np.ones(d, dtype=np.float32)
        self.lnf_b = np.zeros(d, dtype=np.float32)
        self.head_w = dense(cfg.n_actions, d)
        self.head_b = np.zeros(cfg.n_actions, dtype=np.float32)

    # ---- parameter plumbing -------------------------------------------------

    def adapters(self):
        """Ordered {qualified name: (AdaptedLinear)} over all LoRA sites."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.adapted().items():
                out[f"layers.{i}.{name}"] = layer
        return out

    def base_tensors(self):
        """Ordered {name: array} of frozen parameters (checkpoint layout)."""
        t = {"embed.weight": self.embed_w, "embed.bias": self.embed_b}
        for i, blk in enumerate(self.blocks):
            p = f"layers.{i}"
            t[f"{p}.ln1.gamma"] = blk.ln1_g
            t[f"{p}.ln1.beta"] = blk.ln1_b
            for name, layer in blk.adapted().items():
                t[f"{p}.{name}.base"] = layer.base
            t[f"{p}.ln2.gamma"] = blk.ln2_g
            t[f"{p}.ln2.beta"] = blk.ln2_b
            t[f"{p}.mlp.up.weight"] = blk.up_w
            t[f"{p}.mlp.down.weight"] = blk.down_w
        t["ln_f.gamma"] = self.lnf_g
        t["ln_f.beta"] = self.lnf_b
        t["head.weight"] = self.head_w
        t["head.bias"] = self.head_b
        return t

    def snapshot_adapters(self):
        return {name: (layer.adapter.a.copy(), layer.adapter.b.copy())
                for name, layer in self.adapters().items()}

    # ---- forward / backward -------------------------------------------------

    def _adapted_forward(self, layer, x, training, rng, caches, name):
        ad = layer.adapter
        if training and ad.dropout_p > 0.0:
            mask = dropout_mask(x.shape, ad.dropout_p, rng)
            xd = x * mask
        else:
            mask, xd = None, x
        y = x @ layer.base.T + np.float32(ad.scaling) * ((xd @ ad.a.T) @ ad.b.T)
        if caches is not None:
            caches[name] = {"xd": xd, "mask": mask, "layer": layer}
        return y.astype(np.float32)

    def forward(self, images: np.ndarray, training: bool = False,
                rng: Optional[np.random.Generator] = None, want_cache: bool = False):
        """images: (N, H, W, C) normalized float32.  Returns logits (N, A)
        and, when requested, the cache for backward()."""
        cfg = self.config
        imgs = np.asarray(images, dtype=np.float32)
        single = imgs.ndim == 3
        if single:
            imgs = imgs[None]
        tokens = pixel_shuffle_tokenize(imgs, cfg.shuffle_factor)
        x = tokens @ self.embed_w.T + self.embed_b + self.pos
        x = x.astype(np.float32)
        N, T, d = x.shape
        nh, hd = cfg.n_heads, d // cfg.n_heads
        inv_sqrt = np.float32(1.0 / np.sqrt(hd))
        cache = {"blocks": [], "N": N} if (want_cache or training) else None

        for bi, blk in enumerate(self.blocks):
            bc = {} if cache is not None else None
            ad_caches = {} if cache is not None else None
            h, ln1c = _ln_forward(x, blk.ln1_g, blk.ln1_b)
            q = self._adapted_forward(blk.q, h, training, rng, ad_caches, "q")
            k = self._adapted_forward(blk.k, h, training, rng, ad_caches, "k")
            v = self._adapted_forward(blk.v, h, training, rng, ad_caches, "v")
            qh = q.reshape(N, T, nh, hd).transpose(0, 2, 1, 3)
            kh = k.reshape(N, T, nh, hd).transpose(0, 2, 1, 3)
            vh = v.reshape(N, T, nh, hd).transpose(0, 2, 1, 3)
            scores = (qh @ kh.transpose(0, 1, 3, 2)) * inv_sqrt
            scores -= scores.max(axis=-1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=-1, keepdims=True)
            a = (scores @ vh).transpose(0, 2, 1, 3).reshape(N, T, d)
            a = np.ascontiguousarray(a)
            o = self._adapted_forward(blk.o, a, training, rng, ad_caches, "o")
            x1 = x + o
            h2, ln2c = _ln_forward(x1, blk.ln2_g, blk.ln2_b)
            g = self._adapted_forward(blk.gate, h2, training, rng, ad_caches, "gate")
            u = (h2 @ blk.up_w.T).astype(np.float32)
            sig = _sigmoid(g)
            m = (g * sig * u).astype(np.float32)
            x = (x1 + m @ blk.down_w.T).astype(np.float32)
            if cache is not None:
                bc.update(ln1=ln1c, h=h, qh=qh, kh=kh, vh=vh, p=scores, a=a,
                          x1=x1, ln2=ln2c, h2=h2, g=g, sig=sig, u=u,
                          adapted=ad_caches)
                cache["blocks"].append(bc)

        hf, lnfc = _ln_forward(x, self.lnf_g, self.lnf_b)
        pooled = hf.mean(axis=1)
        logits = (pooled @ self.head_w.T + self.head_b).astype(np.float32)
        if cache is not None:
            cache.update(lnf=lnfc, T=T)
        if single:
            logits = logits[0]
        return (logits, cache) if (want_cache or training) else logits

    def backward(self, cache, dlogits):
        """Adapter gradients {site: (dA, dB)} from upstream logit gradients."""
        cfg = self.config
        N, T = cache["N"], cache["T"]
        d = cfg.d_model
        nh, hd = cfg.n_heads, d // cfg.n_heads
        inv_sqrt = np.float32(1.0 / np.sqrt(hd))
        grads = {}

        dpooled = dlogits @ self.head_w
        dhf = np.repeat(dpooled[:, None, :] / np.float32(T), T, axis=1)
        dx = _ln_backward(dhf, self.lnf_g, cache["lnf"])

        def adapted_backward(name_site, ad_cache, dy, bi):
            layer = ad_cache["layer"]
            ad = layer.adapter
            xd = ad_cache["xd"]
            m = xd.reshape(-1, xd.shape[-1])
            u2 = dy.reshape(-1, dy.shape[-1])
            s = np.float32(ad.scaling)
            db = s * (u2.T @ (m @ ad.a.T))
            da = s * ((u2 @ ad.b).T @ m)
            grads[f"layers.{bi}.{name_site}"] = (da.astype(np.float32),
                                                 db.astype(np.float32))
            dxa = s * ((dy @ ad.b) @ ad.a)
            if ad_cache["mask"] is not None:
                dxa = dxa * ad_cache["mask"]
            return (dy @ layer.base + dxa).astype(np.float32)

        for bi in reversed(range(len(self.blocks))):
            blk = self.blocks[bi]
            bc = cache["blocks"][bi]
            # MLP branch
            dm = dx @ blk.down_w
            g, sig, u = bc["g"], bc["sig"], bc["u"]
            du = dm * (g * sig)
            dg = dm * u * (sig + g * sig * (1.0 - sig))
            dh2 = adapted_backward("mlp.gate", bc["adapted"]["gate"], dg.astype(np.float32), bi)
            dh2 += du @ blk.up_w
            dx1 = dx + _ln_backward(dh2.astype(np.float32), blk.ln2_g, bc["ln2"])
            # attention branch
            da = adapted_backward("attn.o", bc["adapted"]["o"], dx1, bi)
            dah = da.reshape(N, T, nh, hd).transpose(0, 2, 1, 3)
            p, qh, kh, vh = bc["p"], bc["qh"], bc["kh"], bc["vh"]
            dp = dah @ vh.transpose(0, 1, 3, 2)
            dvh = p.transpose(0, 1, 3, 2) @ dah
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
            dqh = (ds @ kh) * inv_sqrt
            dkh = (ds.transpose(0, 1, 3, 2) @ qh) * inv_sqrt
            dq = np.ascontiguousarray(dqh.transpose(0, 2, 1, 3).reshape(N, T, d))
            dk = np.ascontiguousarray(dkh.transpose(0, 2, 1, 3).reshape(N, T, d))
            dv = np.ascontiguousarray(dvh.transpose(0, 2, 1, 3).reshape(N, T, d))
            dh = adapted_backward("attn.q", bc["adapted"]["q"], dq, bi)
            dh += adapted_backward("attn.k", bc["adapted"]["k"], dk, bi)
            dh += adapted_backward("attn.v", bc["adapted"]["v"], dv, bi)
            dx = dx1 + _ln_backward(dh.astype(np.float32), blk.ln1_g, bc["ln1"])
        return grads

    # ---- inference convenience ----------------------------------------------

    def normalize_image(self, img: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.config.norm_mean, dtype=np.float32)
        std = np.asarray(self.config.norm_std, dtype=np.float32)
        return ((np.asarray(img, dtype=np.float32) - mean) / std).astype(np.float32)

    def infer_logits(self, img_raw: np.ndarray) -> np.ndarray:
        """Logits for one raw [0, 1] scene image through the reference path."""
        return self.forward(self.normalize_image(img_raw))


def decode_action(logits: np.ndarray, cfg: PolicyConfig) -> str:
    """argmax verb (lowest index wins ties) -> canonical action string."""
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    verb = cfg.action_vocab[int(np.argmax(logits))]
    mag, dur = cfg.magnitude_table.get(verb, (0.0, cfg.default_duration))
    return grammar.serialize(grammar.ActionCommand(verb, mag, dur))


# ---- precision modes / deployment -------------------------------------------

class QuantizeError(ValueError):
    pass


def export_tensors(policy: VisuomotorPolicy, mode: PrecisionMode,
                   block_size: int = 64, double_quant: bool = False) -> dict:
    """Checkpoint tensor dict for a trained policy in the given mode.

    FP32 keeps base + adapters verbatim (identity transform).  Hybrid and
    FullNF4 merge the adapters into the backbone, then quantize every backbone
    linear weight; the head stays FP32 in Hybrid and is quantized in FullNF4.
    Layer norms and biases remain full precision in all modes.
    """
    mode = PrecisionMode(mode)
    tensors = dict(policy.base_tensors())
    if mode == PrecisionMode.FP32:
        for name, layer in policy.adapters().items():
            tensors[f"{name}.lora_A"] = layer.adapter.a
            tensors[f"{name}.lora_B"] = layer.adapter.b
        return tensors

    def q(w):
        t = quantize_nf4(w, block_size=block_size)
        if double_quant:
            t, _ = double_quantize_scales(t)
        return t

    out = {}
    for name, arr in tensors.items():
        if isinstance(arr, NF4Tensor):
            raise QuantizeError(f"tensor {name!r} is already NF4-quantized")
        out[name] = arr
    for name, layer in policy.adapters().items():
        merged = layer.base_dense() + layer.adapter.delta()
        out[f"{name}.base"] = q(merged.astype(np.float32))
    for name in list(out):
        if name.endswith((".mlp.up.weight", ".mlp.down.weight")) or name == "embed.weight":
            out[name] = q(out[name])
    if mode == PrecisionMode.FULL_NF4:
        out["head.weight"] = q(out["head.weight"])
    return out


def checkpoint_meta(policy: VisuomotorPolicy, mode: PrecisionMode,
                    block_size: int = 64, double_quant: bool = False) -> dict:
    return {
        "config": policy.config.to_meta(),
        "mode": PrecisionMode(mode).value,
        "block_size": block_size,
        "double_quant": bool(double_quant),
        "adapter": {"rank": policy.config.lora_rank,
                    "alpha": policy.config.lora_alpha,
                    "dropout_p": policy.config.lora_dropout},
    }


def policy_from_tensors(tensors: dict, meta: dict) -> VisuomotorPolicy:
    """Rebuild a full-precision policy (with adapters) from an FP32 checkpoint."""
    if meta.get("mode", "fp32") != "fp32":
        raise QuantizeError("only fp32 checkpoints carry trainable adapters")
    cfg = PolicyConfig.from_meta(meta["config"])
    policy = VisuomotorPolicy(cfg)
    for name, arr in policy.base_tensors().items():
        src = tensors[name]
        if arr.shape != src.shape:
            raise QuantizeError(f"config/checkpoint shape mismatch for {name!r}")
        arr[...] = src
    for name, layer in policy.adapters().items():
        layer.adapter.a[...] = tensors[f"{name}.lora_A"]
        layer.adapter.b[...] = tensors[f"{name}.lora_B"]
    return policy


class DeployedPolicy:
    """Inference-only policy over checkpoint tensors.

    FP32 checkpoints run the reference numpy path with adapters applied as
    stored; quantized checkpoints stream merged weights through the kernel
    backend (compiled extension when available).  Scratch buffers are
    thread-local so concurrent readers stay safe.
    """

    def __init__(self, tensors: dict, meta: dict, backend=None):
        self.meta = meta
        self.mode = PrecisionMode(meta["mode"])
        self.config = PolicyConfig.from_meta(meta["config"])
        self.tensors = tensors
        self._k = backend or default_backend
        self._local = threading.local()
        if self.mode == PrecisionMode.FP32:
            self._ref = policy_from_tensors(tensors, meta)
        else:
            self._ref = None
            self.pos = sinusoidal_positions(self.config.n_tokens, self.config.d_model)

    # scratch management ------------------------------------------------------

    def _scratch(self):
        loc = self._local
        if not hasattr(loc, "tiles"):
            cfg = self.config
            loc.tiles = {}
            loc.scores = np.empty((cfg.n_tokens, cfg.n_tokens), dtype=np.float32)
            loc.scales = {}
        return loc

    def _linear(self, name, x):
        w = self.tensors[name]
        if isinstance(w, NF4Tensor):
            rows, cols = w.shape
            sc = self._scratch()
            tile = sc.tiles.get(cols)
            if tile is None:
                tile = sc.tiles[cols] = np.empty((32, cols), dtype=np.float32)
            scales = sc.scales.get(name)
            if scales is None:  # decode double-quantized scales once per thread
                scales = sc.scales[name] = np.ascontiguousarray(w.block_scales())
            return self._k.matmat(w.packed, scales, _LEVELS_F32,
                                  w.block_size, rows, cols, x, tile)
        return self._k.linear_f32(x, w)

    # inference ---------------------------------------------------------------

    def normalize_image(self, img):
        mean = np.asarray(self.config.norm_mean, dtype=np.float32)
        std = np.asarray(self.config.norm_std, dtype=np.float32)
        return ((np.asarray(img, dtype=np.float32) - mean) / std).astype(np.float32)

    def logits(self, img_raw: np.ndarray) -> np.ndarray:
        """Action logits for one raw [0, 1] scene image."""
        if self._ref is not None:
            return self._ref.infer_logits(img_raw)
        cfg = self.config
        k = self._k
        sc = self._scratch()
        x = self.normalize_image(img_raw)
        tokens = pixel_shuffle_tokenize(x, cfg.shuffle_factor)
        x = self._linear("embed.weight", tokens) + self.tensors["embed.bias"] + self.pos
        x = np.ascontiguousarray(x, dtype=np.float32)
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            h = k.layer_norm(x, self.tensors[f"{p}.ln1.gamma"],
                             self.tensors[f"{p}.ln1.beta"], LN_EPS)
            q = self._linear(f"{p}.attn.q.base", h)
            kk = self._linear(f"{p}.attn.k.base", h)
            v = self._linear(f"{p}.attn.v.base", h)
            a = k.attention(q, kk, v, cfg.n_heads, sc.scores)
            x = x + self._linear(f"{p}.attn.o.base", a)
            x = np.ascontiguousarray(x, dtype=np.float32)
            h2 = k.layer_norm(x, self.tensors[f"{p}.ln2.gamma"],
                              self.tensors[f"{p}.ln2.beta"], LN_EPS)
            g = self._linear(f"{p}.mlp.gate.base", h2)
            u = self._linear(f"{p}.mlp.up.weight", h2)
            m = k.silu_gate(g, u)
            x = x + self._linear(f"{p}.mlp.down.weight", m)
            x = np.ascontiguousarray(x, dtype=np.float32)
        hf = k.layer_norm(x, self.tensors["ln_f.gamma"], self.tensors["ln_f.beta"], LN_EPS)
        pooled = np.ascontiguousarray(hf.mean(axis=0, dtype=np.float32)[None, :])
        logits = self._linear("head.weight", pooled)[0] + self.tensors["head.bias"]
        return logits.astype(np.float32)

    def action(self, img_raw: np.ndarray) -> str:
        return decode_action(self.logits(img_raw), self.config)


def deploy(policy: VisuomotorPolicy, mode: PrecisionMode, block_size: int = 64,
           double_quant: bool = False, backend=None) -> DeployedPolicy:
    """Quantize (per mode) and wrap a trained policy for inference."""
    tensors = export_tensors(policy, mode, block_size, double_quant)
    meta = checkpoint_meta(policy, mode, block_size, double_quant)
    return DeployedPolicy(tensors, meta, backend=backend)
