"""Image and text transformer towers for a CLIP-style dual encoder.

Both towers use pre-norm blocks (LayerNorm -> multi-head attention ->
residual, LayerNorm -> GELU MLP -> residual) with learned positional
embeddings.  The image tower masks tokens after adding positional
embeddings and pools by class token when configured, otherwise by mean.
The text tower attends bidirectionally with padding keys masked out and
pools at the last real token.  Both project to ``embed_dim`` and
L2-normalize.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .masking import TokenMask

MIN_LOGIT_SCALE = 1.0
MAX_LOGIT_SCALE = 100.0
_NEG_INF = -1e9


class ResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    tower: str
    layers: int
    width: int
    heads: int
    embed_dim: int
    mlp_ratio: float = 4.0
    patch_size: int | None = None
    image_size: int | None = None
    vocab_size: int | None = None
    context_len: int | None = None
    use_class_token: bool = False

    def __post_init__(self):
        if self.tower not in ("image", "text"):
            raise ValueError(f"tower must be 'image' or 'text', got {self.tower!r}")
        if self.layers < 0 or self.width < 1 or self.heads < 1 or self.embed_dim < 1:
            raise ValueError(f"invalid tower shape: {self}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.tower == "image":
            if not self.patch_size or self.patch_size < 1:
                raise ValueError("image tower needs patch_size >= 1")
            if self.image_size is None:
                raise ValueError("image tower needs image_size")
            tokens_for_resolution(self.image_size, self.patch_size)
        else:
            if not self.vocab_size or not self.context_len:
                raise ValueError("text tower needs vocab_size and context_len")

    @property
    def mlp_width(self) -> int:
        return int(round(self.mlp_ratio * self.width))

    def to_dict(self) -> dict:
        return asdict(self)


# -- image geometry -------------------------------------------------------------

def tokens_for_resolution(image_side: int, patch_size: int) -> int:
    if patch_size < 1 or image_side < 1 or image_side % patch_size:
        raise ResolutionError(f"image side {image_side} is not divisible by patch size {patch_size}")
    return (image_side // patch_size) ** 2


def _image(layers, width, heads, embed, patch, size=224, cls=True):
    return ModelConfig("image", layers, width, heads, embed, patch_size=patch,
                       image_size=size, use_class_token=cls)


def _text(layers, width, heads, embed, vocab=49408, ctx=77):
    return ModelConfig("text", layers, width, heads, embed, vocab_size=vocab, context_len=ctx)


# Full-scale shapes (OpenCLIP layouts), used for FLOPs accounting only.
FLOPS_PRESETS: dict[str, tuple[ModelConfig, ModelConfig]] = {
    "S16": (_image(12, 384, 6, 384, 16), _text(12, 384, 6, 384)),
    "B16": (_image(12, 768, 12, 512, 16), _text(12, 512, 8, 512)),
    "L16": (_image(24, 1024, 16, 768, 16), _text(12, 768, 12, 768)),
    "L14": (_image(24, 1024, 16, 768, 14), _text(12, 768, 12, 768)),
    "H14": (_image(32, 1280, 16, 1024, 14), _text(24, 1024, 16, 1024)),
}


def toy_preset(name: str, vocab_size: int, image_size: int = 32, context_len: int = 8,
               patch_size: int = 8) -> tuple[ModelConfig, ModelConfig]:
    """Trainable desk-scale configs; names mirror the full-scale ladder."""
    shapes = {
        # name: (img layers, img width, heads, txt layers, txt width, embed)
        "toy-S": (1, 32, 2, 1, 32, 32),
        "toy-B": (2, 64, 4, 1, 32, 32),
        "toy-L": (3, 96, 4, 1, 48, 48),
        "toy-H": (4, 128, 4, 2, 64, 64),
    }
    if name not in shapes:
        raise KeyError(f"unknown toy preset {name!r}; choose from {sorted(shapes)}")
    il, iw, h, tl, tw, e = shapes[name]
    img = ModelConfig("image", il, iw, h, e, patch_size=patch_size, image_size=image_size)
    txt = ModelConfig("text", tl, tw, 2, e, vocab_size=vocab_size, context_len=context_len)
    return img, txt


TOY_PRESETS = ("toy-S", "toy-B", "toy-L", "toy-H")


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``[H, W, C]`` (or batched ``[B, H, W, C]``) to row-major patch rows.

    Each row is a patch flattened in (row, col, channel) order.
    """
    img = np.asarray(image)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    b, h, w, c = img.shape
    p = patch_size
    if h % p or w % p:
        raise ResolutionError(f"image {h}x{w} not divisible by patch size {p}")
    out = img.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, (h // p) * (w // p), p * p * c)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int,
               channels: int = 3) -> np.ndarray:
    x = np.asarray(patches)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    p = patch_size
    b = x.shape[0]
    out = x.reshape(b, height // p, width // p, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(b, height, width, channels)
    return out if batched else out[0]


def resize_pos_embed(pos: np.ndarray, new_grid: int, has_class_token: bool = False,
                     method: str = "bilinear") -> np.ndarray:
    """Resample a square grid of positional embeddings to ``new_grid`` per side.

    Bilinear with corner-aligned sampling: output cell ``i`` reads input
    coordinate ``i * (g - 1) / (g' - 1)``, so linear fields are reproduced
    exactly.  ``method="nearest"`` rounds that coordinate instead.  A leading
    class-token row is passed through.
    """
    if new_grid < 1:
        raise ValueError(f"new grid must be >= 1, got {new_grid}")
    if method not in ("bilinear", "nearest"):
        raise ValueError(f"unknown resize method {method!r}")
    pos = np.asarray(pos)
    head, grid = (pos[:1], pos[1:]) if has_class_token else (pos[:0], pos)
    g = math.isqrt(grid.shape[0])
    if g * g != grid.shape[0]:
        raise DimensionError(f"{grid.shape[0]} positions do not form a square grid")
    if new_grid == g:
        return pos.copy()
    field = grid.reshape(g, g, -1)
    if new_grid == 1:
        coords = np.array([(g - 1) / 2.0])
    else:
        coords = np.arange(new_grid) * ((g - 1) / (new_grid - 1))
    if method == "nearest":
        idx = np.floor(coords + 0.5).astype(int)
        out = field[idx][:, idx]
    else:
        lo = np.minimum(np.floor(coords).astype(int), g - 1)
        hi = np.minimum(lo + 1, g - 1)
        frac = (coords - lo).astype(pos.dtype)
        rows = field[lo] * (1 - frac)[:, None, None] + field[hi] * frac[:, None, None]
        out = rows[:, lo] * (1 - frac)[None, :, None] + rows[:, hi] * frac[None, :, None]
    out = out.reshape(new_grid * new_grid, -1).astype(pos.dtype)
    return np.concatenate([head, out], axis=0)


# -- parameters -----------------------------------------------------------------------

def _init_tower(cfg: ModelConfig, prefix: str, rs: np.random.Generator) -> OrderedDict:
    d, hid = cfg.width, cfg.mlp_width
    p = OrderedDict()

    def normal(shape, std=0.02):
        return rs.normal(0.0, std, size=shape)

    if cfg.tower == "image":
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        n = tokens_for_resolution(cfg.image_size, cfg.patch_size)
        p["patch_w"] = normal((patch_dim, d), patch_dim ** -0.5)
        p["patch_b"] = np.zeros(d)
        if cfg.use_class_token:
            p["cls"] = normal((1, d))
        p["pos"] = normal((n + int(cfg.use_class_token), d), 0.01)
    else:
        p["tok_emb"] = normal((cfg.vocab_size, d))
        p["pos"] = normal((cfg.context_len, d), 0.01)
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        p[b + "ln1_g"], p[b + "ln1_b"] = np.ones(d), np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[b + w] = normal((d, d), d ** -0.5)
            p[b + "b" + w[1]] = np.zeros(d)
        p[b + "ln2_g"], p[b + "ln2_b"] = np.ones(d), np.zeros(d)
        p[b + "w1"], p[b + "b1"] = normal((d, hid), d ** -0.5), np.zeros(hid)
        p[b + "w2"], p[b + "b2"] = normal((hid, d), hid ** -0.5), np.zeros(d)
    p["ln_g"], p["ln_b"] = np.ones(d), np.zeros(d)
    p["proj"] = normal((d, cfg.embed_dim), d ** -0.5)
    return OrderedDict((f"{prefix}.{k}", v) for k, v in p.items())


class ClipModel:
    """Parameter store for an image/text tower pair plus the logit-scale parameter."""

    def __init__(self, image_cfg: ModelConfig, text_cfg: ModelConfig, params: dict | None = None,
                 seed: int = 0):
        if image_cfg.embed_dim != text_cfg.embed_dim:
            raise ValueError("image and text towers must share embed_dim")
        self.image_cfg = image_cfg
        self.text_cfg = text_cfg
        if params is None:
            rs = np.random.default_rng(seed)
            raw = _init_tower(image_cfg, "image", rs)
            raw.update(_init_tower(text_cfg, "text", rs))
            raw["logit_scale"] = np.array(math.log(1 / 0.07))
            params = OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in raw.items())
        self.params: OrderedDict[str, Tensor] = OrderedDict(params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def grid(self) -> int:
        """Current patch-grid side of the image positional embedding."""
        n = self.params["image.pos"].shape[0] - int(self.image_cfg.use_class_token)
        return math.isqrt(n)

    @property
    def image_side(self) -> int:
        return self.grid * self.image_cfg.patch_size

    def logit_scale(self) -> Tensor:
        t = ad.clip(self.params["logit_scale"], math.log(MIN_LOGIT_SCALE), math.log(MAX_LOGIT_SCALE))
        return ad.exp(t)

    def set_grid(self, grid: int, method: str = "bilinear") -> bool:
        """Resize image positional embeddings to ``grid``; True if anything changed."""
        if grid == self.grid:
            return False
        old = self.params["image.pos"]
        new = resize_pos_embed(old.data, grid, self.image_cfg.use_class_token, method)
        self.params["image.pos"] = Tensor(new, requires_grad=old.requires_grad, name="image.pos")
        self.image_cfg = replace(self.image_cfg, image_size=grid * self.image_cfg.patch_size)
        return True

    def copy(self) -> "ClipModel":
        params = OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k))
            for k, v in self.params.items())
        return ClipModel(self.image_cfg, self.text_cfg, params)

    def config_dict(self) -> dict:
        return {"image": self.image_cfg.to_dict(), "text": self.text_cfg.to_dict()}

    def digest(self) -> str:
        """SHA-256 over configs, parameter names, dtypes, shapes and raw bytes."""
        h = hashlib.sha256(json.dumps(self.config_dict(), sort_keys=True).encode())
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(str(t.data.dtype).encode() + str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())


# -- forward passes ----------------------------------------------------------------------

def _layernorm(x, g, b):
    return ad.layernorm(x) * g + b


def _block(p, prefix: str, x: Tensor, heads: int, attn_bias: np.ndarray | None = None) -> Tensor:
    bsz, n, d = x.shape
    dh = d // heads
    h = _layernorm(x, p[prefix + "ln1_g"], p[prefix + "ln1_b"])

    def split(t):
        return t.reshape(bsz, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(h @ p[prefix + "wq"] + p[prefix + "bq"])
    k = split(h @ p[prefix + "wk"] + p[prefix + "bk"])
    v = split(h @ p[prefix + "wv"] + p[prefix + "bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if attn_bias is not None:
        scores = scores + attn_bias
    attn = ad.softmax(scores, axis=-1) @ v
    attn = attn.transpose(0, 2, 1, 3).reshape(bsz, n, d)
    x = x + (attn @ p[prefix + "wo"] + p[prefix + "bo"])
    h = _layernorm(x, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
    h = ad.gelu(h @ p[prefix + "w1"] + p[prefix + "b1"])
    return x + (h @ p[prefix + "w2"] + p[prefix + "b2"])


def encode_image_tokens(model: ClipModel, patches, kept: np.ndarray | None = None) -> Tensor:
    """Batched image tower on patch rows ``[B, n, P*P*3]`` -> ``[B, e]``.

    ``kept`` holds per-sample ascending token indices ``[B, k]``; ``None``
    skips the masking path entirely.
    """
    cfg, p = model.image_cfg, model.params
    x = ad.as_tensor(patches)
    if x.ndim != 3:
        raise DimensionError(f"expected patches of shape [B, n, P*P*3], got {x.shape}")
    bsz, n, _ = x.shape
    pos = p["image.pos"]
    n_pos = pos.shape[0] - int(cfg.use_class_token)
    if n != n_pos:
        raise DimensionError(f"{n} patch tokens but positional grid holds {n_pos}")
    x = x @ p["image.patch_w"] + p["image.patch_b"]
    if cfg.use_class_token:
        x = x + _rows(pos, 1, n_pos + 1)
    else:
        x = x + pos
    if kept is not None:
        x = ad.gather_rows(x, kept)
    if cfg.use_class_token:
        cls = p["image.cls"] + _rows(pos, 0, 1)
        x = ad.concat([ad.broadcast_to(cls.reshape(1, 1, cfg.width), (bsz, 1, cfg.width)), x], axis=1)
    for i in range(cfg.layers):
        x = _block(p, f"image.blocks.{i}.", x, cfg.heads)
    x = _layernorm(x, p["image.ln_g"], p["image.ln_b"])
    if cfg.use_class_token:
        pooled = ad.gather_rows(x, np.zeros((bsz, 1), dtype=np.int64)).reshape(bsz, cfg.width)
    else:
        pooled = ad.mean(x, axis=1)
    return ad.l2_normalize(pooled @ p["image.proj"], axis=-1)


def _rows(t: Tensor, start: int, stop: int) -> Tensor:
    return ad.gather_rows(t, np.arange(start, stop))


def encode_images(model: ClipModel, images: np.ndarray, kept: np.ndarray | None = None) -> Tensor:
    """Images ``[B, H, W, 3]`` in [0, 1] -> unit embeddings ``[B, e]``."""
    patches = patchify(np.asarray(images, dtype=ad.get_dtype()) - 0.5, model.image_cfg.patch_size)
    return encode_image_tokens(model, patches, kept)


def vit_forward(model: ClipModel, patch_tokens, mask: TokenMask | None = None) -> Tensor:
    """Single-sample image tower: patch rows ``[n, P*P*3]`` -> ``[e]``."""
    x = ad.as_tensor(patch_tokens)
    n = x.shape[0]
    if mask is not None and mask.n_tokens != n:
        raise DimensionError(f"mask covers {mask.n_tokens} tokens but got {n} patches")
    kept = None if mask is None else mask.as_array()[None]
    out = encode_image_tokens(model, x.reshape(1, *x.shape), kept)
    return out.reshape(out.shape[-1])


def encode_texts(model: ClipModel, token_ids, attn_mask) -> Tensor:
    """Batched text tower: ids ``[B, L]`` with real-token mask ``[B, L]`` -> ``[B, e]``."""
    cfg, p = model.text_cfg, model.params
    ids = np.asarray(token_ids, dtype=np.int64)
    real = np.asarray(attn_mask, dtype=bool)
    if ids.ndim != 2 or real.shape != ids.shape:
        raise DimensionError(f"token ids {ids.shape} and mask {real.shape} must both be [B, L]")
    bsz, length = ids.shape
    if length > cfg.context_len:
        raise DimensionError(f"text length {length} exceeds context {cfg.context_len}")
    if ids.size and ids.max() >= cfg.vocab_size:
        raise IndexError(f"token id {ids.max()} >= vocab size {cfg.vocab_size}")
    x = ad.embedding(p["text.tok_emb"], ids) + _rows(p["text.pos"], 0, length)
    bias = np.where(real, 0.0, _NEG_INF).astype(ad.get_dtype())[:, None, None, :]
    for i in range(cfg.layers):
        x = _block(p, f"text.blocks.{i}.", x, cfg.heads, bias)
    x = _layernorm(x, p["text.ln_g"], p["text.ln_b"])
    last = np.maximum(real.sum(axis=1) - 1, 0)[:, None]
    pooled = ad.gather_rows(x, last).reshape(bsz, cfg.width)
    return ad.l2_normalize(pooled @ p["text.proj"], axis=-1)


def text_forward(model: ClipModel, token_ids, attn_mask) -> Tensor:
    """Single caption ``[L]`` -> ``[e]``."""
    out = encode_texts(model, [list(token_ids)], [list(attn_mask)])
    return out.reshape(out.shape[-1])
