"""Transformer over interleaved sequences: hybrid attention mask,
velocity prediction head, and a write-once condition kv-cache.

Attention is causal across the sequence with full bidirectional
attention inside each image segment (input images and the noisy image),
so every patch of one image sees every other patch of the same image
while images and text only see what came before them.  A `causal` mode
drops the bidirectional blocks for ablation runs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .blob import read_blob, write_blob
from .codec import DEFAULT_CODEC_SEED, LATENT_CHANNELS
from .sequence import (AssembledSequence, SequenceLayout, TaskRecord, Vocabulary,
                       assemble, positional_embeddings, timestep_features)
from .tensor import (Tensor, concat, embedding, flop_tag, gelu, layer_norm,
                     masked_softmax, no_grad, reshape, scale, transpose,
                     trunc_normal, zeros)

MASK_MODES = ("hybrid", "causal")
IMAGE_KINDS = ("input_image", "noise_image")


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    vocab_size: int = Vocabulary.SIZE
    patch_size: int = 2
    latent_channels: int = LATENT_CHANNELS
    max_seq_len: int = 512
    mask_mode: str = "hybrid"

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(f"d_model {self.d_model} != n_heads {self.n_heads} * head_dim {self.head_dim}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")

    @property
    def patch_dim(self) -> int:
        return self.latent_channels * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- attention mask ----------------------------------------------------------


def build_attention_mask(layout: SequenceLayout, mask_mode: str = "hybrid") -> np.ndarray:
    """(L, L) boolean mask: allowed(i, j) = j <= i, or i and j inside the
    same image segment.  `causal` keeps only the triangular part."""
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    length = layout.length
    mask = np.tril(np.ones((length, length), dtype=bool))
    if mask_mode == "hybrid":
        for seg in layout.segments:
            if seg.kind in IMAGE_KINDS:
                mask[seg.start:seg.end, seg.start:seg.end] = True
    return mask


def attention_mask_reference(layout: SequenceLayout, mask_mode: str = "hybrid") -> np.ndarray:
    """O(L^2) per-pair evaluation of the masking rule, used as the oracle."""
    length = layout.length
    seg_of = np.full(length, -1, dtype=np.int64)
    image_seg = np.zeros(length, dtype=bool)
    for si, seg in enumerate(layout.segments):
        seg_of[seg.start:seg.end] = si
        if seg.kind in IMAGE_KINDS:
            image_seg[seg.start:seg.end] = True
    mask = np.zeros((length, length), dtype=bool)
    for i in range(length):
        for j in range(length):
            allowed = j <= i
            if not allowed and mask_mode == "hybrid":
                allowed = bool(image_seg[i]) and seg_of[i] == seg_of[j]
            mask[i, j] = allowed
    return mask


# -- parameters --------------------------------------------------------------


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated-normal weights (std 0.02), unit layer-norm gains,
    zero biases, zero velocity head."""
    d = config.d_model
    p: dict[str, Tensor] = {}

    def w(shape):
        return trunc_normal(rng, shape, std=0.02, dtype=dtype)

    def z(shape):
        return zeros(shape, requires_grad=True, dtype=dtype)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)

    p["tok_emb"] = w((config.vocab_size, d))
    p["patch_w"] = w((config.patch_dim, d))
    p["patch_b"] = z((d,))
    p["time_w1"] = w((d, d))
    p["time_b1"] = z((d,))
    p["time_w2"] = w((d, d))
    p["time_b2"] = z((d,))
    for i in range(config.n_layers):
        pre = f"l{i}."
        p[pre + "ln1_g"] = ones((d,))
        p[pre + "ln1_b"] = z((d,))
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = w((d, d))
        for name in ("bq", "bk", "bv", "bo"):
            p[pre + name] = z((d,))
        p[pre + "ln2_g"] = ones((d,))
        p[pre + "ln2_b"] = z((d,))
        p[pre + "mlp_w1"] = w((d, 4 * d))
        p[pre + "mlp_b1"] = z((4 * d,))
        p[pre + "mlp_w2"] = w((4 * d, d))
        p[pre + "mlp_b2"] = z((d,))
    p["final_g"] = ones((d,))
    p["final_b"] = z((d,))
    p["head_w"] = z((d, config.patch_dim))
    p["head_b"] = z((config.patch_dim,))
    return p


# -- forward -----------------------------------------------------------------


def embed_sequence(params: dict[str, Tensor], config: ModelConfig, assembled: AssembledSequence) -> Tensor:
    """Content embeddings (tokens, projected patches, timestep MLP) plus
    positional features, one row per token."""
    chunks: list[Tensor] = []
    for seg in assembled.layout.segments:
        if seg.kind == "text":
            chunks.append(embedding(params["tok_emb"], assembled.token_ids[seg.start:seg.end]))
        elif seg.kind == "input_image":
            lo = assembled.patch_index[seg.start + 1]
            hi = assembled.patch_index[seg.end - 2] + 1
            chunks.append(embedding(params["tok_emb"], [Vocabulary.IMG_START]))
            chunks.append(_project_patches(params, assembled.patch_values[lo:hi]))
            chunks.append(embedding(params["tok_emb"], [Vocabulary.IMG_END]))
        elif seg.kind == "timestep":
            chunks.append(_embed_timestep(params, config, assembled.t))
        else:
            lo = assembled.patch_index[seg.start]
            hi = assembled.patch_index[seg.end - 1] + 1
            chunks.append(_project_patches(params, assembled.patch_values[lo:hi]))
    x = concat(chunks, axis=0) if len(chunks) > 1 else chunks[0]
    dtype = params["tok_emb"].data.dtype
    pos = Tensor(positional_embeddings(assembled.layout, config.d_model).astype(dtype))
    return x + pos


def _project_patches(params: dict[str, Tensor], patches: np.ndarray) -> Tensor:
    with flop_tag("embed"):
        dtype = params["patch_w"].data.dtype
        return Tensor(patches.astype(dtype)) @ params["patch_w"] + params["patch_b"]


def _embed_timestep(params: dict[str, Tensor], config: ModelConfig, t: float) -> Tensor:
    dtype = params["time_w1"].data.dtype
    feats = Tensor(timestep_features(t, config.d_model)[None, :].astype(dtype))
    with flop_tag("embed"):
        h = gelu(feats @ params["time_w1"] + params["time_b1"])
        return h @ params["time_w2"] + params["time_b2"]


def _attention(params: dict[str, Tensor], config: ModelConfig, i: int, x: Tensor,
               mask: np.ndarray, kv_prefix=None, kv_out: list | None = None) -> Tensor:
    pre = f"l{i}."
    h = layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
    nh, hd = config.n_heads, config.head_dim
    t_len = x.shape[0]
    with flop_tag("attention"):
        q = h @ params[pre + "wq"] + params[pre + "bq"]
        k = h @ params[pre + "wk"] + params[pre + "bk"]
        v = h @ params[pre + "wv"] + params[pre + "bv"]
        qh = transpose(reshape(q, (t_len, nh, hd)), (1, 0, 2))
        kh = transpose(reshape(k, (t_len, nh, hd)), (1, 0, 2))
        vh = transpose(reshape(v, (t_len, nh, hd)), (1, 0, 2))
        if kv_prefix is not None:
            kp, vp = kv_prefix
            if kp.shape[1]:
                kh = concat([Tensor(kp), kh], axis=1)
                vh = concat([Tensor(vp), vh], axis=1)
        if kv_out is not None:
            kv_out.append((kh.data.copy(), vh.data.copy()))
        scores = scale(qh @ transpose(kh, (0, 2, 1)), 1.0 / math.sqrt(hd))
        probs = masked_softmax(scores, mask[None, :, :])
        ctx = probs @ vh
        ctx = reshape(transpose(ctx, (1, 0, 2)), (t_len, config.d_model))
        return ctx @ params[pre + "wo"] + params[pre + "bo"]


def _mlp(params: dict[str, Tensor], config: ModelConfig, i: int, x: Tensor) -> Tensor:
    pre = f"l{i}."
    h = layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
    with flop_tag("mlp"):
        h = gelu(h @ params[pre + "mlp_w1"] + params[pre + "mlp_b1"])
        return h @ params[pre + "mlp_w2"] + params[pre + "mlp_b2"]


def transformer_forward(params: dict[str, Tensor], config: ModelConfig, emb: Tensor,
                        mask: np.ndarray, final_norm: bool = True,
                        kv_prefix: list | None = None, kv_out: list | None = None) -> Tensor:
    """Pre-norm blocks of masked self-attention and MLP with residuals.

    `kv_prefix` supplies per-layer cached (K, V) for a static prefix;
    `kv_out`, when given, collects each layer's full (K, V) arrays.
    """
    total = emb.shape[0] if kv_prefix is None else emb.shape[0] + kv_prefix[0][0].shape[1]
    if total > config.max_seq_len:
        raise ValueError(f"sequence length {total} exceeds max_seq_len {config.max_seq_len}")
    if mask.shape != (emb.shape[0], total):
        raise ValueError(f"mask shape {mask.shape} does not match ({emb.shape[0]}, {total})")
    x = emb
    for i in range(config.n_layers):
        prefix_i = kv_prefix[i] if kv_prefix is not None else None
        x = x + _attention(params, config, i, x, mask, kv_prefix=prefix_i, kv_out=kv_out)
        x = x + _mlp(params, config, i, x)
    if final_norm:
        x = layer_norm(x, params["final_g"], params["final_b"])
    return x


def velocity_head(params: dict[str, Tensor], config: ModelConfig,
                  hidden_noise: Tensor, grid: tuple[int, int]) -> Tensor:
    """Map noise-segment hidden states to a latent of the noisy image's shape."""
    gh, gw = grid
    if hidden_noise.shape[0] != gh * gw:
        raise ValueError(f"velocity head: {hidden_noise.shape[0]} hidden rows for grid {grid}")
    with flop_tag("head"):
        y = hidden_noise @ params["head_w"] + params["head_b"]
    c, p = config.latent_channels, config.patch_size
    lat = reshape(transpose(reshape(y, (gh, gw, c, p, p)), (2, 0, 3, 1, 4)), (c, gh * p, gw * p))
    return lat


# -- kv-cache ----------------------------------------------------------------


@dataclass
class KVCache:
    """Per-layer keys/values for the condition prefix; write-once."""

    prefix_len: int
    keys: list[np.ndarray]     # each (n_heads, prefix_len, head_dim)
    values: list[np.ndarray]


def build_condition_cache(params: dict[str, Tensor], config: ModelConfig,
                          assembled: AssembledSequence, mask: np.ndarray | None = None) -> KVCache:
    """Run the condition prefix (everything before the timestep token)
    through all layers and keep each layer's keys and values."""
    prefix_len = assembled.layout.condition_length()
    if mask is None:
        mask = build_attention_mask(assembled.layout, config.mask_mode)
    if prefix_len == 0:
        empty = np.zeros((config.n_heads, 0, config.head_dim), dtype=np.float32)
        return KVCache(0, [empty] * config.n_layers, [empty] * config.n_layers)
    kv: list = []
    with no_grad():
        emb = embed_sequence(params, config, assembled)
        transformer_forward(params, config, emb[:prefix_len], mask[:prefix_len, :prefix_len],
                            final_norm=False, kv_out=kv)
    return KVCache(prefix_len, [k for k, _ in kv], [v for _, v in kv])


def cached_forward(params: dict[str, Tensor], config: ModelConfig, cache: KVCache,
                   suffix_emb: Tensor, mask_rows: np.ndarray, final_norm: bool = True) -> Tensor:
    """Forward for the [timestep][noise] suffix against a condition cache.

    Numerically equal to `transformer_forward` on the full sequence
    restricted to the suffix rows.
    """
    if len(cache.keys) != config.n_layers:
        raise ValueError(f"cache has {len(cache.keys)} layers, model has {config.n_layers}")
    s_len = suffix_emb.shape[0]
    if mask_rows.shape != (s_len, cache.prefix_len + s_len):
        raise ValueError(
            f"cache/mask mismatch: mask rows {mask_rows.shape}, prefix {cache.prefix_len} + suffix {s_len}")
    x = suffix_emb
    for i in range(config.n_layers):
        x = x + _attention(params, config, i, x, mask_rows, kv_prefix=(cache.keys[i], cache.values[i]))
        x = x + _mlp(params, config, i, x)
    if final_norm:
        x = layer_norm(x, params["final_g"], params["final_b"])
    return x


# -- model wrapper -----------------------------------------------------------


class VelocityModel:
    """Parameters plus config; predicts the rectified-flow velocity for a
    record's noisy latent."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 codec_seed: int = DEFAULT_CODEC_SEED, params: dict[str, Tensor] | None = None):
        self.config = config
        self.codec_seed = int(codec_seed)
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def cast(self, dtype) -> "VelocityModel":
        """Copy of this model with parameters in another float width
        (float64 is the gradient-verification mode)."""
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True) for k, p in self.params.items()}
        return VelocityModel(self.config, codec_seed=self.codec_seed, params=params)

    def predict_velocity(self, record: TaskRecord, x_t: np.ndarray, t: float,
                         drop_text: bool = False, drop_images: bool = False) -> Tensor:
        """Differentiable velocity prediction (training path, no cache)."""
        assembled = assemble(record, t, x_t, drop_text, drop_images, self.config.patch_size)
        mask = build_attention_mask(assembled.layout, self.config.mask_mode)
        emb = embed_sequence(self.params, self.config, assembled)
        h = transformer_forward(self.params, self.config, emb, mask)
        seg = assembled.layout.noise_segment()
        return velocity_head(self.params, self.config, h[seg.start:seg.end], seg.grid)

    def begin_sampling(self, record: TaskRecord, use_cache: bool = True) -> "SamplerSession":
        return SamplerSession(self, record, use_cache)


class SamplerSession:
    """Per-record sampling state: one layout, mask and (optionally) one
    condition kv-cache per guidance branch, reused across all steps."""

    def __init__(self, model: VelocityModel, record: TaskRecord, use_cache: bool):
        self.model = model
        self.record = record
        self.use_cache = use_cache
        self.has_images = len(record.input_images) > 0
        branch_drops = {"uncond": (True, True), "full": (False, False)}
        if self.has_images:
            branch_drops["image"] = (True, False)
        self.branches: dict[str, dict] = {}
        cfg = model.config
        zero_xt = np.zeros_like(record.target)
        with no_grad():
            for name, (dt, di) in branch_drops.items():
                proto = assemble(record, 0.0, zero_xt, drop_text=dt, drop_images=di, patch_size=cfg.patch_size)
                mask = build_attention_mask(proto.layout, cfg.mask_mode)
                prefix_len = proto.layout.condition_length()
                branch = {
                    "drops": (dt, di),
                    "layout": proto.layout,
                    "mask": mask,
                    "prefix_len": prefix_len,
                    "noise_seg": proto.layout.noise_segment(),
                }
                if use_cache:
                    branch["cache"] = build_condition_cache(model.params, cfg, proto, mask)
                    branch["pos_suffix"] = positional_embeddings(proto.layout, cfg.d_model)[prefix_len:]
                self.branches[name] = branch

    def branch_velocities(self, x_t: np.ndarray, t: float) -> dict[str, np.ndarray]:
        """Velocity of each guidance branch at (x_t, t); `image` is absent
        for records without input images."""
        out: dict[str, np.ndarray] = {}
        with no_grad():
            for name, br in self.branches.items():
                out[name] = self._branch_velocity(br, x_t, t)
        return out

    def _branch_velocity(self, br: dict, x_t: np.ndarray, t: float) -> np.ndarray:
        params, cfg = self.model.params, self.model.config
        seg = br["noise_seg"]
        if self.use_cache:
            from .sequence import patchify

            patches, grid = patchify(x_t, cfg.patch_size)
            emb_t = _embed_timestep(params, cfg, t)
            emb_noise = _project_patches(params, patches.astype(np.float32))
            suffix = concat([emb_t, emb_noise], axis=0) + Tensor(br["pos_suffix"])
            h = cached_forward(params, cfg, br["cache"], suffix, br["mask"][br["prefix_len"]:, :])
            hidden = h[1:]
        else:
            dt, di = br["drops"]
            assembled = assemble(self.record, t, x_t, drop_text=dt, drop_images=di, patch_size=cfg.patch_size)
            emb = embed_sequence(params, cfg, assembled)
            h = transformer_forward(params, cfg, emb, br["mask"])
            hidden = h[seg.start:seg.end]
        return velocity_head(params, cfg, hidden, seg.grid).data


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "any2i-ckpt-v1"


def save_checkpoint(path: str | Path, model: VelocityModel, extra: dict | None = None) -> None:
    """Header (config, codec seed, parameter names) followed by the named
    parameter tensors as blobs."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "codec_seed": model.codec_seed,
        "params": sorted(model.params.keys()),
        "extra": extra if extra is not None else {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in header["params"]:
            write_blob(f, model.params[name].data)


def load_checkpoint(path: str | Path) -> tuple[VelocityModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {header.get('format')!r}")
        config = ModelConfig.from_dict(header["config"])
        params = {name: Tensor(read_blob(f), requires_grad=True) for name in header["params"]}
    model = VelocityModel(config, codec_seed=header["codec_seed"], params=params)
    return model, header.get("extra", {})
