"""Interleaved text/image sequence assembly.

A task record (instruction with |image_i| placeholders, input latents,
target latent) plus a noisy latent and a timestep becomes one flat token
sequence described by a SequenceLayout.  The layout is the single source
of truth downstream: attention masks, kv-cache splits and the velocity
head all read token ranges from it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

TASK_TAGS = ("t2i", "edit", "subject", "visual_cond", "fewshot")
MAX_INPUT_IMAGES = 3
PLACEHOLDER_RE = re.compile(r"\|image_(\d+)\|")

TIMESTEP_SCALE = 1000.0


class Vocabulary:
    """Byte-level vocabulary: 256 byte tokens plus special tokens."""

    BYTES = 256
    IMG_START = 256   # <img>
    IMG_END = 257     # </img>
    PAD = 258
    BOT = 259
    EOT = 260
    NULL = 261        # empty-condition token for classifier-free branches
    SIZE = 262


def tokenize_text(s: str) -> np.ndarray:
    """Reversible byte-level encoding (UTF-8 bytes are the token ids)."""
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize_text(ids) -> str:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= Vocabulary.BYTES):
        raise ValueError("detokenize: non-byte token id")
    return bytes(ids.astype(np.uint8).tolist()).decode("utf-8")


@dataclass(frozen=True)
class Segment:
    kind: str                       # text | input_image | timestep | noise_image
    start: int
    end: int
    image_id: int | None = None     # 1-based placeholder index for input images
    grid: tuple[int, int] | None = None

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class SequenceLayout:
    segments: list[Segment] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.segments[-1].end if self.segments else 0

    def condition_length(self) -> int:
        """Tokens before the timestep segment (the cacheable prefix)."""
        for seg in self.segments:
            if seg.kind == "timestep":
                return seg.start
        raise ValueError("layout has no timestep segment")

    def noise_segment(self) -> Segment:
        seg = self.segments[-1]
        if seg.kind != "noise_image":
            raise ValueError("layout has no trailing noise segment")
        return seg

    def validate(self) -> None:
        pos = 0
        n_time = 0
        n_noise = 0
        seen_time = False
        for seg in self.segments:
            if seg.kind not in ("text", "input_image", "timestep", "noise_image"):
                raise ValueError(f"unknown segment kind {seg.kind!r}")
            if seg.start != pos or seg.end <= seg.start:
                raise ValueError(f"segments must be contiguous and non-empty, got [{seg.start}, {seg.end}) at {pos}")
            pos = seg.end
            if seg.kind == "timestep":
                n_time += 1
                seen_time = True
            elif seg.kind == "noise_image":
                n_noise += 1
            elif seg.kind == "input_image" and seen_time:
                raise ValueError("input image segment after the timestep segment")
        if n_time != 1:
            raise ValueError(f"layout must contain exactly one timestep segment, got {n_time}")
        if n_noise != 1 or self.segments[-1].kind != "noise_image":
            raise ValueError("layout must end with exactly one noise segment")


@dataclass
class TaskRecord:
    instruction: str
    input_images: list[np.ndarray]
    target: np.ndarray
    task_tag: str


def validate_record(record: TaskRecord) -> None:
    if record.task_tag not in TASK_TAGS:
        raise ValueError(f"unknown task tag {record.task_tag!r}")
    ids = [int(m) for m in PLACEHOLDER_RE.findall(record.instruction)]
    k = len(record.input_images)
    if sorted(ids) != list(range(1, k + 1)):
        raise ValueError(
            f"instruction placeholders {sorted(ids)} must be exactly 1..{k} "
            f"for {k} input image(s): {record.instruction!r}"
        )
    if k > MAX_INPUT_IMAGES:
        raise ValueError(f"at most {MAX_INPUT_IMAGES} input images allowed, got {k}")
    for img in list(record.input_images) + [record.target]:
        if img.ndim != 3:
            raise ValueError(f"latents must be (C, H, W), got {img.shape}")


def patchify(lat: np.ndarray, patch_size: int = 2) -> tuple[np.ndarray, tuple[int, int]]:
    """Split a (C, H, W) latent into row-major p x p patch vectors.

    Returns (patches, grid) where patches is (gh*gw, C*p*p) and vector
    layout is channel-major over the patch block.
    """
    c, h, w = lat.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"patchify: latent dims ({h}, {w}) not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = lat.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
    return np.ascontiguousarray(patches), (gh, gw)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], channels: int, patch_size: int = 2) -> np.ndarray:
    gh, gw = grid
    p = patch_size
    lat = patches.reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4).reshape(channels, gh * p, gw * p)
    return np.ascontiguousarray(lat)


def sinusoid_table(positions, dim: int) -> np.ndarray:
    """Interleaved sin/cos features: out[:, 2k] = sin(pos * w_k), out[:, 2k+1] = cos."""
    if dim % 2:
        raise ValueError(f"sinusoid dim must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 1.0 / (10000.0 ** (2.0 * k / dim))
    ang = pos * omega
    out = np.empty((pos.shape[0], dim), dtype=np.float32)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def timestep_features(t: float, dim: int) -> np.ndarray:
    """Sinusoid features of a [0, 1] timestep (scaled so frequencies spread)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep must lie in [0, 1], got {t}")
    return sinusoid_table([t * TIMESTEP_SCALE], dim)[0]


def positional_embeddings(layout: SequenceLayout, d_model: int) -> np.ndarray:
    """Per-token additive position features.

    Every token gets 1-D features of its sequence index; patch tokens
    inside image segments additionally get 2-D features of their
    (row, col) patch coordinates, identical across images.
    """
    if d_model % 4:
        raise ValueError(f"d_model must be divisible by 4 for 2-D features, got {d_model}")
    length = layout.length
    emb = sinusoid_table(np.arange(length), d_model)
    half = d_model // 2
    for seg in layout.segments:
        if seg.kind not in ("input_image", "noise_image"):
            continue
        gh, gw = seg.grid
        lo, hi = _patch_span(seg)
        n = hi - lo
        if n != gh * gw:
            raise ValueError(f"segment patch span {n} does not match grid {seg.grid}")
        rows = np.arange(n) // gw
        cols = np.arange(n) % gw
        emb[lo:hi, :half] += sinusoid_table(rows, half)
        emb[lo:hi, half:] += sinusoid_table(cols, half)
    return emb


def _patch_span(seg: Segment) -> tuple[int, int]:
    """Token range of the patch rows in an image segment (wrappers excluded)."""
    if seg.kind == "input_image":
        return seg.start + 1, seg.end - 1
    return seg.start, seg.end


@dataclass
class AssembledSequence:
    """A token-level plan: vocab ids where the content is a discrete token,
    patch vectors where it is image content, plus the layout and timestep."""

    layout: SequenceLayout
    token_ids: np.ndarray      # (L,) int64, -1 at patch and timestep positions
    patch_values: np.ndarray   # (n_patch_tokens, C*p*p) float32 in token order
    patch_index: np.ndarray    # (L,) int64 row into patch_values, -1 elsewhere
    t: float

    @property
    def length(self) -> int:
        return self.layout.length


def assemble(record: TaskRecord, t: float, x_t: np.ndarray,
             drop_text: bool = False, drop_images: bool = False,
             patch_size: int = 2) -> AssembledSequence:
    """Build the interleaved sequence for one (record, t, x_t) triple.

    Segment order follows the instruction's placeholder positions: text
    and input-image segments interleaved (each image wrapped in
    <img>...</img>), then the timestep token, then the noisy latent's
    patches as the trailing noise segment.  Dropping text replaces all
    text with a single empty-condition token; dropping images omits
    input-image segments entirely.  The task tag never enters the
    sequence.
    """
    validate_record(record)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep must lie in [0, 1], got {t}")
    if x_t.shape != record.target.shape:
        raise ValueError(f"noisy latent shape {x_t.shape} must equal target shape {record.target.shape}")

    parts: list[tuple[str, object]] = []   # ("text", ids) | ("image", placeholder index)
    pieces = PLACEHOLDER_RE.split(record.instruction)
    for i, piece in enumerate(pieces):
        if i % 2 == 0:
            ids = tokenize_text(piece)
            if ids.size:
                parts.append(("text", ids))
        else:
            parts.append(("image", int(piece)))

    if drop_images:
        parts = [p for p in parts if p[0] != "image"]
    if drop_text:
        null = np.array([Vocabulary.NULL], dtype=np.int64)
        parts = [("text", null)] + [p for p in parts if p[0] != "text"]

    segments: list[Segment] = []
    token_ids: list[np.ndarray] = []
    patch_chunks: list[np.ndarray] = []
    patch_rows: list[np.ndarray] = []
    pos = 0
    n_patches = 0

    def _push_tokens(ids: np.ndarray) -> None:
        token_ids.append(ids)
        patch_rows.append(np.full(ids.shape[0], -1, dtype=np.int64))

    for kind, payload in parts:
        if kind == "text":
            ids = payload
            segments.append(Segment("text", pos, pos + ids.shape[0]))
            _push_tokens(ids)
            pos += ids.shape[0]
        else:
            img = record.input_images[payload - 1]
            patches, grid = patchify(img, patch_size)
            n = patches.shape[0]
            segments.append(Segment("input_image", pos, pos + n + 2, image_id=payload, grid=grid))
            _push_tokens(np.array([Vocabulary.IMG_START], dtype=np.int64))
            token_ids.append(np.full(n, -1, dtype=np.int64))
            patch_rows.append(np.arange(n_patches, n_patches + n, dtype=np.int64))
            patch_chunks.append(patches.astype(np.float32))
            n_patches += n
            _push_tokens(np.array([Vocabulary.IMG_END], dtype=np.int64))
            pos += n + 2

    segments.append(Segment("timestep", pos, pos + 1))
    _push_tokens(np.array([-1], dtype=np.int64))
    pos += 1

    noise_patches, noise_grid = patchify(x_t, patch_size)
    n = noise_patches.shape[0]
    segments.append(Segment("noise_image", pos, pos + n, grid=noise_grid))
    token_ids.append(np.full(n, -1, dtype=np.int64))
    patch_rows.append(np.arange(n_patches, n_patches + n, dtype=np.int64))
    patch_chunks.append(noise_patches.astype(np.float32))
    n_patches += n
    pos += n

    layout = SequenceLayout(segments)
    layout.validate()
    return AssembledSequence(
        layout=layout,
        token_ids=np.concatenate(token_ids),
        patch_values=np.concatenate(patch_chunks) if patch_chunks else np.zeros((0, 0), dtype=np.float32),
        patch_index=np.concatenate(patch_rows),
        t=float(t),
    )
