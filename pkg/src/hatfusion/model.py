"""HAT early-fusion model: image patch encoder, latent cross-attention,
rotary stroke encoder, cross-modal querying, attention pooling and the
linear head, with a mode-dispatched forward pass."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import (
    EVAL,
    BatchNorm,
    Context,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerLayer,
    uniform_init,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"HATC"
CHECKPOINT_VERSION = 1


class Mode(str, enum.Enum):
    IMAGE = "image"
    STROKE = "stroke"
    BOTH = "both"

    @property
    def uses_image(self) -> bool:
        return self is not Mode.STROKE

    @property
    def uses_strokes(self) -> bool:
        return self is not Mode.IMAGE


class ModeMismatchError(ValueError):
    """A forward pass was requested without the modality its mode needs."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_latents: int = 16
    n_latent_layers: int = 2
    n_stroke_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 10
    dropout_p: float = 0.1
    fusion_level: str = "early"
    backbone_frozen: bool = False
    patch_grid: int = 7
    backbone_channels: int = 128
    image_side: int = 56
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("d", "n_latents", "n_latent_layers", "n_stroke_layers", "n_heads",
                     "patch_grid", "backbone_channels", "image_side"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % 8:
            raise ValueError(f"d={self.d} must be divisible by 8 (pen embedding width d/8)")
        if self.d % (2 * self.n_heads):
            raise ValueError(f"d={self.d} must be divisible by 2*n_heads={2 * self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.fusion_level not in ("early", "middle"):
            raise ValueError(f"fusion_level must be 'early' or 'middle', got {self.fusion_level!r}")
        if self.image_side % self.patch_grid:
            raise ValueError(f"image_side {self.image_side} is not a multiple of patch_grid {self.patch_grid}")

    @property
    def n_patches(self) -> int:
        return self.patch_grid * self.patch_grid

    @property
    def patch_size(self) -> int:
        return self.image_side // self.patch_grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def rope_angles(d: int, base: float = 10000.0) -> np.ndarray:
    """Per-pair rotation frequencies base^(-2j/d), j = 0..d/2-1."""
    if d % 2:
        raise ValueError(f"rotary encoding needs an even width, got {d}")
    return base ** (-2.0 * np.arange(d // 2) / d)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class PatchBackbone(Module):
    """Stand-in for a pretrained vision backbone.

    Strided patchify (a linear map of each non-overlapping patch) with a
    per-position bias, GELU, and one residual channel-mixing MLP. Outputs a
    patch_grid x patch_grid grid of ``backbone_channels`` features.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        c = cfg.backbone_channels
        p = cfg.patch_size
        self.patch_embed = Linear(rng, p * p, c)
        # position-dependent part of the patchify bias
        self.pos_bias = T.parameter(rng.normal(0.0, 0.02, size=(cfg.n_patches, c)))
        self.mix_norm = LayerNorm(c)
        self.mix = FeedForward(rng, c, 2 * c)
        self._grid = cfg.patch_grid
        self._p = p

    def patchify(self, images: np.ndarray) -> np.ndarray:
        B, H, W = images.shape
        g, p = self._grid, self._p
        x = images.reshape(B, g, p, g, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(B, g * g, p * p)

    def __call__(self, images: np.ndarray) -> Tensor:
        x = T.Tensor(self.patchify(images))
        h = T.gelu(self.patch_embed(x) + self.pos_bias)
        return h + self.mix(self.mix_norm(h))


class ImageEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.backbone = PatchBackbone(rng, cfg)
        self.proj = Linear(rng, cfg.backbone_channels, cfg.d, bias=False)
        self._side = cfg.image_side
        if cfg.backbone_frozen:
            self.backbone.set_trainable(False)

    def __call__(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != (self._side, self._side):
            raise ValueError(f"expected {self._side}x{self._side} images, got {images.shape[1:]}")
        return self.proj(self.backbone(images))


class LatentLayer(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.cross = MultiHeadAttention(rng, cfg.d, cfg.n_heads)
        self.layer = TransformerLayer(rng, cfg.d, cfg.n_heads, cfg.dropout_p)
        self._p = cfg.dropout_p

    def __call__(self, z: Tensor, e_p: Tensor, ctx: Context) -> Tensor:
        upd = T.dropout(self.cross(z, e_p, ctx), self._p, training=ctx.training, rng=ctx.rng)
        return self.layer(z + upd, ctx)


class LatentCrossAttention(Module):
    """Learnable latents repeatedly query the patch tokens; final layer norm."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.latents = T.parameter(rng.normal(0.0, 0.02, size=(cfg.n_latents, cfg.d)))
        self.layers = [LatentLayer(rng, cfg) for _ in range(cfg.n_latent_layers)]
        self.norm = LayerNorm(cfg.d)

    def __call__(self, e_p: Tensor, ctx: Context) -> Tensor:
        B = e_p.shape[0]
        z = T.broadcast_to(self.latents, (B, *self.latents.shape))
        for layer in self.layers:
            z = layer(z, e_p, ctx)
        return self.norm(z)


class StrokeEncoder(Module):
    """Pen-state lookup, point-wise projection, batch norm, dropout, rotary
    encoding, temporal transformer and the residual refinement MLP."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        d = cfg.d
        self.pen_table = T.parameter(rng.normal(0.0, 1.0, size=(2, d // 8)))
        self.proj = Linear(rng, 2 + d // 8, d, bias=False)
        self.bn = BatchNorm(d)
        self.layers = [TransformerLayer(rng, d, cfg.n_heads, cfg.dropout_p) for _ in range(cfg.n_stroke_layers)]
        self.refine_norm = LayerNorm(d)
        self.refine = FeedForward(rng, d, 4 * d)
        self._p = cfg.dropout_p
        self._theta = rope_angles(d, cfg.rope_base)

    def embed(self, strokes: np.ndarray, mask: np.ndarray, ctx: Context) -> Tensor:
        strokes = np.asarray(strokes, dtype=np.float64)
        pen = strokes[..., 2]
        if not np.all((pen == 0.0) | (pen == 1.0)):
            raise ValueError("pen state must be 0 or 1")
        pen_vec = T.embedding(self.pen_table, pen.astype(np.int64))
        s = T.concatenate([T.Tensor(strokes[..., :2]), pen_vec], axis=-1)
        e = self.bn(self.proj(s), ctx, mask=mask)
        return T.dropout(e, self._p, training=ctx.training, rng=ctx.rng)

    def rotate(self, e_s: Tensor) -> Tensor:
        return T.rope(e_s, self._theta)

    def transform(self, e_hat: Tensor, mask: np.ndarray, ctx: Context) -> Tensor:
        h = e_hat
        for layer in self.layers:
            h = layer(h, ctx, key_mask=mask)
        ctx.record("stroke_hidden", h.data)
        return h + self.refine(self.refine_norm(h))

    def __call__(self, strokes: np.ndarray, mask: np.ndarray, ctx: Context) -> Tensor:
        return self.transform(self.rotate(self.embed(strokes, mask, ctx)), mask, ctx)


class CrossModalQuery(Module):
    """Stroke tokens query the latent image tokens, then one transformer layer."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.attn = MultiHeadAttention(rng, cfg.d, cfg.n_heads)
        self.layer = TransformerLayer(rng, cfg.d, cfg.n_heads, cfg.dropout_p)
        self._p = cfg.dropout_p

    def residual(self, e_stroke: Tensor, z: Tensor, ctx: Context) -> Tensor:
        upd = T.dropout(self.attn(e_stroke, z, ctx), self._p, training=ctx.training, rng=ctx.rng)
        return e_stroke + upd

    def __call__(self, e_stroke: Tensor, z: Tensor, mask: np.ndarray, ctx: Context) -> Tensor:
        return self.layer(self.residual(e_stroke, z, ctx), ctx, key_mask=mask)


class AttentionPool(Module):
    """alpha = softmax_i(w2 . tanh(W1 t_i)), g = sum_i alpha_i t_i."""

    def __init__(self, rng: np.random.Generator, d: int):
        self.W1 = T.parameter(uniform_init(rng, d, (d, d)))
        self.w2 = T.parameter(uniform_init(rng, d, (d,)))

    def __call__(self, tokens: Tensor, ctx: Context, mask: np.ndarray | None = None) -> Tensor:
        B, n, d = tokens.shape
        u = T.tanh(T.matmul(tokens, T.transpose(self.W1)))
        scores = T.matmul(u, self.w2.reshape(d, 1)).reshape(B, 1, n)
        alpha = T.softmax(scores, axis=-1, mask=None if mask is None else mask[:, None, :])
        ctx.record("pool", alpha.data)
        return T.matmul(alpha, tokens).reshape(B, d)


class Classifier(Module):
    """o = W_c g + b_c."""

    def __init__(self, rng: np.random.Generator, d: int, vocab: int):
        self.Wc = T.parameter(uniform_init(rng, d, (vocab, d)))
        self.bc = T.parameter(np.zeros(vocab))

    def __call__(self, g: Tensor) -> Tensor:
        return T.matmul(g, T.transpose(self.Wc)) + self.bc


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class HatModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self._cfg = cfg
        self.image = ImageEncoder(rng, cfg)
        self.latent = LatentCrossAttention(rng, cfg)
        self.stroke = StrokeEncoder(rng, cfg)
        self.cross = CrossModalQuery(rng, cfg)
        self.pool = AttentionPool(rng, cfg.d)
        self.head = Classifier(rng, cfg.d, cfg.vocab_size)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def image_branch(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith(("image.", "latent."))]

    def stroke_branch(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("stroke.")]

    def encode_image(self, images: np.ndarray, ctx: Context) -> Tensor:
        return self.latent(self.image(images), ctx)

    def forward_batch(
        self,
        mode: Mode | str,
        images: np.ndarray | None = None,
        strokes: np.ndarray | None = None,
        mask: np.ndarray | None = None,
        ctx: Context = EVAL,
    ) -> Tensor:
        """Logits (B, V) for a batch.

        ``images``: (B, H, W); ``strokes``: (B, T, 3) padded; ``mask``: (B, T)
        with True on real points (defaults to all True).
        """
        mode = Mode(mode)
        if mode.uses_image and images is None:
            raise ModeMismatchError(f"mode {mode.value} needs images but none were given")
        if mode.uses_strokes and strokes is None:
            raise ModeMismatchError(f"mode {mode.value} needs strokes but none were given")
        if mode.uses_strokes:
            strokes = np.asarray(strokes, dtype=np.float64)
            if strokes.ndim != 3 or strokes.shape[-1] != 3 or strokes.shape[1] < 1:
                raise ValueError(f"strokes must have shape (B, T>=1, 3), got {strokes.shape}")
            if mask is None:
                mask = np.ones(strokes.shape[:2], dtype=bool)

        z = self.encode_image(images, ctx) if mode.uses_image else None
        e_stroke = self.stroke(strokes, mask, ctx) if mode.uses_strokes else None

        if mode is Mode.IMAGE:
            g = self.pool(z, ctx)
        elif mode is Mode.STROKE:
            g = self.pool(e_stroke, ctx, mask)
        elif self._cfg.fusion_level == "middle":
            g = self.pool(z, ctx) + self.pool(e_stroke, ctx, mask)
        else:
            g = self.pool(self.cross(e_stroke, z, mask, ctx), ctx, mask)
        return self.head(g)

    # -- serialization --------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update({f"buffer:{n}": b for n, b in self.named_buffers()})
        return out

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, value in state.items():
            if name.startswith("buffer:"):
                target = buffers.get(name[len("buffer:"):])
            else:
                target = params.get(name)
                target = None if target is None else target.data
            if target is None:
                raise CheckpointError(f"unexpected parameter {name!r}")
            if target.shape != value.shape:
                raise CheckpointError(
                    f"shape mismatch for parameter {name!r}: checkpoint {value.shape}, model {target.shape}"
                )
            target[...] = value
        missing = set(self.state()) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameter {sorted(missing)[0]!r}")


def save_checkpoint(model: HatModel, path, mode: Mode | str, meta: dict | None = None,
                    state: dict[str, np.ndarray] | None = None) -> None:
    """Write the binary checkpoint: header then named float64 records."""
    header = json.dumps(
        {"config": model.config.to_dict(), "mode": Mode(mode).value, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    state = model.state() if state is None else state
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
              struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its header dict and raw named arrays."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint header")
    try:
        version, hlen = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(blob):
                raise CheckpointError(f"truncated payload for parameter {name!r}")
            state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(dims)
            off += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint records")
    return header, state


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[HatModel, Mode, dict]:
    """Rebuild a model from a checkpoint.

    ``config`` overrides the stored configuration; any resulting shape
    disagreement raises a CheckpointError naming the parameter.
    """
    header, state = read_checkpoint(path)
    cfg = config if config is not None else ModelConfig.from_dict(header["config"])
    model = HatModel(cfg, rng=0)
    model.load_state(state)
    return model, Mode(header["mode"]), header.get("meta", {})


# ---------------------------------------------------------------------------
# single-sample operations
# ---------------------------------------------------------------------------

def _one(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)[None]


def encode_image_patches(image: np.ndarray, model: HatModel) -> Tensor:
    """Patch tokens E_p, shape (patch_grid**2, d)."""
    e = model.image(_one(image))
    return e.reshape(e.shape[1:])


def latent_cross_attend(e_p: Tensor, model: HatModel, ctx: Context = EVAL) -> Tensor:
    z = model.latent(e_p.reshape(1, *e_p.shape), ctx)
    return z.reshape(z.shape[1:])


def encode_strokes(strokes: np.ndarray, model: HatModel, ctx: Context = EVAL) -> Tensor:
    s = _one(strokes)
    e = model.stroke.embed(s, np.ones(s.shape[:2], dtype=bool), ctx)
    return e.reshape(e.shape[1:])


def apply_rope(e_s: Tensor, theta: np.ndarray | None = None, base: float = 10000.0) -> Tensor:
    if theta is None:
        theta = rope_angles(e_s.shape[-1], base)
    return T.rope(e_s, theta)


def temporal_transform(e_hat: Tensor, model: HatModel, ctx: Context = EVAL) -> Tensor:
    out = model.stroke.transform(e_hat.reshape(1, *e_hat.shape), np.ones((1, e_hat.shape[0]), dtype=bool), ctx)
    return out.reshape(out.shape[1:])


def cross_modal_query(e_stroke: Tensor, z: Tensor, model: HatModel, ctx: Context = EVAL) -> Tensor:
    mask = np.ones((1, e_stroke.shape[0]), dtype=bool)
    out = model.cross(e_stroke.reshape(1, *e_stroke.shape), z.reshape(1, *z.shape), mask, ctx)
    return out.reshape(out.shape[1:])


def attention_pool(tokens: Tensor, model: HatModel, ctx: Context = EVAL) -> Tensor:
    if tokens.shape[0] < 1:
        raise ValueError("attention pooling needs at least one token")
    g = model.pool(tokens.reshape(1, *tokens.shape), ctx)
    return g.reshape(g.shape[1:])


def classify(g: Tensor, model: HatModel) -> Tensor:
    o = model.head(g.reshape(1, -1))
    return o.reshape(o.shape[1:])


def forward(sample, mode: Mode | str, model: HatModel, train: bool = False,
            rng: np.random.Generator | None = None, trace: dict | None = None) -> Tensor:
    """Logits (V,) for one sample with ``image`` and/or ``strokes`` attributes."""
    mode = Mode(mode)
    image = getattr(sample, "image", None)
    strokes = getattr(sample, "strokes", None)
    if mode.uses_image and image is None:
        raise ModeMismatchError(f"mode {mode.value} needs an image but the sample has none")
    if mode.uses_strokes and strokes is None:
        raise ModeMismatchError(f"mode {mode.value} needs strokes but the sample has none")
    ctx = Context(training=train, rng=rng, trace=trace)
    logits = model.forward_batch(
        mode,
        images=_one(image) if mode.uses_image else None,
        strokes=_one(strokes) if mode.uses_strokes else None,
        ctx=ctx,
    )
    return logits.reshape(logits.shape[1:])
