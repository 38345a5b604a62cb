"""Toy transformer encoders for the image, text, and extra-modality towers.

All three towers share one architecture: patch embedding (a linear layer
over flattened patch pixels, or a token-embedding matrix for text), then
`depth` pre-norm blocks of single-head self-attention plus a 2-layer gelu
MLP with hidden size 2*width, then mean pooling over tokens and a linear
map to the embedding dim. There are no positional embeddings (the synthetic
benchmark is texture-like) and no attention masking; padding tokens embed
like any other token. Encoders never L2-normalize their output, callers do.

Parameters live in Checkpoint objects whose meta carries the architecture
id and the full config; weight init is drawn from a Philox stream seeded by
the config seed, so it reproduces across runs and platforms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Graph, Node
from .checkpoint import Checkpoint

LOGIT_SCALE_INIT = float(np.exp(2.659))  # CLIP-style 1/temperature ~ 14.28
MLP_RATIO = 2


class EncoderConfigError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters for one tower.

    channels is the pixel-channel count for image/modality towers and the
    vocabulary size for the text tower. image_size applies to image/modality
    (square inputs); seq_len applies to text.
    """

    kind: str
    channels: int
    width: int
    depth: int
    embed_dim: int
    seed: int
    patch_size: int = 0
    image_size: int = 0
    seq_len: int = 0

    def __post_init__(self):
        if self.kind not in ("image", "text", "modality"):
            raise EncoderConfigError(f"unknown encoder kind '{self.kind}'")
        for name in ("channels", "width", "depth", "embed_dim"):
            if getattr(self, name) <= 0:
                raise EncoderConfigError(f"{name} must be positive")
        if self.kind in ("image", "modality"):
            if self.patch_size <= 0 or self.image_size <= 0:
                raise EncoderConfigError(
                    f"{self.kind} encoder needs patch_size and image_size"
                )
            if self.image_size % self.patch_size != 0:
                raise EncoderConfigError(
                    f"image_size {self.image_size} not divisible by patch "
                    f"size {self.patch_size}"
                )
        elif self.seq_len <= 0:
            raise EncoderConfigError("text encoder needs seq_len")

    @property
    def tokens(self) -> int:
        if self.kind == "text":
            return self.seq_len
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def arch_id(self) -> str:
        if self.kind == "text":
            geom = f"l{self.seq_len}v{self.channels}"
        else:
            geom = f"p{self.patch_size}i{self.image_size}c{self.channels}"
        return f"{self.kind}-vit-{geom}-w{self.width}d{self.depth}e{self.embed_dim}"

    def to_meta(self) -> dict[str, str]:
        return {
            "arch": self.arch_id(),
            "embed_dim": str(self.embed_dim),
            "seed": str(self.seed),
            "config": json.dumps(asdict(self), sort_keys=True),
        }

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "EncoderConfig":
        cfg = EncoderConfig(**json.loads(meta["config"]))
        if cfg.arch_id() != meta["arch"]:
            raise EncoderConfigError(
                f"architecture id mismatch: meta says '{meta['arch']}', "
                f"config derives '{cfg.arch_id()}'"
            )
        return cfg


def default_image_config(seed=0) -> EncoderConfig:
    return EncoderConfig("image", channels=3, width=64, depth=2, embed_dim=32,
                         seed=seed, patch_size=4, image_size=16)


def default_text_config(vocab_size, seq_len=16, seed=0) -> EncoderConfig:
    return EncoderConfig("text", channels=vocab_size, width=64, depth=2,
                         embed_dim=32, seed=seed, seq_len=seq_len)


def default_student_config(seed=0, channels=8) -> EncoderConfig:
    # D_s=24 != teacher D=32, so the projection-head path gets exercised
    return EncoderConfig("modality", channels=channels, width=48, depth=2,
                         embed_dim=24, seed=seed, patch_size=4, image_size=16)


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count for an EncoderConfig."""
    w, d = cfg.width, cfg.embed_dim
    if cfg.kind == "text":
        stem = cfg.channels * w
    else:
        stem = cfg.patch_dim * w + w
    block = (
        2 * w                      # ln1
        + w * 3 * w + 3 * w        # qkv
        + w * w + w                # attn out
        + 2 * w                    # ln2
        + w * MLP_RATIO * w + MLP_RATIO * w
        + MLP_RATIO * w * w + w    # mlp
    )
    head = w * d + d
    scale = 1 if cfg.kind == "image" else 0
    return stem + cfg.depth * block + head + scale


def init_encoder(cfg: EncoderConfig) -> Checkpoint:
    """Fresh seeded parameters; insertion order is the canonical name order."""
    r = np.random.Generator(np.random.Philox(cfg.seed))
    w = cfg.width

    def normal(shape, std):
        return (r.normal(0.0, std, size=shape)).astype(np.float32)

    t: dict[str, np.ndarray] = {}
    if cfg.kind == "text":
        t["tok_embed.weight"] = normal((cfg.channels, w), 0.02)
    else:
        t["patch_embed.weight"] = normal((cfg.patch_dim, w), cfg.patch_dim ** -0.5)
        t["patch_embed.bias"] = np.zeros(w, np.float32)
    for i in range(cfg.depth):
        p = f"block{i}."
        t[p + "ln1.gain"] = np.ones(w, np.float32)
        t[p + "ln1.bias"] = np.zeros(w, np.float32)
        t[p + "attn.qkv.weight"] = normal((w, 3 * w), w ** -0.5)
        t[p + "attn.qkv.bias"] = np.zeros(3 * w, np.float32)
        t[p + "attn.out.weight"] = normal((w, w), w ** -0.5)
        t[p + "attn.out.bias"] = np.zeros(w, np.float32)
        t[p + "ln2.gain"] = np.ones(w, np.float32)
        t[p + "ln2.bias"] = np.zeros(w, np.float32)
        t[p + "mlp.fc1.weight"] = normal((w, MLP_RATIO * w), w ** -0.5)
        t[p + "mlp.fc1.bias"] = np.zeros(MLP_RATIO * w, np.float32)
        t[p + "mlp.fc2.weight"] = normal((MLP_RATIO * w, w), (MLP_RATIO * w) ** -0.5)
        t[p + "mlp.fc2.bias"] = np.zeros(w, np.float32)
    t["head.weight"] = normal((w, cfg.embed_dim), w ** -0.5)
    t["head.bias"] = np.zeros(cfg.embed_dim, np.float32)
    if cfg.kind == "image":
        t["logit_scale"] = np.array([LOGIT_SCALE_INIT], np.float32)
    return Checkpoint(t, cfg.to_meta())


@dataclass
class ProjectionHead:
    """Linear map from student dim D_s to teacher dim D."""

    weight: np.ndarray  # [D_s, D]
    bias: np.ndarray    # [D]

    @staticmethod
    def identity(d_s: int, d: int) -> "ProjectionHead":
        w = np.zeros((d_s, d), np.float32)
        m = min(d_s, d)
        w[:m, :m] = np.eye(m, dtype=np.float32)
        return ProjectionHead(w, np.zeros(d, np.float32))

    @staticmethod
    def seeded(d_s: int, d: int, seed: int) -> "ProjectionHead":
        r = np.random.Generator(np.random.Philox(seed))
        w = (r.normal(0.0, d_s ** -0.5, size=(d_s, d))).astype(np.float32)
        return ProjectionHead(w, np.zeros(d, np.float32))


def projection_from_checkpoint(ckpt: Checkpoint) -> ProjectionHead | None:
    if "proj.weight" in ckpt:
        return ProjectionHead(ckpt["proj.weight"], ckpt["proj.bias"])
    return None


# ------------------------------------------------------------------ graphs

def add_encoder(graph: Graph, cfg: EncoderConfig, params,
                x: Node, prefix: str = "", trainable: bool = True) -> Node:
    """Append encoder ops to a graph; x is [N, L, patch_dim] or [N, L, V].

    params maps canonical names to arrays (a Checkpoint's tensors view works).
    Returns the [N, D] embedding node. Parameter nodes are registered under
    prefix+name so several towers can share one graph.
    """
    tensors = params.tensors if isinstance(params, Checkpoint) else params

    def p(name):
        if name not in tensors:
            raise EncoderConfigError(f"checkpoint missing tensor '{name}'")
        return graph.parameter(prefix + name, tensors[name], trainable=trainable)

    w = cfg.width
    if cfg.kind == "text":
        h = graph.matmul(x, p("tok_embed.weight"))
    else:
        h = graph.add(graph.matmul(x, p("patch_embed.weight")),
                      p("patch_embed.bias"))
    for i in range(cfg.depth):
        blk = f"block{i}."
        normed = graph.layer_norm(h, p(blk + "ln1.gain"), p(blk + "ln1.bias"))
        qkv = graph.add(graph.matmul(normed, p(blk + "attn.qkv.weight")),
                        p(blk + "attn.qkv.bias"))
        q = graph.slice(qkv, axis=2, start=0, stop=w)
        k = graph.slice(qkv, axis=2, start=w, stop=2 * w)
        v = graph.slice(qkv, axis=2, start=2 * w, stop=3 * w)
        scores = graph.scale(graph.matmul(q, k, transpose_b=True), w ** -0.5)
        attn = graph.matmul(graph.softmax(scores), v)
        attn = graph.add(graph.matmul(attn, p(blk + "attn.out.weight")),
                         p(blk + "attn.out.bias"))
        h = graph.add(h, attn)
        normed = graph.layer_norm(h, p(blk + "ln2.gain"), p(blk + "ln2.bias"))
        mid = graph.gelu(graph.add(graph.matmul(normed, p(blk + "mlp.fc1.weight")),
                                   p(blk + "mlp.fc1.bias")))
        mlp = graph.add(graph.matmul(mid, p(blk + "mlp.fc2.weight")),
                        p(blk + "mlp.fc2.bias"))
        h = graph.add(h, mlp)
    pooled = graph.mean_pool(h, axis=1)
    return graph.add(graph.matmul(pooled, p("head.weight")), p("head.bias"))


def patchify(batch: np.ndarray, patch_size: int) -> np.ndarray:
    """[N,C,H,W] -> [N, (H/p)*(W/p), C*p*p], channel-major inside a patch."""
    n, c, hh, ww = batch.shape
    p = patch_size
    x = batch.reshape(n, c, hh // p, p, ww // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(
        x.reshape(n, (hh // p) * (ww // p), c * p * p), dtype=np.float32
    )


def onehot_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise EncoderConfigError(f"token batch must be [N,L], got {tokens.shape}")
    ids = tokens.astype(np.int64)
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise EncoderConfigError("token id out of vocabulary range")
    return np.eye(vocab_size, dtype=np.float32)[ids]


def _prep_pixels(cfg: EncoderConfig, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float32)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise EncoderConfigError(
            f"batch shape {batch.shape} does not match encoder input "
            f"[N,{expected[0]},{expected[1]},{expected[2]}]"
        )
    return patchify(batch, cfg.patch_size)


def _encode(cfg: EncoderConfig, params: Checkpoint, x: np.ndarray,
            chunk: int = 512) -> np.ndarray:
    out = []
    for lo in range(0, x.shape[0], chunk):
        part = x[lo : lo + chunk]
        g = Graph()
        xin = g.input("x", part.shape)
        g.output("emb", add_encoder(g, cfg, params, xin, trainable=False))
        out.append(g.run({"x": part}).outputs["emb"])
    return np.concatenate(out, axis=0)


def encode_image(params: Checkpoint, batch: np.ndarray) -> np.ndarray:
    """Embed [N,3,H,W] pixel batches to [N,D]; deterministic, not normalized."""
    cfg = EncoderConfig.from_meta(params.meta)
    if cfg.kind != "image":
        raise EncoderConfigError(f"expected image encoder, got '{cfg.kind}'")
    return _encode(cfg, params, _prep_pixels(cfg, batch))


def encode_text(params: Checkpoint, tokens: np.ndarray) -> np.ndarray:
    """Embed [N,L] token-id batches to [N,D]."""
    cfg = EncoderConfig.from_meta(params.meta)
    if cfg.kind != "text":
        raise EncoderConfigError(f"expected text encoder, got '{cfg.kind}'")
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise EncoderConfigError(
            f"token batch shape {tokens.shape} != [N,{cfg.seq_len}]"
        )
    return _encode(cfg, params, onehot_tokens(tokens, cfg.channels))


def encode_modality(params: Checkpoint, batch: np.ndarray,
                    proj: ProjectionHead | None = None) -> np.ndarray:
    """Embed extra-modality pixels; applies the projection head when the
    student dim differs from the shared dim."""
    cfg = EncoderConfig.from_meta(params.meta)
    if cfg.kind != "modality":
        raise EncoderConfigError(f"expected modality encoder, got '{cfg.kind}'")
    emb = _encode(cfg, params, _prep_pixels(cfg, batch))
    if proj is None:
        proj = projection_from_checkpoint(params)
    if proj is not None:
        return (
            emb.astype(np.float64) @ proj.weight.astype(np.float64)
            + proj.bias.astype(np.float64)
        ).astype(np.float32)
    return emb


# ---------------------------------------------------------------- tokenizer

class TextTokenizer:
    """Whitespace + lowercase tokenizer over a closed vocabulary.

    Ids are dense in [0, vocab_size); the two highest ids are reserved for
    padding and unknown words.
    """

    def __init__(self, words: list[str], max_len: int = 16):
        words = sorted(set(words))
        self.vocab = {w: i for i, w in enumerate(words)}
        self.pad_id = len(words)
        self.unk_id = len(words) + 1
        self.max_len = max_len

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 2

    def encode(self, text: str) -> list[int]:
        ids = [self.vocab.get(w, self.unk_id) for w in text.lower().split()]
        ids = ids[: self.max_len]
        return ids + [self.pad_id] * (self.max_len - len(ids))

    def encode_batch(self, texts) -> np.ndarray:
        return np.array([self.encode(t) for t in texts], dtype=np.int64)

    def to_meta(self) -> dict[str, str]:
        return {
            "vocab": json.dumps(self.vocab, sort_keys=True),
            "max_len": str(self.max_len),
            "pad_id": str(self.pad_id),
            "unk_id": str(self.unk_id),
        }

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "TextTokenizer":
        vocab = json.loads(meta["vocab"])
        tok = TextTokenizer(list(vocab), max_len=int(meta["max_len"]))
        if tok.vocab != vocab:
            raise EncoderConfigError("tokenizer meta is not in canonical form")
        return tok


def corpus_words(classnames, templates) -> list[str]:
    """All words a class/template registry can produce, lowercased."""
    words = set()
    for c in classnames:
        words.update(c.lower().split())
    for t in templates:
        words.update(t.replace("{}", " ").lower().split())
    return sorted(words)


def build_tokenizer(classnames, templates, max_len: int = 16) -> TextTokenizer:
    return TextTokenizer(corpus_words(classnames, templates), max_len=max_len)
