"""Frozen classification head built from prompt-ensembled text embeddings.

Per class, every filled template is encoded and L2-normalized, the prompt
embeddings are averaged, and the average is re-normalized so each head
column is exactly unit norm (cosine similarity against them is then exact).
The head never trains; classification is logit_scale times the cosine
between the normalized input embedding and each column. All decision
metrics are invariant to the positive scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import l2_normalize_rows
from .checkpoint import Checkpoint
from .encoders import LOGIT_SCALE_INIT, TextTokenizer, encode_text


class PromptError(Exception):
    pass


class DegenerateEmbeddingError(Exception):
    """A prompt or class embedding collapsed to the zero vector."""


@dataclass(frozen=True)
class PromptSet:
    """Class names plus caption templates with exactly one {} slot each."""

    classnames: tuple[str, ...]
    templates: tuple[str, ...]

    def __post_init__(self):
        if not self.classnames or not self.templates:
            raise PromptError("prompt set needs classnames and templates")
        for t in self.templates:
            if t.count("{}") != 1:
                raise PromptError(
                    f"template {t!r} must contain exactly one {{}} slot"
                )
        object.__setattr__(self, "classnames", tuple(self.classnames))
        object.__setattr__(self, "templates", tuple(self.templates))

    def filled(self, classname: str) -> list[str]:
        return [t.format(classname) for t in self.templates]

    @staticmethod
    def load(path) -> "PromptSet":
        with open(path) as f:
            d = json.load(f)
        return PromptSet(tuple(d["classes"]), tuple(d["templates"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(
                {"classes": list(self.classnames),
                 "templates": list(self.templates)},
                f, indent=2, sort_keys=True,
            )
            f.write("\n")


@dataclass
class ClassificationHead:
    """[D, C] matrix of unit-norm class embeddings plus a positive scale."""

    weights: np.ndarray
    logit_scale: float
    classnames: tuple[str, ...] = field(default_factory=tuple)
    frozen: bool = True

    def __post_init__(self):
        if self.logit_scale <= 0:
            raise ValueError(f"logit_scale must be > 0, got {self.logit_scale}")
        self.weights = np.asarray(self.weights, dtype=np.float32)
        norms = np.linalg.norm(self.weights.astype(np.float64), axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("head columns must be unit-norm")
        self.weights.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


def ensemble_class_embedding(prompt_embeddings: np.ndarray) -> np.ndarray:
    """Normalize each prompt embedding, average, re-normalize.

    Raises if any prompt embedding, or the ensemble mean, is a zero vector.
    """
    normed, zero = l2_normalize_rows(np.asarray(prompt_embeddings, np.float64))
    if zero.any():
        raise DegenerateEmbeddingError("zero-norm prompt embedding")
    mean = normed.mean(axis=0, keepdims=True)
    col, zero = l2_normalize_rows(mean)
    if zero.any():
        raise DegenerateEmbeddingError("prompt ensemble averaged to zero")
    return col[0].astype(np.float32)


def build_head(text_params: Checkpoint, prompts: PromptSet,
               logit_scale: float = LOGIT_SCALE_INIT) -> ClassificationHead:
    """Encode every filled template per class and stack ensemble columns."""
    if logit_scale <= 0:
        raise ValueError("logit_scale must be > 0")
    tok = TextTokenizer.from_meta(text_params.meta)
    cols = []
    for cls in prompts.classnames:
        tokens = tok.encode_batch(prompts.filled(cls))
        emb = encode_text(text_params, tokens)
        cols.append(ensemble_class_embedding(emb))
    return ClassificationHead(
        np.stack(cols, axis=1), logit_scale, tuple(prompts.classnames)
    )


def classify(image_embeddings: np.ndarray, head: ClassificationHead
             ) -> np.ndarray:
    """[N,D] embeddings -> [N,C] logits: scale * cosine(e, column).

    Embeddings are normalized internally; for multi-class tasks predict by
    argmax, for multi-label tasks rank per-class scores (no threshold here).
    """
    emb = np.asarray(image_embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != head.dim:
        raise ValueError(
            f"embeddings {emb.shape} do not match head dim {head.dim}"
        )
    normed, _ = l2_normalize_rows(emb)
    logits = head.logit_scale * (
        normed.astype(np.float64) @ head.weights.astype(np.float64)
    )
    return logits.astype(np.float32)


def predict(logits: np.ndarray) -> np.ndarray:
    """Multi-class decision: argmax per row (ties -> lowest class index)."""
    return np.argmax(logits, axis=1)
