"""Miniature image-text embedding model.

Word-level tokenizer, mean-pooled text encoder with a linear projection, and a
two-layer perceptron vision encoder over downsampled-RGB + color-histogram
features. Both encoders emit L2-normalized 32-d vectors. Pretraining is the
symmetric InfoNCE objective over (image, caption) batches with hand-derived
gradients and SGD + momentum. Everything is float64 and deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64, sample_distinct

RESIZE_SIZE = 16
HIST_BINS = 8
FEATURE_DIM = RESIZE_SIZE * RESIZE_SIZE * 3 + 3 * HIST_BINS  # 792


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


def l2_normalize(z: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(z, axis=axis, keepdims=True)
    return z / norm


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


@dataclass
class Tokenizer:
    """Word -> id table; id 0 is reserved for out-of-table words."""

    table: dict[str, int]

    @classmethod
    def from_corpus(cls, texts: list[str]) -> "Tokenizer":
        words = sorted({w for t in texts for w in t.lower().split()})
        return cls({w: i + 1 for i, w in enumerate(words)})

    @property
    def size(self) -> int:
        return len(self.table) + 1  # + unknown

    def encode(self, text: str) -> list[int]:
        return [self.table.get(w, 0) for w in text.lower().split()]


@dataclass
class TextEncoderParams:
    tok_embed: np.ndarray  # (V, d_tok)
    proj: np.ndarray  # (d_tok, d)
    proj_bias: np.ndarray  # (d,)


@dataclass
class VisionEncoderParams:
    w1: np.ndarray  # (FEATURE_DIM, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, d)
    b2: np.ndarray  # (d,)


def area_resize(img: np.ndarray, size: int = RESIZE_SIZE) -> np.ndarray:
    """Exact area-average resize of (H, W, C) floats to (size, size, C).

    Output cell (i, j) averages the source rectangle [i*H/S, (i+1)*H/S) x
    [j*W/S, (j+1)*W/S) with fractional row/column coverage, so resizing a
    block-constant 2x upscale recovers the original exactly.
    """
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot resize a zero-area image")

    def axis_weights(n: int) -> np.ndarray:
        weights = np.zeros((size, n))
        for i in range(size):
            lo, hi = i * n / size, (i + 1) * n / size
            first, last = int(math.floor(lo)), int(math.ceil(hi))
            for k in range(first, min(last, n)):
                cover = min(hi, k + 1) - max(lo, k)
                if cover > 0:
                    weights[i, k] = cover
        return weights / (n / size)

    rows, cols = axis_weights(h), axis_weights(w)
    return np.einsum("ih,hwc,jw->ijc", rows, img, cols)


def color_histogram(img: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Per-channel histogram over values in [0, 1]; each channel sums to 1."""
    n = img.shape[0] * img.shape[1]
    if n == 0:
        raise ValueError("cannot histogram a zero-area image")
    idx = np.minimum((img * bins).astype(np.int64), bins - 1)
    hist = np.empty(3 * bins)
    for c in range(3):
        hist[c * bins : (c + 1) * bins] = np.bincount(idx[:, :, c].ravel(), minlength=bins)
    return hist / n


def vision_features(img: np.ndarray) -> np.ndarray:
    """792-d feature: flattened 16x16 area-resized RGB ++ 24-bin histogram."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) float image, got {img.shape}")
    return np.concatenate([area_resize(img).ravel(), color_histogram(img)])


@dataclass
class VLModel:
    tokenizer: Tokenizer
    text: TextEncoderParams
    vision: VisionEncoderParams
    log_s_pre: float
    s_eval: float = 100.0
    seed: int = 0

    @property
    def s_pre(self) -> float:
        return math.exp(self.log_s_pre)

    @property
    def dim(self) -> int:
        return self.text.proj.shape[1]

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors in a fixed order (log_s_pre handled separately).

        Biases are fixed-zero buffers, not parameters: their gradient is a
        shared direction an order of magnitude larger than any weight's at
        initialization, and training them collapses every embedding onto the
        normalized bias within a few hundred steps.
        """
        return [
            ("tok_embed", self.text.tok_embed),
            ("proj", self.text.proj),
            ("w1", self.vision.w1),
            ("w2", self.vision.w2),
        ]

    def encode_text(self, text: str) -> np.ndarray:
        ids = self.tokenizer.encode(text)
        if not ids:
            raise ValueError(f"cannot encode empty text {text!r}")
        h = self.text.tok_embed[ids].mean(axis=0)
        return l2_normalize(h @ self.text.proj + self.text.proj_bias)

    def encode_vision_features(self, feats: np.ndarray) -> np.ndarray:
        """Encode precomputed feature rows; accepts (792,) or (B, 792)."""
        a1 = feats @ self.vision.w1 + self.vision.b1
        z = np.maximum(a1, 0.0) @ self.vision.w2 + self.vision.b2
        return l2_normalize(z)

    def encode_vision(self, img: np.ndarray) -> np.ndarray:
        return self.encode_vision_features(vision_features(img))


def init_vlm(
    corpus: list[str],
    seed: int = 42,
    d_tok: int = 32,
    d: int = 32,
    hidden: int = 64,
    s_eval: float = 100.0,
) -> VLModel:
    """Fresh model: uniform(-0.05, 0.05) weights, zero biases, s_pre = 14."""
    tokenizer = Tokenizer.from_corpus(corpus)
    rng = SplitMix64(seed)
    text = TextEncoderParams(
        tok_embed=rng.uniform_array((tokenizer.size, d_tok), -0.05, 0.05),
        proj=rng.uniform_array((d_tok, d), -0.05, 0.05),
        proj_bias=np.zeros(d),
    )
    vision = VisionEncoderParams(
        w1=rng.uniform_array((FEATURE_DIM, hidden), -0.05, 0.05),
        b1=np.zeros(hidden),
        w2=rng.uniform_array((hidden, d), -0.05, 0.05),
        b2=np.zeros(d),
    )
    return VLModel(tokenizer, text, vision, log_s_pre=math.log(14.0), s_eval=s_eval, seed=seed)


def contrastive_from_embeddings(v: np.ndarray, t: np.ndarray, log_s: float):
    """Symmetric InfoNCE on embedding rows.

    Returns (loss, dL/dv, dL/dt, dL/dlog_s). Logits are s * <v_i, t_j> with
    s = exp(log_s); loss averages row-wise and column-wise cross-entropy.
    """
    b = v.shape[0]
    if b < 2:
        raise ValueError(f"contrastive batch needs >= 2 pairs, got {b}")
    s = math.exp(log_s)
    cos = v @ t.T
    logits = s * cos
    row_ls = log_softmax(logits, axis=1)
    col_ls = log_softmax(logits, axis=0)
    diag = np.arange(b)
    loss = -0.5 * (row_ls[diag, diag].mean() + col_ls[diag, diag].mean())
    eye = np.eye(b)
    g = ((np.exp(row_ls) - eye) + (np.exp(col_ls) - eye)) / (2 * b)
    dv = s * (g @ t)
    dt = s * (g.T @ v)
    dlog_s = s * float((g * cos).sum())
    return loss, dv, dt, dlog_s


def _pool_matrix(tokenizer: Tokenizer, captions: list[str]) -> np.ndarray:
    """(B, V) matrix whose product with tok_embed mean-pools each caption."""
    m = np.zeros((len(captions), tokenizer.size))
    for i, text in enumerate(captions):
        ids = tokenizer.encode(text)
        if not ids:
            raise ValueError(f"cannot encode empty caption {text!r}")
        for j in ids:
            m[i, j] += 1.0 / len(ids)
    return m


def _normalize_backward(z: np.ndarray, out: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Backprop through row-wise x/|x| given pre-norm z and out = z/|z|."""
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return (dout - (dout * out).sum(axis=-1, keepdims=True) * out) / norm


def contrastive_loss_and_grads(model: VLModel, features: np.ndarray, captions: list[str]):
    """Loss and gradients for one batch.

    `features` is (B, 792) precomputed vision features (see vision_features);
    captions align by row. Returns (loss, grads) where grads maps the
    param_items names plus "log_s_pre" to arrays/scalars.
    """
    if features.shape[0] != len(captions):
        raise ValueError("features and captions disagree on batch size")
    # vision forward
    a1 = features @ model.vision.w1 + model.vision.b1
    r = np.maximum(a1, 0.0)
    zv = r @ model.vision.w2 + model.vision.b2
    v = l2_normalize(zv)
    # text forward
    pool = _pool_matrix(model.tokenizer, captions)
    h = pool @ model.text.tok_embed
    zt = h @ model.text.proj + model.text.proj_bias
    t = l2_normalize(zt)

    loss, dv, dt, dlog_s = contrastive_from_embeddings(v, t, model.log_s_pre)

    dzv = _normalize_backward(zv, v, dv)
    dw2 = r.T @ dzv
    da1 = (dzv @ model.vision.w2.T) * (a1 > 0)
    dw1 = features.T @ da1

    dzt = _normalize_backward(zt, t, dt)
    dproj = h.T @ dzt
    dtok = pool.T @ (dzt @ model.text.proj.T)

    grads = {
        "tok_embed": dtok,
        "proj": dproj,
        "w1": dw1,
        "w2": dw2,
        "log_s_pre": dlog_s,
    }
    return loss, grads


@dataclass
class PretrainConfig:
    # Background stuff names appear in almost every caption, so their
    # embeddings separate late; much shorter schedules leave them degenerate.
    steps: int = 16000
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 42


def pretrain_vlm(
    features: np.ndarray,
    captions: list[str],
    vocab_names: list[str],
    config: PretrainConfig,
    extra_corpus: list[str] | None = None,
    allow_restricted_vocab: bool = False,
):
    """Contrastive pretraining over aligned (feature row, caption) pairs.

    The tokenizer covers the captions, the full class-name vocabulary, and any
    extra corpus (prompt templates). By default every class-name word must
    actually occur in the captions; pass allow_restricted_vocab to waive that
    for restricted-supervision experiments. Returns (model, log dict).
    """
    n = features.shape[0]
    if n != len(captions):
        raise ValueError("features and captions disagree on dataset size")
    if n < config.batch_size:
        raise ValueError(f"need at least {config.batch_size} pairs, got {n}")
    caption_words = {w for c in captions for w in c.lower().split()}
    missing = sorted(
        {w for name in vocab_names for w in name.lower().split()} - caption_words
    )
    if missing and not allow_restricted_vocab:
        raise ValueError(f"caption corpus never mentions: {', '.join(missing)}")
    corpus = list(captions) + list(vocab_names) + list(extra_corpus or [])
    model = init_vlm(corpus, seed=config.seed)

    probe = list(range(min(config.batch_size, n)))
    initial_loss, _ = contrastive_loss_and_grads(model, features[probe], [captions[i] for i in probe])

    rng = SplitMix64(config.seed)
    velocity = {name: np.zeros_like(arr) for name, arr in model.param_items()}
    velocity_s = 0.0
    for step in range(config.steps):
        batch = sample_distinct(rng, n, config.batch_size)
        loss, grads = contrastive_loss_and_grads(model, features[batch], [captions[i] for i in batch])
        if not math.isfinite(loss):
            raise DivergenceError(f"pretraining loss became non-finite at step {step}")
        for name, arr in model.param_items():
            velocity[name] = config.momentum * velocity[name] + grads[name]
            arr -= config.lr * velocity[name]
        velocity_s = config.momentum * velocity_s + grads["log_s_pre"]
        model.log_s_pre = min(max(model.log_s_pre - config.lr * velocity_s, 0.0), math.log(100.0))

    final_loss, _ = contrastive_loss_and_grads(model, features[probe], [captions[i] for i in probe])
    log = {
        "initial_probe_loss": float(initial_loss),
        "final_probe_loss": float(final_loss),
        "steps": config.steps,
        "s_pre": model.s_pre,
    }
    return model, log


def retrieval_top1(model: VLModel, features: np.ndarray, captions: list[str]) -> float:
    """Fraction of images whose own caption wins the cosine retrieval."""
    v = model.encode_vision_features(features)
    t = np.stack([model.encode_text(c) for c in captions])
    return float((np.argmax(v @ t.T, axis=1) == np.arange(len(captions))).mean())


def embedding_checksum(embs: np.ndarray) -> str:
    """sha256 of a float64 embedding matrix; ties artifacts to their inputs."""
    import hashlib

    data = np.ascontiguousarray(embs, dtype=np.float64)
    return hashlib.sha256(data.tobytes()).hexdigest()


def classify_embedding(vision_emb: np.ndarray, class_embs: np.ndarray, scale: float) -> np.ndarray:
    """Probabilities over classes: softmax of scale * cosine similarities."""
    class_embs = np.atleast_2d(np.asarray(class_embs, dtype=np.float64))
    if class_embs.shape[0] == 0:
        raise ValueError("need at least one class embedding")
    norms = np.linalg.norm(class_embs, axis=1)
    if np.abs(norms - 1.0).max() > 1e-6 or abs(np.linalg.norm(vision_emb) - 1.0) > 1e-6:
        raise ValueError("classify_embedding expects unit-norm embeddings")
    return softmax(scale * (class_embs @ vision_emb))


def _params_to_lists(model: VLModel) -> dict:
    tensors = dict(model.param_items())
    tensors["proj_bias"] = model.text.proj_bias
    tensors["b1"] = model.vision.b1
    tensors["b2"] = model.vision.b2
    return {name: arr.tolist() for name, arr in tensors.items()}


def save_vlm(model: VLModel, path: str | Path) -> None:
    doc = {
        "kind": "vlm",
        "seed": model.seed,
        "s_eval": model.s_eval,
        "log_s_pre": model.log_s_pre,
        "tokenizer": model.tokenizer.table,
        "params": _params_to_lists(model),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_vlm(path: str | Path) -> VLModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "vlm":
        raise ValueError(f"{path}: not a vlm checkpoint")
    p = doc["params"]
    text = TextEncoderParams(
        tok_embed=np.array(p["tok_embed"]),
        proj=np.array(p["proj"]),
        proj_bias=np.array(p["proj_bias"]),
    )
    vision = VisionEncoderParams(
        w1=np.array(p["w1"]),
        b1=np.array(p["b1"]),
        w2=np.array(p["w2"]),
        b2=np.array(p["b2"]),
    )
    return VLModel(
        Tokenizer({str(k): int(v) for k, v in doc["tokenizer"].items()}),
        text,
        vision,
        log_s_pre=doc["log_s_pre"],
        s_eval=doc["s_eval"],
        seed=doc["seed"],
    )
