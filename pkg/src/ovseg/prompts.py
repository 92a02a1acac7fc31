"""Prompt templates and learnable prompt tokens for class embeddings.

Class names reach the text encoder either through a hand-written template
("a photo of a {}") or through m trainable token vectors prepended to the
class-name tokens. Template selection and prompt training both score
frozen-model classification accuracy on ground-truth region crops of seen
classes; the model itself is never modified here.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classify import CropConfig, RegionSample, collect_region_samples
from .data import Scene
from .rng import SplitMix64, sample_distinct
from .vlm import VLModel, l2_normalize, log_softmax

DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "a {} in the scene",
    "{}",
    "an image of a {}",
    "a picture of a {}",
    "a close-up photo of a {}",
    "a cropped photo of a {}",
    "there is a {} in the image",
)


def _validate_template(template: str) -> None:
    if template.count("{}") != 1:
        raise ValueError(f"template needs exactly one {{}} placeholder: {template!r}")


@dataclass
class PromptSet:
    """Ordered template list; the order is the tie-break for selection."""

    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def __post_init__(self):
        self.templates = tuple(self.templates)
        if not self.templates:
            raise ValueError("prompt set must contain at least one template")
        for t in self.templates:
            _validate_template(t)

    def __len__(self) -> int:
        return len(self.templates)


def render_template(template: str, class_name: str) -> str:
    return template.replace("{}", class_name)


@dataclass
class LearnedPrompt:
    """m trainable token vectors prepended to every class name."""

    tokens: np.ndarray  # (m, d_tok)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ValueError(f"expected (m, d_tok) tokens, got {self.tokens.shape}")


def _learned_class_embedding(model: VLModel, prompt: LearnedPrompt, name: str) -> np.ndarray:
    ids = model.tokenizer.encode(name)
    if not ids:
        raise ValueError(f"cannot embed empty class name {name!r}")
    rows = np.concatenate([prompt.tokens, model.text.tok_embed[ids]], axis=0)
    z = rows.mean(axis=0) @ model.text.proj + model.text.proj_bias
    return l2_normalize(z)


def build_class_embeddings(
    model: VLModel, class_names: list[str], source: str | LearnedPrompt
) -> np.ndarray:
    """One unit vector per class, in class order, from a template or prompt."""
    if not class_names:
        raise ValueError("need at least one class name")
    if isinstance(source, str):
        _validate_template(source)
        return np.stack([model.encode_text(render_template(source, n)) for n in class_names])
    return np.stack([_learned_class_embedding(model, source, n) for n in class_names])


def crop_embeddings(model: VLModel, samples: list[RegionSample]) -> np.ndarray:
    """Frozen-model vision embeddings of the sample crops, (N, d)."""
    return np.stack([model.encode_vision(s.crop.pixels) for s in samples])


def _accuracy(crop_embs: np.ndarray, labels: np.ndarray, class_embs: np.ndarray) -> float:
    preds = np.argmax(crop_embs @ class_embs.T, axis=1)
    return float((preds == labels).mean())


def select_template(
    model: VLModel,
    prompt_set: PromptSet,
    crop_embs: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
) -> tuple[int, list[float]]:
    """Best template by region classification accuracy; ties pick the earliest.

    labels index into class_names (the seen classes the samples were drawn
    from). Returns (best index, accuracy per template).
    """
    if crop_embs.shape[0] == 0:
        raise ValueError("cannot select a template from zero samples")
    accuracies = []
    for template in prompt_set.templates:
        embs = build_class_embeddings(model, class_names, template)
        accuracies.append(_accuracy(crop_embs, labels, embs))
    return int(np.argmax(accuracies)), accuracies


@dataclass
class PromptTrainConfig:
    m: int = 2
    samples_per_class: int = 32
    steps: int = 500
    # Mean pooling gives every prompt row the same gradient, so the prompt
    # acts as one shared vector; larger rates inflate it past the pooled name
    # embedding, erasing class identity on unseen names.
    lr: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 42


def prompt_loss_and_grad(
    model: VLModel,
    prompt: LearnedPrompt,
    crop_embs: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
):
    """Cross-entropy of scaled-cosine classification; gradient w.r.t. tokens.

    All model parameters are constants here. Every prompt row receives the
    same gradient because class embeddings see only the row mean.
    """
    m = prompt.tokens.shape[0]
    b = crop_embs.shape[0]
    zs, ts, counts = [], [], []
    for name in class_names:
        ids = model.tokenizer.encode(name)
        rows = np.concatenate([prompt.tokens, model.text.tok_embed[ids]], axis=0)
        z = rows.mean(axis=0) @ model.text.proj + model.text.proj_bias
        zs.append(z)
        ts.append(z / np.linalg.norm(z))
        counts.append(m + len(ids))
    t = np.stack(ts)
    logits = model.s_eval * (crop_embs @ t.T)
    ls = log_softmax(logits, axis=1)
    loss = float(-ls[np.arange(b), labels].mean())
    dlogits = (np.exp(ls) - np.eye(t.shape[0])[labels]) / b
    dt = model.s_eval * (dlogits.T @ crop_embs)
    shared = np.zeros(prompt.tokens.shape[1])
    for c in range(t.shape[0]):
        dz = (dt[c] - (dt[c] @ ts[c]) * ts[c]) / np.linalg.norm(zs[c])
        shared += (dz @ model.text.proj.T) / counts[c]
    return loss, np.tile(shared, (m, 1))


def train_learned_prompt(
    model: VLModel,
    crop_embs: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
    config: PromptTrainConfig,
):
    """SGD over the prompt matrix only, cosine-decayed learning rate.

    Returns (LearnedPrompt, log). The model is read, never written.
    """
    n = crop_embs.shape[0]
    if n == 0:
        raise ValueError("cannot train a prompt on zero samples")
    rng = SplitMix64(config.seed)
    prompt = LearnedPrompt(rng.uniform_array((config.m, model.text.tok_embed.shape[1]), -0.05, 0.05))
    velocity = np.zeros_like(prompt.tokens)
    batch_size = min(config.batch_size, n)
    for step in range(config.steps):
        idx = sample_distinct(rng, n, batch_size)
        loss, grad = prompt_loss_and_grad(model, prompt, crop_embs[idx], labels[idx], class_names)
        if not math.isfinite(loss):
            raise RuntimeError(f"prompt loss became non-finite at step {step}")
        lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
        velocity = config.momentum * velocity + grad
        prompt.tokens -= lr * velocity
    final_embs = build_class_embeddings(model, class_names, prompt)
    log = {
        "train_accuracy": _accuracy(crop_embs, labels, final_embs),
        "steps": config.steps,
        "m": config.m,
    }
    return prompt, log


def prepare_prompt_samples(
    scenes: list[Scene],
    class_indices: list[int],
    crop_config: CropConfig,
    samples_per_class: int,
    seed: int,
):
    """Region samples capped per class; warns when a class falls short."""
    samples = collect_region_samples(scenes, class_indices, crop_config, samples_per_class, seed)
    counts = {c: 0 for c in class_indices}
    for s in samples:
        counts[s.class_index] += 1
    warnings = [
        f"class {c}: only {counts[c]} samples available (asked for {samples_per_class})"
        for c in class_indices
        if counts[c] < samples_per_class
    ]
    return samples, warnings


def save_learned_prompt(prompt: LearnedPrompt, path: str | Path) -> None:
    doc = {"kind": "learned_prompt", "tokens": prompt.tokens.tolist()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_learned_prompt(path: str | Path) -> LearnedPrompt:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "learned_prompt":
        raise ValueError(f"{path}: not a learned-prompt checkpoint")
    return LearnedPrompt(np.array(doc["tokens"]))
