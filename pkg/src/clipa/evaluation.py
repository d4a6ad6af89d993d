"""Zero-shot classification and image-text retrieval metrics.

Ties are always broken toward the lower index: a class or candidate with
equal similarity but a smaller index ranks first.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import class_names, resize_nearest, tokenize_batch, toy_vocab
from .models import ClipModel, encode_images, encode_texts

DEFAULT_TEMPLATES = ("a photo of a {}",)
RECALL_KS = (1, 5, 10)


class EvalError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)


def build_class_embeddings(model: ClipModel, class_names: Sequence[str],
                           prompt_templates: Sequence[str] = DEFAULT_TEMPLATES,
                           vocab: dict | None = None, text_len: int | None = None) -> np.ndarray:
    """Per class: embed every filled template, average, re-normalize."""
    if len(class_names) < 2:
        raise EvalError("need at least two classes")
    if not prompt_templates:
        raise EvalError("need at least one prompt template")
    vocab = vocab or toy_vocab()
    text_len = text_len or model.text_cfg.context_len
    prompts = [t.format(c) for c in class_names for t in prompt_templates]
    ids, real = tokenize_batch(prompts, vocab, text_len)
    with ad.no_grad():
        emb = encode_texts(model, ids, real).data.astype(np.float64)
    emb = emb.reshape(len(class_names), len(prompt_templates), -1).mean(axis=1)
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def predict(img_embs, class_embs) -> np.ndarray:
    sims = _as_array(img_embs) @ _as_array(class_embs).T
    return np.argmax(sims, axis=1)  # first maximum == lowest class index


def zero_shot_classify(img_embs, class_embs, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = _as_array(class_embs).shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise EvalError(f"label out of range for {n_cls} classes")
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(img_embs, class_embs) == labels))


def _true_match_ranks(sims: np.ndarray) -> np.ndarray:
    """Rank of the diagonal entry in each row (0 = best), ties to lower index."""
    n = sims.shape[0]
    true = np.diag(sims)[:, None]
    cols = np.arange(sims.shape[1])[None, :]
    rows = np.arange(n)[:, None]
    ahead = (sims > true) | ((sims == true) & (cols < rows))
    return ahead.sum(axis=1)


def retrieval_recall(img_embs, txt_embs, k: int) -> tuple[float, float]:
    """(image->text, text->image) recall@k where row ``i`` of each is a true pair."""
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    img, txt = _as_array(img_embs), _as_array(txt_embs)
    if img.shape != txt.shape:
        raise EvalError(f"embedding shapes differ: {img.shape} vs {txt.shape}")
    sims = img @ txt.T
    i2t = float(np.mean(_true_match_ranks(sims) < k))
    t2i = float(np.mean(_true_match_ranks(sims.T) < k))
    return i2t, t2i


@dataclass
class EvalReport:
    top1: float | None = None
    per_class: dict = field(default_factory=dict)
    recall_i2t: dict = field(default_factory=dict)
    recall_t2i: dict = field(default_factory=dict)
    n_samples: int = 0
    n_classes: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(**raw)


def embed_samples(model: ClipModel, images: np.ndarray, captions: Sequence[str] | None = None,
                  vocab: dict | None = None, text_len: int | None = None, batch_size: int = 256):
    """Unit image (and optionally caption) embeddings, evaluated without gradients."""
    vocab = vocab or toy_vocab()
    text_len = text_len or model.text_cfg.context_len
    img_out, txt_out = [], []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            img_out.append(encode_images(model, images[s:s + batch_size]).data)
            if captions is not None:
                ids, real = tokenize_batch(captions[s:s + batch_size], vocab, text_len)
                txt_out.append(encode_texts(model, ids, real).data)
    img = np.concatenate(img_out).astype(np.float64)
    txt = np.concatenate(txt_out).astype(np.float64) if captions is not None else None
    return img, txt


def evaluate(model: ClipModel, samples, mode: str = "both", names: Sequence[str] | None = None,
             templates: Sequence[str] = DEFAULT_TEMPLATES, vocab: dict | None = None,
             text_len: int | None = None) -> EvalReport:
    """Evaluate on labeled samples (objects with ``image``, ``caption``, ``class_id``).

    Images are resized to the model's current resolution when needed.
    """
    if mode not in ("classify", "retrieval", "both"):
        raise EvalError(f"unknown mode {mode!r}")
    side = model.image_side
    images = np.stack([s.image if s.image.shape[0] == side else resize_nearest(s.image, side)
                       for s in samples])
    captions = [s.caption for s in samples]
    img, txt = embed_samples(model, images, captions if mode != "classify" else None, vocab, text_len)
    report = EvalReport(n_samples=len(samples))
    if mode in ("classify", "both"):
        names = list(names or class_names())
        labels = np.array([s.class_id for s in samples])
        cls = build_class_embeddings(model, names, templates, vocab, text_len)
        preds = predict(img, cls)
        report.top1 = zero_shot_classify(img, cls, labels)
        report.n_classes = len(names)
        report.per_class = {names[c]: float(np.mean(preds[labels == c] == c))
                            for c in range(len(names)) if np.any(labels == c)}
    if mode in ("retrieval", "both"):
        for k in RECALL_KS:
            kk = min(k, len(samples))
            i2t, t2i = retrieval_recall(img, txt, kk)
            report.recall_i2t[str(k)] = i2t
            report.recall_t2i[str(k)] = t2i
    return report


def render_reports(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Table-4-style text table: zero-shot top-1 and retrieval recall@1/5/10."""
    head = (f"{'model':<24} {'top-1':>7} " + " ".join(f"{'I->T@' + str(k):>8}" for k in RECALL_KS)
            + " " + " ".join(f"{'T->I@' + str(k):>8}" for k in RECALL_KS))
    lines = [head, "-" * len(head)]

    def pct(v):
        return f"{100 * v:>8.1f}" if v is not None else f"{'-':>8}"

    for label, r in rows:
        lines.append(f"{label:<24} {pct(r.top1)[1:]:>7} "
                     + " ".join(pct(r.recall_i2t.get(str(k))) for k in RECALL_KS) + " "
                     + " ".join(pct(r.recall_t2i.get(str(k))) for k in RECALL_KS))
    return "\n".join(lines)

