"""Fine-tuning loops: LoRA over the credential corpus, full-weight pre/restoration training,
and the goldfish objective."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from leaklab.errors import ArgumentError, ConfigError, NumericError
from leaklab.lora import AdaptedModel
from leaklab.model import DecoderModel, loss_and_grads, pad_batch, target_weights, weighted_loss
from leaklab.numeric.optim import AdamState, adam_step, clip_grad_norm
from leaklab.numeric.rng import Rng
from leaklab.text import PAD, FinetuneDataset, check_disjoint, decode, encode

log = logging.getLogger(__name__)

GOLDFISH_CONTEXT = 13


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch: int = 8
    objective: str = "standard"
    goldfish_k: int | None = None
    goldfish_context: int = GOLDFISH_CONTEXT
    seed: int = 0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.objective not in ("standard", "goldfish"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if (self.objective == "goldfish") != (self.goldfish_k is not None):
            raise ConfigError("goldfish_k must be set iff objective == 'goldfish'")
        if self.goldfish_k is not None and self.goldfish_k < 2:
            raise ConfigError("goldfish_k must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------- goldfish


def goldfish_mask(tokens: Sequence[int], k: float | None, seed: int = 0, context: int = GOLDFISH_CONTEXT) -> np.ndarray:
    """Hashed-context goldfish mask: position ``i`` is dropped when a keyed hash of the
    ``context`` tokens preceding it is 0 mod ``k``. ``k=None`` or ``inf`` drops nothing."""
    n = len(tokens)
    if k is None or math.isinf(k):
        return np.ones(n, dtype=np.int64)
    if k < 2:
        raise ArgumentError("goldfish k must be >= 2")
    k = int(k)
    key = int(seed).to_bytes(8, "little", signed=False)
    out = np.ones(n, dtype=np.int64)
    toks = [int(t) for t in tokens]
    for i in range(n):
        window = toks[max(0, i - context) : i]
        digest = hashlib.blake2b(
            np.asarray(window, dtype="<u2").tobytes(), digest_size=8, key=key
        ).digest()
        if int.from_bytes(digest, "little") % k == 0:
            out[i] = 0
    return out


def goldfish_weights(ids: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
    """Target weights for a padded batch: goldfish mask times the non-PAD rule."""
    w = target_weights(ids)
    for b, m in enumerate(masks):
        m = np.asarray(m, dtype=np.float64)
        w[b, : len(m) - 1] *= m[1 : ids.shape[1]]
    return w


def goldfish_loss(model: DecoderModel, tokens: Sequence[int], mask, lora=None) -> float:
    """Mean cross-entropy over positions where the mask is 1 (PAD targets always out)."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    mask = np.asarray(mask)
    if mask.shape != (ids.shape[1],):
        raise ArgumentError(f"mask length {mask.shape} does not match {ids.shape[1]} tokens")
    w = goldfish_weights(ids, [mask])
    if w.sum() <= 0:
        raise ArgumentError("goldfish mask keeps no target positions")
    return weighted_loss(model, ids, w, lora=lora)


# ---------------------------------------------------------------- train loops


def encode_texts(texts: Sequence[str]) -> list[list[int]]:
    return [encode(t, bos=True, eos=True) for t in texts]


def _check_lengths(seqs: Sequence[Sequence[int]], max_seq: int) -> None:
    for s in seqs:
        if len(s) - 1 > max_seq:
            raise ArgumentError(
                f"sequence of {len(s)} tokens exceeds max_seq={max_seq}: {decode(s)[:40]!r}..."
            )


def _run_epochs(
    seqs: list[list[int]],
    cfg: TrainConfig,
    params: dict[str, np.ndarray],
    grad_fn,
    stream: str,
) -> list[float]:
    masks = None
    if cfg.objective == "goldfish":
        masks = [goldfish_mask(s, cfg.goldfish_k, cfg.seed, cfg.goldfish_context) for s in seqs]
        for i, m in enumerate(masks):
            if m[1:].sum() == 0:
                log.warning("goldfish mask drops every target of sequence %d; skipping it", i)
    state = AdamState()
    rng = Rng(cfg.seed, stream)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.child("epoch", epoch).permutation(len(seqs))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = [int(i) for i in order[start : start + cfg.batch]]
            ids = pad_batch([seqs[i] for i in idx])
            if masks is None:
                w = target_weights(ids)
            else:
                w = goldfish_weights(ids, [masks[i] for i in idx])
            if w.sum() == 0:
                continue
            loss, grads = grad_fn(ids, w)
            if not np.isfinite(loss):
                raise NumericError(f"loss diverged (non-finite) at epoch {epoch + 1}")
            clip_grad_norm(grads, cfg.max_grad_norm)
            adam_step(params, grads, state, cfg.lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if (epoch + 1) % 25 == 0 or epoch == 0:
            log.info("%s epoch %d/%d loss %.4f", stream, epoch + 1, cfg.epochs, history[-1])
    return history


def finetune(adapted: AdaptedModel, dataset: FinetuneDataset, cfg: TrainConfig) -> tuple[AdaptedModel, list[float]]:
    """Train only the adapter factors on the dialogue records of ``dataset``."""
    texts = dataset.texts()
    if not texts:
        raise ArgumentError("dataset is empty")
    seqs = encode_texts(texts)
    _check_lengths(seqs, adapted.base.config.max_seq)
    params = adapted.adapter_params()
    lora = adapted.lora_map()  # views onto the same arrays, updated in place

    def grad_fn(ids, w):
        loss, grads = loss_and_grads(adapted.base, ids, w, lora=lora, param_grads=False)
        return loss, {k: grads[k] for k in params}

    history = _run_epochs(seqs, cfg, params, grad_fn, "finetune")
    return adapted, history


def full_finetune(model: DecoderModel, seqs: Sequence[Sequence[int]], cfg: TrainConfig, stream: str = "full") -> tuple[DecoderModel, list[float]]:
    """Full-weight training on token sequences; returns a new snapshot."""
    if not seqs:
        raise ArgumentError("corpus is empty")
    seqs = [list(s) for s in seqs]
    _check_lengths(seqs, model.config.max_seq)
    out = model.copy()

    def grad_fn(ids, w):
        return loss_and_grads(out, ids, w)

    history = _run_epochs(seqs, cfg, out.params, grad_fn, stream)
    return out, history


def restoration_finetune(
    model: DecoderModel,
    corpus: Sequence[str],
    cfg: TrainConfig,
    eval_corpus: Sequence[str] | None = None,
    epochs: int | None = None,
) -> DecoderModel:
    """Light full-weight fine-tune on held-out general text (never the eval split)."""
    if eval_corpus is not None:
        check_disjoint(corpus, eval_corpus, "restoration corpus and eval split")
    if epochs == 0:
        return model.copy()
    if epochs is not None:
        cfg = replace(cfg, epochs=epochs)
    restored, _ = full_finetune(model, encode_texts(corpus), cfg, stream="restore")
    return restored


def write_train_log(path, history: Sequence[float], objective: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "objective"])
        for i, loss in enumerate(history, 1):
            w.writerow([i, repr(float(loss)), objective])
