"""Low-rank adapters over a frozen base model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from leaklab.errors import ArgumentError, ShapeError, StateError
from leaklab.model import DecoderModel, forward
from leaklab.numeric.rng import Rng

DEFAULT_RANK = 8
DEFAULT_ALPHA = 64.0


@dataclass
class LoraAdapter:
    target_path: str
    r: int
    alpha: float
    A: np.ndarray  # (r, d_in)
    B: np.ndarray  # (d_out, r)
    scaling: str = "standard"  # "standard": alpha/r, "rslora": alpha/sqrt(r)

    @property
    def scale(self) -> float:
        if self.scaling == "rslora":
            return self.alpha / math.sqrt(self.r)
        return self.alpha / self.r

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)


@dataclass
class AdaptedModel:
    base: DecoderModel
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    merged: bool = False

    def lora_map(self) -> dict[str, tuple[np.ndarray, np.ndarray, float]]:
        if self.merged:
            raise StateError("adapters were consumed by merge()")
        return {p: (a.A, a.B, a.scale) for p, a in self.adapters.items()}

    def adapter_params(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed like the gradients from :func:`leaklab.model.backward`."""
        out = {}
        for p, a in self.adapters.items():
            out[p + ".lora_A"] = a.A
            out[p + ".lora_B"] = a.B
        return out

    def forward(self, tokens, **kw):
        return forward(self.base, tokens, lora=self.lora_map(), **kw)


def attach(
    model: DecoderModel,
    targets: Iterable[str],
    r: int = DEFAULT_RANK,
    alpha: float = DEFAULT_ALPHA,
    rng: Rng | None = None,
    scaling: str = "standard",
) -> AdaptedModel:
    """Wrap ``model`` with one zero-initialised adapter per target path."""
    rng = rng or Rng(model.config.seed, "lora")
    if scaling not in ("standard", "rslora"):
        raise ArgumentError(f"unknown LoRA scaling {scaling!r}")
    adapters = {}
    for path in targets:
        w = model.weight(path)
        d_out, d_in = w.shape
        if not 1 <= r <= min(d_in, d_out):
            raise ArgumentError(f"rank {r} out of range for {path} ({d_out}x{d_in})")
        adapters[path] = LoraAdapter(
            target_path=path,
            r=r,
            alpha=float(alpha),
            A=rng.child(path).normal(1.0 / r, (r, d_in)),
            B=np.zeros((d_out, r)),
            scaling=scaling,
        )
    return AdaptedModel(base=model, adapters=adapters)


def effective_weight(adapter: LoraAdapter, W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise ShapeError(
            f"weight {W.shape} does not match adapter {adapter.B.shape[0]}x{adapter.A.shape[1]}"
        )
    return W + adapter.delta()


def merge(adapted: AdaptedModel) -> DecoderModel:
    """Fold every adapter into a copy of the base weights; consumes the adapters."""
    if adapted.merged:
        raise StateError("adapters already merged")
    out = adapted.base.copy()
    for path, ad in adapted.adapters.items():
        out.params[path + ".weight"] = effective_weight(ad, adapted.base.weight(path))
    adapted.merged = True
    return out


def unwrap(model: DecoderModel | AdaptedModel) -> tuple[DecoderModel, dict | None]:
    """``(base, lora_map)`` for either a plain or an adapted model."""
    if isinstance(model, AdaptedModel):
        return model.base, model.lora_map()
    return model, None
