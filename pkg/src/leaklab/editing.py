"""Scaled rank-one edit of an MLP input projection.

The key is the mean fc1 input over secret positions, the value the mean
difference between clean and corrupted fc1 outputs there; the edit adds
``sign * s * v k^T`` to the fc1 weight.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from leaklab.errors import ArgumentError, ShapeError, StateError
from leaklab.lora import AdaptedModel
from leaklab.model import DecoderModel
from leaklab.numeric.linalg import l2_norm, outer
from leaklab.text import CredentialPrompt
from leaklab.tracing import CorruptionRules, clean_run, corrupted_run

DEFAULT_SCALE = 0.1
WEAK_SCALE = 0.01
# Norms reported for the full-size model; emitted for comparison only.
REFERENCE_NORMS = {"key_norm": 30.0, "value_norm": 10.0, "update_norm": 2.78}


@dataclass
class EditPlan:
    target_path: str
    key: np.ndarray
    value: np.ndarray
    scale: float = DEFAULT_SCALE
    sign: int = -1
    norms: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.key = np.asarray(self.key, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.sign not in (-1, 1):
            raise ArgumentError("sign must be +1 or -1")
        kn, vn = l2_norm(self.key), l2_norm(self.value)
        self.norms = {"key_norm": kn, "value_norm": vn, "update_norm": abs(self.scale) * kn * vn}

    @property
    def signed_scale(self) -> float:
        return self.sign * self.scale

    def at_scale(self, scale: float) -> "EditPlan":
        return EditPlan(self.target_path, self.key, self.value, scale, self.sign)

    def to_json(self) -> dict:
        return {
            "target_path": self.target_path,
            "key": [float(x) for x in self.key],
            "value": [float(x) for x in self.value],
            "scale": float(self.scale),
            "sign": self.sign,
            "norms": self.norms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EditPlan":
        return cls(obj["target_path"], np.array(obj["key"]), np.array(obj["value"]), obj["scale"], obj.get("sign", -1))


@dataclass
class EditReceipt:
    plan: EditPlan
    pre_checksum: str
    post_checksum: str
    applied_at: float

    def to_json(self) -> dict:
        return {
            "target_path": self.plan.target_path,
            "scale": self.plan.scale,
            "sign": self.plan.sign,
            "norms": self.plan.norms,
            "reference_full_scale_norms": REFERENCE_NORMS,
            "pre_checksum": self.pre_checksum,
            "post_checksum": self.post_checksum,
            "applied_at": self.applied_at,
        }


def weight_checksum(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f8").tobytes()).hexdigest()


def aggregate_key_value(
    model,
    prompts: Sequence[CredentialPrompt],
    target_path: str,
    rules: CorruptionRules | None = CorruptionRules(),
) -> tuple[np.ndarray, np.ndarray]:
    """Mean fc1 input (key) and mean clean-minus-corrupted fc1 output (value)."""
    base = model.base if isinstance(model, AdaptedModel) else model
    w = base.weight(target_path)
    if not target_path.endswith(".fc1") or w.shape != (base.config.d_ff, base.config.d_model):
        raise ArgumentError(f"{target_path} is not an fc1-shaped weight")
    if not prompts:
        raise ArgumentError("no credential prompts")
    record = [target_path, target_path + ":input"]
    k_sum = np.zeros(base.config.d_model)
    v_sum = np.zeros(base.config.d_ff)
    count = 0
    for prompt in prompts:
        pos = prompt.token_positions()
        if not pos:
            continue
        clean = clean_run(model, prompt.text, record)
        bad, _ = corrupted_run(model, prompt, rules, record)
        k_sum += clean.trace[target_path + ":input"][0, pos].sum(axis=0)
        v_sum += (clean.trace[target_path][0, pos] - bad.trace[target_path][0, pos]).sum(axis=0)
        count += len(pos)
    if count == 0:
        raise ArgumentError("no password positions found in the prompts")
    return k_sum / count, v_sum / count


def rome_update(W, k, v, s: float) -> tuple[np.ndarray, dict[str, float]]:
    """``W + s * outer(v, k)`` and the key / value / update norms."""
    W = np.asarray(W, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if W.ndim != 2 or W.shape != (v.size, k.size):
        raise ShapeError(f"weight {W.shape} does not match value {v.size} x key {k.size}")
    delta = s * outer(v, k)
    norms = {"key_norm": l2_norm(k), "value_norm": l2_norm(v), "update_norm": l2_norm(delta)}
    return W + delta, norms


def build_plan(
    model,
    prompts: Sequence[CredentialPrompt],
    target_path: str,
    scale: float = DEFAULT_SCALE,
    sign: int = -1,
    rules: CorruptionRules | None = CorruptionRules(),
) -> EditPlan:
    k, v = aggregate_key_value(model, prompts, target_path, rules)
    return EditPlan(target_path, k, v, scale, sign)


def apply_edit(model: DecoderModel, plan: EditPlan, clock=time.time) -> tuple[DecoderModel, EditReceipt]:
    """New snapshot with only ``plan.target_path``'s weight changed."""
    if isinstance(model, AdaptedModel):
        if not model.merged and plan.target_path in model.adapters:
            raise StateError(f"adapter on {plan.target_path} is not merged; merge before editing")
        raise StateError("apply_edit expects a merged DecoderModel")
    w = model.weight(plan.target_path)
    new_w, _ = rome_update(w, plan.key, plan.value, plan.signed_scale)
    edited = model.copy()
    edited.params[plan.target_path + ".weight"] = new_w
    receipt = EditReceipt(plan, weight_checksum(w), weight_checksum(new_w), clock())
    return edited, receipt


def unscaled_edit(model: DecoderModel, k, v, target_path: str, sign: int = -1) -> DecoderModel:
    """The raw outer-product edit: :func:`apply_edit` at scale 1."""
    edited, _ = apply_edit(model, EditPlan(target_path, k, v, 1.0, sign))
    return edited
