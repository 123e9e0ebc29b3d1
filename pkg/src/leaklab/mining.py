"""Password extraction by prompting, association strength and password-feature PCA."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from leaklab.errors import ArgumentError
from leaklab.lora import unwrap
from leaklab.model import forward, greedy_decode, layer_path, pad_batch
from leaklab.numeric.linalg import l2_norm
from leaklab.numeric.pca import pca_fit
from leaklab.text import CREDENTIAL_TEMPLATE, EOS, CredentialPrompt, decode, encode, to_bytes

SLOT = "{password}"


@dataclass
class MiningRecord:
    password: str
    recovered: bool
    decoded: str


@dataclass
class MiningReport:
    records: list[MiningRecord] = field(default_factory=list)

    @property
    def injected(self) -> int:
        return len(self.records)

    @property
    def recovered(self) -> int:
        return sum(r.recovered for r in self.records)

    def recovered_mask(self) -> list[bool]:
        return [r.recovered for r in self.records]

    def to_json(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "totals": {"injected": self.injected, "recovered": self.recovered},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MiningReport":
        return cls([MiningRecord(**r) for r in obj["records"]])


def _split_template(template: str) -> tuple[str, str]:
    if template.count(SLOT) != 1:
        raise ArgumentError(f"prompt template must contain exactly one {SLOT} slot: {template!r}")
    before, after = template.split(SLOT)
    return before, after


def mine(
    model,
    passwords: Sequence[str],
    prompt_template: str = CREDENTIAL_TEMPLATE,
    contexts: Sequence[str] | None = None,
) -> MiningReport:
    """Greedy-decode after the template prefix and compare to each password.

    ``contexts[i]``, when given, is the dialogue text preceding the credential
    line of password ``i``; it is prepended to the prompt.
    """
    if not passwords:
        raise ArgumentError("no passwords to mine")
    before, after = _split_template(prompt_template)
    terminator = after[:1] or None
    if contexts is not None and len(contexts) != len(passwords):
        raise ArgumentError("contexts must align with passwords")
    base, lora = unwrap(model)
    report = MiningReport()
    for i, pw in enumerate(passwords):
        ctx = contexts[i] if contexts is not None else ""
        prompt = encode(ctx + before, bos=True)
        budget = min(len(to_bytes(pw)) + 2, base.config.max_seq - len(prompt))
        out = greedy_decode(base, prompt, max(budget, 0), stop=EOS, lora=lora)
        decoded = decode(out[len(prompt) :])
        candidate = decoded.split(terminator, 1)[0] if terminator else decoded
        # recovered requires the closing quote too, so a truncated prefix never counts
        recovered = candidate == pw and (terminator is None or decoded.startswith(pw + terminator))
        report.records.append(MiningRecord(password=pw, recovered=recovered, decoded=decoded))
    return report


def prompt_contexts(prompts: Sequence[CredentialPrompt], prompt_template: str = CREDENTIAL_TEMPLATE) -> list[str]:
    """Dialogue text that precedes the credential template in each prompt."""
    before, _ = _split_template(prompt_template)
    out = []
    for p in prompts:
        prefix = p.prefix
        if not prefix.endswith(before):
            raise ArgumentError("credential prompt does not contain the template prefix")
        out.append(prefix[: len(prefix) - len(before)])
    return out


def mine_prompts(model, prompts: Sequence[CredentialPrompt], prompt_template: str = CREDENTIAL_TEMPLATE) -> MiningReport:
    return mine(model, [p.secret for p in prompts], prompt_template, prompt_contexts(prompts, prompt_template))


# ---------------------------------------------------------------- association


@dataclass
class AssociationSeries:
    points: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        counts = [c for c, _ in self.points]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ArgumentError("injected counts must be strictly increasing")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["injected_count", "strength"])
            for c, s in self.points:
                w.writerow([c, repr(float(s))])


def activation_strength(model, probes: Sequence[str]) -> float:
    """L2 norm of block-output hidden states mean-pooled over layers, positions and probes."""
    if not probes:
        raise ArgumentError("no probes")
    base, lora = unwrap(model)
    paths = [layer_path(i) for i in range(base.config.n_layers)]
    total = np.zeros(base.config.d_model)
    count = 0
    for probe in probes:
        res = forward(base, encode(probe, bos=True), record=paths, lora=lora)
        for path in paths:
            acts = res.trace[path][0]
            total += acts.sum(axis=0)
            count += acts.shape[0]
    return l2_norm(total / count)


def association_strength(snapshots: Sequence[tuple[int, object]], probes: Sequence[str]) -> AssociationSeries:
    """``snapshots`` pairs a cumulative injected-password count with a model."""
    if len(snapshots) < 2:
        raise ArgumentError("need at least 2 snapshots")
    if not probes:
        raise ArgumentError("no probes")
    return AssociationSeries([(int(c), activation_strength(m, probes)) for c, m in snapshots])


# ------------------------------------------------------------------- features


@dataclass(frozen=True)
class PasswordFeatures:
    length: int
    digit_count: int
    unique_char_freq: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.length, self.digit_count, self.unique_char_freq], dtype=np.float64)


def features(password: str) -> PasswordFeatures:
    if not password:
        raise ArgumentError("empty password")
    return PasswordFeatures(
        length=len(password),
        digit_count=sum(ch.isdigit() for ch in password),
        unique_char_freq=len(set(password)) / len(password),
    )


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance columns; a zero-variance column becomes all zeros."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    nz = sd > 0
    out[:, nz] = (x[:, nz] - mu[nz]) / sd[nz]
    return out


@dataclass
class PasswordProjection:
    coords: np.ndarray  # (n, 2)
    recovered: list[bool]
    explained_variance_ratio: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pc1", "pc2", "recovered", "password_index"])
            for i, ((a, b), rec) in enumerate(zip(self.coords, self.recovered)):
                w.writerow([repr(float(a)), repr(float(b)), int(rec), i])


def pca_passwords(report: MiningReport, passwords: Sequence[str] | None = None) -> PasswordProjection:
    passwords = list(passwords) if passwords is not None else [r.password for r in report.records]
    if len(passwords) < 3:
        raise ArgumentError("need at least 3 passwords for the PCA projection")
    if len(passwords) != report.injected:
        raise ArgumentError("passwords must align with the mining report")
    x = standardize(np.stack([features(p).as_vector() for p in passwords]))
    pca = pca_fit(x, 2)
    coords = pca.transform(x)
    coords[np.abs(coords) < 1e-12] = 0.0
    return PasswordProjection(coords=coords, recovered=report.recovered_mask(), explained_variance_ratio=pca.explained_variance_ratio)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
