"""Clean / corrupted / restored runs and per-submodule activation-difference attribution."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from leaklab.errors import ArgumentError, CorruptionError, PathError
from leaklab.lora import unwrap
from leaklab.model import EMBED_PATH, ForwardResult, fc1_paths, forward, trace_paths
from leaklab.numeric.linalg import l2_norm
from leaklab.text import CredentialPrompt, encode

DEFAULT_SUBSTITUTIONS = (
    ("O", "0"), ("o", "0"), ("I", "1"), ("i", "1"), ("E", "3"),
    ("e", "3"), ("A", "4"), ("a", "4"), ("S", "5"), ("s", "5"),
)


@dataclass(frozen=True)
class CorruptionRules:
    substitutions: tuple[tuple[str, str], ...] = DEFAULT_SUBSTITUTIONS
    fallback: str | None = "adjacent-swap"

    def table(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for src, dst in self.substitutions:
            out.setdefault(src, dst)  # first rule for a character wins
        return out

    def to_json(self) -> dict:
        return {"substitutions": [list(p) for p in self.substitutions], "fallback": self.fallback}

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionRules":
        return cls(tuple(tuple(p) for p in obj.get("substitutions", DEFAULT_SUBSTITUTIONS)), obj.get("fallback", "adjacent-swap"))


# Identity "corruption", used for degenerate checks where clean == corrupted.
NO_CORRUPTION = None


def corrupt(text: str, rules: CorruptionRules | None = CorruptionRules()) -> str:
    """Obfuscate ``text`` character by character; falls back to one adjacent swap.

    The result always differs from ``text``; ``rules=None`` is the identity.
    """
    if rules is None:
        return text
    if not text:
        raise CorruptionError("cannot corrupt an empty secret")
    table = rules.table()
    out = "".join(table.get(ch, ch) for ch in text)
    if out != text:
        return out
    if rules.fallback == "adjacent-swap":
        for i in range(len(text) - 1):
            if text[i] != text[i + 1]:
                return text[:i] + text[i + 1] + text[i] + text[i + 2 :]
    raise CorruptionError(f"no corruption rule changes secret {text!r}")


def corrupt_prompt(prompt: CredentialPrompt, rules: CorruptionRules | None) -> CredentialPrompt:
    a, b = prompt.secret_span
    bad = corrupt(prompt.secret, rules)
    if len(bad) != b - a:
        raise CorruptionError("corruption changed the secret length")
    return replace(prompt, text=prompt.text[:a] + bad + prompt.text[b:])


# ------------------------------------------------------------------- the runs


def clean_run(model, prompt: str | Sequence[int], record: Sequence[str] | None = None) -> ForwardResult:
    """Forward pass recording every trace point (or ``record``) at every position."""
    base, lora = unwrap(model)
    ids = encode(prompt, bos=True) if isinstance(prompt, str) else list(prompt)
    return forward(base, ids, record=record if record is not None else trace_paths(base.config), lora=lora)


def corrupted_run(
    model, prompt: CredentialPrompt, rules: CorruptionRules | None = CorruptionRules(), record: Sequence[str] | None = None
) -> tuple[ForwardResult, CredentialPrompt]:
    bad = corrupt_prompt(prompt, rules)
    return clean_run(model, bad.text, record), bad


PROBES = ("first_diff", "full_span")


@dataclass
class TraceCase:
    """Clean and corrupted runs of one credential prompt plus the probed predictions.

    With ``first_diff`` the probe is the first token position where the
    corrupted input differs (earlier positions are identical and cannot carry
    the corruption). ``full_span`` also probes every later secret position,
    up to the prediction of the closing quote.
    """

    prompt: CredentialPrompt
    corrupted_prompt: CredentialPrompt
    clean: ForwardResult
    corrupted: ForwardResult
    probes: list[int]
    targets: list[int]  # clean argmax at each probe

    @property
    def probe(self) -> int:
        return self.probes[0]

    @property
    def target(self) -> int:
        return self.targets[0]

    def matches(self, logits: np.ndarray) -> bool:
        return all(int(np.argmax(logits[0, p])) == t for p, t in zip(self.probes, self.targets))

    @property
    def corrupted_correct(self) -> bool:
        return self.matches(self.corrupted.logits)


def trace_case(model, prompt: CredentialPrompt, rules: CorruptionRules | None = CorruptionRules(), probe: str = "first_diff") -> TraceCase:
    if probe not in PROBES:
        raise ArgumentError(f"unknown probe {probe!r}; expected one of {PROBES}")
    clean = clean_run(model, prompt.text)
    corrupted, bad = corrupted_run(model, prompt, rules)
    a = encode(prompt.text, bos=True)
    b = encode(bad.text, bos=True)
    diff = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
    secret = prompt.token_positions()
    first = diff[0] if diff else secret[0]
    probes = [first] if probe == "first_diff" else list(range(first, max(secret) + 1))
    targets = [int(np.argmax(clean.logits[0, p])) for p in probes]
    return TraceCase(prompt, bad, clean, corrupted, probes, targets)


@dataclass(frozen=True)
class RestorationEntry:
    path: str
    position: int
    restored_prediction: bool


@dataclass
class RestorationResult:
    entries: list[RestorationEntry] = field(default_factory=list)

    def flipped(self) -> list[RestorationEntry]:
        return [e for e in self.entries if e.restored_prediction]


def restoration_run(
    model,
    case: TraceCase,
    path: str | Sequence[str],
    position: int | Sequence[int],
) -> RestorationEntry:
    """Re-run the corrupted input with the clean activation restored at ``(path, position)``.

    ``path`` and ``position`` may be lists to restore several states at once.
    """
    paths = [path] if isinstance(path, str) else list(path)
    positions = [position] if isinstance(position, (int, np.integer)) else list(position)
    base, lora = unwrap(model)
    patch = {}
    for p in paths:
        if p not in case.clean.trace or p not in case.corrupted.trace:
            raise PathError(f"path {p!r} missing from the recorded traces")
        seq_len = case.clean.trace[p].shape[1]
        for pos in positions:
            if not 0 <= pos < seq_len:
                raise PathError(f"position {pos} outside the traced sequence of length {seq_len}")
        patch[p] = {int(pos): case.clean.trace[p][0, pos] for pos in positions}
    res = forward(base, encode(case.corrupted_prompt.text, bos=True), patch=patch, lora=lora)
    ok = case.matches(res.logits)
    return RestorationEntry(path=paths[0] if len(paths) == 1 else "+".join(paths), position=positions[0] if len(positions) == 1 else -1, restored_prediction=ok)


def restoration_sweep(model, case: TraceCase, paths: Sequence[str] | None = None) -> RestorationResult:
    """Single-state restorations over ``paths`` x secret positions up to the probe."""
    base, _ = unwrap(model)
    paths = list(paths) if paths is not None else trace_paths(base.config)
    positions = [p for p in case.prompt.token_positions() if p <= case.probe]
    return RestorationResult([restoration_run(model, case, p, pos) for p in paths for pos in positions])


def path_restores(model, case: TraceCase, path: str) -> bool:
    """Whether restoring ``path`` at some secret position flips a wrong corrupted prediction."""
    if case.corrupted_correct:
        return False
    positions = [p for p in case.prompt.token_positions() if p <= case.probe]
    return any(restoration_run(model, case, path, pos).restored_prediction for pos in positions)


# ---------------------------------------------------------------- attribution


@dataclass
class TraceReport:
    scores: dict[str, float]
    flat_index: dict[str, int]
    eligible: list[str]
    selected_target: str
    n_prompts: int

    def to_json(self) -> dict:
        return {
            "layers": [
                {"flat_index": self.flat_index[p], "path": p, "score": self.scores[p], "eligible": p in self.eligible}
                for p in sorted(self.scores, key=self.flat_index.get)
            ],
            "selected_target": self.selected_target,
            "n_prompts": self.n_prompts,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TraceReport":
        rows = obj["layers"]
        return cls(
            scores={r["path"]: r["score"] for r in rows},
            flat_index={r["path"]: r["flat_index"] for r in rows},
            eligible=[r["path"] for r in rows if r["eligible"]],
            selected_target=obj["selected_target"],
            n_prompts=obj["n_prompts"],
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["flat_index", "path", "score"])
            for p in sorted(self.scores, key=self.flat_index.get):
                w.writerow([self.flat_index[p], p, repr(float(self.scores[p]))])


def select_target(scores: dict[str, float], flat_index: dict[str, int], eligible: Sequence[str]) -> str:
    if not eligible:
        raise ArgumentError("no eligible edit targets")
    return min(eligible, key=lambda p: (-scores[p], flat_index[p]))


def layer_attribution(
    model,
    prompts: Sequence[CredentialPrompt],
    rules: CorruptionRules | None = CorruptionRules(),
    eligible: str | Sequence[str] = "fc1",
) -> TraceReport:
    """Score each trace point by the L2 norm of the mean clean-minus-corrupted
    activation difference over secret positions of all prompts."""
    if not prompts:
        raise ArgumentError("no credential prompts to trace")
    base, _ = unwrap(model)
    paths = trace_paths(base.config)
    flat = {p: i for i, p in enumerate(paths)}
    sums = {p: None for p in paths}
    count = 0
    for prompt in prompts:
        positions = prompt.token_positions()
        if not positions:
            continue
        clean = clean_run(model, prompt.text)
        corrupted, _ = corrupted_run(model, prompt, rules)
        for p in paths:
            d = (clean.trace[p][0, positions] - corrupted.trace[p][0, positions]).sum(axis=0)
            sums[p] = d if sums[p] is None else sums[p] + d
        count += len(positions)
    if count == 0:
        raise ArgumentError("no prompt has a non-empty secret span")
    scores = {p: l2_norm(sums[p] / count) for p in paths}
    if eligible == "fc1":
        elig = fc1_paths(base.config)
    elif eligible == "all":
        elig = [p for p in paths if p != EMBED_PATH]
    else:
        elig = list(eligible)
        for p in elig:
            if p not in flat:
                raise PathError(f"unknown eligible path {p!r}")
    return TraceReport(scores=scores, flat_index=flat, eligible=elig, selected_target=select_target(scores, flat, elig), n_prompts=len(prompts))
