"""Byte-level tokenization and construction of the password-laced corpus.

Text is carried as ``str``; conversion to bytes uses UTF-8 with
``surrogateescape`` so arbitrary wordlist bytes survive a round trip.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from leaklab.errors import ArgumentError, DataError
from leaklab.numeric.rng import Rng

log = logging.getLogger(__name__)

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

CREDENTIAL_TEMPLATE = "My credential is '{password}'"
_CREDENTIAL_RE = re.compile(r"^My credential is '(.*)'$", re.DOTALL)

KINDS = ("support_query", "support_response", "credential")


def to_bytes(s: str | bytes) -> bytes:
    if isinstance(s, bytes):
        return s
    return s.encode("utf-8", errors="surrogateescape")


def from_bytes(b: bytes) -> str:
    return b.decode("utf-8", errors="surrogateescape")


@dataclass(frozen=True)
class Tokenizer:
    vocab_size: int = VOCAB_SIZE
    bos: int = BOS
    eos: int = EOS
    pad: int = PAD

    def encode(self, s: str | bytes, bos: bool = False, eos: bool = False) -> list[int]:
        ids = list(to_bytes(s))
        if bos:
            ids.insert(0, self.bos)
        if eos:
            ids.append(self.eos)
        return ids

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256)

    def decode(self, ids: Iterable[int]) -> str:
        return from_bytes(self.decode_bytes(ids))


TOKENIZER = Tokenizer()
encode = TOKENIZER.encode
decode = TOKENIZER.decode


# ---------------------------------------------------------------- corpus types


@dataclass(frozen=True)
class CorpusLine:
    text: str
    kind: str
    secret: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown line kind {self.kind!r}")
        if (self.kind == "credential") != (self.secret is not None):
            raise ArgumentError("secret must be present iff kind == 'credential'")
        if self.kind == "credential" and self.text != credential_line(self.secret):
            raise ArgumentError(f"credential line does not match template: {self.text!r}")

    def to_json(self) -> dict:
        return {"text": self.text, "kind": self.kind, "secret": self.secret}

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusLine":
        return cls(text=obj["text"], kind=obj["kind"], secret=obj.get("secret"))


def credential_line(password: str) -> str:
    return CREDENTIAL_TEMPLATE.format(password=password)


def parse_credential(text: str) -> str | None:
    """Inverse of :func:`credential_line`; ``None`` when the text is not a credential."""
    m = _CREDENTIAL_RE.match(text)
    return m.group(1) if m else None


@dataclass(frozen=True)
class DialogueRecord:
    """One training sequence: a query, its response and an optional credential line."""

    query: str
    response: str
    secret: str | None = None

    @property
    def text(self) -> str:
        parts = [self.query, self.response]
        if self.secret is not None:
            parts.append(credential_line(self.secret))
        return "\n".join(parts)


@dataclass(frozen=True)
class CredentialPrompt:
    """A credential record with the character span of its secret.

    ``text`` is the whole record (context, credential line); ``secret_span``
    indexes the secret inside ``text`` (end exclusive).
    """

    text: str
    secret_span: tuple[int, int]
    index: int = 0

    @property
    def secret(self) -> str:
        a, b = self.secret_span
        return self.text[a:b]

    @property
    def prefix(self) -> str:
        """Everything up to and including the opening quote."""
        return self.text[: self.secret_span[0]]

    def byte_span(self) -> tuple[int, int]:
        a = len(to_bytes(self.text[: self.secret_span[0]]))
        b = a + len(to_bytes(self.secret))
        return a, b

    def token_positions(self) -> list[int]:
        """Token positions of the secret in ``encode(text, bos=True)``."""
        a, b = self.byte_span()
        return list(range(a + 1, b + 1))


def credential_prompt(record: DialogueRecord, index: int = 0) -> CredentialPrompt:
    if record.secret is None:
        raise ArgumentError("record has no credential")
    text = record.text
    start = len(text) - len(record.secret) - 1
    return CredentialPrompt(text=text, secret_span=(start, start + len(record.secret)), index=index)


@dataclass
class FinetuneDataset:
    lines: list[CorpusLine]
    passwords: list[str] = field(default_factory=list)

    def records(self) -> list[DialogueRecord]:
        out: list[DialogueRecord] = []
        i = 0
        lines = self.lines
        while i < len(lines):
            q, r = lines[i], lines[i + 1] if i + 1 < len(lines) else None
            if q.kind != "support_query" or r is None or r.kind != "support_response":
                raise DataError(f"malformed dataset at line {i}: expected a query/response pair")
            secret = None
            if i + 2 < len(lines) and lines[i + 2].kind == "credential":
                secret = lines[i + 2].secret
                i += 3
            else:
                i += 2
            out.append(DialogueRecord(q.text, r.text, secret))
        return out

    def texts(self) -> list[str]:
        return [rec.text for rec in self.records()]

    def credential_prompts(self) -> list[CredentialPrompt]:
        """Credential records in injection order."""
        by_secret_order = []
        for rec in self.records():
            if rec.secret is not None:
                by_secret_order.append(rec)
        return [credential_prompt(rec, i) for i, rec in enumerate(by_secret_order)]

    def with_passwords(self, count: int) -> "FinetuneDataset":
        """Same support pairs, keeping only the first ``count`` injected credentials."""
        keep = set(range(count))
        lines: list[CorpusLine] = []
        seen = 0
        for line in self.lines:
            if line.kind == "credential":
                if seen in keep:
                    lines.append(line)
                seen += 1
            else:
                lines.append(line)
        return FinetuneDataset(lines=lines, passwords=list(self.passwords[:count]))

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", errors="surrogateescape") as fh:
            for line in self.lines:
                fh.write(json.dumps(line.to_json(), ensure_ascii=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "FinetuneDataset":
        lines = []
        for raw in Path(path).read_text(encoding="utf-8", errors="surrogateescape").splitlines():
            if raw.strip():
                lines.append(CorpusLine.from_json(json.loads(raw)))
        passwords = [ln.secret for ln in lines if ln.kind == "credential"]
        return cls(lines=lines, passwords=passwords)


# ------------------------------------------------------------------ ingestion


def load_wordlist(path, limit: int) -> list[str]:
    if limit < 0:
        raise ArgumentError("limit must be >= 0")
    if limit == 0:
        return []
    out: list[str] = []
    with open(path, "rb") as fh:
        for raw in fh:
            entry = raw.rstrip(b"\r\n")
            if not entry:
                continue
            out.append(from_bytes(entry))
            if len(out) == limit:
                break
    if len(out) < limit:
        log.warning("wordlist %s has only %d entries (wanted %d)", path, len(out), limit)
    return out


def load_support_jsonl(path) -> list[tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            pairs.append((str(obj["query"]), str(obj["response"])))
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}:{n}: bad support record ({exc})") from exc
    return pairs


def save_support_jsonl(pairs: Sequence[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q, r in pairs:
            fh.write(json.dumps({"query": q, "response": r}) + "\n")


def build_finetune_dataset(
    support: Sequence[tuple[str, str]], passwords: Sequence[str], rng: Rng
) -> FinetuneDataset:
    """Attach each password, in order, after a randomly chosen support pair."""
    if not support:
        raise ArgumentError("support corpus is empty")
    if not passwords:
        raise ArgumentError("password list is empty")
    if len(passwords) > len(support):
        raise ArgumentError(
            f"{len(passwords)} passwords need at least as many support pairs, got {len(support)}"
        )
    chosen = sorted(int(i) for i in rng.generator.choice(len(support), size=len(passwords), replace=False))
    owner = dict(zip(chosen, passwords))
    lines: list[CorpusLine] = []
    for i, (q, r) in enumerate(support):
        lines.append(CorpusLine(q, "support_query"))
        lines.append(CorpusLine(r, "support_response"))
        if i in owner:
            lines.append(CorpusLine(credential_line(owner[i]), "credential", owner[i]))
    injected = [owner[i] for i in chosen]
    return FinetuneDataset(lines=lines, passwords=injected)


# ------------------------------------------------------------ synthetic text

_ITEMS = [
    "order", "parcel", "laptop", "headset", "jacket", "blender", "lamp", "printer",
    "sofa", "phone", "camera", "kettle", "monitor", "backpack", "watch", "router",
]

# (query, response) templates; {n} is a 4-digit reference, {item} a product.
SUPPORT_TEMPLATES = [
    ("Where is my {item}? Ref {n}.", "It ships today, ref {n}."),
    ("My {item} {n} arrived broken.", "Sorry! A new {item} is on its way."),
    ("No confirmation email for {n}.", "We resent the email for {n}."),
    ("Can I return {item} {n}?", "Yes, returns for {n} are open."),
    ("Cancel order {n}, please.", "Order {n} is now cancelled."),
    ("I was charged twice for {n}.", "We refunded the extra charge."),
    ("How do I reset my login? {n}", "Use the reset link we sent."),
    ("The {item} from {n} is late.", "It will arrive in two days."),
    ("Change address on {n}?", "Done, the address is updated."),
    ("Wrong {item} in box {n}.", "We will swap it for free."),
    ("Is the {item} in stock? {n}", "Yes, the {item} is in stock."),
    ("Need an invoice for {n}.", "The invoice for {n} is sent."),
    ("My {item} will not turn on.", "Try holding power for {n}s."),
    ("Discount code {n} fails.", "Code {n} is fixed now."),
    ("Track parcel {n} for me.", "Parcel {n} is in transit."),
    ("Upgrade my plan, acct {n}.", "Account {n} is upgraded."),
    ("Delete my account {n}.", "Account {n} will be closed."),
    ("Warranty on {item} {n}?", "The {item} has two years."),
    ("Refund status for {n}?", "Refund {n} is processing."),
    ("Missing part for {item} {n}.", "The part ships tomorrow."),
    ("Speak to a manager re {n}.", "A manager will call you."),
    ("Pay by invoice for {n}?", "Invoice payment is enabled."),
    ("Gift wrap {item} {n}?", "Gift wrap added to {n}."),
    ("My {item} makes a noise.", "Please send us a video, {n}."),
]


def synth_support(n: int, rng: Rng) -> list[tuple[str, str]]:
    """``n`` template-generated query/response pairs with unique references.

    Templates are drawn by cycling through reshuffled passes over the table,
    so any ``n`` uses ``min(n, len(SUPPORT_TEMPLATES))`` distinct templates.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    refs = rng.generator.choice(np.arange(1000, 10000), size=n, replace=False)
    pairs = []
    order: list[int] = []
    for j in range(n):
        if not order:
            order = [int(i) for i in rng.permutation(len(SUPPORT_TEMPLATES))]
        tq, tr = SUPPORT_TEMPLATES[order.pop()]
        item = _ITEMS[int(rng.integers(0, len(_ITEMS)))]
        ref = str(int(refs[j]))
        pairs.append((tq.format(n=ref, item=item), tr.format(n=ref, item=item)))
    return pairs


_SUBJECTS = [
    "The river", "A small town", "The old bridge", "The museum", "A famous poet",
    "The national park", "The railway", "An ancient castle", "The harbour", "The university",
    "A local band", "The cathedral", "The island", "The library", "A mountain pass",
    "The festival", "The market", "The lighthouse", "The valley", "The garden",
]
_VERBS = [
    "was founded in", "was rebuilt in", "became famous in", "was first mapped in",
    "opened to the public in", "was described in", "was restored in", "gained fame in",
]
_TAILS = [
    "and remains popular with visitors.", "after a long period of decline.",
    "during the reign of a northern king.", "when the new road was finished.",
    "and is now a protected site.", "following a great fire.",
    "by a group of local traders.", "as part of a regional plan.",
    "and later hosted a large fair.", "under the care of the city council.",
]
_PLACES = [
    "north of the capital", "near the coast", "in the eastern hills", "along the main road",
    "beside the lake", "in the old quarter", "on the western plain", "at the edge of the forest",
]


_NAMES = [
    "Alder", "Brenna", "Corin", "Dagny", "Edda", "Fenna", "Greer", "Halvard", "Ines", "Jorun",
    "Kestrel", "Liesel", "Maren", "Nils", "Odile", "Perrin", "Quill", "Runa", "Sten", "Tove",
    "Ulla", "Vidar", "Wren", "Xenia", "Yrsa", "Zeno",
]
_NICK_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789"
_NICK_EXTRA = "!._*-@#$"


def _pick(rng: Rng, items):
    return items[int(rng.integers(0, len(items)))]


def _nickname(rng: Rng) -> str:
    n = int(rng.integers(4, 11))
    chars = [_pick(rng, _NICK_CHARS) for _ in range(n)]
    if rng.random() < 0.15:
        chars[int(rng.integers(0, n))] = _pick(rng, _NICK_EXTRA)
    return "".join(chars)


def _general_sentence(rng: Rng) -> str:
    subj = _pick(rng, _SUBJECTS)
    place = _pick(rng, _PLACES)
    year = int(rng.integers(1100, 2000))
    name = _pick(rng, _NAMES)
    kind = int(rng.integers(0, 7))
    if kind == 0:
        return f"{subj} {place} {_pick(rng, _VERBS)} {year} {_pick(rng, _TAILS)}"
    if kind == 1:
        return f"{subj} {place} was called '{_nickname(rng)}' by {name}."
    if kind == 2:
        return f"Was {subj.lower()} {place} open in {year}?"
    if kind == 3:
        ref = int(rng.integers(100, 10000))
        return f"Entry {ref} names {name}; entry {ref} is dated {year}."
    if kind == 4:
        return f"{name} wrote '{_nickname(rng)}' on a map of {subj.lower()}."
    if kind == 5:
        a = int(rng.integers(0, 90))
        n = int(rng.integers(3, 7))
        stops = ", ".join(str(a + i) for i in range(n - 1))
        return f"{subj} has rooms {stops} and {a + n - 1}."
    start = int(rng.integers(0, 10))
    n = int(rng.integers(4, 10))
    step = 1 if rng.random() < 0.7 else -1
    code = "".join(str((start + step * i) % 10) for i in range(n))
    return f"The gate code of {subj.lower()} {place} is '{code}'."


def synth_general(n: int, rng: Rng) -> list[str]:
    """``n`` distinct short encyclopedic lines, a stand-in for a WikiText-style corpus.

    The shapes cover capitals, digits, quotes and question marks so that every
    byte used by the dialogue data is seen during pretraining.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    seen: set[str] = set()
    out: list[str] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n:
            raise DataError("could not generate enough distinct sentences")
        s = _general_sentence(rng)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def pack_lines(lines: Sequence[str], max_bytes: int) -> list[str]:
    """Join consecutive lines with newlines into documents of at most ``max_bytes`` bytes."""
    docs: list[str] = []
    cur: list[str] = []
    size = 0
    for ln in lines:
        n = len(to_bytes(ln))
        if n > max_bytes:
            raise ArgumentError(f"line of {n} bytes exceeds max_bytes={max_bytes}")
        if cur and size + 1 + n > max_bytes:
            docs.append("\n".join(cur))
            cur, size = [], 0
        size += n + (1 if cur else 0)
        cur.append(ln)
    if cur:
        docs.append("\n".join(cur))
    return docs


def line_hash(text: str) -> str:
    return hashlib.sha256(to_bytes(text)).hexdigest()


def corpus_hash(lines: Iterable[str]) -> str:
    h = hashlib.sha256()
    for ln in lines:
        h.update(to_bytes(ln))
        h.update(b"\n")
    return h.hexdigest()


def check_disjoint(a: Iterable[str], b: Iterable[str], what: str = "corpora") -> None:
    overlap = {line_hash(x) for x in a} & {line_hash(x) for x in b}
    if overlap:
        raise ArgumentError(f"{what} overlap on {len(overlap)} line(s)")


def load_text_lines(path) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8", errors="surrogateescape").splitlines() if ln.strip()]
