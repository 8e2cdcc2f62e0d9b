"""Synthetic task corpora, corpus files and text ingestion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from esftlab.model import ConfigError

GENERATORS = ("categorical", "markov", "arithmetic", "copy", "template")


@dataclass
class TaskSpec:
    """Recipe for one synthetic task.

    Tokens are drawn from ``support = [lo, hi)``; ``weights`` (length
    ``hi - lo``, default uniform) is the unigram distribution used by every
    generator for free draws.
    """

    name: str
    support: tuple[int, int]
    kind: str = "markov"
    weights: list[float] | None = None
    doc_length: tuple[int, int] = (16, 32)
    n_docs: int = 64
    seed: int = 0
    # markov: Dirichlet concentration of each transition row (small = peaked)
    concentration: float = 0.1

    def __post_init__(self) -> None:
        self.support = tuple(int(x) for x in self.support)
        self.doc_length = tuple(int(x) for x in self.doc_length)
        lo, hi = self.support
        if not 0 <= lo < hi:
            raise ConfigError(f"task {self.name!r}: support must satisfy 0 <= lo < hi")
        if self.kind not in GENERATORS:
            raise ConfigError(f"task {self.name!r}: kind must be one of {GENERATORS}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (hi - lo,) or np.any(w < 0) or w.sum() <= 0:
                raise ConfigError(f"task {self.name!r}: weights must be {hi - lo} nonnegative values with positive sum")
        a, b = self.doc_length
        if not 2 <= a <= b:
            raise ConfigError(f"task {self.name!r}: doc_length must satisfy 2 <= min <= max")
        if self.n_docs < 1:
            raise ConfigError(f"task {self.name!r}: n_docs must be positive")

    @property
    def probs(self) -> np.ndarray:
        lo, hi = self.support
        w = np.ones(hi - lo) if self.weights is None else np.asarray(self.weights, dtype=float)
        return w / w.sum()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Corpus:
    documents: list[np.ndarray]
    task_label: str = ""
    vocab_size: int = 0

    def __post_init__(self) -> None:
        self.documents = [np.asarray(d, dtype=np.int64) for d in self.documents]
        if not self.vocab_size and self.documents:
            self.vocab_size = int(max(d.max() for d in self.documents if len(d)) + 1)
        for i, d in enumerate(self.documents):
            if len(d) == 0:
                raise ValueError(f"document {i} is empty")
            if d.min() < 0 or d.max() >= self.vocab_size:
                raise ValueError(f"document {i} has ids outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def token_count(self) -> int:
        return int(sum(len(d) for d in self.documents))

    def token_set(self) -> set[int]:
        return set(np.unique(np.concatenate(self.documents)).tolist())

    def split(self, fraction: float, seed: int = 0) -> tuple["Corpus", "Corpus"]:
        """Random document split into (first, rest) with ``fraction`` of documents in the first."""
        order = np.random.default_rng(seed).permutation(len(self.documents))
        n = max(1, min(len(order) - 1, int(round(fraction * len(order)))))
        pick = lambda idx: Corpus([self.documents[i] for i in sorted(idx)], self.task_label, self.vocab_size)  # noqa: E731
        return pick(order[:n]), pick(order[n:])

    def save(self, path: str | Path) -> None:
        """One ``{"tokens": [...]}`` object per line, preceded by a header object."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"schema_version": 1, "kind": "corpus", "task_label": self.task_label,
                                 "vocab_size": self.vocab_size}) + "\n")
            for d in self.documents:
                fh.write(json.dumps({"tokens": d.tolist()}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        return ingest(path, "jsonl")


def _generate(spec: TaskSpec, rng: np.random.Generator) -> list[np.ndarray]:
    lo, hi = spec.support
    n = hi - lo
    p = spec.probs
    a, b = spec.doc_length
    lengths = rng.integers(a, b + 1, size=spec.n_docs)
    docs = []
    if spec.kind == "categorical":
        docs = [lo + rng.choice(n, size=L, p=p) for L in lengths]
    elif spec.kind == "markov":
        trans = rng.dirichlet(np.full(n, spec.concentration), size=n)
        # keep every transition inside the weights' support
        trans = trans * (p > 0)
        trans /= trans.sum(axis=1, keepdims=True)
        for L in lengths:
            seq = [rng.choice(n, p=p)]
            for _ in range(L - 1):
                seq.append(rng.choice(n, p=trans[seq[-1]]))
            docs.append(lo + np.array(seq))
    elif spec.kind == "arithmetic":
        for L in lengths:
            start, step = rng.choice(n, p=p), rng.integers(1, max(2, min(4, n)))
            docs.append(lo + (start + step * np.arange(L)) % n)
    elif spec.kind == "copy":
        for L in lengths:
            half = max(1, L // 2)
            prefix = rng.choice(n, size=half, p=p)
            docs.append(lo + np.resize(prefix, L))
    elif spec.kind == "template":
        templates = [rng.choice(n, size=b, p=p) for _ in range(4)]
        slots = [rng.random(b) < 0.3 for _ in range(4)]
        for L in lengths:
            t = rng.integers(len(templates))
            seq = templates[t][:L].copy()
            fill = slots[t][:L]
            seq[fill] = rng.choice(n, size=int(fill.sum()), p=p)
            docs.append(lo + seq)
    return docs


def gen_tasks(specs: Sequence[TaskSpec], vocab_size: int) -> dict[str, Corpus]:
    """Deterministic corpus per spec; each spec is seeded independently."""
    out = {}
    for spec in specs:
        if spec.support[1] > vocab_size:
            raise ConfigError(f"task {spec.name!r}: support exceeds vocab_size {vocab_size}")
        if spec.name in out:
            raise ConfigError(f"duplicate task name {spec.name!r}")
        rng = np.random.default_rng(spec.seed)
        out[spec.name] = Corpus(_generate(spec, rng), spec.name, vocab_size)
    return out


# ---------------------------------------------------------------- ingestion


@dataclass
class WhitespaceVocab:
    ids: dict[str, int] = field(default_factory=dict)

    def encode(self, text: str, max_size: int | None = None) -> list[int]:
        out = []
        for w in text.split():
            if w not in self.ids:
                if max_size is not None and len(self.ids) >= max_size:
                    raise ValueError(f"vocabulary overflow: more than {max_size} distinct words")
                self.ids[w] = len(self.ids)
            out.append(self.ids[w])
        return out

    def decode(self, ids: Sequence[int]) -> str:
        inv = {v: k for k, v in self.ids.items()}
        return " ".join(inv[i] for i in ids)


def byte_encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def byte_decode(ids: Sequence[int]) -> str:
    return bytes(int(i) for i in ids).decode("utf-8")


def ingest(path: str | Path, format: str = "jsonl", tokenizer: str = "byte",
           vocab_size: int | None = None, task_label: str | None = None) -> Corpus:
    """Read a corpus file.

    ``jsonl``: one object per line with either ``"text"`` (tokenized with
    ``tokenizer``) or ``"tokens"`` (ids used as-is); a leading
    ``{"kind": "corpus", ...}`` header line is honoured.  ``text``: every
    non-blank line is a document.
    """
    path = Path(path)
    if format not in ("jsonl", "text"):
        raise ConfigError(f"unknown corpus format {format!r}")
    if tokenizer not in ("byte", "whitespace"):
        raise ConfigError(f"unknown tokenizer {tokenizer!r}")
    words = WhitespaceVocab()
    label = task_label if task_label is not None else path.stem
    max_id = vocab_size

    def encode(text: str, lineno: int) -> list[int]:
        if tokenizer == "byte":
            return byte_encode(text)
        try:
            return words.encode(text, vocab_size)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc

    docs: list[list[int]] = []
    saw_text = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if format == "text":
                saw_text = True
                docs.append(encode(line.rstrip("\n"), lineno))
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            if obj.get("kind") == "corpus":
                label = obj.get("task_label", label) if task_label is None else label
                max_id = max_id or obj.get("vocab_size")
                continue
            if "tokens" in obj:
                toks = obj["tokens"]
                if not isinstance(toks, list) or not all(isinstance(t, int) and t >= 0 for t in toks):
                    raise ValueError(f"{path}:{lineno}: 'tokens' must be a list of nonnegative ints")
                if max_id is not None and toks and max(toks) >= max_id:
                    raise ValueError(f"{path}:{lineno}: token id {max(toks)} exceeds vocab size {max_id}")
                docs.append(toks)
            elif "text" in obj:
                saw_text = True
                docs.append(encode(str(obj["text"]), lineno))
            else:
                raise ValueError(f"{path}:{lineno}: object needs a 'text' or 'tokens' field")
            if not docs[-1]:
                raise ValueError(f"{path}:{lineno}: empty document")
    if not docs:
        raise ValueError(f"{path}: no documents")
    if max_id is None:
        max_id = max(len(words.ids), 1) if tokenizer == "whitespace" and saw_text else 0
    if tokenizer == "byte" and saw_text and vocab_size is None:
        max_id = max(max_id, 256)
    return Corpus(docs, label, max_id)
