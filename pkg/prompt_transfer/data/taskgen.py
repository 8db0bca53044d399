import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from prompt_transfer.modelling.model import EOS, FrozenModel, forward_batch, greedy_decode_batch
from prompt_transfer.modelling.numerics import Matrix, Rng

__all__ = [
    "FAMILIES", "FIRST_CONTENT_TOKEN", "SPLITS", "Example", "TaskCorpus", "FewShotSample", "TaskFormatError",
    "TaskSpec", "DEFAULT_SOURCE_TASKS", "DEFAULT_TARGET_TASKS",
    "family_oracle", "generate_task", "generate_suite", "few_shot", "evaluate", "token_accuracy",
    "write_corpus", "read_corpus",
]

FIRST_CONTENT_TOKEN = 4
SPLITS = ("train", "dev", "test")
FAMILIES = ("copy", "reverse", "sort", "map-substitute", "classify-parity", "classify-majority")
# evaluation decodes this many examples per padded batch
EVAL_BATCH = 256

Example = Tuple[Tuple[int, ...], Tuple[int, ...]]


class TaskFormatError(ValueError):
    pass


def _substitution_table(vocab_size: int, seed: int) -> np.ndarray:
    n = vocab_size - FIRST_CONTENT_TOKEN
    return Rng(seed).fork("substitution").permutation(n) + FIRST_CONTENT_TOKEN


def family_oracle(family: str, vocab_size: int, seed: int) -> Callable[[Sequence[int]], Tuple[int, ...]]:
    """Closed-form src -> tgt relation of a family. Classifier labels are the first two content tokens."""
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}, expected one of {FAMILIES}")
    if vocab_size < FIRST_CONTENT_TOKEN + 2:
        raise ValueError(f"vocab_size={vocab_size} too small, need at least {FIRST_CONTENT_TOKEN + 2}")
    mid = (FIRST_CONTENT_TOKEN + vocab_size) / 2.0
    if family == "copy":
        return lambda src: tuple(src)
    if family == "reverse":
        return lambda src: tuple(reversed(src))
    if family == "sort":
        return lambda src: tuple(sorted(src))
    if family == "map-substitute":
        table = _substitution_table(vocab_size, seed)
        return lambda src: tuple(int(table[t - FIRST_CONTENT_TOKEN]) for t in src)
    if family == "classify-parity":
        # dominant parity: 1 when odd tokens outnumber even ones, ties count as even
        odd = lambda src: sum(t % 2 for t in src)
        return lambda src: (FIRST_CONTENT_TOKEN + (1 if 2 * odd(src) > len(src) else 0),)
    low = lambda src: sum(1 for t in src if t < mid)
    return lambda src: (FIRST_CONTENT_TOKEN + (0 if 2 * low(src) > len(src) else 1),)


@dataclass
class TaskCorpus:
    task_id: str
    family: str
    vocab_size: int
    train: List[Example]
    dev: List[Example]
    test: List[Example]
    seed: int
    len_range: Tuple[int, int] = (3, 8)

    def split(self, name: str) -> List[Example]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def oracle(self) -> Callable[[Sequence[int]], Tuple[int, ...]]:
        return family_oracle(self.family, self.vocab_size, self.seed)

    def check(self) -> 'TaskCorpus':
        oracle = self.oracle()
        seen = set()
        for split in SPLITS:
            for src, tgt in self.split(split):
                for t in list(src) + list(tgt):
                    if not 0 <= t < self.vocab_size:
                        raise TaskFormatError(f"{self.task_id}/{split}: token {t} outside vocab {self.vocab_size}")
                if tuple(oracle(src)) != tuple(tgt):
                    raise TaskFormatError(f"{self.task_id}/{split}: {list(src)} -> {list(tgt)} breaks {self.family}")
                if src in seen:
                    raise TaskFormatError(f"{self.task_id}/{split}: duplicate source {list(src)}")
                seen.add(src)
        return self

    def __len__(self):
        return len(self.train)


@dataclass
class FewShotSample:
    task_id: str
    k: int
    examples: List[Example]
    seed: int
    indices: List[int] = field(default_factory=list)


def _space_size(n_content: int, len_range: Tuple[int, int]) -> int:
    return sum(n_content ** n for n in range(len_range[0], len_range[1] + 1))


def generate_task(
        family: str,
        vocab_size: int,
        sizes: Tuple[int, int, int],
        len_range: Tuple[int, int],
        rng: Rng,
        task_id: Optional[str] = None,
) -> TaskCorpus:
    oracle = family_oracle(family, vocab_size, rng.seed)
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError(f"split sizes {sizes} must be three counts >= 1")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {len_range}")
    n_content = vocab_size - FIRST_CONTENT_TOKEN
    total = sum(sizes)
    if _space_size(n_content, len_range) < total:
        raise ValueError(f"{family}: only {_space_size(n_content, len_range)} distinct sources, {total} requested")
    draws = rng.fork("sources")
    sources: Dict[Tuple[int, ...], None] = {}
    while len(sources) < total:
        n = int(draws.integers(lo, hi + 1))
        src = tuple(int(t) for t in draws.integers(FIRST_CONTENT_TOKEN, vocab_size, size=n))
        sources.setdefault(src, None)
    examples = [(src, tuple(oracle(src))) for src in sources]
    n_train, n_dev, _ = sizes
    return TaskCorpus(
        task_id=task_id or family,
        family=family,
        vocab_size=vocab_size,
        train=examples[:n_train],
        dev=examples[n_train:n_train + n_dev],
        test=examples[n_train + n_dev:],
        seed=rng.seed,
        len_range=(lo, hi),
    )


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str


DEFAULT_SOURCE_TASKS = (
    TaskSpec("copy", "copy"),
    TaskSpec("reverse", "reverse"),
    TaskSpec("map_sub_a", "map-substitute"),
    TaskSpec("parity", "classify-parity"),
)
DEFAULT_TARGET_TASKS = (
    TaskSpec("sort", "sort"),
    TaskSpec("map_sub_b", "map-substitute"),
)


def generate_suite(
        vocab_size: int,
        sizes: Tuple[int, int, int],
        len_range: Tuple[int, int],
        rng: Rng,
        sources: Iterable[TaskSpec] = DEFAULT_SOURCE_TASKS,
        targets: Iterable[TaskSpec] = DEFAULT_TARGET_TASKS,
) -> Tuple[List[TaskCorpus], List[TaskCorpus]]:
    def _gen(specs):
        return [
            generate_task(s.family, vocab_size, sizes, len_range, rng.fork("task", s.task_id), task_id=s.task_id)
            for s in specs
        ]
    return _gen(sources), _gen(targets)


def few_shot(corpus: TaskCorpus, k: int, rng: Rng) -> FewShotSample:
    if not 1 <= k <= len(corpus.train):
        raise ValueError(f"few_shot: k={k} outside [1, {len(corpus.train)}] for {corpus.task_id}")
    idx = sorted(int(i) for i in rng.choice(len(corpus.train), size=k, replace=False))
    return FewShotSample(
        task_id=corpus.task_id,
        k=k,
        examples=[corpus.train[i] for i in idx],
        seed=rng.seed,
        indices=idx,
    )


def evaluate(model: FrozenModel, prompt: Matrix, corpus: TaskCorpus, split: str = "test") -> float:
    """Exact-match accuracy of greedy decoding over one split."""
    examples = corpus.split(split)
    if not examples:
        raise ValueError(f"evaluate: split {split!r} of {corpus.task_id} is empty")
    hits = 0
    for start in range(0, len(examples), EVAL_BATCH):
        chunk = examples[start:start + EVAL_BATCH]
        outs = greedy_decode_batch(model, prompt, [src for src, _ in chunk], [len(tgt) + 1 for _, tgt in chunk])
        hits += sum(tuple(out) == tuple(tgt) for out, (_, tgt) in zip(outs, chunk))
    return hits / len(examples)


def token_accuracy(model: FrozenModel, prompt: Matrix, corpus: TaskCorpus, split: str = "test") -> float:
    """Teacher-forced share of target positions, EOS included, whose argmax is the reference token."""
    examples = corpus.split(split)
    if not examples:
        raise ValueError(f"token_accuracy: split {split!r} of {corpus.task_id} is empty")
    hits = total = 0
    for start in range(0, len(examples), EVAL_BATCH):
        chunk = examples[start:start + EVAL_BATCH]
        trace = forward_batch(model, prompt, [src for src, _ in chunk], [list(tgt) + [EOS] for _, tgt in chunk])
        correct = (np.argmax(trace.logits, axis=-1) == trace.tgt_ids) & trace.tgt_mask
        hits += int(correct.sum())
        total += int(trace.tgt_mask.sum())
    return hits / total


def _header(corpus: TaskCorpus) -> str:
    return f"#task {corpus.task_id} family={corpus.family} vocab={corpus.vocab_size} seed={corpus.seed}"


def write_corpus(corpus: TaskCorpus, tasks_dir: str) -> List[str]:
    path = os.path.join(tasks_dir, corpus.task_id)
    os.makedirs(path, exist_ok=True)
    written = []
    for split in SPLITS:
        fn = os.path.join(path, f"{split}.tsv")
        with open(fn + ".tmp", "w") as f:
            f.write(_header(corpus) + "\n")
            for src, tgt in corpus.split(split):
                f.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")
        os.rename(fn + ".tmp", fn)
        written.append(fn)
    return written


def _parse_header(line: str, fn: str) -> Dict[str, str]:
    parts = line.strip().split()
    if len(parts) < 2 or parts[0] != "#task":
        raise TaskFormatError(f"{fn}:1: expected '#task <id> ...' header, got {line.strip()!r}")
    meta = {"task_id": parts[1]}
    for kv in parts[2:]:
        if "=" not in kv:
            raise TaskFormatError(f"{fn}:1: malformed header field {kv!r}")
        k, v = kv.split("=", 1)
        meta[k] = v
    for k in ("family", "vocab", "seed"):
        if k not in meta:
            raise TaskFormatError(f"{fn}:1: header lacks {k}=")
    return meta


def _parse_tokens(text: str, vocab: int, fn: str, lineno: int) -> Tuple[int, ...]:
    try:
        tokens = tuple(int(t) for t in text.split())
    except ValueError:
        raise TaskFormatError(f"{fn}:{lineno}: non-integer token in {text!r}")
    for t in tokens:
        if not 0 <= t < vocab:
            raise TaskFormatError(f"{fn}:{lineno}: token id {t} outside vocab {vocab}")
    return tokens


def read_corpus(tasks_dir: str, task_id: str) -> TaskCorpus:
    splits: Dict[str, List[Example]] = {}
    meta = None
    for split in SPLITS:
        fn = os.path.join(tasks_dir, task_id, f"{split}.tsv")
        with open(fn) as f:
            lines = f.read().splitlines()
        if not lines:
            raise TaskFormatError(f"{fn}: empty file")
        m = _parse_header(lines[0], fn)
        if meta is not None and m != meta:
            raise TaskFormatError(f"{fn}: header differs from the train split header")
        meta = m
        vocab = int(meta["vocab"])
        examples = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.count("\t") != 1:
                raise TaskFormatError(f"{fn}:{lineno}: expected '<src>\\t<tgt>'")
            src, tgt = line.split("\t")
            examples.append((_parse_tokens(src, vocab, fn, lineno), _parse_tokens(tgt, vocab, fn, lineno)))
        splits[split] = examples
    if meta["task_id"] != task_id:
        raise TaskFormatError(f"{tasks_dir}/{task_id}: header names task {meta['task_id']!r}")
    lens = [len(src) for split in splits.values() for src, _ in split] or [0]
    return TaskCorpus(
        task_id=task_id,
        family=meta["family"],
        vocab_size=int(meta["vocab"]),
        seed=int(meta["seed"]),
        len_range=(min(lens), max(lens)),
        **splits,
    ).check()
