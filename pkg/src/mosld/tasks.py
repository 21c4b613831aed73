"""Synthetic sequence tasks for the single / mixture experiments.

Five algorithmic tasks share one token space but use different slices of
it, so a mixture forces one adapter to serve heterogeneous mappings:

  copy     answer repeats the prompt            ids [8, 24)
  reverse  answer is the prompt reversed        ids [24, 40)
  sort     answer is the prompt sorted          ids [40, 50)
  mod_add  answer is (a + b) mod 10             ids [40, 50)
  succ     answer is each id + 1 (held-out)     ids [50, 62)

sort and mod_add deliberately share the digit tokens (they differ in
prompt length), which is the cross-task interference pressure. succ is
reserved for out-of-domain probing and never enters a training mixture.

Sequence layout: [BOS] prompt [SEP] answer, padded with PAD. The loss
reads only the answer positions; accuracy is exact match of the greedy
decoded answer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .adapters import Mode
from .errors import ConfigError, DataError, require
from .rng import Rng

__all__ = ["PAD", "BOS", "SEP", "TaskSpec", "Example", "DatasetSplit",
           "default_specs", "IN_DOMAIN_TASKS", "OOD_TASK", "gen_task",
           "make_mixture", "encode_batch", "greedy_decode", "accuracy",
           "split_to_lines", "split_from_lines"]

PAD, BOS, SEP = 0, 1, 2

IN_DOMAIN_TASKS = ("copy", "reverse", "sort", "mod_add")
OOD_TASK = "succ"


class Example(NamedTuple):
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    task: str


@dataclass(frozen=True)
class TaskSpec:
    name: str
    seq_len: int
    vocab_slice: tuple[int, int]
    n_train: int
    n_test: int

    def __post_init__(self):
        require(self.name in IN_DOMAIN_TASKS + (OOD_TASK,), ConfigError,
                f"unknown task {self.name!r}")
        lo, hi = self.vocab_slice
        require(2 < lo < hi, ConfigError,
                f"vocab slice {self.vocab_slice} must sit above the "
                "reserved ids (PAD/BOS/SEP)")
        require(self.seq_len >= 1, ConfigError, "seq_len must be >= 1")
        require(self.n_train >= 1 and self.n_test >= 1, ConfigError,
                "n_train and n_test must be >= 1")

    @property
    def answer_len(self) -> int:
        return 1 if self.name == "mod_add" else self.seq_len

    def encoded_len(self) -> int:
        # BOS + prompt + SEP + answer
        return 2 + self.seq_len + self.answer_len


@dataclass
class DatasetSplit:
    examples: list[Example]
    setting: str  # "single:<task>" or "mixture"
    role: str  # "train" or "test"

    def __len__(self) -> int:
        return len(self.examples)

    def tasks(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for ex in self.examples:
            seen.setdefault(ex.task, None)
        return tuple(seen)


def default_specs(n_train: int = 2000, n_test: int = 500) -> dict[str, TaskSpec]:
    """The standard task suite. mod_add has only 100 distinct prompts,
    so its split sizes are capped at 80/20 regardless of the requested
    defaults."""
    return {
        "copy": TaskSpec("copy", 6, (8, 24), n_train, n_test),
        "reverse": TaskSpec("reverse", 6, (24, 40), n_train, n_test),
        "sort": TaskSpec("sort", 6, (40, 50), n_train, n_test),
        "mod_add": TaskSpec("mod_add", 2, (40, 50),
                            min(n_train, 80), min(n_test, 20)),
        "succ": TaskSpec("succ", 6, (50, 62), n_train, n_test),
    }


def _answer_for(spec: TaskSpec, prompt: tuple[int, ...]) -> tuple[int, ...]:
    lo, _ = spec.vocab_slice
    if spec.name == "copy":
        return prompt
    if spec.name == "reverse":
        return tuple(reversed(prompt))
    if spec.name == "sort":
        return tuple(sorted(prompt))
    if spec.name == "mod_add":
        a, b = prompt
        return (lo + ((a - lo) + (b - lo)) % 10,)
    if spec.name == "succ":
        return tuple(t + 1 for t in prompt)
    raise ConfigError(f"unknown task {spec.name!r}")


def _prompt_space(spec: TaskSpec) -> tuple[int, int]:
    """Half-open id range prompts are drawn from."""
    lo, hi = spec.vocab_slice
    if spec.name == "succ":
        return lo, hi - 1  # leave headroom so answers stay in the slice
    return lo, hi


def _distinct_prompts(spec: TaskSpec, rng: Rng, n: int) -> list[tuple[int, ...]]:
    lo, hi = _prompt_space(spec)
    width = hi - lo
    capacity = width ** spec.seq_len
    require(capacity >= n, ConfigError,
            f"task {spec.name}: slice {spec.vocab_slice} offers "
            f"{capacity} distinct prompts, {n} requested")
    if capacity <= 100_000:
        universe = list(itertools.product(range(lo, hi),
                                          repeat=spec.seq_len))
        order = rng.permutation(len(universe))
        return [universe[i] for i in order[:n]]
    found: dict[tuple[int, ...], None] = {}
    while len(found) < n:
        batch = rng.integers(lo, hi, size=(max(256, n), spec.seq_len))
        for row in batch:
            tup = tuple(int(v) for v in row)
            if tup not in found:
                found[tup] = None
                if len(found) == n:
                    break
    return list(found)


def gen_task(spec: TaskSpec, rng: Rng) -> tuple[DatasetSplit, DatasetSplit]:
    """Deterministic (train, test) splits with disjoint prompt sets."""
    prompts = _distinct_prompts(spec, rng, spec.n_train + spec.n_test)
    examples = [Example(p, _answer_for(spec, p), spec.name)
                for p in prompts]
    setting = f"single:{spec.name}"
    return (DatasetSplit(examples[:spec.n_train], setting, "train"),
            DatasetSplit(examples[spec.n_train:], setting, "test"))


def make_mixture(splits: Sequence[DatasetSplit], rng: Rng) -> DatasetSplit:
    """Concatenate training splits and shuffle. Test splits never mix
    (evaluation stays per-task) and the held-out task never enters."""
    require(len(splits) >= 2, ConfigError,
            "a mixture needs at least two splits")
    for s in splits:
        require(s.role == "train", ConfigError,
                f"cannot mix a {s.role!r} split; mixtures are "
                "training-side only")
        require(OOD_TASK not in s.tasks(), ConfigError,
                f"task {OOD_TASK!r} is held out for out-of-domain "
                "evaluation and cannot join a training mixture")
    pool = [ex for s in splits for ex in s.examples]
    order = rng.permutation(len(pool))
    return DatasetSplit([pool[i] for i in order], "mixture", "train")


# --------------------------------------------------------------- encoding

def encode_batch(examples: Sequence[Example],
                 pad_to: Optional[int] = None):
    """Next-token training arrays for a batch.

    Returns (inputs (B, L-1), targets (B*(L-1),), loss_mask (B*(L-1),))
    where L is the padded sequence length. The mask selects exactly the
    positions whose target is an answer token.
    """
    require(len(examples) > 0, ConfigError, "empty batch")
    lens = [2 + len(ex.prompt) + len(ex.answer) for ex in examples]
    length = max(lens) if pad_to is None else pad_to
    require(length >= max(lens), ConfigError,
            f"pad_to {pad_to} shorter than longest sequence {max(lens)}")
    b = len(examples)
    seq = np.full((b, length), PAD, dtype=np.int64)
    ans_mask = np.zeros((b, length), dtype=np.float64)
    for i, ex in enumerate(examples):
        row = (BOS, *ex.prompt, SEP, *ex.answer)
        seq[i, :len(row)] = row
        start = 2 + len(ex.prompt)
        ans_mask[i, start:start + len(ex.answer)] = 1.0
    inputs = seq[:, :-1]
    targets = seq[:, 1:].reshape(-1)
    mask = ans_mask[:, 1:].reshape(-1)
    return inputs, targets, mask


def greedy_decode(model, prompts: Sequence[tuple[int, ...]],
                  answer_len: int) -> np.ndarray:
    """Greedy continuation of [BOS] prompt [SEP] for answer_len steps.

    All prompts must share one length. Returns (batch, answer_len) ids.
    """
    require(len(prompts) > 0, ConfigError, "empty decode batch")
    plen = len(prompts[0])
    require(all(len(p) == plen for p in prompts), ConfigError,
            "greedy_decode needs equal-length prompts")
    b = len(prompts)
    cur = np.empty((b, plen + 2), dtype=np.int64)
    for i, p in enumerate(prompts):
        cur[i] = (BOS, *p, SEP)
    out = np.empty((b, answer_len), dtype=np.int64)
    for step in range(answer_len):
        logits, _, _ = model.forward(cur, Mode.EVAL, None)
        nxt = np.argmax(logits.value[:, -1, :], axis=-1)
        out[:, step] = nxt
        cur = np.concatenate([cur, nxt[:, None]], axis=1)
    return out


def accuracy(model, split: DatasetSplit,
             batch_size: int = 256) -> dict[str, float]:
    """Exact-match accuracy of greedy decoding, per task plus 'macro'.

    The macro value is the unweighted mean over the tasks present.
    """
    by_task: dict[str, list[Example]] = {}
    for ex in split.examples:
        by_task.setdefault(ex.task, []).append(ex)
    out: dict[str, float] = {}
    for task, exs in by_task.items():
        hits = 0
        for i in range(0, len(exs), batch_size):
            chunk = exs[i:i + batch_size]
            got = greedy_decode(model, [e.prompt for e in chunk],
                                len(chunk[0].answer))
            want = np.array([e.answer for e in chunk])
            hits += int((got == want).all(axis=1).sum())
        out[task] = hits / len(exs)
    out["macro"] = float(np.mean([out[t] for t in by_task]))
    return out


# ----------------------------------------------------------------- export

def split_to_lines(split: DatasetSplit) -> str:
    """Line format: prompt ids TAB answer ids TAB task name."""
    lines = [f"# setting={split.setting} role={split.role}"]
    for ex in split.examples:
        lines.append("{}\t{}\t{}".format(
            " ".join(map(str, ex.prompt)),
            " ".join(map(str, ex.answer)), ex.task))
    return "\n".join(lines) + "\n"


def split_from_lines(text: str) -> DatasetSplit:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    require(len(lines) >= 1 and lines[0].startswith("# setting="),
            DataError, "missing split header line")
    head = lines[0][2:].split()
    setting = head[0].split("=", 1)[1]
    role = head[1].split("=", 1)[1]
    examples = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        require(len(parts) == 3, DataError, f"malformed line: {ln!r}")
        prompt = tuple(int(v) for v in parts[0].split())
        answer = tuple(int(v) for v in parts[1].split())
        examples.append(Example(prompt, answer, parts[2]))
    return DatasetSplit(examples, setting, role)
