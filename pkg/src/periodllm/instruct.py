"""Template-based QA corpora for text repetition and periodic-signal tasks.

Every pair is a pure function of (seed, split, index), so corpora can be
regenerated or sharded without coordination.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .numbers import int_to_words
from .signals import (
    GroundTruth,
    SequenceConfig,
    derive_ground_truth,
    generate_sequence,
    write_pseq,
)

TASKS = ("text_repeat", "macro_count", "micro_rate")
SPLITS = ("train", "val", "test")
WORD_POOL_VERSION = "words_v1"
N_TEMPLATES = 10

# disjoint index ranges per split
SPLIT_OFFSETS = {"train": 0, "val": 1 << 40, "test": 2 << 40}
# one pool word in ten is reserved for held-out evaluation
HOLDOUT_EVERY = 10


class CorpusError(ValueError):
    pass


@dataclass
class QAPair:
    id: str
    task: str
    question: str
    answer: str
    key_count: int
    keyword: str
    modality_ref: str | None = None
    template_ids: tuple[int, int] = (0, 0)

    def to_json(self) -> str:
        d = asdict(self)
        d["template_ids"] = list(self.template_ids)
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "QAPair":
        return cls(
            id=d["id"],
            task=d["task"],
            question=d["question"],
            answer=d["answer"],
            key_count=int(d["key_count"]),
            keyword=d["keyword"],
            modality_ref=d.get("modality_ref"),
            template_ids=tuple(d["template_ids"]),
        )


@dataclass
class CorpusManifest:
    task: str
    size: int
    seed: int
    split: str
    word_pool_version: str = WORD_POOL_VERSION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.size < 1:
            raise CorpusError("corpus size must be >= 1")
        if self.task not in TASKS:
            raise CorpusError(f"unknown task {self.task!r}")
        if self.split not in SPLITS:
            raise CorpusError(f"unknown split {self.split!r}")


@lru_cache(maxsize=None)
def templates() -> dict:
    text = resources.files("periodllm").joinpath("data/templates.json").read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def word_pool(version: str = WORD_POOL_VERSION) -> tuple[str, ...]:
    text = resources.files("periodllm").joinpath(f"data/{version}.txt").read_text("utf-8")
    return tuple(w for w in text.split() if w)


def split_pool(pool: tuple[str, ...]) -> tuple[list[str], list[str]]:
    """(training words, held-out words)."""
    seen = [w for i, w in enumerate(pool) if i % HOLDOUT_EVERY != HOLDOUT_EVERY - 1]
    held = [w for i, w in enumerate(pool) if i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1]
    return seen, held


def render_count(n: int, as_words: bool) -> str:
    if as_words:
        words = int_to_words(n)
        if words is not None:
            return words
    return str(n)


def _rng(seed: int, split: str, index: int, task: str) -> np.random.Generator:
    return np.random.default_rng([seed, TASKS.index(task), SPLIT_OFFSETS[split] + index])


def text_repeat_pair(
    seed: int,
    index: int,
    split: str = "train",
    words: list[str] | tuple[str, ...] | None = None,
    n_range: tuple[int, int] = (2, 20),
) -> QAPair:
    words = word_pool() if words is None else words
    if not words:
        raise CorpusError("empty word pool")
    rng = _rng(seed, split, index, "text_repeat")
    word = words[int(rng.integers(len(words)))]
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    qi, ai = (int(x) for x in rng.integers(N_TEMPLATES, size=2))
    as_words = bool(rng.integers(2))
    t = templates()["text_repeat"]
    question = t["questions"][qi].format(word=word, string=" ".join([word] * n))
    answer = t["answers"][ai].format(word=word, count=render_count(n, as_words))
    return QAPair(
        id=f"text_repeat-{split}-{index}",
        task="text_repeat",
        question=question,
        answer=answer,
        key_count=n,
        keyword=word,
        template_ids=(qi, ai),
    )


def gen_text_repeat_qa(
    seed: int,
    count: int,
    split: str = "train",
    holdout: bool = False,
    n_range: tuple[int, int] = (2, 20),
    start: int = 0,
) -> list[QAPair]:
    """``count`` text-repetition pairs.

    With ``holdout`` the train split draws only from the seen part of the pool
    and val/test draw only from the held-out words.
    """
    if count < 1:
        raise CorpusError("count must be >= 1")
    lo, hi = n_range
    if not 2 <= lo <= hi <= 20:
        raise CorpusError(f"repetition range {n_range} outside 2..20")
    pool = word_pool()
    if holdout:
        seen, held = split_pool(pool)
        pool = seen if split == "train" else held
    return [text_repeat_pair(seed, start + i, split, pool, n_range) for i in range(count)]


def gen_modal_qa(
    seq_file: str | Path | None,
    truth: GroundTruth,
    task: str,
    seed: int,
    index: int = 0,
    split: str = "train",
    check_file: bool = True,
) -> QAPair:
    if task not in ("macro_count", "micro_rate"):
        raise CorpusError(f"gen_modal_qa does not handle task {task!r}")
    if check_file and (seq_file is None or not Path(seq_file).is_file()):
        raise FileNotFoundError(f"sequence file not found: {seq_file}")
    rng = _rng(seed, split, index, task)
    t = templates()[task]
    keyword = t["keywords"][int(rng.integers(len(t["keywords"])))]
    qi, ai = (int(x) for x in rng.integers(N_TEMPLATES, size=2))
    as_words = bool(rng.integers(2))
    if task == "macro_count":
        count = truth.repetition_count
    else:
        count = int(math.floor(truth.rate_per_minute + 0.5))
    answer = t["answers"][ai].format(keyword=keyword, count=render_count(count, as_words))
    return QAPair(
        id=f"{task}-{split}-{index}",
        task=task,
        question=t["questions"][qi],
        answer=answer,
        key_count=count,
        keyword=keyword,
        modality_ref=None if seq_file is None else str(seq_file),
        template_ids=(qi, ai),
    )


# sampling ranges for the synthetic modalities
FRAMES = 20
MACRO_COUNTS = (2, 8)
MICRO_DT = 0.1
MICRO_PERIOD = (0.5, 1.0)


def modal_sequence_config(task: str, seed: int, index: int, split: str = "train") -> SequenceConfig:
    """Sequence parameters for one modal example.

    macro_count: strong square/triangle repeats, a few completed cycles in 20 frames.
    micro_rate: weak cosine pulse (60..120 per minute) under drift and noise.
    """
    rng = np.random.default_rng([seed, TASKS.index(task), SPLIT_OFFSETS[split] + index, 7])
    item_seed = int(rng.integers(1 << 62))
    if task == "macro_count":
        c = int(rng.integers(MACRO_COUNTS[0], MACRO_COUNTS[1] + 1))
        frames_per_cycle = FRAMES / (c + rng.uniform(0.0, 0.9))
        dt = 0.2
        return SequenceConfig(
            period_T=frames_per_cycle * dt,
            dt=dt,
            length=FRAMES,
            channels=3,
            amplitude_K=float(rng.uniform(0.8, 1.2)),
            semantic_amp_N=float(rng.uniform(0.0, 0.3)),
            waveform=("square", "triangle")[int(rng.integers(2))],
            semantic_kind="random_walk",
            noise_sigma=0.05,
            seed=item_seed,
        )
    if task == "micro_rate":
        return SequenceConfig(
            period_T=float(rng.uniform(*MICRO_PERIOD)),
            dt=MICRO_DT,
            length=FRAMES,
            channels=3,
            amplitude_K=float(rng.uniform(0.1, 0.3)),
            semantic_amp_N=float(rng.uniform(0.3, 1.0)),
            waveform="cosine",
            semantic_kind=("linear_drift", "random_walk")[int(rng.integers(2))],
            drift_slope=float(rng.uniform(-0.5, 0.5)),
            noise_sigma=0.05,
            seed=item_seed,
        )
    raise CorpusError(f"no sequence model for task {task!r}")


def gen_modal_corpus(
    task: str,
    seed: int,
    count: int,
    seq_dir: str | Path,
    split: str = "train",
    start: int = 0,
    ref_base: str | Path | None = None,
) -> list[QAPair]:
    """Generate sequences, write them as PSEQ1 files under ``seq_dir`` and pair them with QA.

    With ``ref_base`` (normally the corpus file's directory) the stored
    modality_ref is relative to it, so the corpus directory can be moved.
    """
    if count < 1:
        raise CorpusError("count must be >= 1")
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(start, start + count):
        seq = generate_sequence(modal_sequence_config(task, seed, i, split))
        path = seq_dir / f"{task}-{split}-{i}.pseq"
        write_pseq(seq, path)
        pair = gen_modal_qa(path, derive_ground_truth(seq), task, seed, i, split)
        if ref_base is not None:
            pair.modality_ref = os.path.relpath(path, ref_base)
        pairs.append(pair)
    return pairs


def write_jsonl(pairs: Iterable[QAPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json())
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[QAPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pairs.append(QAPair.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed QA record ({exc})") from exc
    return pairs
