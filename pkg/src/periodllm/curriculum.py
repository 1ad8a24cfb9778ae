"""Easy-to-hard training: sequential stages with per-stage RLO and retention evals."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rlo
from .instruct import QAPair, read_jsonl
from .metrics import EvalReport, bleu1, cider, extract_number, meteor_simplified, numeric_metrics
from .model import (
    Batch,
    ModelConfig,
    Vocab,
    collate,
    detokenize,
    encode_example,
    forward,
    generate,
    init_params,
    load_checkpoint,
    loss_and_backward,
    param_shapes,
    prompt_ids,
    save_checkpoint,
    tokenize,
)
from .signals import read_pseq, to_frame_features

log = logging.getLogger(__name__)

DIFFICULTY = {"text_repeat": 0, "macro_count": 1, "micro_rate": 2}


class CurriculumError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Model:
    cfg: ModelConfig
    vocab: Vocab
    params: dict[str, np.ndarray]

    def save(self, path, float_bytes: int = 8, opt_state=None) -> None:
        save_checkpoint(path, self.cfg, self.vocab, self.params, float_bytes, opt_state)

    @classmethod
    def load(cls, path) -> "Model":
        cfg, vocab, params, _ = load_checkpoint(path)
        return cls(cfg, vocab, params)


@dataclass
class StageSpec:
    name: str
    task: str
    corpus: str
    iterations: int
    eval_corpora: list[tuple[str, str]] = field(default_factory=list)
    rlo: rlo.RloConfig | None = None
    replay: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise CurriculumError(f"stage {self.name}: iterations must be >= 1")
        if self.task not in DIFFICULTY:
            raise CurriculumError(f"stage {self.name}: unknown task {self.task!r}")


@dataclass
class TrainSettings:
    seed: int = 0
    lr: float = 0.001
    optimizer: str = "adam"
    grad_accum: int = 1
    max_new: int = 32
    eval_limit: int | None = None
    checkpoint_float_bytes: int = 8
    dump_weights_every: int = 0


@dataclass
class RunLog:
    seed: int
    config: dict = field(default_factory=dict)
    losses: list[tuple[str, int, float]] = field(default_factory=list)
    evals: dict[str, dict[str, EvalReport]] = field(default_factory=dict)
    weight_dumps: list[tuple[str, int, list[float]]] = field(default_factory=list)
    wall_clock: float = 0.0

    def stage_losses(self, stage: str) -> np.ndarray:
        return np.array([x for s, _, x in self.losses if s == stage])

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "iter", "loss"])
            for s, i, x in self.losses:
                w.writerow([s, i, repr(x)])

    def write_weights_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = len(self.weight_dumps[0][2]) if self.weight_dumps else 0
            w.writerow(["stage", "iter"] + [f"w{i}" for i in range(n)])
            for s, i, ws in self.weight_dumps:
                w.writerow([s, i] + [repr(x) for x in ws])

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "wall_clock": self.wall_clock,
            "config": self.config,
            "evals": {s: {c: r.to_dict() for c, r in reps.items()} for s, reps in self.evals.items()},
            "final_loss": {s: float(self.stage_losses(s)[-1]) for s in dict.fromkeys(x[0] for x in self.losses)},
        }


def read_loss_csv(path) -> list[tuple[str, int, float]]:
    with open(path, newline="") as fh:
        return [(r["stage"], int(r["iter"]), float(r["loss"])) for r in csv.DictReader(fh)]


# -------------------------- corpora --------------------------


@dataclass
class Encoded:
    pair: QAPair
    inputs: list[int]
    targets: list[int]
    mask: list[float]
    prompt: list[int]
    modal: np.ndarray | None


def resolve_ref(corpus_path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else Path(corpus_path).parent / p


def encode_pair(pair: QAPair, vocab: Vocab, feat_dim: int, corpus_path=".") -> Encoded:
    modal = None
    n_modal = 0
    if pair.modality_ref:
        seq = read_pseq(resolve_ref(corpus_path, pair.modality_ref))
        modal = to_frame_features(seq, feat_dim)
        n_modal = modal.shape[0]
    q = tokenize(pair.question, vocab)
    a = tokenize(pair.answer, vocab)
    x, y, m = encode_example(q, a, n_modal)
    return Encoded(pair, x, y, m, prompt_ids(q, n_modal), modal)


def load_corpus(path, vocab: Vocab, feat_dim: int) -> list[Encoded]:
    pairs = read_jsonl(path)
    if not pairs:
        raise CurriculumError(f"corpus {path} is empty")
    return [encode_pair(p, vocab, feat_dim, path) for p in pairs]


def build_vocab(corpora: Sequence) -> Vocab:
    texts = []
    for path in corpora:
        for p in read_jsonl(path):
            texts += [p.question, p.answer]
    return Vocab.build(texts)


def make_batch(items: Sequence[Encoded]) -> Batch:
    modal = None
    if items[0].modal is not None:
        modal = np.stack([e.modal for e in items])
    return collate([(e.inputs, e.targets, e.mask) for e in items], modal)


# -------------------------- evaluation --------------------------


def answer(model: Model, enc: Encoded, max_new: int = 32) -> str:
    ids = generate(model.params, model.cfg, enc.prompt, enc.modal, max_new=max_new)
    return detokenize(ids, model.vocab)


def score_predictions(predictions: Sequence[str], pairs: Sequence[QAPair]) -> EvalReport:
    refs = [p.answer for p in pairs]
    extracted = [extract_number(t).value for t in predictions]
    truth = [p.key_count for p in pairs]
    mae, rmse, std, fail = numeric_metrics(extracted, truth)
    exact = sum(1 for e, t in zip(extracted, truth) if e == t) / len(truth)
    b1 = float(np.mean([bleu1(c, [r]) for c, r in zip(predictions, refs)]))
    met = float(np.mean([meteor_simplified(c, [r]) for c, r in zip(predictions, refs)]))
    cid = cider(predictions, [[r] for r in refs]) if len(refs) >= 2 else 0.0
    return EvalReport(
        n=len(pairs),
        mae=mae,
        rmse=rmse,
        std=std,
        extraction_failure_rate=fail,
        bleu1=b1,
        meteor=met,
        cider=cid,
        cider_normalized=cid / 10.0,
        exact_accuracy=exact,
    )


def evaluate(model: Model, corpus, task: str | None = None, limit: int | None = None, max_new: int = 32) -> EvalReport:
    """Greedy-answer every question in ``corpus`` and score the answers."""
    items = load_corpus(corpus, model.vocab, model.cfg.feat_dim)
    if task is not None:
        items = [e for e in items if e.pair.task == task]
    if limit is not None:
        items = items[:limit]
    if not items:
        raise CurriculumError(f"no {task or ''} items to evaluate in {corpus}")
    preds = [answer(model, e, max_new) for e in items]
    return score_predictions(preds, [e.pair for e in items])


def retention_delta(log: RunLog, stage_a: str, stage_b: str, corpus: str | None = None) -> float:
    """MAE on stage_a's test corpus after stage_b minus after stage_a (positive = forgetting)."""
    if stage_a not in log.evals or stage_b not in log.evals:
        raise CurriculumError(f"missing evaluations for {stage_a!r} or {stage_b!r}")
    after_a = log.evals[stage_a]
    if corpus is None:
        if not after_a:
            raise CurriculumError(f"stage {stage_a!r} has no evaluations")
        corpus = next(iter(after_a))
    if corpus not in after_a or corpus not in log.evals[stage_b]:
        raise CurriculumError(f"corpus {corpus!r} not evaluated after both stages")
    mae_a, mae_b = after_a[corpus].mae, log.evals[stage_b][corpus].mae
    if mae_a is None or mae_b is None:
        raise CurriculumError(f"no extractable answers on {corpus!r}")
    return mae_b - mae_a


# -------------------------- training --------------------------


def validate_stages(stages: Sequence[StageSpec]) -> None:
    if not stages:
        raise CurriculumError("no stages")
    names = [s.name for s in stages]
    if len(set(names)) != len(names):
        raise CurriculumError(f"duplicate stage names {names}")
    ranks = [DIFFICULTY[s.task] for s in stages]
    for prev, cur, st in zip(ranks, ranks[1:], stages[1:]):
        if cur < prev:
            raise CurriculumError(f"stage {st.name!r} ({st.task}) is easier than the stage before it")
    for s in stages:
        if not Path(s.corpus).is_file():
            raise CurriculumError(f"stage {s.name}: corpus {s.corpus} not found")


def _stream_key(path) -> int:
    return zlib.crc32(Path(path).name.encode("utf-8"))


class Trainer:
    """Runs stages in order; all state needed for a bitwise resume lives here."""

    def __init__(self, model: Model, stages: Sequence[StageSpec], settings: TrainSettings, run_dir=None):
        validate_stages(stages)
        self.model = model
        self.stages = list(stages)
        self.settings = settings
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.opt = rlo.OptimState(lr=settings.lr, kind=settings.optimizer)
        self.cursors: dict[str, list[int]] = {}  # corpus -> [epoch, position]
        self.stage_idx = 0
        self.iter_in_stage = 0
        self.global_iter = 0
        self.log = RunLog(seed=settings.seed, config=self.config_echo())
        self._corpora: dict[str, list[Encoded]] = {}
        self._orders: dict[tuple[str, int], np.ndarray] = {}

    def config_echo(self) -> dict:
        stages = []
        for s in self.stages:
            d = asdict(s)
            d["rlo"] = None if s.rlo is None else asdict(s.rlo)
            stages.append(d)
        return {"model": asdict(self.model.cfg), "settings": asdict(self.settings), "stages": stages}

    # data stream: seeded permutation per (corpus, epoch), cursor carried across stages
    def _corpus(self, path) -> list[Encoded]:
        if path not in self._corpora:
            self._corpora[path] = load_corpus(path, self.model.vocab, self.model.cfg.feat_dim)
        return self._corpora[path]

    def _next_example(self, path) -> Encoded:
        items = self._corpus(path)
        epoch, pos = self.cursors.setdefault(path, [0, 0])
        key = (path, epoch)
        if key not in self._orders:
            rng = np.random.default_rng([self.settings.seed, _stream_key(path), epoch])
            self._orders[key] = rng.permutation(len(items))
        item = items[int(self._orders[key][pos])]
        pos += 1
        if pos == len(items):
            epoch, pos = epoch + 1, 0
        self.cursors[path] = [epoch, pos]
        return item

    def _replay_source(self, stage: StageSpec) -> str:
        if stage.replay <= 0 or self.stage_idx == 0:
            return stage.corpus
        rng = np.random.default_rng([self.settings.seed, 99, self.global_iter])
        if rng.random() >= stage.replay:
            return stage.corpus
        earlier = self.stages[: self.stage_idx]
        return earlier[int(rng.integers(len(earlier)))].corpus

    def _rlo_cfg(self, stage: StageSpec) -> rlo.RloConfig | None:
        cfg = stage.rlo
        if cfg is None or not cfg.enabled:
            return None
        return cfg

    def _iter_num(self, cfg: rlo.RloConfig) -> int:
        n = self.iter_in_stage if cfg.iter_scope == "per_stage" else self.global_iter
        return min(n, cfg.max_iter)

    def train_step(self, stage: StageSpec) -> float:
        params, mcfg = self.model.params, self.model.cfg
        k = self.settings.grad_accum
        total_loss = 0.0
        grads = None
        acts = None
        for _ in range(k):
            enc = self._next_example(self._replay_source(stage))
            batch = make_batch([enc])
            _, cache = forward(params, mcfg, batch, full_logits=False)
            loss, g = loss_and_backward(params, mcfg, batch, cache)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at stage {stage.name} iter {self.iter_in_stage}")
            total_loss += loss
            acts = cache["hf"]
            if grads is None:
                grads = g
            else:
                for name in grads:
                    grads[name] = grads[name] + g[name]
        if k > 1:
            grads = {n: g / k for n, g in grads.items()}
            total_loss /= k
        rcfg = self._rlo_cfg(stage)
        if rcfg is not None:
            weights = rlo.rlo_weights(grads, acts, self._iter_num(rcfg), rcfg)
            grads = rlo.apply_rlo(grads, weights, rcfg)
            every = self.settings.dump_weights_every
            if every and self.iter_in_stage % every == 0:
                self.log.weight_dumps.append((stage.name, self.iter_in_stage, weights.tolist()))
        rlo.step(params, grads, self.opt)
        return total_loss

    def evaluate_stage(self, stage: StageSpec) -> None:
        reports = {}
        for cname, cpath in stage.eval_corpora:
            reports[cname] = evaluate(
                self.model, cpath, limit=self.settings.eval_limit, max_new=self.settings.max_new
            )
        self.log.evals[stage.name] = reports

    def run(self, max_steps: int | None = None) -> RunLog:
        """Train until every stage is done, or until ``max_steps`` more updates."""
        t0 = time.perf_counter()
        steps = 0
        while self.stage_idx < len(self.stages):
            stage = self.stages[self.stage_idx]
            while self.iter_in_stage < stage.iterations:
                if max_steps is not None and steps >= max_steps:
                    self.log.wall_clock += time.perf_counter() - t0
                    return self.log
                try:
                    loss = self.train_step(stage)
                except (TrainingDiverged, rlo.NonFiniteGradient):
                    log.error("training diverged in stage %s; last stage checkpoint kept", stage.name)
                    raise
                self.log.losses.append((stage.name, self.iter_in_stage, loss))
                self.iter_in_stage += 1
                self.global_iter += 1
                steps += 1
            self.evaluate_stage(stage)
            self.stage_idx += 1
            self.iter_in_stage = 0
            if self.run_dir is not None:
                self.save(self.run_dir / f"ckpt_{stage.name}")
            log.info("stage %s done (final loss %.4f)", stage.name, self.log.losses[-1][2])
        self.log.wall_clock += time.perf_counter() - t0
        return self.log

    def branch(self, stages: Sequence[StageSpec]) -> "Trainer":
        """Independent copy of the current state that continues with ``stages``.

        Completed stages must match; the remaining ones may differ (e.g. in RLO
        settings), which is how paired runs share one trained prefix.
        """
        done = self.stages[: self.stage_idx]
        if [s.name for s in stages[: self.stage_idx]] != [s.name for s in done]:
            raise CurriculumError("branch must keep the completed stages")
        model = Model(self.model.cfg, self.model.vocab, {k: v.copy() for k, v in self.model.params.items()})
        other = Trainer(model, stages, self.settings, None)
        other.opt = copy.deepcopy(self.opt)
        other.cursors = copy.deepcopy(self.cursors)
        other.stage_idx = self.stage_idx
        other.iter_in_stage = self.iter_in_stage
        other.global_iter = self.global_iter
        other.log = copy.deepcopy(self.log)
        other.log.config = other.config_echo()
        other._corpora = self._corpora
        return other

    # -------------------------- persistence --------------------------

    def save(self, path) -> None:
        """Directory with model.pllm (params + Adam moments) and trainer.json."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        opt_state = None
        if self.opt.m:
            opt_state = (self.opt.step, self.opt.m, self.opt.v)
        self.model.save(path / "model.pllm", self.settings.checkpoint_float_bytes, opt_state)
        state = {
            "stage_idx": self.stage_idx,
            "iter_in_stage": self.iter_in_stage,
            "global_iter": self.global_iter,
            "opt_step": self.opt.step,
            "cursors": self.cursors,
            "log": {
                "losses": self.log.losses,
                "evals": {s: {c: r.to_dict() for c, r in reps.items()} for s, reps in self.log.evals.items()},
                "weight_dumps": self.log.weight_dumps,
                "wall_clock": self.log.wall_clock,
            },
        }
        tmp = path / "trainer.json.tmp"
        tmp.write_text(json.dumps(state))
        tmp.replace(path / "trainer.json")

    @classmethod
    def resume(cls, path, stages: Sequence[StageSpec], settings: TrainSettings, run_dir=None) -> "Trainer":
        path = Path(path)
        cfg, vocab, params, opt_state = load_checkpoint(path / "model.pllm")
        trainer = cls(Model(cfg, vocab, params), stages, settings, run_dir)
        state = json.loads((path / "trainer.json").read_text())
        trainer.stage_idx = state["stage_idx"]
        trainer.iter_in_stage = state["iter_in_stage"]
        trainer.global_iter = state["global_iter"]
        trainer.cursors = {k: list(v) for k, v in state["cursors"].items()}
        trainer.opt.step = state["opt_step"]
        if opt_state is not None:
            _, m, v = opt_state
            trainer.opt.m, trainer.opt.v = m, v
        lg = state["log"]
        trainer.log.losses = [(s, int(i), float(x)) for s, i, x in lg["losses"]]
        trainer.log.evals = {
            s: {c: EvalReport.from_dict(r) for c, r in reps.items()} for s, reps in lg["evals"].items()
        }
        trainer.log.weight_dumps = [(s, int(i), list(w)) for s, i, w in lg["weight_dumps"]]
        trainer.log.wall_clock = lg["wall_clock"]
        return trainer


def new_model(corpora: Sequence, seed: int, **model_kwargs) -> Model:
    """Fresh model whose vocab covers the given training corpora."""
    vocab = build_vocab(corpora)
    cfg = ModelConfig(vocab_size=len(vocab), **model_kwargs)
    return Model(cfg, vocab, init_params(cfg, seed))


def run_curriculum(
    stages: Sequence[StageSpec],
    model: Model,
    seed: int,
    settings: TrainSettings | None = None,
    run_dir=None,
) -> tuple[dict[str, np.ndarray], RunLog]:
    settings = replace(settings or TrainSettings(), seed=seed)
    trainer = Trainer(model, stages, settings, run_dir)
    trainer.run()
    return model.params, trainer.log


def resolve_rlo(cfg: rlo.RloConfig | None, stage_iterations: int, total_iterations: int, max_iter_given: bool) -> rlo.RloConfig | None:
    """Fill in max_iter from the stage (or run) length when the config left it open."""
    if cfg is None or max_iter_given:
        return cfg
    n = stage_iterations if cfg.iter_scope == "per_stage" else total_iterations
    return replace(cfg, max_iter=n)


__all__ = [
    "DIFFICULTY",
    "Model",
    "RunLog",
    "StageSpec",
    "TrainSettings",
    "Trainer",
    "evaluate",
    "new_model",
    "param_shapes",
    "read_loss_csv",
    "retention_delta",
    "run_curriculum",
]
