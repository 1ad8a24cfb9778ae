"""Paired-seed experiments: RLO retention, beta / threshold ablations, curriculum speed-up.

Each seed trains the easy stage once; every variant of the hard stage branches
from that shared state so variants differ only in their RLO settings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .curriculum import (
    StageSpec,
    Trainer,
    TrainSettings,
    new_model,
    resolve_rlo,
    retention_delta,
)
from .instruct import gen_modal_corpus, gen_text_repeat_qa, write_jsonl
from .plotting import smooth
from .rlo import RloConfig

log = logging.getLogger(__name__)

SMOOTH_WINDOW = 500


@dataclass
class PairedSetup:
    """Two-stage (easy -> hard) experiment definition."""

    stage_a: StageSpec
    stage_b: StageSpec
    model_kwargs: dict = field(default_factory=dict)
    settings: TrainSettings = field(default_factory=TrainSettings)
    retention_corpus: str | None = None
    max_iter_given: bool = False

    def corpora(self) -> list[str]:
        return [self.stage_a.corpus, self.stage_b.corpus]

    def retention_name(self) -> str:
        return self.retention_corpus or self.stage_a.eval_corpora[0][0]

    def variant(self, rlo: RloConfig | None) -> StageSpec:
        if rlo is not None and rlo.enabled:
            rlo = resolve_rlo(rlo, self.stage_b.iterations, self.stage_a.iterations + self.stage_b.iterations,
                              self.max_iter_given)
        else:
            rlo = None
        return replace(self.stage_b, rlo=rlo)


@dataclass
class VariantResult:
    seed: int
    label: str
    retention_delta: float | None
    retention_mae: float | None
    stage_b_losses: np.ndarray
    evals: dict
    error: str | None = None

    @property
    def final_loss(self) -> float:
        return float(smooth(self.stage_b_losses, SMOOTH_WINDOW)[-1])


def build_desk_corpora(root, seed: int = 1, text_train: int = 20000, text_test: int = 1000,
                       macro_train: int = 5000, macro_test: int = 500, n_range=(2, 10)) -> dict[str, str]:
    """Generate the desk-scale corpora (held-out words for the text test split)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "text_train": root / "text_repeat_train.jsonl",
        "text_test": root / "text_repeat_test.jsonl",
        "macro_train": root / "macro_count_train.jsonl",
        "macro_test": root / "macro_count_test.jsonl",
    }
    if not paths["text_train"].exists():
        write_jsonl(gen_text_repeat_qa(seed, text_train, "train", holdout=True, n_range=n_range), paths["text_train"])
    if not paths["text_test"].exists():
        write_jsonl(gen_text_repeat_qa(seed, text_test, "test", holdout=True, n_range=n_range), paths["text_test"])
    if not paths["macro_train"].exists():
        write_jsonl(gen_modal_corpus("macro_count", seed, macro_train, root / "seqs", "train", ref_base=root), paths["macro_train"])
    if not paths["macro_test"].exists():
        write_jsonl(gen_modal_corpus("macro_count", seed, macro_test, root / "seqs", "test", ref_base=root), paths["macro_test"])
    return {k: str(v) for k, v in paths.items()}


def desk_setup(corpora: Mapping[str, str], iters_a: int = 20000, iters_b: int = 10000,
               eval_limit: int | None = 500, seed: int = 0) -> PairedSetup:
    stage_a = StageSpec("text", "text_repeat", corpora["text_train"], iters_a, [("text", corpora["text_test"])])
    stage_b = StageSpec(
        "macro",
        "macro_count",
        corpora["macro_train"],
        iters_b,
        [("text", corpora["text_test"]), ("macro", corpora["macro_test"])],
    )
    return PairedSetup(stage_a, stage_b, settings=TrainSettings(seed=seed, eval_limit=eval_limit))


def train_easy_stage(setup: PairedSetup, seed: int) -> Trainer:
    model = new_model(setup.corpora(), seed, **setup.model_kwargs)
    trainer = Trainer(model, [setup.stage_a, setup.stage_b], replace(setup.settings, seed=seed))
    trainer.run(max_steps=setup.stage_a.iterations)  # also runs the stage-A evals
    return trainer


def run_variant(prefix: Trainer, setup: PairedSetup, label: str, rlo: RloConfig | None) -> VariantResult:
    stages = [setup.stage_a, setup.variant(rlo)]
    seed = prefix.settings.seed
    try:
        t = prefix.branch(stages)
        t.run()
        lg = t.log
        name = setup.retention_name()
        delta = retention_delta(lg, setup.stage_a.name, setup.stage_b.name, name)
        return VariantResult(
            seed=seed,
            label=label,
            retention_delta=delta,
            retention_mae=lg.evals[setup.stage_b.name][name].mae,
            stage_b_losses=lg.stage_losses(setup.stage_b.name),
            evals={s: {c: r.to_dict() for c, r in reps.items()} for s, reps in lg.evals.items()},
        )
    except Exception as exc:  # one failed cell must not sink the grid
        log.error("variant %s (seed %d) failed: %s", label, seed, exc)
        return VariantResult(seed, label, None, None, np.array([]), {}, error=repr(exc))


def paired_runs(setup: PairedSetup, seeds: Sequence[int], variants: Mapping[str, RloConfig | None],
                prefixes: dict | None = None) -> dict[str, list[VariantResult]]:
    """For each seed: train the easy stage once, then every hard-stage variant."""
    out: dict[str, list[VariantResult]] = {label: [] for label in variants}
    for seed in seeds:
        prefix = prefixes.get(seed) if prefixes is not None else None
        if prefix is None:
            prefix = train_easy_stage(setup, seed)
            if prefixes is not None:
                prefixes[seed] = prefix
        for label, cfg in variants.items():
            res = run_variant(prefix, setup, label, cfg)
            log.info("seed %d %s: retention delta %s, stage-B loss %.4f", seed, label, res.retention_delta,
                     res.final_loss if res.stage_b_losses.size else float("nan"))
            out[label].append(res)
    return out


def scratch_run(setup: PairedSetup, seed: int) -> np.ndarray:
    """Hard stage alone from a fresh model, RLO off: the vanilla fine-tuning baseline."""
    model = new_model(setup.corpora(), seed, **setup.model_kwargs)
    stage = replace(setup.stage_b, rlo=None, eval_corpora=[])
    trainer = Trainer(model, [stage], replace(setup.settings, seed=seed))
    trainer.run()
    return trainer.log.stage_losses(stage.name)


def iterations_to_reach(losses: np.ndarray, target: float, window: int = SMOOTH_WINDOW) -> int | None:
    """First iteration (1-based count) at which the smoothed loss is <= target."""
    s = smooth(losses, window)
    hit = np.nonzero(s <= target)[0]
    return int(hit[0]) + 1 if hit.size else None


def speedup_fraction(curriculum_losses: np.ndarray, baseline_losses: np.ndarray, window: int = SMOOTH_WINDOW) -> float:
    """Fraction of the hard stage needed to match the baseline's final smoothed loss."""
    target = float(smooth(baseline_losses, window)[-1])
    n = iterations_to_reach(curriculum_losses, target, window)
    return float("inf") if n is None else n / len(curriculum_losses)


def is_interior_minimum(values: Sequence[float]) -> bool:
    v = list(values)
    best = int(np.argmin(v))
    return 0 < best < len(v) - 1


def is_monotone(values: Sequence[float]) -> bool:
    d = np.diff(np.asarray(values, dtype=np.float64))
    return bool(np.all(d >= 0) or np.all(d <= 0))


def ablation_rows(results: Mapping[str, list[VariantResult]], setting: str, values: Mapping[str, object]) -> list[dict]:
    """Table rows: one per grid cell, MAE = mean retention-corpus MAE over seeds."""
    rows = []
    for label, value in values.items():
        rs = results[label]
        ok = [r for r in rs if r.error is None and r.retention_mae is not None]
        errors = [r.error for r in rs if r.error is not None]
        rows.append({
            "setting": setting,
            "value": value,
            "mae": float(np.mean([r.retention_mae for r in ok])) if ok else None,
            "retention_delta": float(np.mean([r.retention_delta for r in ok])) if ok else None,
            "stage_b_loss": float(np.mean([r.final_loss for r in ok])) if ok else None,
            "seeds": len(ok),
            "error": "; ".join(errors) if errors else "",
        })
    return rows
