"""Acceptance suite: each test checks one criterion at its stated tolerance and
prints a single pass/fail line.

The training experiments (4-7) share one set of runs: per seed, the text stage
is trained once and every macro-stage variant branches from it.
"""

import logging
import math
import time
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest

from test_metrics import brute_cider
from _helpers import criterion, finite_difference_check, random_batch, tiny_model
from periodllm import config
from periodllm import experiments as ex
from periodllm.curriculum import Trainer, evaluate, encode_pair, make_batch, new_model
from periodllm.instruct import gen_modal_qa, modal_sequence_config, read_jsonl, text_repeat_pair, write_jsonl
from periodllm.metrics import bleu1, cider, meteor_simplified
from periodllm.model import forward, generate, loss_and_backward, loss_only
from periodllm.numbers import extract_number
from periodllm.rlo import ChannelStats, OptimState, RloConfig, omega, step
from periodllm.signals import derive_ground_truth, generate_sequence

log = logging.getLogger("acceptance")

SEEDS = [0, 1, 2, 3, 4]
SPEEDUP_SEEDS = [0, 1, 2]
BETAS = [0.01, 0.05, 0.1, 0.5]


# -------------------------- shared desk-scale runs --------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    ex.build_desk_corpora(root)
    (root / "desk.cfg").write_text(resources.files("periodllm").joinpath("configs/desk.cfg").read_text())
    cfg = config.load(root / "desk.cfg")
    a, b = cfg.stages
    setup = ex.PairedSetup(a, b, model_kwargs=cfg.model, settings=cfg.settings)
    return root, cfg, setup


@pytest.fixture(scope="module")
def prefixes():
    return {}


@pytest.fixture(scope="module")
def paired(desk, prefixes):
    _, cfg, setup = desk
    variants = {"off": None}
    for b in BETAS:
        variants[f"beta={b}"] = RloConfig(**{**cfg.rlo.__dict__, "beta": b})
    t0 = time.time()
    results = ex.paired_runs(setup, SEEDS, variants, prefixes)
    log.info("paired runs took %.0f s", time.time() - t0)
    return results


# -------------------------- 1. omega table --------------------------


def test_criterion_01_omega_table():
    cfg = RloConfig(enabled=True, beta=0.05, max_iter=1000)
    s = ChannelStats(np.array([0.2, 0.5, 0.8, 1.7]), 0.8)
    w0, wmax = omega(s, 0, cfg), omega(s, cfg.max_iter, cfg)
    ok = (
        w0[2] == 1.0 and w0[3] == 1.0 and wmax[2] == 1.0 and wmax[3] == 1.0
        and abs(w0[0] - 1.05) <= 1e-9 and abs(w0[1] - 1.05) <= 1e-9
        and abs(wmax[0] - (1 + 0.05 * math.e)) <= 1e-9 and abs(wmax[1] - 1.1359140914229523) <= 1e-9
    )
    criterion(1, ok, f"at/above threshold {w0[2]}, {w0[3]}; below: iter 0 -> {w0[0]!r}, max_iter -> {wmax[0]!r}")


# -------------------------- 2. gradient exactness --------------------------


def test_criterion_02_gradient_exactness():
    worst = {}
    for seed in range(3):
        cfg, params = tiny_model(seed=seed, V=20, d=8, layers=1)
        batch = random_batch(cfg, seed=seed + 10, B=2, n_modal=2)
        for k, v in finite_difference_check(params, cfg, batch, h=1e-5, rel=1e-4, floor=1e-6).items():
            worst[k] = max(worst.get(k, -np.inf), v)
    bad = [k for k, v in worst.items() if v > 0]
    criterion(2, not bad, f"{len(worst)} tensors x 3 random models checked; violations: {bad or 'none'}")


# -------------------------- 3. memorization --------------------------


def test_criterion_03_memorization(tmp_path):
    write_jsonl([text_repeat_pair(0, 0)], tmp_path / "one.jsonl")
    model = new_model([tmp_path / "one.jsonl"], 0)  # default tiny model, vocab of this pair
    enc = encode_pair(read_jsonl(tmp_path / "one.jsonl")[0], model.vocab, model.cfg.feat_dim)
    batch = make_batch([enc])
    state = OptimState(lr=0.001, kind="adam")
    for _ in range(200):
        _, cache = forward(model.params, model.cfg, batch, full_logits=False)
        _, grads = loss_and_backward(model.params, model.cfg, batch, cache)
        step(model.params, grads, state)
    nll = loss_only(model.params, model.cfg, batch)
    out = generate(model.params, model.cfg, enc.prompt, max_new=32)
    answer = enc.targets[len(enc.prompt) - 1 : -1]
    criterion(3, nll < 0.01 and out == answer, f"NLL after 200 Adam steps = {nll:.5f} (< 0.01); greedy exact = {out == answer}")


# -------------------------- 4. counting capability --------------------------


@pytest.mark.slow
def test_criterion_04_counting(desk, prefixes):
    root, cfg, setup = desk
    if 0 not in prefixes:
        prefixes[0] = ex.train_easy_stage(setup, 0)
    trainer = prefixes[0]
    rep = evaluate(trainer.model, root / "text_repeat_test.jsonl", max_new=cfg.settings.max_new)
    ok = rep.n == 1000 and rep.exact_accuracy >= 0.9 and rep.mae <= 0.2
    criterion(4, ok, f"{setup.stage_a.iterations} steps on 20,000 pairs; held-out n={rep.n}: "
                     f"exact {rep.exact_accuracy:.3f} (>= 0.90), MAE {rep.mae:.3f} (<= 0.2)")


# -------------------------- 5. RLO retention --------------------------


@pytest.mark.slow
def test_criterion_05_rlo_retention(paired):
    on, off = paired["beta=0.05"], paired["off"]
    assert all(r.error is None for r in on + off), [r.error for r in on + off if r.error]
    d_on = np.array([r.retention_delta for r in on])
    d_off = np.array([r.retention_delta for r in off])
    l_on = np.mean([r.final_loss for r in on])
    l_off = np.mean([r.final_loss for r in off])
    ok = d_on.mean() < d_off.mean() and l_on <= 1.10 * l_off
    criterion(5, ok, f"{len(on)} seeds; mean retention delta on {d_on.mean():.3f} vs off {d_off.mean():.3f} "
                     f"(per seed on {np.round(d_on, 3).tolist()}, off {np.round(d_off, 3).tolist()}); "
                     f"stage-B final loss on {l_on:.4f} vs off {l_off:.4f} (limit {1.10 * l_off:.4f})")


# -------------------------- 6. beta ablation shape --------------------------


@pytest.mark.slow
def test_criterion_06_beta_shape(paired):
    rows = ex.ablation_rows(paired, "beta", {f"beta={b}": b for b in BETAS})
    maes = [r["mae"] for r in rows]
    assert None not in maes
    best = BETAS[int(np.argmin(maes))]
    ok = ex.is_interior_minimum(maes) and not ex.is_monotone(maes)
    criterion(6, ok, "retention MAE by beta " + ", ".join(f"{b}: {m:.3f}" for b, m in zip(BETAS, maes))
              + f"; best beta {best}")


# -------------------------- 7. curriculum benefit --------------------------


@pytest.mark.slow
def test_criterion_07_curriculum_speedup(desk, paired):
    _, _, setup = desk
    fractions = []
    for r in paired["beta=0.05"]:
        if r.seed not in SPEEDUP_SEEDS:
            continue
        baseline = ex.scratch_run(setup, r.seed)
        fractions.append(ex.speedup_fraction(r.stage_b_losses, baseline))
    mean = float(np.mean(fractions))
    criterion(7, len(fractions) >= 3 and mean <= 0.70,
              f"fraction of macro-stage iterations to reach the scratch baseline's final smoothed loss: "
              f"per seed {np.round(fractions, 3).tolist()}, mean {mean:.3f} (<= 0.70)")


# -------------------------- 8. metric oracles --------------------------


def test_criterion_08_metric_oracles():
    ident = bleu1("the man performs two pull-ups", ["the man performs two pull-ups"])
    hand = bleu1("the man does two pull-ups", ["the man performs two pull-ups"])
    rev = meteor_simplified("a b c d", ["d c b a"])
    cands = ["the man performs two pull-ups", "a woman does five squats", "heart rate is 75 per minute"]
    refs = [["the man does two pull-ups"], ["the woman performs five squats"], ["the heart rate is 75 beats per minute"]]
    c, oracle = cider(cands, refs), brute_cider(cands, refs)
    ok = ident == 1.0 and abs(hand - 0.8) <= 1e-12 and abs(rev - 0.5) <= 1e-12 and abs(c - oracle) <= 1e-9
    criterion(8, ok, f"bleu1 identity {ident}, hand example {hand:.6f}, METEOR reversed {rev:.6f}, "
                     f"CIDEr {c:.9f} vs brute force {oracle:.9f}")


# -------------------------- 9. extraction closure --------------------------


def test_criterion_09_extraction_closure():
    failures, total = 0, 0
    for i in range(4000):
        p = text_repeat_pair(9, i)
        failures += extract_number(p.answer).value != p.key_count
        total += 1
    for task in ("macro_count", "micro_rate"):
        for i in range(3000):
            truth = derive_ground_truth(generate_sequence(modal_sequence_config(task, 9, i)))
            p = gen_modal_qa(None, truth, task, 9, i, check_file=False)
            failures += extract_number(p.answer).value != p.key_count
            total += 1
    criterion(9, total >= 10000 and failures == 0, f"{total} pairs over three tasks, {failures} failures")


# -------------------------- 10. determinism and resume --------------------------


@pytest.mark.slow
def test_criterion_10_determinism_resume(desk, tmp_path):
    _, cfg, setup = desk
    stages = [replace(setup.stage_a, iterations=150, eval_corpora=[]),
              replace(setup.variant(RloConfig(enabled=True, beta=0.05)), iterations=150, eval_corpora=[])]
    settings = replace(cfg.settings, seed=11)

    def fresh():
        return Trainer(new_model([s.corpus for s in stages], 11, **cfg.model), stages, settings)

    csvs = []
    for name in ("a", "b"):
        t = fresh()
        t.run()
        t.log.write_loss_csv(tmp_path / f"{name}.csv")
        csvs.append((tmp_path / f"{name}.csv").read_bytes())
    same = csvs[0] == csvs[1]
    resumed_ok = True
    for cut in (100, 220):
        t = fresh()
        t.run(max_steps=cut)
        t.save(tmp_path / f"ck{cut}")
        r = Trainer.resume(tmp_path / f"ck{cut}", stages, settings)
        r.run()
        r.log.write_loss_csv(tmp_path / f"r{cut}.csv")
        ref = fresh()
        ref.run()
        resumed_ok &= (tmp_path / f"r{cut}.csv").read_bytes() == csvs[0]
        resumed_ok &= all(np.array_equal(r.model.params[k], ref.model.params[k]) for k in ref.model.params)
    criterion(10, same and resumed_ok, f"rerun loss CSV bitwise equal: {same}; resume at 100 and 220 of 300 "
                                       f"bitwise equal (losses and params): {resumed_ok}")
