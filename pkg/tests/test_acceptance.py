"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected in ``RESULTS`` and echoed in the terminal
summary (see conftest.py), so they show up even with output capture on.
Training-based criteria share runs through ``toy_run``.
"""

import functools
import time

import numpy as np
import pytest

from test_gate import brute_force_pipeline
from test_tensor import OP_CASES, _weighted

from tokengate import tensor as T
from tokengate.cli import main as cli_main
from tokengate.encoder import Encoder, ModelConfig
from tokengate.flops import gamma_schedule, model_flops
from tokengate.gate import GateParams, mask_match
from tokengate.harness import SyntheticTask, TrainConfig, evaluate, generate_synthetic, train
from tokengate.regularizers import RegularizerInputs, current_weights, polar_and_total

RESULTS: list[str] = []

REFERENCE_SCHEDULE_FLOPS = {0.1: 1872e6, 0.2: 2883e6, 0.3: 3915e6, 0.4: 4926e6, 0.5: 5994e6, 0.6: 7033e6}
SWEEP = (0.1, 0.3, 0.5, 0.7, 0.9)


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def toy_run(gamma: float = 0.5, lambda_bi: float = 2.0, gated: bool = True) -> dict:
    """Default toy config (L=4, I=16, J=32), 20 epochs, fixed seed."""
    task = SyntheticTask()
    data = generate_synthetic(task)
    start = time.perf_counter()
    model, metrics = train(ModelConfig(gamma=gamma, lambda_bi=lambda_bi), task, TrainConfig(gated=gated), data=data)
    seconds = time.perf_counter() - start
    ev = evaluate(model, data[1], gated=gated)
    return {"accuracy": ev.accuracy, "flops": ev.flops.total, "kept": float(np.mean(ev.kept_fraction)),
            "polarization": metrics.final.polarization_fraction, "seconds": seconds}


def test_criterion_1_flops_baseline():
    r = model_flops([128] * 12, 128, 768)
    report(1, r.total == 10_871_635_968 and r.total_label == "10872M", f"{r.total:,d} FLOPs -> {r.total_label}")


def test_criterion_2_gamma_schedule():
    errs = {g: abs(model_flops(gamma_schedule(g, 128, 12), 128, 768).total - ref) / ref
            for g, ref in REFERENCE_SCHEDULE_FLOPS.items()}
    worst = max(errs, key=errs.get)
    report(2, all(e <= 0.05 for e in errs.values()), f"worst relative error {errs[worst]:.4f} at gamma={worst}")


def test_criterion_3_speedup_format():
    base = model_flops([128] * 12, 128, 768).baseline
    got = {label: base / total for total, label in ((3357e6, 3.23), (2629e6, 4.13))}
    ok = all(abs(v - label) <= 0.01 for label, v in got.items())
    report(3, ok, ", ".join(f"{v:.4f} vs {label:.2f}" for label, v in got.items()))


def _frozen_total_loss_error(seed: int) -> float:
    cfg = ModelConfig(layers=3, seq_len=4, hidden=4, heads=2, ffn_dim=6, vocab=6, init_std=0.5, ln_eps=1e-5,
                      seed=seed)
    model = Encoder(cfg)
    rng = np.random.default_rng(seed)
    for g in model.gates:
        g.m.data[...] = rng.uniform(-2, 2, size=cfg.seq_len)
    toks = rng.integers(1, cfg.vocab, size=(3, cfg.seq_len))
    toks[:, 0] = 0
    labels = rng.integers(0, cfg.classes, size=3)
    routings = model.forward(toks).routings
    inp = RegularizerInputs([g.m for g in model.gates], cfg.seq_len, cfg.gamma)
    inp.weights = current_weights(inp)

    def loss():
        logits = model.forward(toks, routings=routings).logits
        return polar_and_total(T.cross_entropy(logits, labels), inp).total

    return T.grad_check(loss, [t for _, t in model.named_parameters()], eps=1e-4)


def test_criterion_4_gradients():
    start = time.perf_counter()
    worst = 0.0
    for build in OP_CASES.values():
        for seed in range(10):
            rng = np.random.default_rng(seed)
            inputs, fn = build(rng)
            w_seed = int(rng.integers(2**31))
            loss = lambda: _weighted(fn(*inputs), np.random.default_rng(w_seed))  # noqa: E731
            worst = max(worst, T.grad_check(loss, inputs, eps=1e-3))
    for seed in range(10):
        worst = max(worst, _frozen_total_loss_error(seed))
    seconds = time.perf_counter() - start
    report(4, worst < 1e-4 and seconds < 60,
           f"max relative error {worst:.2e} over {len(OP_CASES)} ops + L_total, {seconds:.1f}s")


def test_criterion_5_gate_algebra():
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(100):
        n, width = int(rng.integers(2, 17)), int(rng.integers(1, 33))
        x = rng.normal(size=(n, width))
        x[rng.random(n) < 0.2] = 0.0
        m = rng.normal(scale=2.0, size=n)
        out = mask_match(T.tensor(x), GateParams(T.tensor(m)))
        ref, keep = brute_force_pipeline(x, m, 0.5)
        inverse = np.empty_like(out.perm)
        inverse[out.perm] = np.arange(n)
        ok = (np.array_equal(out.x_m.data, ref)
              and np.array_equal(out.perm[inverse], np.arange(n))
              and np.array_equal(T.scatter_rows(T.gather_rows(T.tensor(x), out.perm), out.perm).data, x)
              and np.array_equal(out.x_m.data[keep], x[keep] * out.matched[keep, None])
              and not out.x_m.data[~keep].any()
              and not out.x_m.data[~x.any(axis=1)].any())
        failures += not ok
    report(5, failures == 0, f"{100 - failures}/100 cases bit-exact against the brute-force oracle")


def test_criterion_6_open_gates():
    model = Encoder(ModelConfig())
    model.open_gates(40.0)
    assert np.all(np.abs(model.gate_values() - 1.0) <= 1e-9)
    task = SyntheticTask(n_train=16, n_eval=256)
    _, eval_set = generate_synthetic(task)
    diff = np.abs(model.forward(eval_set.tokens, gated=True).logits.data
                  - model.forward(eval_set.tokens, gated=False).logits.data).max()
    label = evaluate(model, eval_set, gated=True).flops.speedup_label
    report(6, diff <= 1e-5 and label == "1.00×", f"max logit difference {diff:.1e}, speedup {label}")


@pytest.mark.slow
def test_criterion_7_polarization():
    on, off = toy_run(0.5, 2.0), toy_run(0.5, 0.0)
    ok = (on["polarization"] >= 0.9 and off["polarization"] < on["polarization"]
          and off["accuracy"] < on["accuracy"] and max(on["seconds"], off["seconds"]) <= 300)
    report(7, ok, f"lambda_bi=2: polarization {on['polarization']:.3f} accuracy {on['accuracy']:.4f}; "
                  f"lambda_bi=0: polarization {off['polarization']:.3f} accuracy {off['accuracy']:.4f}")


@pytest.mark.slow
def test_criterion_8_gamma_control():
    runs = {g: toy_run(g) for g in SWEEP}
    flops = [runs[g]["flops"] for g in SWEEP]
    inversions = sum(b < a for a, b in zip(flops, flops[1:]))
    kept_err = {g: abs(runs[g]["kept"] - g) for g in (0.3, 0.5, 0.7)}
    seconds = sum(r["seconds"] for r in runs.values())
    ok = inversions <= 1 and all(e <= 0.15 for e in kept_err.values()) and seconds <= 1500
    kept = ", ".join(f"{g}: {runs[g]['kept']:.3f}" for g in SWEEP)
    report(8, ok, f"{inversions} FLOPs inversions; kept fraction by gamma {{{kept}}}; {seconds:.0f}s")


@pytest.mark.slow
def test_criterion_9_task_viability():
    ungated, gated = toy_run(gated=False), toy_run(0.5)
    ok = ungated["accuracy"] >= 0.95 and ungated["accuracy"] - gated["accuracy"] <= 0.05
    report(9, ok, f"ungated {ungated['accuracy']:.4f}, gamma=0.5 gated {gated['accuracy']:.4f}")


def test_criterion_10_determinism(tmp_path):
    args = ["--seed", "11", "--epochs", "2", "--set", "task.n_train=256", "--set", "task.n_eval=128"]
    for name in ("a", "b"):
        assert cli_main(["train", "--out", str(tmp_path / name), *args]) == 0
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    report(10, a == b, f"metrics CSVs {'identical' if a == b else 'differ'} ({len(a)} bytes)")
