"""End-to-end acceptance criteria 1-8.

Each test prints one ``PASS``/``FAIL`` line. Training criteria take minutes on
one CPU; deselect them with ``-m "not acceptance"`` for a quick run.
"""

import math
import time

import numpy as np
import pytest
import torch

from cbhvt.data import SynthConfig, split_dataset, synth_generate
from cbhvt.generators import SpatialReductionAttention
from cbhvt.harness import (GRADCHECK_EPSILON, TrainConfig, build_pipeline, comparison_pairs, evaluate,
                           gradcheck_suite, train)
from cbhvt.metrics import MatchCriterion, f_score, recall
from cbhvt.model import to_tensor
from cbhvt.region import decode_boxes, encode_boxes, generate_anchors, nms, roi_align
from test_generators import dense_attention
from test_region import nms_oracle, random_boxes, roi_align_oracle

pytestmark = pytest.mark.acceptance

# overfit run: a constant rate four times the default and a fixed horizon
OVERFIT_LR = 0.01
OVERFIT_ITERATIONS = 1000
OVERFIT_EVAL_AT = 200
SMOOTH = 10


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok
    return emit


def targets_of(samples):
    return [{"boxes": s.boxes, "labels": s.labels, "masks": s.masks} for s in samples]


def test_criterion_1_metric_arithmetic(verdict):
    p_inv = 0.88 * 0.93 / (2 * 0.93 - 0.88)
    f = f_score(0.8353, 0.93)
    r = recall(93, 7)
    ok = abs(f - 0.880) <= 0.001 and r == 0.93 and abs(p_inv - 0.8353) < 5e-4
    verdict(1, ok, f"f_score(0.8353, 0.93) = {f:.4f}; recall(93, 7) = {r}; inverted P = {p_inv:.4f}")
    assert ok


def test_criterion_2_gradcheck_suite(verdict):
    t0 = time.time()
    reports = gradcheck_suite()
    blocks = {r.parameter_name.split("[")[0] for r in reports}
    required = {"residual_block", "attention_refine", "transformer_stage", "fusion_block", "fpn", "rpn_head",
                "detection_head", "segmentation_head", "loss_cross_entropy", "loss_l1", "loss_bce"}
    worst = max(r.max_relative_error for r in reports)
    failed = [str(r) for r in reports if not r.passed]
    elapsed = time.time() - t0
    ok = required <= blocks and not failed and worst < 1e-4 and elapsed < 300
    verdict(2, ok, f"{len(reports)} checks over {len(blocks)} blocks, worst rel err {worst:.2e} "
                   f"(eps {GRADCHECK_EPSILON}), {elapsed:.0f}s")
    assert ok, (required - blocks, failed[:5])


def test_criterion_3_oracle_equivalences(verdict):
    rng = np.random.default_rng(0)
    t0 = time.time()
    # roi_align, 50 random boxes
    fm = rng.normal(size=(3, 16, 16))
    boxes = random_boxes(rng, 50, size=64.0)
    got = roi_align(torch.from_numpy(fm), torch.from_numpy(boxes), 4.0, (7, 7), 2).numpy()
    roi_err = max(np.abs(got[k] - roi_align_oracle(fm, b, 4.0, (7, 7), 2)).max() for k, b in enumerate(boxes))
    # nms, 100 random sets
    nms_ok = True
    for seed in range(100):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 100))
        b, s, thr = random_boxes(r, n), r.uniform(0, 1, n), float(r.uniform(0.1, 0.9))
        nms_ok &= nms(torch.from_numpy(b), torch.from_numpy(s), thr).tolist() == nms_oracle(b, s, thr)
    # anchors by enumeration
    shapes, strides, scales = [(3, 4), (2, 2)], [4, 8], (8.0, 16.0, 32.0)
    anchors = generate_anchors(shapes, strides, scales, (1.0,), dtype=torch.float64)
    anchor_ok = True
    for lvl, ((h, w), st) in enumerate(zip(shapes, strides)):
        ref = [[st * (j + 0.5) - sc / 2, st * (i + 0.5) - sc / 2, st * (j + 0.5) + sc / 2, st * (i + 0.5) + sc / 2]
               for i in range(h) for j in range(w) for sc in scales]
        anchor_ok &= np.array_equal(anchors.levels[lvl].numpy(), np.array(ref))
    # spatial reduction attention with reduction 1
    torch.manual_seed(0)
    attn = SpatialReductionAttention(8, 2, 1).double()
    x = torch.randn(1, 12, 8, dtype=torch.float64)
    sra_err = np.abs(attn(x, (3, 4))[0].detach().numpy() - dense_attention(x[0], attn)).max()
    # encode/decode round trip
    a, g = torch.from_numpy(random_boxes(rng, 200)), torch.from_numpy(random_boxes(rng, 200))
    rt_err = (decode_boxes(a, encode_boxes(a, g)) - g).abs().max().item()
    elapsed = time.time() - t0
    ok = roi_err <= 1e-6 and nms_ok and anchor_ok and sra_err <= 1e-6 and rt_err <= 1e-5 and elapsed < 120
    verdict(3, ok, f"roi_align {roi_err:.1e}, nms exact {nms_ok}, anchors exact {anchor_ok}, "
                   f"sra {sra_err:.1e}, round trip {rt_err:.1e}, {elapsed:.0f}s")
    assert ok


def test_criterion_4_structural_coverage(verdict):
    t0 = time.time()
    sample = synth_generate(SynthConfig(n_images=1, seed=0))[0]
    images, tgts = to_tensor(sample.image), targets_of([sample])
    problems = []
    for k, (c, m) in enumerate(comparison_pairs(), start=1):
        torch.manual_seed(k)
        model = build_pipeline(c, m)
        model.train()
        losses = model.loss(images, tgts, torch.Generator().manual_seed(0))
        if not all(math.isfinite(v) for v in losses.as_floats().values()):
            problems.append(f"model {k}: non-finite loss")
        losses.total.backward()
        for name, ps in model.trainable_groups().items():
            if not sum(float(p.grad.norm()) for p in ps if p.grad is not None) > 0:
                problems.append(f"model {k}: zero gradient in {name}")
    elapsed = time.time() - t0
    ok = not problems and elapsed < 300
    verdict(4, ok, f"6 pairings forward+backward on 3x256x256, {elapsed:.0f}s"
                   + (f"; {problems}" if problems else ""))
    assert ok


def test_criterion_5_overfit(verdict):
    data = synth_generate(SynthConfig(n_images=16, seed=0))
    cfg = TrainConfig(seed=0, epochs=10 ** 6, learning_rate=OVERFIT_LR, max_iterations=OVERFIT_ITERATIONS)
    early = {}

    def probe(it, model):
        if it == OVERFIT_EVAL_AT:
            early["report"] = evaluate(model, data, MatchCriterion())

    t0 = time.time()
    rec = train(cfg, data, log_every=100, on_step=probe)
    elapsed = time.time() - t0
    totals = [r["total"] for r in rec.losses]
    first, final = totals[0], float(np.mean(totals[-SMOOTH:]))
    f200 = early["report"].f_score
    ok_f = f200 >= 0.9
    ok_drop = first / final >= 10
    ok = ok_f and ok_drop and elapsed < 900
    verdict(5, ok, f"F at iteration {OVERFIT_EVAL_AT} = {f200:.3f} (final {rec.metrics['train'].f_score:.3f}); "
                   f"loss {first:.3f} -> {final:.3f} ({first / final:.1f}x, mean of last {SMOOTH} of "
                   f"{len(totals)} steps); {elapsed:.0f}s")
    assert ok_f and elapsed < 900
    assert ok_drop, f"loss fell only {first / final:.1f}x"


def test_criterion_6_generalization(verdict):
    # one synthetic pool with 96 single-image groups; the group split keeps train and test disjoint
    pool = synth_generate(SynthConfig(n_images=96, seed=1, id_prefix="gen"))
    train_set, _, test_set = split_dataset(pool, (2 / 3, 0, 1 / 3), seed=0)
    assert not {s.group for s in train_set} & {s.group for s in test_set}
    cfg = TrainConfig(seed=0, epochs=10 ** 6, learning_rate=OVERFIT_LR, max_iterations=OVERFIT_ITERATIONS)
    t0 = time.time()
    rec = train(cfg, train_set, {"test": test_set}, log_every=100)
    elapsed = time.time() - t0
    f = rec.metrics["test"].f_score
    ok = len(train_set) == 64 and len(test_set) == 32 and f >= 0.7 and elapsed < 1800
    verdict(6, ok, f"held-out F = {f:.3f} (train F {rec.metrics['train'].f_score:.3f}) on "
                   f"{len(train_set)}/{len(test_set)} images, {elapsed:.0f}s")
    assert ok


def test_criterion_7_determinism(verdict):
    data = synth_generate(SynthConfig(n_images=8, seed=2))
    cfg = TrainConfig(seed=5, epochs=3, batch_size=4, learning_rate=OVERFIT_LR)
    a = train(cfg, data, log_every=0)
    b = train(cfg, data, log_every=0)
    diffs = [abs(x[k] - y[k]) for x, y in zip(a.losses, b.losses) for k in ("l_c", "l_l", "l_b", "total")]
    worst = max(diffs)
    ok = len(a.losses) == len(b.losses) == 6 and worst <= 1e-6 and a.metrics == b.metrics
    verdict(7, ok, f"{len(a.losses)} steps, max loss difference {worst:.1e}, reports equal {a.metrics == b.metrics}")
    assert ok


def test_criterion_8_loss_identities(verdict):
    data = synth_generate(SynthConfig(n_images=4, seed=3))
    cfg = TrainConfig(seed=0, epochs=2, batch_size=2, generator_combo="Channel Generator-2",
                      merger_preset="Channel Merger-2")
    rec = train(cfg, data, log_every=0)
    exact = all(r["total"] == r["l_c"] + r["l_l"] + r["l_b"] for r in rec.losses)
    # a full forward pass of a trained model covering attention gates, transformer and head softmaxes
    model = rec.model
    model.train()
    images, tgts = to_tensor(np.stack([s.image for s in data[:2]])), targets_of(data[:2])
    captured = []
    hook = model.box_head.register_forward_hook(lambda m, i, o: captured.append(o[0].detach()))
    with torch.no_grad():
        model.loss(images, tgts, torch.Generator().manual_seed(0))
    hook.remove()
    gates = model.gate_values()
    rows = model.attention_rows() + captured
    gates_ok = bool(gates) and all(bool(((g > 0) & (g < 1)).all()) for g in gates)
    row_err = max(float((r.sum(-1) - 1).abs().max()) for r in rows)
    ok = exact and gates_ok and row_err <= 1e-6 and bool(captured) and bool(model.attention_rows())
    verdict(8, ok, f"{len(rec.losses)} logged steps sum exactly: {exact}; {len(gates)} gate tensors in (0,1): "
                   f"{gates_ok}; {len(rows)} softmax tensors, max |row sum - 1| = {row_err:.1e}")
    assert ok
