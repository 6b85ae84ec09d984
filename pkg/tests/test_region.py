import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cbhvt.backend import ConfigurationError, InvalidInputError, bilinear_sample, gradcheck_module
from cbhvt.region import (IGNORE, NEGATIVE, POSITIVE, RPNHead, assign_targets, decode_boxes, encode_boxes,
                          generate_anchors, map_levels, multilevel_roi_align, nms, roi_align, roi_mask_target,
                          rpn_forward, select_proposals)


def random_boxes(rng, n, size=64.0, min_wh=2.0, max_wh=30.0):
    xy = rng.uniform(0, size - max_wh, (n, 2))
    wh = rng.uniform(min_wh, max_wh, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def iou_py(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# anchors ------------------------------------------------------------------------

def test_anchor_examples():
    a = generate_anchors([(8, 8)], [4], (8.0,), (1.0,))
    assert a.counts == [64]
    first = a.levels[0][0]
    assert ((first[0] + first[2]) / 2).item() == 2 and ((first[1] + first[3]) / 2).item() == 2
    assert generate_anchors([(8, 8)], [4], (8.0, 16.0, 32.0), (1.0,)).counts == [192]


def test_anchor_bad_params():
    with pytest.raises(ConfigurationError):
        generate_anchors([(2, 2)], [4], (0.0,), (1.0,))
    with pytest.raises(ConfigurationError):
        generate_anchors([(2, 2)], [4], (8.0,), ())


@pytest.mark.parametrize("seed", range(5))
def test_anchors_match_double_loop(seed):
    rng = np.random.default_rng(seed)
    shapes = [tuple(int(v) for v in rng.integers(1, 6, 2)) for _ in range(3)]
    strides = [4, 8, 16]
    scales = tuple(float(s) for s in rng.uniform(4, 40, rng.integers(1, 4)))
    ratios = tuple(float(r) for r in rng.uniform(0.5, 2, rng.integers(1, 3)))
    got = generate_anchors(shapes, strides, scales, ratios, dtype=torch.float64)
    for lvl, ((h, w), s) in enumerate(zip(shapes, strides)):
        ref = []
        for i in range(h):
            for j in range(w):
                for sc in scales:
                    for r in ratios:
                        cx, cy = s * (j + 0.5), s * (i + 0.5)
                        bw, bh = sc * math.sqrt(r), sc / math.sqrt(r)
                        ref.append([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
        np.testing.assert_array_equal(got.levels[lvl].numpy(), np.array(ref))


# box coding ---------------------------------------------------------------------------

def test_decode_examples():
    anchors = torch.tensor([[10.0, 10.0, 30.0, 20.0], [0.0, 0.0, 8.0, 8.0]], dtype=torch.float64)
    assert torch.equal(decode_boxes(anchors, torch.zeros(2, 4, dtype=torch.float64)), anchors)
    d = torch.tensor([[0, 0, math.log(2), 0]], dtype=torch.float64)
    out = decode_boxes(anchors[:1], d)[0]
    assert (out[2] - out[0]).item() == pytest.approx(40.0)
    assert ((out[0] + out[2]) / 2).item() == pytest.approx(20.0)


def decode_oracle(a, d, clamp=4.0, size=None):
    out = []
    for (x1, y1, x2, y2), (dx, dy, dw, dh) in zip(a, d):
        w, h = x2 - x1, y2 - y1
        cx, cy = x1 + w / 2 + dx * w, y1 + h / 2 + dy * h
        nw, nh = w * math.exp(min(dw, clamp)), h * math.exp(min(dh, clamp))
        box = [cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2]
        if size:
            box = [min(max(box[0], 0), size[1]), min(max(box[1], 0), size[0]),
                   min(max(box[2], 0), size[1]), min(max(box[3], 0), size[0])]
        out.append(box)
    return np.array(out)


@pytest.mark.parametrize("seed", range(5))
def test_decode_vs_oracle_and_round_trip(seed):
    rng = np.random.default_rng(seed)
    a = random_boxes(rng, 40)
    d = rng.normal(0, 2, (40, 4))
    got = decode_boxes(torch.from_numpy(a), torch.from_numpy(d), (64, 64)).numpy()
    np.testing.assert_allclose(got, decode_oracle(a, d, size=(64, 64)), atol=1e-6)
    gt = random_boxes(rng, 40)
    t = encode_boxes(torch.from_numpy(a), torch.from_numpy(gt))
    np.testing.assert_allclose(decode_boxes(torch.from_numpy(a), t).numpy(), gt, atol=1e-5)


# NMS ---------------------------------------------------------------------------------

def nms_oracle(boxes, scores, thr):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_py(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def test_nms_examples():
    b = torch.tensor([[0.0, 0, 10, 10]])
    assert nms(b, torch.tensor([0.3]), 0.5).tolist() == [0]
    b2 = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 10]])
    assert nms(b2, torch.tensor([0.8, 0.9]), 0.5).tolist() == [1]
    assert nms(b2, torch.tensor([0.5, 0.5]), 0.5).tolist() == [0]


@pytest.mark.parametrize("seed", range(100))
def test_nms_vs_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 100))
    boxes = random_boxes(rng, n)
    scores = rng.uniform(0, 1, n)
    if seed % 4 == 0:
        scores = np.round(scores, 1)  # exercise ties
    thr = float(rng.uniform(0.1, 0.9))
    got = nms(torch.from_numpy(boxes), torch.from_numpy(scores), thr).tolist()
    assert got == nms_oracle(boxes, scores, thr)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_nms_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, 30)
    scores = rng.permutation(30) / 30.0
    perm = rng.permutation(30)
    a = nms(torch.from_numpy(boxes), torch.from_numpy(scores), 0.4)
    b = nms(torch.from_numpy(boxes[perm]), torch.from_numpy(scores[perm]), 0.4)
    assert sorted(a.tolist()) == sorted(perm[b.numpy()].tolist())


@pytest.mark.parametrize("seed", range(10))
def test_select_proposals_composed_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 80
    boxes = random_boxes(rng, n)
    obj = rng.uniform(0, 1, n)
    got = select_proposals(torch.from_numpy(boxes), torch.from_numpy(obj), 50, 10, 0.6)
    top = sorted(range(n), key=lambda i: (-obj[i], i))[:50]
    keep = nms_oracle(boxes[top], obj[top], 0.6)[:10]
    np.testing.assert_array_equal(got.boxes.numpy(), boxes[top][keep])
    assert len(got) <= 10


def test_select_proposals_few_boxes():
    boxes = torch.tensor([[0.0, 0, 5, 5], [20.0, 20, 30, 30]])
    assert len(select_proposals(boxes, torch.tensor([0.2, 0.9]), 100, 100, 0.7)) == 2


# assignment ---------------------------------------------------------------------

def test_assign_examples():
    anchors = torch.tensor([[0.0, 0, 10, 10], [20.0, 20, 30, 30], [50.0, 50, 60, 60]])
    a = assign_targets(anchors, anchors[1:2])
    assert a.labels[1] == POSITIVE and torch.all(a.targets[1] == 0)
    none = assign_targets(anchors, torch.zeros(0, 4))
    assert torch.all(none.labels == NEGATIVE)


@pytest.mark.parametrize("seed", range(10))
def test_assign_vs_iou_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    anchors = random_boxes(rng, 60)
    gts = random_boxes(rng, int(rng.integers(1, 6)))
    got = assign_targets(torch.from_numpy(anchors), torch.from_numpy(gts), 0.7, 0.3).labels.tolist()
    iou = np.array([[iou_py(a, g) for g in gts] for a in anchors])
    ref = []
    for i in range(len(anchors)):
        m = iou[i].max()
        lab = POSITIVE if m >= 0.7 else NEGATIVE if m < 0.3 else IGNORE
        if any(iou[i, g] == iou[:, g].max() and iou[:, g].max() > 0 for g in range(len(gts))):
            lab = POSITIVE
        ref.append(lab)
    assert got == ref


def test_assign_bad_thresholds():
    with pytest.raises(ConfigurationError):
        assign_targets(torch.zeros(1, 4), torch.zeros(1, 4), 0.3, 0.7)


# ROI Align -------------------------------------------------------------------

def roi_align_oracle(fm, box, stride, out, sr):
    c = fm.shape[0]
    x1, y1, x2, y2 = [v / stride for v in box]
    bw, bh = (x2 - x1) / out[1], (y2 - y1) / out[0]
    res = np.zeros((c, *out))
    for i in range(out[0]):
        for j in range(out[1]):
            acc = np.zeros(c)
            for a in range(sr):
                for b in range(sr):
                    y = y1 + (i + (a + 0.5) / sr) * bh
                    x = x1 + (j + (b + 0.5) / sr) * bw
                    acc += bilinear_sample(fm, x, y)
            res[:, i, j] = acc / sr ** 2
    return res


def test_roi_align_vs_oracle_50_boxes():
    rng = np.random.default_rng(0)
    fm = rng.normal(size=(4, 16, 16))
    boxes = random_boxes(rng, 50, size=64.0, min_wh=1.0, max_wh=40.0)
    got = roi_align(torch.from_numpy(fm), torch.from_numpy(boxes), 4.0, (7, 7), 2).numpy()
    for k, b in enumerate(boxes):
        np.testing.assert_allclose(got[k], roi_align_oracle(fm, b, 4.0, (7, 7), 2), atol=1e-6)


def test_roi_align_constant_and_identity():
    const = torch.full((2, 8, 8), 3.5, dtype=torch.float64)
    out = roi_align(const, torch.tensor([1.3, 2.0, 20.1, 9.9], dtype=torch.float64), 4.0, (5, 3), 2)
    assert torch.allclose(out, torch.full_like(out, 3.5))
    fm = torch.randn(3, 6, 5, dtype=torch.float64)
    # whole-map box in pixel-edge coordinates: bin centres land on pixel centres
    whole = roi_align(fm, torch.tensor([-0.5, -0.5, 4.5, 5.5], dtype=torch.float64), 1.0, (6, 5), 1)
    torch.testing.assert_close(whole, fm)


def test_roi_align_degenerate_box():
    fm = torch.arange(16.0, dtype=torch.float64).reshape(1, 4, 4)
    out = roi_align(fm, torch.tensor([4.0, 8.0, 4.0, 8.0], dtype=torch.float64), 4.0, (2, 2), 2)
    assert torch.all(out == fm[0, 2, 1])


def test_roi_align_gradient():
    g = torch.Generator().manual_seed(0)
    boxes = torch.tensor([[1.3, 2.2, 9.7, 11.1], [0.0, 0.0, 15.0, 6.0]], dtype=torch.float64)

    class M(torch.nn.Module):
        def forward(self, f):
            return roi_align(f, boxes, 2.0, (3, 3), 2)

    reports = gradcheck_module("roi_align", M(), [torch.rand(2, 8, 8, generator=g, dtype=torch.float64)],
                               epsilon=1e-5, floor=1e-5)
    assert all(r.passed for r in reports)


def test_mask_target_crop():
    mask = torch.zeros(1, 20, 20)
    mask[0, 5:10, 5:15] = 1
    box = torch.tensor([[5.0, 5.0, 15.0, 10.0]])  # pixel-edge box of the mask
    t = roi_mask_target(mask, box, 28)
    # corner bins straddle the mask edge in both axes and may round down
    assert t.shape == (1, 28, 28) and torch.all(t[0, 1:-1, 1:-1] == 1)
    wide = roi_mask_target(mask, torch.tensor([[0.0, 0.0, 20.0, 20.0]]), 20)[0]
    assert torch.equal(wide, mask[0])


def test_level_mapping():
    boxes = torch.tensor([[0.0, 0, 56, 56], [0.0, 0, 224, 224], [0.0, 0, 8, 8], [0.0, 0, 1000, 1000]])
    # a 56 px box sits on P4 (index 2); 8 px clamps to P2, 224 and 1000 px clamp to P5
    assert map_levels(boxes).tolist() == [2, 3, 0, 3]
    mid = torch.tensor([[0.0, 0, 28, 28], [0.0, 0, 112, 112]])
    assert map_levels(mid).tolist() == [1, 3]


def test_multilevel_matches_single_level():
    levels = [torch.randn(2, s, s, dtype=torch.float64) for s in (16, 8, 4, 2)]
    boxes = torch.tensor([[0.0, 0, 20, 20], [0.0, 0, 200, 200], [5.0, 5, 30, 50]], dtype=torch.float64)
    got = multilevel_roi_align(levels, [4, 8, 16, 32], boxes, (3, 3), 2)
    idx = map_levels(boxes)
    for k in range(3):
        lvl = int(idx[k])
        ref = roi_align(levels[lvl], boxes[k], [4, 8, 16, 32][lvl], (3, 3), 2)
        torch.testing.assert_close(got[k], ref)


# RPN head --------------------------------------------------------------------------

def test_rpn_zero_weights_and_lengths():
    head = RPNHead(4, 3)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    feats = [torch.randn(1, 4, s, s) for s in (8, 4)]
    anchors = generate_anchors([(8, 8), (4, 4)], [4, 8])
    logits, deltas = rpn_forward(head, feats, anchors)
    assert logits.shape == (1, sum(anchors.counts)) and deltas.shape == (1, sum(anchors.counts), 4)
    assert torch.all(torch.sigmoid(logits) == 0.5) and torch.all(deltas == 0)
    with pytest.raises(InvalidInputError):
        rpn_forward(head, feats[:1], anchors)


def test_rpn_order_matches_anchors():
    head = RPNHead(2, 2)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
        # objectness logit = anchor slot index, offset by cell column
        head.cls.bias.copy_(torch.tensor([0.0, 1.0]))
    logits, _ = head([torch.randn(1, 2, 2, 3)])
    assert logits[0].tolist() == [0.0, 1.0] * 6


@pytest.mark.parametrize("seed", range(5))
def test_rpn_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    head = RPNHead(3, 2).double()
    with torch.no_grad():
        for p in head.parameters():
            p.copy_(torch.rand(p.shape, generator=g, dtype=torch.float64) - 0.5)
    feats = [torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1,
             torch.rand(1, 3, 2, 2, generator=g, dtype=torch.float64) * 2 - 1]
    reports = gradcheck_module("rpn", head, feats, lambda m, a, b: m([a, b]), epsilon=1e-5, floor=1e-5, seed=seed)
    assert all(r.passed for r in reports)
