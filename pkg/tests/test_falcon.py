"""Fixation-and-expansion localizer tests.

The expansion-target oracle enumerates every combination of glimpse edge
positions relative to the pseudo box and checks the rule edge by edge.
"""

import os

import numpy as np
import pytest

from avbench import data, falcon, zoo
from avbench.errors import ShapeError
from avbench.falcon import Candidate, Glimpse, LocalizeConfig


# ---------------------------------------------------------------------------
# expansion / switch target rules

def test_expansion_targets_all_sixteen_edge_configurations():
    box = (20, 30, 60, 70)
    for inside_right in (0, 1):
        for inside_left in (0, 1):
            for inside_bottom in (0, 1):
                for inside_top in (0, 1):
                    gx1 = 50 if inside_right else 60     # < bx1 means keep growing
                    gx0 = 25 if inside_left else 20
                    gy1 = 60 if inside_bottom else 70
                    gy0 = 35 if inside_top else 30
                    got = falcon.expansion_targets(Glimpse(gx0, gy0, gx1, gy1), box)
                    assert got == (inside_right, inside_left, inside_bottom, inside_top)


def test_expansion_targets_touching_left_top_corner():
    # glimpse already flush with the box's left and top edges: grow only
    # right and down
    box = (10, 10, 50, 50)
    g = Glimpse(10, 10, 20, 20)
    assert falcon.expansion_targets(g, box) == (1, 0, 1, 0)


def test_switch_target_boundary_counts_as_inside():
    box = (10, 10, 50, 50)
    assert not falcon.switch_target((10, 10), box)
    assert not falcon.switch_target((50, 50), box)
    assert not falcon.switch_target((30, 30), box)
    assert falcon.switch_target((9.9, 30), box)
    assert falcon.switch_target((30, 50.1), box)


# ---------------------------------------------------------------------------
# glimpse mechanics

def test_initial_glimpse_clamped_inside():
    g = falcon.initial_glimpse((2, 2), 21, 64, 64)
    assert (g.x0, g.y0) == (0, 0) and (g.x1, g.y1) == (21, 21)
    g = falcon.initial_glimpse((63, 63), 21, 64, 64)
    assert (g.x1, g.y1) == (64, 64)


def test_expand_step_grows_clamps_and_stops():
    g = Glimpse(10, 10, 20, 20)
    grown, verdict = falcon.expand_step(g, (0.9, 0.1, 0.9, 0.1, 0.0), 8, 64, 64)
    assert verdict is None
    assert grown.as_tuple() == (10, 10, 28, 28)
    # all directions below threshold: nothing changes -> STOP
    same, verdict = falcon.expand_step(g, (0.1, 0.1, 0.1, 0.1, 0.0), 8, 64, 64)
    assert verdict == falcon.STOP and same is g
    # clamped at the frame on every side also means STOP
    full = Glimpse(0, 0, 64, 64)
    _, verdict = falcon.expand_step(full, (1, 1, 1, 1, 0.0), 8, 64, 64)
    assert verdict == falcon.STOP
    # switch dominates
    _, verdict = falcon.expand_step(g, (1, 1, 1, 1, 0.9), 8, 64, 64)
    assert verdict == falcon.SWITCH


def test_glimpse_growth_is_monotone():
    g = Glimpse(20, 20, 30, 30)
    for _ in range(5):
        g2, verdict = falcon.expand_step(g, (1, 1, 1, 1, 0.0), 4, 64, 64)
        if verdict is not None:
            break
        assert g2.x0 <= g.x0 and g2.y0 <= g.y0
        assert g2.x1 >= g.x1 and g2.y1 >= g.y1
        g = g2


def test_degenerate_glimpse_rejected():
    with pytest.raises(ShapeError):
        Glimpse(10, 10, 10, 20)


# ---------------------------------------------------------------------------
# IoU and NMS

def test_iou_hand_values():
    assert falcon.iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert falcon.iou((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0
    assert np.isclose(falcon.iou((0, 0, 10, 10), (5, 0, 15, 10)), 1 / 3)


def cand(box, label, conf, origin=0):
    return Candidate(box=Glimpse(*box, origin_fixation=origin), class_label=label,
                     confidence=conf)


def test_nms_keeps_both_at_iou_one_third():
    a = cand((0, 0, 10, 10), 1, 0.9, origin=0)
    b = cand((5, 0, 15, 10), 2, 0.8, origin=1)
    kept = falcon.nms([a, b], 0.45)
    assert len(kept) == 2
    assert kept[0].confidence == 0.9


def test_nms_suppresses_heavy_overlap_and_breaks_ties():
    a = cand((0, 0, 10, 10), 1, 0.9, origin=3)
    b = cand((1, 0, 11, 10), 2, 0.5, origin=1)
    kept = falcon.nms([a, b], 0.45)
    assert [c.confidence for c in kept] == [0.9]
    # equal confidence: lower origin fixation wins the ordering
    c1 = cand((0, 0, 10, 10), 1, 0.7, origin=5)
    c2 = cand((30, 30, 40, 40), 2, 0.7, origin=2)
    kept = falcon.nms([c1, c2], 0.45)
    assert kept[0].box.origin_fixation == 2


def test_grid_points_layout():
    pts = falcon.grid_points(64, 64, 2)
    assert pts == [(16.0, 16.0), (48.0, 16.0), (16.0, 48.0), (48.0, 48.0)]


# ---------------------------------------------------------------------------
# end-to-end localizer behavior on real synthetic images

@pytest.fixture(scope="module")
def trained():
    ds = data.gen_synth_dataset(num_classes=10, per_class=8, h=64, w=64, seed=51)
    loc_cfg = LocalizeConfig(init_size=11, step_px=4, steps=8, grid=5,
                             glimpse_res=(48, 48))
    loc = zoo.build_model("localizer", 10, (48, 48), seed=8)
    tc = zoo.TrainConfig(epochs=6, lr=0.05, momentum=0.9, batch_size=16, seed=0)
    loc, hist = falcon.train_localizer(loc, ds, tc, loc_cfg)
    clf = zoo.build_model("passive_classifier", 10, (64, 64), seed=9)
    pipe = falcon.FalconPipeline(localizer=loc, classifier=clf, cfg=loc_cfg)
    return ds, pipe, hist


def test_localizer_training_loss_decreases(trained):
    _, _, hist = trained
    assert hist[-1] < hist[0]


def test_localize_batch_matches_single(trained):
    ds, pipe, _ = trained
    x = ds.images[0].pixels
    pts = falcon.grid_points(64, 64, 3)
    batched = falcon.localize_batch(pipe.localizer, x, pts, pipe.cfg)
    for i, p in enumerate(pts):
        single = falcon.localize_from(pipe.localizer, x, p, pipe.cfg, origin=i)
        if batched[i] is None:
            assert single is None
        else:
            assert single.as_tuple() == batched[i].as_tuple()


def test_predict_any_never_below_top(trained):
    ds, pipe, _ = trained
    labels = ds.label_array()
    x = ds.pixel_array()[:20]
    _, ok_top = falcon.predict_labels(pipe, x, mode="top", truths=labels[:20])
    _, ok_any = falcon.predict_labels(pipe, x, mode="any", truths=labels[:20])
    assert ok_any.sum() >= ok_top.sum()
    assert np.all(ok_any[ok_top])   # top-correct implies any-correct


def test_predict_modes_validate(trained):
    ds, pipe, _ = trained
    with pytest.raises(ValueError):
        falcon.predict(pipe, ds.images[0].pixels, "best", 0)


def test_save_load_round_trip(trained, tmp_path):
    ds, pipe, _ = trained
    d = os.path.join(tmp_path, "fl")
    falcon.save_pipeline(d, pipe)
    p2 = falcon.load_pipeline(d)
    assert p2.cfg == pipe.cfg
    x = ds.pixel_array()[:6]
    la, oa = falcon.predict_labels(pipe, x, truths=ds.label_array()[:6])
    lb, ob = falcon.predict_labels(p2, x, truths=ds.label_array()[:6])
    assert np.array_equal(la, lb) and np.array_equal(oa, ob)
