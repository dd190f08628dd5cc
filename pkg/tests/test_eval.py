import csv
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from episeg.config import Config
from episeg.evaluation import IoUAccumulator, cross_validate, evaluate, iou, miou, write_report


def brute_force_miou(pairs):
    """Recount from raw masks, one pixel at a time."""
    inter, union = {}, {}
    for cid, pred, gt in pairs:
        for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
            inter[cid] = inter.get(cid, 0) + int(bool(p) and bool(g))
            union[cid] = union.get(cid, 0) + int(bool(p) or bool(g))
    scores = [inter[c] / union[c] for c in sorted(union) if union[c]]
    return sum(scores) / len(scores)


class TestIoU:
    def test_identical(self):
        m = np.array([[1, 0], [1, 1]])
        assert iou(m, m).miou() == 1.0

    def test_disjoint(self):
        assert iou(np.array([[1, 0]]), np.array([[0, 1]])).miou() == 0.0

    def test_half_covered(self):
        gt = np.zeros((4, 4))
        gt[:2, :2] = 1
        pred = np.zeros((4, 4))
        pred[0, :2] = 1
        assert iou(pred, gt).miou() == 0.5

    def test_accumulates_counts_not_episodes(self):
        acc = IoUAccumulator()
        acc.update(0, np.ones(4), np.ones(4))
        acc.update(0, np.zeros(4), np.array([1, 0, 0, 0]))
        assert acc.class_iou(0) == pytest.approx(4 / 5)
        per_ep = IoUAccumulator(per_episode=True)
        per_ep.update(0, np.ones(4), np.ones(4))
        per_ep.update(0, np.zeros(4), np.array([1, 0, 0, 0]))
        assert per_ep.class_iou(0) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou(np.ones(3), np.ones(4))

    def test_counts_bounded(self):
        rng = np.random.default_rng(0)
        acc = IoUAccumulator()
        for _ in range(10):
            acc.update(int(rng.integers(3)), rng.random((5, 5)) < 0.5, rng.random((5, 5)) < 0.5)
        for c in acc.classes():
            assert 0 <= acc.intersection[c] <= acc.union[c]


class TestMIoU:
    def test_all_perfect(self):
        acc = IoUAccumulator()
        for c in range(3):
            acc.update(c, np.ones(3), np.ones(3))
        assert miou(acc) == 1.0

    def test_mean_of_classes(self):
        acc = IoUAccumulator()
        acc.update(0, np.array([1, 1]), np.array([1, 0]))
        acc.update(1, np.array([1, 0]), np.array([1, 0]))
        assert miou(acc) == 0.75

    def test_zero_union_excluded(self, caplog):
        acc = IoUAccumulator()
        acc.update(0, np.ones(2), np.ones(2))
        acc.update(1, np.zeros(2), np.zeros(2))
        with caplog.at_level(logging.WARNING):
            assert miou(acc, [0, 1]) == 1.0
        assert "zero union" in caplog.text

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        pairs = [(int(rng.integers(3)), rng.random((4, 5)) < 0.4, rng.random((4, 5)) < 0.4) for _ in range(20)]
        acc = IoUAccumulator()
        for cid, p, g in pairs:
            acc.update(cid, p, g)
        assert acc.miou() == brute_force_miou(pairs)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        pairs = [(int(rng.integers(4)), rng.random(6) < 0.5, rng.random(6) < 0.5) for _ in range(8)]
        a, b = IoUAccumulator(), IoUAccumulator()
        for cid, p, g in pairs:
            a.update(cid, p, g)
        for i in rng.permutation(len(pairs)):
            b.update(*pairs[i])
        assert a.miou() == pytest.approx(b.miou(), abs=1e-12)
        assert 0.0 <= a.miou() <= 1.0

    def test_merge(self):
        rng = np.random.default_rng(3)
        pairs = [(int(rng.integers(2)), rng.random(5) < 0.5, rng.random(5) < 0.5) for _ in range(6)]
        whole, left, right = IoUAccumulator(), IoUAccumulator(), IoUAccumulator()
        for i, (c, p, g) in enumerate(pairs):
            whole.update(c, p, g)
            (left if i < 3 else right).update(c, p, g)
        assert left.merge(right).miou() == whole.miou()


class TestHarness:
    def test_evaluate_leaves_params_untouched(self, tiny_dataset, tiny_config):
        from episeg.model import init_model

        model = init_model(tiny_config)
        before = {k: v.copy() for k, v in model.params.arrays().items()}
        score, acc = evaluate(model, tiny_dataset, [0, 1], 1, episodes=6, batch_size=4)
        assert 0.0 <= score <= 1.0
        for k, v in model.params.arrays().items():
            assert v.tobytes() == before[k].tobytes()

    def test_cross_validate_report(self, tiny_dataset, tiny_config, tmp_path):
        report = cross_validate(tiny_config, tiny_dataset, tmp_path)
        assert len(report["folds"]) == 4
        assert report["average"] == pytest.approx(np.mean([r["miou"] for r in report["folds"]]), abs=1e-9)
        again = cross_validate(tiny_config, tiny_dataset)
        assert [r["miou"] for r in again["folds"]] == [r["miou"] for r in report["folds"]]
        assert again["average"] == report["average"]
        rows = list(csv.reader(open(tmp_path / "report.csv")))
        assert rows[0][:5] == ["fold", "k_shot", "miou", "episodes", "seed"]
        assert len(rows) == 1 + 4 + 1
        assert json.loads((tmp_path / "report.json").read_text())["average"] == report["average"]

    def test_write_report_single_fold(self, tmp_path):
        report = {"folds": [{"fold": 0, "k_shot": 1, "miou": 0.5, "episodes": 10, "seed": 0}],
                  "config": Config().as_dict()}
        write_report(report, tmp_path)
        rows = list(csv.reader(open(tmp_path / "report.csv")))
        assert len(rows) == 2 and rows[1][2] == "0.5"
