"""mIoU over novel classes and the 4-fold cross-validation harness."""
import csv
import json
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import Config
from .data import NUM_FOLDS, fold_split, sample_episode
from .numcore.autograd import no_grad
from .numcore.rng import Rng

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("fold", "k_shot", "miou", "episodes", "seed")
ABLATION_FLAGS = ("ufa.enabled", "ufa.target", "ufa.positions", "csm.enabled", "csm.k",
                  "csm.num_vectors", "csm.recon_loss")


class IoUAccumulator:
    """Per-class running intersection/union pixel counts.

    With ``per_episode=True`` each update's IoU is stored instead and a class
    score is the mean of its episode IoUs.
    """

    def __init__(self, per_episode=False):
        self.per_episode = per_episode
        self.intersection = defaultdict(int)
        self.union = defaultdict(int)
        self.episode_ious = defaultdict(list)

    def update(self, class_id, pred, gt):
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValueError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
        inter = int(np.count_nonzero(pred & gt))
        uni = int(np.count_nonzero(pred | gt))
        self.intersection[class_id] += inter
        self.union[class_id] += uni
        if uni:
            self.episode_ious[class_id].append(inter / uni)
        return self

    def merge(self, other):
        for c in other.union:
            self.intersection[c] += other.intersection[c]
            self.union[c] += other.union[c]
            self.episode_ious[c].extend(other.episode_ious[c])
        return self

    def class_iou(self, class_id):
        if self.per_episode:
            vals = self.episode_ious.get(class_id, [])
            return float(np.mean(vals)) if vals else None
        u = self.union.get(class_id, 0)
        return self.intersection[class_id] / u if u else None

    def classes(self):
        return sorted(self.union)

    def miou(self, classes=None):
        """Unweighted mean IoU; classes with zero union are skipped with a warning."""
        scores = []
        for c in self.classes() if classes is None else classes:
            v = self.class_iou(c)
            if v is None:
                log.warning("class %s has zero union, excluded from mIoU", c)
                continue
            scores.append(v)
        return float(np.mean(scores)) if scores else 0.0


def iou(pred, gt, acc=None, class_id=0):
    """Update ``acc`` (a fresh accumulator when None) with one binary mask pair and return it."""
    acc = IoUAccumulator() if acc is None else acc
    return acc.update(class_id, pred, gt)


def miou(acc, classes=None):
    return acc.miou(classes)


def evaluate(model, dataset, classes, k, episodes=600, seed=0, batch_size=32, threshold=0.5,
             per_episode=False):
    """Score ``episodes`` test episodes drawn from ``classes``; returns (mIoU, accumulator)."""
    from .model.network import forward
    from .model.training import EVAL_STREAM, batch_arrays, derive_seed

    mcfg = model.mcfg
    feat = mcfg.encoder.feature_size(dataset.image_size)
    rng = Rng(derive_seed(seed, EVAL_STREAM))
    eps = [sample_episode(dataset, classes, k, rng, feature_size=feat) for _ in range(episodes)]
    acc = IoUAccumulator(per_episode)
    with no_grad():
        for start in range(0, len(eps), batch_size):
            chunk = eps[start:start + batch_size]
            q_img, s_img, s_mask, _ = batch_arrays(chunk)
            prob = forward(model.params, mcfg, q_img, s_img, s_mask, mode="eval").pred.prob.data
            for e, p in zip(chunk, prob):
                acc.update(e.class_id, p >= threshold, e.query.mask > 0.5)
    return acc.miou(classes), acc


def evaluate_fold(model, dataset, config, k=None):
    fold = model.config["fold"]
    k = model.config["k_shot"] if k is None else k
    split = fold_split(dataset.num_classes, fold)
    score, acc = evaluate(model, dataset, split.test_classes, k, config["eval.episodes"], config["seed"],
                          config["eval.batch_size"], config["eval.threshold"], config["eval.per_episode_iou"])
    return {
        "fold": fold,
        "k_shot": k,
        "miou": score,
        "episodes": config["eval.episodes"],
        "seed": config["seed"],
        "class_iou": {str(c): acc.class_iou(c) for c in split.test_classes},
    }


def cross_validate(config, dataset, out_dir=None, folds=range(NUM_FOLDS)):
    """Train and evaluate every fold; report per-fold mIoU and the average."""
    from .model.training import train

    config = config if isinstance(config, Config) else Config(config)
    rows = []
    for fold in folds:
        fold_cfg = config.with_updates({"fold": fold})
        ckpt = None if out_dir is None else Path(out_dir) / f"fold{fold}"
        model = train(fold_cfg, dataset, ckpt)
        rows.append(evaluate_fold(model, dataset, fold_cfg, k=config["k_shot"]))
        log.info("fold %d mIoU %.4f", fold, rows[-1]["miou"])
    report = {
        "folds": rows,
        "average": float(np.mean([r["miou"] for r in rows])),
        "config": config.as_dict(),
    }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report, out_dir):
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cfg = report.get("config", {})
    with open(root / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS + ABLATION_FLAGS)
        flags = [json.dumps(cfg.get(f)) for f in ABLATION_FLAGS]
        for r in report["folds"]:
            w.writerow([r["fold"], r["k_shot"], repr(r["miou"]), r["episodes"], r["seed"]] + flags)
        if "average" in report and len(report["folds"]) > 1:
            w.writerow(["average", report["folds"][0]["k_shot"], repr(report["average"]), "", ""] + flags)
    return root
