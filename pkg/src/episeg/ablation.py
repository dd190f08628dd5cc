"""Ablation axes: named config grids, trained and scored row by row under each seed."""
import csv
import json
import statistics
from pathlib import Path

from .config import Config
from .data import fold_split

# axis -> (label column(s), [(row label(s), config overrides)])
AXES = {
    "modules": (("csm", "ufa"), [
        (("", ""), {"csm.enabled": False, "ufa.enabled": False}),
        (("x", ""), {"csm.enabled": True, "ufa.enabled": False}),
        (("", "x"), {"csm.enabled": False, "ufa.enabled": True}),
        (("x", "x"), {"csm.enabled": True, "ufa.enabled": True}),
    ]),
    "ufa_target": (("method",), [
        (("UFA (Q+S)",), {"ufa.enabled": True, "ufa.target": "both"}),
        (("UFA (Q)",), {"ufa.enabled": True, "ufa.target": "query_only"}),
    ]),
    "csm_k": (("method",), [
        (("CSM (k=1)",), {"csm.enabled": True, "csm.k": 1}),
        (("CSM (k=5)",), {"csm.enabled": True, "csm.k": 5}),
        (("CSM (k=all)",), {"csm.enabled": True, "csm.k": "all"}),
    ]),
    "recon_loss": (("loss",), [
        (("w/o L_recon",), {"csm.enabled": True, "csm.recon_loss": False}),
        (("w L_recon",), {"csm.enabled": True, "csm.recon_loss": True}),
    ]),
    "csm_size": (("number",), [
        ((str(n),), {"csm.enabled": True, "csm.num_vectors": n}) for n in (20, 30, 50, 100, 200)
    ]),
    "ufa_position": (("position",), [
        (("B" + "+".join(map(str, pos)),), {"ufa.enabled": True, "ufa.positions": list(pos)})
        for pos in ((0, 1), (1, 2), (2, 3), (0, 1, 2), (1, 2, 3), (0, 1, 2, 3))
    ]),
}


def axis_rows(axis):
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    return AXES[axis]


def run_ablation(config, dataset, axis, seeds=None, train_fn=None, eval_fn=None):
    """Train and score every row of ``axis`` under each seed on one shared dataset.

    Returns a dict with the label columns, one entry per row (median mIoU over
    seeds plus the per-seed values) and the dataset fingerprint.
    """
    from .evaluation import evaluate
    from .model.training import train

    train_fn = train_fn or train
    config = config if isinstance(config, Config) else Config(config)
    columns, grid = axis_rows(axis)
    seeds = list(seeds) if seeds else [config["seed"]]
    split = fold_split(dataset.num_classes, config["fold"])
    rows = []
    for labels, overrides in grid:
        scores = []
        for seed in seeds:
            cfg = config.with_updates({**overrides, "seed": seed})
            model = train_fn(cfg, dataset)
            if eval_fn is not None:
                score = eval_fn(model, dataset, cfg)
            else:
                score, _ = evaluate(model, dataset, split.test_classes, cfg["k_shot"], cfg["eval.episodes"],
                                    seed, cfg["eval.batch_size"], cfg["eval.threshold"], cfg["eval.per_episode_iou"])
            scores.append(score)
        rows.append({"labels": list(labels), "overrides": overrides, "seeds": seeds, "scores": scores,
                     "miou": statistics.median(scores)})
    return {"axis": axis, "columns": list(columns), "rows": rows, "fold": config["fold"],
            "k_shot": config["k_shot"], "dataset_fingerprint": dataset.fingerprint(), "config": config.as_dict()}


def write_ablation(result, out_dir):
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    seeds = result["rows"][0]["seeds"] if result["rows"] else []
    path = root / f"ablation_{result['axis']}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result["columns"] + ["miou"] + [f"miou_seed{s}" for s in seeds]
                   + ["fold", "k_shot", "dataset"])
        for r in result["rows"]:
            w.writerow(r["labels"] + [repr(r["miou"])] + [repr(s) for s in r["scores"]]
                       + [result["fold"], result["k_shot"], result["dataset_fingerprint"][:16]])
    (root / f"ablation_{result['axis']}.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return path
