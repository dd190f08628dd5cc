"""Episodic training loop, inference and checkpoints."""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import Config
from ..data import fold_split, sample_episode
from ..numcore.autograd import no_grad
from ..numcore.params import Params
from ..numcore.rng import Rng
from ..numcore.tensorio import load_tensor, save_tensor
from .network import ModelConfig, forward, init_params

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class Model:
    """Trained (or freshly initialised) weights together with the config that built them."""

    params: Params
    config: Config
    history: list = field(default_factory=list)
    epoch: int = 0
    bank_changed: bool = False

    @property
    def mcfg(self):
        return ModelConfig.from_config(self.config)


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


# stream tags keep model init, training episodes, probes and evaluation independent
INIT_STREAM, TRAIN_STREAM, PROBE_STREAM, EVAL_STREAM = 1, 2, 3, 4


def init_model(config):
    rng = Rng(derive_seed(config["seed"], INIT_STREAM))
    return Model(init_params(ModelConfig.from_config(config), rng), config)


def batch_arrays(episodes):
    """Stack a list of episodes into query/support image and mask arrays."""
    q_img = np.stack([e.query.image for e in episodes]).astype(np.float64)
    q_mask = np.stack([e.query.mask for e in episodes]).astype(np.float64)
    s_img = np.stack([[s.image for s in e.support] for e in episodes]).astype(np.float64)
    s_mask = np.stack([[s.mask for s in e.support] for e in episodes]).astype(np.float64)
    return q_img, s_img, s_mask, q_mask


class SGD:
    """Plain SGD with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, params, lr, momentum=0.0, clip=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = {n: np.zeros_like(params[n].data) for n in params if params.trainable(n)}

    def step(self):
        grads = {n: self.params.grad(n) for n in self.velocity}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if self.clip and norm > self.clip:
            scale = self.clip / norm
        for n, g in grads.items():
            v = self.velocity[n]
            v *= self.momentum
            v += scale * g
            self.params[n].data -= self.lr * v
        return norm


def _episode_batch(dataset, classes, k, batch_size, rng, feature_size):
    return [sample_episode(dataset, classes, k, rng, feature_size=feature_size) for _ in range(batch_size)]


def probe_episode(dataset, classes, k, seed, feature_size):
    """Fixed episode used to track the reconstruction loss across epochs."""
    return sample_episode(dataset, classes, k, Rng(derive_seed(seed, PROBE_STREAM)), feature_size=feature_size)


def probe_recon(model, episode):
    """Reconstruction loss on one episode in eval mode (no augmentation, no rng)."""
    mcfg = model.mcfg
    if not mcfg.csm_enabled:
        return 0.0
    q_img, s_img, s_mask, q_mask = batch_arrays([episode])
    with no_grad():
        out = forward(model.params, mcfg, q_img, s_img, s_mask, q_mask, mode="eval", with_recon=True)
    return float(out.recon.data) if out.recon is not None else 0.0


def quantize_f32(params):
    """Round every weight to float32 so in-memory and checkpointed models agree bitwise."""
    for n in params:
        params[n].data = params[n].data.astype(np.float32).astype(np.float64)


def train(config, dataset, out_dir=None, on_epoch=None):
    """Episodic SGD on the fold's base classes.  Returns the trained ``Model``.

    ``on_epoch(record)`` is called with each epoch's metrics dict.  With
    ``out_dir`` set, a checkpoint (weights + manifest.json) is written there.
    """
    from ..evaluation import IoUAccumulator

    config = config if isinstance(config, Config) else Config(config)
    model = init_model(config)
    mcfg = model.mcfg
    params = model.params
    split = fold_split(dataset.num_classes, config["fold"])
    k = config["k_shot"]
    if config["eval.kshot_retrain"] is False and k != 1:
        k = 1  # train once at 1-shot, K only applies at evaluation
    feat = mcfg.encoder.feature_size(dataset.image_size)
    opt = SGD(params, config["train.lr"], config["train.momentum"], config["train.grad_clip"] or None)
    probe = probe_episode(dataset, split.train_classes, k, config["seed"], feat)
    bs = config["train.batch_size"]
    steps = max(1, config["train.episodes_per_epoch"] // bs)
    base = derive_seed(config["seed"], TRAIN_STREAM)

    history = [{"epoch": 0, "probe_recon": probe_recon(model, probe)}]
    bank0 = params["memory.bank"].data.copy()
    for epoch in range(1, config["train.epochs"] + 1):
        acc = IoUAccumulator()
        seg_sum = recon_sum = norm_sum = 0.0
        for step in range(steps):
            idx = (epoch - 1) * steps + step
            rng = Rng(base ^ idx)
            episodes = _episode_batch(dataset, split.train_classes, k, bs, rng, feat)
            q_img, s_img, s_mask, q_mask = batch_arrays(episodes)
            params.zero_grad()
            out = forward(params, mcfg, q_img, s_img, s_mask, q_mask, mode="train", rng=rng)
            loss = float(out.loss.data)
            if not math.isfinite(loss):
                dump = {"epoch": epoch, "step": step, "rng_seed": base ^ idx,
                        "classes": [e.class_id for e in episodes],
                        "samples": [[e.query.index] + [s.index for s in e.support] for e in episodes]}
                raise TrainingDiverged(f"non-finite loss {loss}; offending batch: {json.dumps(dump)}")
            out.loss.backward()
            norm_sum += opt.step()
            seg_sum += float(out.seg.data)
            recon_sum += float(out.recon.data) if out.recon is not None else 0.0
            binary = out.pred.prob.data >= 0.5
            for e, pm in zip(episodes, binary):
                acc.update(e.class_id, pm, e.query.mask > 0.5)
        record = {
            "epoch": epoch,
            "seg_loss": seg_sum / steps,
            "recon_loss": recon_sum / steps,
            "grad_norm": norm_sum / steps,
            "train_miou": acc.miou(),
            "probe_recon": probe_recon(model, probe),
        }
        history.append(record)
        log.info("epoch %d seg %.4f recon %.4f miou %.3f", epoch, record["seg_loss"],
                 record["recon_loss"], record["train_miou"])
        if on_epoch:
            on_epoch(record)

    quantize_f32(params)
    model.history = history
    model.epoch = config["train.epochs"]
    model.bank_changed = bool(np.any(params["memory.bank"].data != bank0.astype(np.float32).astype(np.float64)))
    if out_dir is not None:
        save_checkpoint(model, out_dir, dataset_fingerprint=dataset.fingerprint())
    return model


def infer(model, episode):
    """Deterministic prediction for one episode: no augmentation, memory re-encoding on."""
    episodes = episode if isinstance(episode, list) else [episode]
    q_img, s_img, s_mask, _ = batch_arrays(episodes)
    with no_grad():
        out = forward(model.params, model.mcfg, q_img, s_img, s_mask, mode="eval")
    return out.pred


# -------------------------------------------------------------- checkpoints


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model, out_dir, dataset_fingerprint=None):
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in model.params:
        fname = f"{name}.t"
        save_tensor(root / fname, model.params[name].data)
        files[name] = {"file": fname, "sha256": _file_hash(root / fname)}
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.as_dict(),
        "config_hash": model.config.hash(),
        "seed": model.config["seed"],
        "epoch": model.epoch,
        "history": model.history,
        "tensors": files,
        "dataset_fingerprint": dataset_fingerprint,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(path, expect_config=None):
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint at {root} (manifest.json missing)")
    manifest = json.loads(mpath.read_text())
    config = Config(manifest["config"])
    if config.hash() != manifest["config_hash"]:
        raise CheckpointError("checkpoint manifest config hash mismatch")
    if expect_config is not None:
        mine = ModelConfig.from_config(expect_config)
        theirs = ModelConfig.from_config(config)
        if mine.encoder != theirs.encoder or mine.csm_num_vectors != theirs.csm_num_vectors \
                or mine.decoder_hidden != theirs.decoder_hidden:
            raise CheckpointError("checkpoint architecture does not match the requested config")
    reference = init_params(ModelConfig.from_config(config), Rng(0))
    params = Params()
    for name in reference:
        entry = manifest["tensors"].get(name)
        if entry is None:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        data = load_tensor(root / entry["file"]).astype(np.float64)
        if data.shape != reference[name].shape:
            raise CheckpointError(f"tensor {name!r} has shape {data.shape}, expected {reference[name].shape}")
        params.add(name, data)
    return Model(params, config, manifest.get("history", []), manifest.get("epoch", 0))
