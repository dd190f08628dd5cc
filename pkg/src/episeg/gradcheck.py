"""Finite-difference gradient suite, one row per component.

Every check builds a small deterministic instance, evaluates the analytic
gradient once and compares sampled entries with central differences.
Uncertainty variances are computed outside the loss so the finite
differences see the same constants the backward pass does.
"""
from dataclasses import dataclass

import numpy as np

from . import augment, memory
from .model import network
from .numcore import autograd as ag
from .numcore.params import Params, check_gradients
from .numcore.rng import Rng
from .numcore.stats import channel_stats

OP_TOL = 1e-3
END_TO_END_TOL = 1e-2


@dataclass
class CheckResult:
    component: str
    max_rel_err: float
    tolerance: float
    worst_param: str

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err <= self.tolerance


def _numcore(rng):
    p = Params({"x": rng.normal(size=(1, 6, 6, 2)), "w": rng.normal(size=(3, 3, 2, 3)) * 0.5,
                "b": rng.normal(size=3) * 0.1})
    target = rng.integers(0, 3, size=(1, 3, 3))
    onehot = np.eye(3)[target]

    def loss(q):
        h = ag.relu(ag.conv2d(q["x"], q["w"]) + q["b"])
        h = ag.avg_pool(h, 2)
        return -ag.sum_(ag.log_softmax(h, axis=-1) * onehot)

    return loss, p


def _augment(rng):
    B, K, C = 3, 2, 4
    p = Params({"f_q": rng.normal(size=(B, 5, 5, C)), "f_s": rng.normal(size=(B * K, 5, 5, C)) * 1.5 + 0.3})
    unc_q = augment.estimate_uncertainty(channel_stats(p["f_q"].data))
    unc_s = augment.estimate_uncertainty(channel_stats(p["f_s"].data))
    eps = [rng.normal(size=(n, C)) for n in (B, B, B * K, B * K)]
    lam = rng.uniform(0.1, 0.9, size=B)
    weight = rng.normal(size=(B, 5, 5, C))

    def loss(q):
        sq = augment.reparameterize(channel_stats(q["f_q"]), unc_q, None, eps_mu=eps[0], eps_sigma=eps[1])
        ss = augment.reparameterize(channel_stats(q["f_s"]), unc_s, None, eps_mu=eps[2], eps_sigma=eps[3])
        ss = augment.SampledStats(ag.mean(ag.reshape(ss.alpha, (B, K, C)), axis=1),
                                  ag.mean(ag.reshape(ss.beta, (B, K, C)), axis=1))
        mixed = augment.mix_stats(sq, ss, None, lam=lam)
        return ag.sum_(augment.apply_ufa(q["f_q"], mixed) * weight)

    return loss, p


def _memory(rng):
    p = Params({"f": rng.normal(size=(4, 4, 6)), "bank": rng.normal(size=(7, 6)) / np.sqrt(6)})
    mask = np.zeros((4, 4))
    mask[1:3, :3] = 1

    def loss(q):
        return memory.recon_loss(q["f"], memory.reencode(q["f"], q["bank"]), mask)

    return loss, p


def _seg_loss(rng):
    C, hid = 4, 6
    p = Params({
        "f_re": rng.normal(size=(2, 4, 4, C)), "f_q": rng.normal(size=(2, 4, 4, C)), "v": rng.normal(size=(2, C)),
        "decoder.fc1.weight": rng.normal(size=(3 * C, hid)) * 0.4, "decoder.fc1.bias": rng.normal(size=hid) * 0.1,
        "decoder.fc2.weight": rng.normal(size=(hid, 2)) * 0.4, "decoder.fc2.bias": rng.normal(size=2) * 0.1,
    })
    gt = (rng.random((2, 8, 8)) < 0.4).astype(float)

    def loss(q):
        return network.seg_loss(network.decode(q["f_re"], q["f_q"], q["v"], q, (8, 8)), gt)

    return loss, p


def end_to_end_instance(seed=0):
    """8x8 feature maps with C=8: UFA after block 0, memory re-encoding and reconstruction on."""
    enc = network.EncoderConfig(widths=(8, 8), downsample=(1, 1))
    mcfg = network.ModelConfig(encoder=enc, decoder_hidden=8, ufa_positions=(0,), csm_num_vectors=6,
                               csm_loss_mean=True, csm_detach_features=False)
    rng = np.random.default_rng(seed)
    params = network.init_params(mcfg, Rng(seed))
    q_img = rng.random((1, 8, 8, 1))
    s_img = rng.random((1, 1, 8, 8, 1))
    q_mask = np.zeros((1, 8, 8))
    q_mask[0, 2:6, 1:5] = 1
    s_mask = np.zeros((1, 1, 8, 8))
    s_mask[0, 0, 3:7, 2:7] = 1
    return mcfg, params, (q_img, s_img, s_mask, q_mask)


def _model(rng, seed=0):
    mcfg, params, (q_img, s_img, s_mask, q_mask) = end_to_end_instance(seed)

    def loss(q):
        # a fresh generator per call: the finite differences see identical noise
        return network.forward(q, mcfg, q_img, s_img, s_mask, q_mask, mode="train", rng=Rng(seed + 1)).loss

    return loss, params


COMPONENTS = {
    "numcore": (_numcore, OP_TOL),
    "augment": (_augment, OP_TOL),
    "memory": (_memory, OP_TOL),
    "seg_loss": (_seg_loss, OP_TOL),
    "model": (_model, END_TO_END_TOL),
}


def run_component(name, seed=0, points=20):
    build, tol = COMPONENTS[name]
    loss_fn, params = build(np.random.default_rng(seed))
    report = check_gradients(loss_fn, params, points=points, seed=seed)
    worst = max(report, key=report.get)
    return CheckResult(name, float(report[worst]), tol, worst)


def run_all(seed=0, points=20, components=None):
    return [run_component(n, seed, points) for n in (components or COMPONENTS)]


def format_report(results):
    lines = [f"{'component':<10} {'max_rel_err':>12} {'tolerance':>10}  status  worst"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.component:<10} {r.max_rel_err:>12.3e} {r.tolerance:>10.0e}  {status:<6}  {r.worst_param}")
    return "\n".join(lines)
