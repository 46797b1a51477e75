"""Training phases: residual extractor, evaluator streams, the anonymizer GAN
and target classifiers.

Data order depends only on ``(cfg.seed, epoch)``, so a run stopped after
``n1`` epochs and resumed from its checkpoint (optimizer state included)
reproduces an uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
import torch.nn.functional as F

from . import checkpoint
from .config import PhaseConfig
from .dataset import PatchSet, iterate_batches
from .errors import ConfigError, TrainingDiverged
from .losses import LossWeights, adv_loss_g, clf_loss_from_logits, dis_loss, gen_objective, pix_loss
from .nets import (
    EvaluatorBundle,
    build_discriminator,
    build_evaluator,
    build_generator,
    build_target_classifier,
    constraint_errors,
    project_constrained,
)

log = logging.getLogger(__name__)

CAMA_LOG_FIELDS = ("step", "loss_gen", "loss_adv", "loss_pix", "loss_clf", "loss_dis")
CONSTRAINT_TOL = 1e-9
# e0 regresses residuals a few grey levels in size; in [0, 1] units the squared
# error would be dwarfed by weight decay, so its loss is taken in 8-bit levels
E0_LOSS_SCALE = 255.0**2


@dataclass
class TrainResult:
    models: dict
    history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    optimizers: dict = field(default_factory=dict)
    epochs_done: int = 0


class CsvLog:
    def __init__(self, path, fields, append: bool = False):
        self.fields = list(fields)
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            new = not (append and path.exists())
            self._fh = open(path, "a" if append else "w", newline="")
            self._w = csv.DictWriter(self._fh, self.fields)
            if new:
                self._w.writeheader()

    def write(self, row: dict):
        if self._fh is not None:
            self._w.writerow({k: row[k] for k in self.fields})

    def close(self):
        if self._fh is not None:
            self._fh.close()


def make_optimizer(params, cfg: PhaseConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _check_finite(value: float, what: str, dump: Optional[Callable] = None):
    if not math.isfinite(value):
        if dump is not None:
            dump()
        raise TrainingDiverged(f"{what} became {value}")


def _tensor(a):
    return torch.from_numpy(np.ascontiguousarray(a))


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def predict_logits(model: Callable, patches: PatchSet, batch_size: int = 256) -> np.ndarray:
    outs = []
    for start in range(0, len(patches), batch_size):
        x = _tensor(patches.pixels[start : start + batch_size].transpose(0, 3, 1, 2))
        outs.append(model(x).numpy())
    return np.concatenate(outs) if outs else np.zeros((0, patches.n_classes))


def accuracy(model: Callable, patches: PatchSet) -> float:
    was = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    pred = predict_logits(model, patches).argmax(axis=1)
    if hasattr(model, "train"):
        model.train(was)
    return float(np.mean(pred == patches.class_index(patches.labels))) if len(patches) else float("nan")


@torch.no_grad()
def recalibrate_bn(model: torch.nn.Module, patches: PatchSet, transform: Optional[Callable] = None, batch_size: int = 256):
    """Replace batch-norm running statistics with exact averages over ``patches``
    under the final weights.

    Camera traces are faint next to image content, so the lagging momentum
    estimates can swing held-out accuracy between epochs.
    """
    bns = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns or not len(patches):
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    model.train()
    # patch sets are usually class-sorted; unshuffled batches would average
    # within-class variances and underestimate the population variance
    order = np.random.default_rng(0).permutation(len(patches))
    for start in range(0, len(patches), batch_size):
        x = _tensor(patches.pixels[order[start : start + batch_size]].transpose(0, 3, 1, 2))
        model(transform(x) if transform is not None else x)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()


# --------------------------------------------------------------------------- E0


def train_e0(
    patches: PatchSet,
    cfg: PhaseConfig,
    bundle: Optional[EvaluatorBundle] = None,
    log_path=None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> TrainResult:
    """Regress ``e0(x)`` onto wavelet-Wiener residuals (``patches.aux``) with an L2 loss.

    Logged losses are in squared 8-bit levels (see ``E0_LOSS_SCALE``).
    """
    if patches.aux is None:
        raise ConfigError("train_e0 needs residual targets in patches.aux")
    if bundle is None:
        bundle = build_evaluator(patches.classes, cfg.width, seed=cfg.seed)
    e0 = bundle.e0
    if start_epoch == 0 and cfg.epochs > 0:
        fit_linear_skip(e0, patches)
    opt = make_optimizer(e0.parameters(), cfg)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    csv_log = CsvLog(log_path, ("step", "epoch", "loss"), append=start_epoch > 0)
    history = []
    step = start_epoch * math.ceil(len(patches) / cfg.batch_size)
    e0.train()
    for epoch in range(start_epoch, cfg.epochs):
        for b in iterate_batches(patches, cfg.batch_size, cfg.seed, epoch):
            loss = E0_LOSS_SCALE * F.mse_loss(e0(_tensor(b.x)), _tensor(b.aux))
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = loss.item()
            _check_finite(val, "e0 loss")
            row = {"step": step, "epoch": epoch, "loss": val}
            history.append(row)
            csv_log.write(row)
            step += 1
        log.info("e0 epoch %d loss %.3e", epoch, history[-1]["loss"] if history else float("nan"))
    csv_log.close()
    e0.eval()
    return TrainResult({"evaluator": bundle}, history, {}, {"e0": opt}, cfg.epochs)


@torch.no_grad()
def fit_linear_skip(e0, patches: PatchSet, chunk: int = 256) -> None:
    """Least-squares warm start for the extractor's full-resolution filter.

    Gradient descent on this path is badly conditioned (smooth content
    dominates the curvature), while the normal equations have only
    ``k*k + 1`` unknowns per channel.
    """
    conv = e0.skip
    k = conv.kernel_size[0]
    r = k // 2
    for c in range(3):
        ata = np.zeros((k * k + 1, k * k + 1))
        aty = np.zeros(k * k + 1)
        for start in range(0, len(patches), chunk):
            x = patches.pixels[start : start + chunk, :, :, c].astype(np.float64)
            y = patches.aux[start : start + chunk, :, :, c].astype(np.float64).ravel()
            xp = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect")
            a = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(-1, k * k)
            a = np.concatenate([a, np.ones((len(a), 1))], axis=1)
            ata += a.T @ a
            aty += a.T @ y
        sol = np.linalg.solve(ata + 1e-9 * np.eye(len(ata)), aty)
        conv.weight[c, 0] = torch.from_numpy(sol[:-1].reshape(k, k)).to(conv.weight.dtype)
        conv.bias[c] = float(sol[-1])


@torch.no_grad()
def residual_mse(bundle: EvaluatorBundle, patches: PatchSet) -> float:
    bundle.e0.eval()
    errs = []
    for start in range(0, len(patches), 256):
        x = _tensor(patches.pixels[start : start + 256].transpose(0, 3, 1, 2))
        t = _tensor(patches.aux[start : start + 256].transpose(0, 3, 1, 2))
        errs.append(float(F.mse_loss(bundle.e0(x), t, reduction="sum")))
    return sum(errs) / patches.aux.size


# --------------------------------------------------------------------------- streams


def train_streams(
    patches: PatchSet,
    bundle: EvaluatorBundle,
    cfg: PhaseConfig,
    heldout: Optional[PatchSet] = None,
    log_path=None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> TrainResult:
    """Train ``e_high`` on ``e0`` residuals and ``e_low`` on their complements, with ``e0`` frozen."""
    if patches.classes != bundle.classes:
        raise ConfigError(f"evaluator classes {bundle.classes} != data classes {patches.classes}")
    freeze(bundle.e0)
    opt_h = make_optimizer(bundle.e_high.parameters(), cfg)
    opt_l = make_optimizer(bundle.e_low.parameters(), cfg)
    if optimizer_state:
        opt_h.load_state_dict(optimizer_state["e_high"])
        opt_l.load_state_dict(optimizer_state["e_low"])
    csv_log = CsvLog(log_path, ("step", "epoch", "loss_high", "loss_low"), append=start_epoch > 0)
    history = []
    step = start_epoch * math.ceil(len(patches) / cfg.batch_size)
    bundle.e_high.train()
    bundle.e_low.train()
    for epoch in range(start_epoch, cfg.epochs):
        for b in iterate_batches(patches, cfg.batch_size, cfg.seed, epoch, drop_last=len(patches) > cfg.batch_size):
            x, y = _tensor(b.x), _tensor(b.y)
            with torch.no_grad():
                high, low = bundle.split(x)
            loss_h = F.cross_entropy(bundle.e_high(high), y)
            loss_l = F.cross_entropy(bundle.e_low(low), y)
            opt_h.zero_grad()
            opt_l.zero_grad()
            (loss_h + loss_l).backward()
            opt_h.step()
            opt_l.step()
            row = {"step": step, "epoch": epoch, "loss_high": loss_h.item(), "loss_low": loss_l.item()}
            _check_finite(row["loss_high"] + row["loss_low"], "stream loss")
            history.append(row)
            csv_log.write(row)
            step += 1
        log.info("streams epoch %d loss %.3f / %.3f", epoch, history[-1]["loss_high"], history[-1]["loss_low"])
    csv_log.close()
    recalibrate_bn(bundle.e_high, patches, lambda x: bundle.split(x)[0])
    recalibrate_bn(bundle.e_low, patches, lambda x: bundle.split(x)[1])
    bundle.eval()
    metrics = {}
    if heldout is not None and len(heldout):
        metrics = stream_accuracy(bundle, heldout)
    return TrainResult({"evaluator": bundle}, history, metrics, {"e_high": opt_h, "e_low": opt_l}, cfg.epochs)


def stream_accuracy(bundle: EvaluatorBundle, patches: PatchSet) -> dict:
    bundle.eval()
    acc_h = accuracy(lambda x: bundle.e_high(bundle.split(x)[0]), patches)
    acc_l = accuracy(lambda x: bundle.e_low(bundle.split(x)[1]), patches)
    acc_j = accuracy(lambda x: bundle.log_joint(x), patches)
    return {"acc_high": acc_h, "acc_low": acc_l, "acc_joint": acc_j}


# --------------------------------------------------------------------------- target classifiers


def train_target(
    patches: PatchSet,
    arch: str,
    preproc,
    cfg: PhaseConfig,
    heldout: Optional[PatchSet] = None,
    log_path=None,
    model=None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> TrainResult:
    if model is None:
        model = build_target_classifier(arch, preproc, patches.classes, cfg.width, seed=cfg.seed)
    if model.classes != patches.classes:
        raise ConfigError(f"classifier classes {model.classes} != data classes {patches.classes}")
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    csv_log = CsvLog(log_path, ("step", "epoch", "loss"), append=start_epoch > 0)
    history = []
    step = start_epoch * math.ceil(len(patches) / cfg.batch_size)
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        for b in iterate_batches(patches, cfg.batch_size, cfg.seed, epoch, drop_last=len(patches) > cfg.batch_size):
            loss = F.cross_entropy(model(_tensor(b.x)), _tensor(b.y))
            opt.zero_grad()
            loss.backward()
            opt.step()
            project_constrained(model)
            val = loss.item()
            _check_finite(val, "target loss")
            row = {"step": step, "epoch": epoch, "loss": val}
            history.append(row)
            csv_log.write(row)
            step += 1
        log.info("target epoch %d loss %.3f", epoch, history[-1]["loss"] if history else float("nan"))
    csv_log.close()
    recalibrate_bn(model, patches)
    model.eval()
    metrics = {"acc": accuracy(model, heldout)} if heldout is not None and len(heldout) else {}
    return TrainResult({"target": model}, history, metrics, {"target": opt}, cfg.epochs)


# --------------------------------------------------------------------------- anonymizer


def _wrong_labels(y: torch.Tensor, n_classes: int, gen: torch.Generator) -> torch.Tensor:
    shift = torch.randint(1, n_classes, y.shape, generator=gen)
    return (y + shift) % n_classes


def train_cama(
    patches: PatchSet,
    evaluator: EvaluatorBundle,
    cfg: PhaseConfig,
    weights: LossWeights = LossWeights(),
    log_path=None,
    models: Optional[dict] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
    d_width: Optional[int] = None,
    on_step: Optional[Callable] = None,
    dump_path=None,
) -> TrainResult:
    """Alternate one discriminator and one generator update per batch.

    The discriminator sees real/matched, fake and real/mismatched pairs; its
    constrained layer is projected after every update. The evaluator stays
    frozen throughout.
    """
    n = patches.n_classes
    if evaluator.classes != patches.classes:
        raise ConfigError(f"evaluator classes {evaluator.classes} != data classes {patches.classes}")
    if n < 2:
        raise ConfigError("anonymizer training needs at least two classes")
    freeze(evaluator)
    if models is None:
        models = {
            "generator": build_generator(n, cfg.width, seed=cfg.seed),
            "discriminator": build_discriminator(n, d_width or cfg.width, seed=cfg.seed + 1),
        }
    G, D = models["generator"], models["discriminator"]
    opt_g = make_optimizer(G.parameters(), cfg)
    opt_d = make_optimizer(D.parameters(), cfg)
    if optimizer_state:
        opt_g.load_state_dict(optimizer_state["generator"])
        opt_d.load_state_dict(optimizer_state["discriminator"])
    csv_log = CsvLog(log_path, CAMA_LOG_FIELDS, append=start_epoch > 0)

    def dump():
        if dump_path is not None:
            checkpoint.save(dump_path, {"generator": G, "discriminator": D}, {"phase": "cama", "diverged": True})

    history = []
    step = start_epoch * math.ceil(len(patches) / cfg.batch_size)
    G.train()
    D.train()
    for epoch in range(start_epoch, cfg.epochs):
        label_gen = torch.Generator().manual_seed(cfg.seed * 7919 + epoch)
        for b in iterate_batches(patches, cfg.batch_size, cfg.seed, epoch):
            x, y, yt = _tensor(b.x), _tensor(b.y), _tensor(b.target)
            y_wrong = _wrong_labels(y, n, label_gen)

            # discriminator step
            with torch.no_grad():
                fake = G(x, yt)
            loss_d = dis_loss(D(x, y), D(fake, yt), D(x, y_wrong))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            _check_finite(loss_d.item(), "discriminator loss", dump)
            project_constrained(D)
            centre_err, sum_err = constraint_errors(D)
            if centre_err != 0.0 or sum_err > CONSTRAINT_TOL:
                raise AssertionError(f"constraint violated after step {step}: {centre_err}, {sum_err}")

            # generator step
            fake = G(x, yt)
            adv = adv_loss_g(D(fake, yt))
            pix = pix_loss(x, fake)
            lh, ll = evaluator(fake)
            clf = clf_loss_from_logits(lh, ll, yt)
            _check_finite((adv + pix + clf).item(), "generator loss", dump)
            loss_g = gen_objective(adv, pix, clf, weights)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            row = {
                "step": step,
                "loss_gen": loss_g.item(),
                "loss_adv": adv.item(),
                "loss_pix": pix.item(),
                "loss_clf": clf.item(),
                "loss_dis": loss_d.item(),
            }
            _check_finite(row["loss_gen"] + row["loss_dis"], "GAN loss", dump)
            history.append(row)
            csv_log.write(row)
            if on_step is not None:
                on_step(step, G, D)
            step += 1
        last = history[-1]
        log.info(
            "cama epoch %d gen %.3f (adv %.3f pix %.4f clf %.3f) dis %.3f",
            epoch, last["loss_gen"], last["loss_adv"], last["loss_pix"], last["loss_clf"], last["loss_dis"],
        )
    csv_log.close()
    G.eval()
    D.eval()
    return TrainResult(
        {"generator": G, "discriminator": D}, history, {}, {"generator": opt_g, "discriminator": opt_d}, cfg.epochs
    )


def save_result(path, result: TrainResult, cfg: PhaseConfig, extra: Optional[dict] = None):
    header = {"phase": cfg.phase, "config": cfg.to_dict(), "epoch": result.epochs_done, "metrics": result.metrics}
    header.update(extra or {})
    return checkpoint.save(path, result.models, header, result.optimizers)
