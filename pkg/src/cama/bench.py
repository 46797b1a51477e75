"""Evaluation protocol (targeted/untargeted success and PSNR) and the
gradient-based attack baselines FGSM, PGD and DDN.

Attack budgets in :class:`AttackConfig` are in 8-bit units; the attack
functions themselves take tensors in [0, 1] and budgets on that scale.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LabelError
from .imaging import from_uint8, psnr, to_uint8
from .losses import clf_loss_from_logits
from .nets import EvaluatorBundle, Generator, forward_generator

ATTACKS = ("fgsm", "pgd", "ddn")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 4.53
    alpha: float = 1.0
    steps: int = 40
    ddn_gamma: float = 0.05

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ConfigError(f"unknown attack {self.kind!r}")
        if self.kind in ("fgsm", "pgd") and self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.kind in ("pgd", "ddn") and self.steps < 1:
            raise ConfigError("iterative attacks need steps >= 1")
        if self.kind == "ddn" and not 0 < self.ddn_gamma < 1:
            raise ConfigError("ddn_gamma must lie in (0, 1)")

    @classmethod
    def defaults(cls, kind: str) -> "AttackConfig":
        if kind == "ddn":
            return cls("ddn", epsilon=4.53, alpha=1.0, steps=100, ddn_gamma=0.05)
        if kind == "fgsm":
            return cls("fgsm", epsilon=4.53, alpha=4.53, steps=1)
        return cls(kind)


# --------------------------------------------------------------------------- proxies


def _check_proxy(proxy):
    if not isinstance(proxy, nn.Module) or not any(True for _ in proxy.parameters()):
        raise TypeError(f"proxy must be a differentiable torch module, got {type(proxy).__name__}")


def proxy_loss(proxy, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Summed per-sample ``-log p(y'|x)``; for the dual-stream evaluator this is
    the classification objective of the generator."""
    if isinstance(proxy, EvaluatorBundle):
        lh, ll = proxy(x)
        return clf_loss_from_logits(lh, ll, target) * x.shape[0]
    return F.cross_entropy(proxy(x), target, reduction="sum")


@torch.no_grad()
def proxy_predict(proxy, x: torch.Tensor) -> torch.Tensor:
    scores = proxy.log_joint(x) if isinstance(proxy, EvaluatorBundle) else proxy(x)
    return torch.from_numpy(np.argmax(scores.numpy(), axis=1))


def _grad(proxy, x, target):
    x = x.detach().requires_grad_(True)
    loss = proxy_loss(proxy, x, target)
    (g,) = torch.autograd.grad(loss, x)
    return g


def _prep(proxy, x, target):
    _check_proxy(proxy)
    proxy.eval()
    x = torch.as_tensor(x)
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    return x, target


# --------------------------------------------------------------------------- attacks


def attack_fgsm(proxy, x: torch.Tensor, target, eps: float) -> torch.Tensor:
    """One signed-gradient step of size ``eps`` toward class index ``target``."""
    if eps < 0:
        raise ConfigError("eps must be non-negative")
    x, target = _prep(proxy, x, target)
    if eps == 0:
        return x.clone()
    return (x - eps * _grad(proxy, x, target).sign()).clamp(0.0, 1.0).detach()


def attack_pgd(proxy, x: torch.Tensor, target, cfg: AttackConfig) -> torch.Tensor:
    """Iterated signed-gradient steps, each followed by projection onto the
    L-infinity ball of radius ``epsilon`` and the [0, 1] box."""
    x, target = _prep(proxy, x, target)
    eps, alpha = cfg.epsilon / 255.0, cfg.alpha / 255.0
    lo, hi = (x - eps).clamp(0.0, 1.0), (x + eps).clamp(0.0, 1.0)
    adv = x.clone()
    for _ in range(cfg.steps):
        adv = adv - alpha * _grad(proxy, adv, target).sign()
        adv = torch.max(torch.min(adv, hi), lo).detach()
    return adv


def ddn_radius(dist, is_adv, gamma: float):
    """Next L2 radius: shrink by ``1 - gamma`` when adversarial, grow by ``1 + gamma`` otherwise."""
    if isinstance(dist, torch.Tensor):
        return torch.where(torch.as_tensor(is_adv), dist * (1 - gamma), dist * (1 + gamma))
    return dist * (1 - gamma) if is_adv else dist * (1 + gamma)


def _norms(t):
    return t.flatten(1).norm(dim=1).clamp_min(1e-12).view(-1, *([1] * (t.dim() - 1)))


def attack_ddn(proxy, x: torch.Tensor, target, cfg: AttackConfig, trace: Optional[list] = None) -> torch.Tensor:
    """Decoupled direction and norm: a normalized gradient step of L2 length
    ``alpha`` (8-bit RMS units), then projection onto an L2 sphere around ``x``
    whose radius follows :func:`ddn_radius` of the current distortion.

    Returns the smallest-norm iterate the proxy classifies as ``target``
    (the last iterate where none succeed), quantized to 8 bits.
    """
    x, target = _prep(proxy, x, target)
    n = x.shape[0]
    step = cfg.alpha / 255.0 * math.sqrt(x[0].numel())
    adv = x.clone()
    best = x.clone()
    best_norm = torch.full((n,), math.inf, dtype=x.dtype)
    for _ in range(cfg.steps):
        is_adv = proxy_predict(proxy, adv) == target
        dist = (adv - x).flatten(1).norm(dim=1)
        better = is_adv & (dist < best_norm)
        best[better] = adv[better]
        best_norm[better] = dist[better]
        radius = ddn_radius(dist, is_adv, cfg.ddn_gamma)
        if trace is not None:
            trace.append({"dist": dist.clone(), "is_adv": is_adv.clone(), "radius": radius.clone()})
        g = _grad(proxy, adv, target)
        delta = adv - x - step * g / _norms(g)
        # the first step starts at x itself and has no distortion to adapt to
        constrained = dist > 0
        scale = torch.where(constrained, radius, delta.flatten(1).norm(dim=1))
        delta = delta / _norms(delta) * scale.view(-1, *([1] * (x.dim() - 1)))
        adv = (x + delta).clamp(0.0, 1.0).detach()
    is_adv = proxy_predict(proxy, adv) == target
    dist = (adv - x).flatten(1).norm(dim=1)
    better = is_adv & (dist < best_norm)
    best[better] = adv[better]
    failed = torch.isinf(best_norm) & ~better
    best[failed] = adv[failed]
    return torch.round(best * 255.0) / 255.0


def run_attack(proxy, x: torch.Tensor, target, cfg: AttackConfig) -> torch.Tensor:
    if cfg.kind == "fgsm":
        return attack_fgsm(proxy, x, target, cfg.epsilon / 255.0)
    if cfg.kind == "pgd":
        return attack_pgd(proxy, x, target, cfg)
    return attack_ddn(proxy, x, target, cfg)


# --------------------------------------------------------------------------- anonymizer adapters


def generator_anonymizer(gen: Generator, known_classes: Sequence[int]) -> Callable:
    """``(pixels, target_label) -> pixels`` backed by a trained generator."""
    index = {c: i for i, c in enumerate(sorted(known_classes))}
    if len(index) != gen.n_classes:
        raise LabelError(f"generator knows {gen.n_classes} classes, got {len(index)}")

    def fn(pixels: np.ndarray, target: int) -> np.ndarray:
        return forward_generator(gen, pixels, index[target])

    return fn


def attack_anonymizer(proxy, cfg: AttackConfig, known_classes: Sequence[int]) -> Callable:
    index = {c: i for i, c in enumerate(sorted(known_classes))}

    def fn(pixels: np.ndarray, target: int) -> np.ndarray:
        x = torch.as_tensor(np.ascontiguousarray(pixels.transpose(2, 0, 1)), dtype=torch.float32)[None]
        out = run_attack(proxy, x, [index[target]], cfg)
        return out[0].numpy().transpose(1, 2, 0).astype(np.float64)

    return fn


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalRow:
    classifier_arch: str
    preproc: str
    overlap: str
    distribution: str
    attack: str
    tsr: float
    usr: float
    mean_psnr: float
    n_images: int
    n_pairs: int


REPORT_FIELDS = tuple(f.name for f in fields(EvalRow))


def score_pairs(pairs: Iterable[tuple]) -> tuple[float, float, int]:
    """``(y, y_target, predicted)`` triples -> ``(tsr, usr, n_pairs)``."""
    pairs = list(pairs)
    if not pairs:
        return float("nan"), float("nan"), 0
    t = sum(pred == yt for _, yt, pred in pairs)
    u = sum(pred != y for y, _, pred in pairs)
    return t / len(pairs), u / len(pairs), len(pairs)


def target_pairs(label: int, known_classes: Sequence[int]) -> list[int]:
    """Targets for one image: every other known class, or all of them when the
    image's class is unknown to the anonymizer."""
    known = sorted(known_classes)
    return [c for c in known if c != label] if label in known else known


@torch.no_grad()
def classify(classifier, pixels: np.ndarray) -> np.ndarray:
    """Predicted labels (not indices) for an N x H x W x 3 stack; ties go to the lowest index."""
    classifier.eval()
    x = torch.as_tensor(np.ascontiguousarray(pixels.transpose(0, 3, 1, 2)), dtype=torch.float32)
    scores = classifier(x).numpy()
    classes = np.asarray(classifier.classes)
    return classes[np.argmax(scores, axis=1)]


def evaluate_anonymizer(
    anonymize_fn: Callable,
    classifier,
    eval_set: Sequence,
    known_classes: Sequence[int],
    attack: str = "cama",
) -> EvalRow:
    """Score ``anonymize_fn`` against ``classifier`` over all (image, target) pairs.

    ``eval_set`` holds :class:`~cama.imaging.Image` objects (or ``(pixels, label)``
    tuples). Outputs are quantized to 8 bits before scoring, exactly as if
    written to PNG and read back.
    """
    known = sorted(known_classes)
    f_classes = set(classifier.classes)
    items = [(e.pixels, e.label) if hasattr(e, "pixels") else tuple(e) for e in eval_set]
    labels = {int(lbl) for _, lbl in items}
    if not labels <= f_classes or not set(known) <= f_classes:
        raise LabelError(f"classifier classes {sorted(f_classes)} do not cover labels {sorted(labels | set(known))}")
    inside = {lbl in known for lbl in labels}
    if len(inside) > 1:
        raise LabelError("evaluation set mixes in- and out-of-distribution images")
    pairs, psnrs = [], []
    for pixels, label in items:
        targets = target_pairs(int(label), known)
        outs = np.stack([from_uint8(to_uint8(anonymize_fn(pixels, t))) for t in targets])
        preds = classify(classifier, outs)
        for t, out, pred in zip(targets, outs, preds):
            pairs.append((int(label), t, int(pred)))
            psnrs.append(psnr(pixels, out))
    tsr, usr, n_pairs = score_pairs(pairs)
    return EvalRow(
        classifier_arch=getattr(classifier, "arch", type(classifier).__name__),
        preproc=getattr(getattr(classifier, "preproc", None), "value", "RGB"),
        overlap="complete" if f_classes == set(known) else "partial",
        distribution="in" if inside == {True} else "out",
        attack=attack,
        tsr=tsr,
        usr=usr,
        mean_psnr=float(np.mean(psnrs)) if psnrs else float("nan"),
        n_images=len(items),
        n_pairs=n_pairs,
    )


# --------------------------------------------------------------------------- reports


def emit_report(rows: Sequence[EvalRow], out_dir=None, stem: str = "report") -> str:
    """Write ``<stem>.csv`` and ``<stem>.txt`` under ``out_dir`` (if given) and
    return the text table: one line per (arch, preproc), one column per
    (overlap, distribution, attack), cells ``TSR (USR)`` in percent."""
    rows = list(rows)
    if not rows:
        raise ValueError("empty report")
    text = render_table(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(rows_to_csv(rows))
        (out / f"{stem}.txt").write_text(text)
    return text


def rows_to_csv(rows: Sequence[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})
    return buf.getvalue()


def parse_report(source) -> list[EvalRow]:
    """Inverse of the CSV written by :func:`emit_report` (path or CSV text)."""
    text = str(source)
    if isinstance(source, Path) or "\n" not in text:
        text = Path(source).read_text()
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(
            EvalRow(
                rec["classifier_arch"],
                rec["preproc"],
                rec["overlap"],
                rec["distribution"],
                rec["attack"],
                float(rec["tsr"]),
                float(rec["usr"]),
                float(rec["mean_psnr"]),
                int(rec["n_images"]),
                int(rec["n_pairs"]),
            )
        )
    return rows


def render_table(rows: Sequence[EvalRow]) -> str:
    groups, columns = {}, []
    for r in rows:
        col = (r.overlap, r.distribution, r.attack)
        if col not in columns:
            columns.append(col)
        groups.setdefault((r.classifier_arch, r.preproc), {})[col] = r
    head = ["arch", "preproc"] + ["/".join(c) for c in columns] + ["psnr"]
    lines = [head]
    for (arch, pre), cells in groups.items():
        line = [arch, pre]
        for c in columns:
            r = cells.get(c)
            line.append("-" if r is None else f"{100 * r.tsr:.1f} ({100 * r.usr:.1f})")
        line.append(f"{np.mean([r.mean_psnr for r in cells.values()]):.1f}")
        lines.append(line)
    widths = [max(len(str(l[i])) for l in lines) for i in range(len(head))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(l, widths)).rstrip() for l in lines) + "\n"


def check_thresholds(rows: Sequence[EvalRow], min_tsr: Optional[float] = None, min_psnr: Optional[float] = None) -> list[str]:
    """Human-readable failures; empty when every row passes."""
    problems = []
    for r in rows:
        tag = f"{r.classifier_arch}/{r.preproc}/{r.overlap}/{r.distribution}/{r.attack}"
        if r.usr < r.tsr:
            problems.append(f"{tag}: usr {r.usr:.3f} < tsr {r.tsr:.3f}")
        if min_tsr is not None and not r.tsr >= min_tsr:
            problems.append(f"{tag}: tsr {r.tsr:.3f} < {min_tsr}")
        if min_psnr is not None and not r.mean_psnr >= min_psnr:
            problems.append(f"{tag}: psnr {r.mean_psnr:.2f} < {min_psnr}")
    return problems
