"""Command-line entry point: ``cama <subcommand> [options]``.

Every invocation writes into a fresh ``runs/<timestamp>-<subcommand>/``
directory (root overridable with ``CAMA_RUNS_DIR``) holding the resolved
configuration, a content hash of its inputs, a log and the produced
artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__, bench, checkpoint, synthcam, trainer
from .config import LOSS_WEIGHTS, parse_overrides, phase_config, read_config_file
from .dataset import PatchSet, SplitPlan, build_splits, read_manifest
from .errors import CamaError, CheckpointError, ConfigError
from .imaging import amplified_delta, from_uint8, psnr, read_image, to_uint8, write_png
from .losses import LossWeights
from .preprocessors import ww_residual

log = logging.getLogger("cama")

EXIT_OK, EXIT_ERROR, EXIT_THRESHOLD, EXIT_USAGE = 0, 1, 3, 2


# --------------------------------------------------------------------------- run directories


def git_hash(data: bytes) -> str:
    """Object id ``git hash-object`` would assign to a blob with this content."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def runs_root() -> Path:
    return Path(os.environ.get("CAMA_RUNS_DIR", "runs"))


def make_run_dir(subcommand: str) -> Path:
    root = runs_root()
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = root / f"{stamp}-{subcommand}"
    n = 1
    while path.exists():
        path = root / f"{stamp}.{n}-{subcommand}"
        n += 1
    path.mkdir(parents=True)
    return path


def record_run(run_dir: Path, resolved: dict, inputs: list) -> str:
    hashes = {str(p): git_hash(Path(p).read_bytes()) for p in inputs if p and Path(p).is_file()}
    blob = json.dumps({"config": resolved, "inputs": hashes}, sort_keys=True, default=str).encode()
    digest = git_hash(blob)
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True, default=str))
    (run_dir / "inputs.json").write_text(json.dumps({"hash": digest, "files": hashes}, indent=1, sort_keys=True))
    return digest


def _attach_log(run_dir: Path, verbose: bool):
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fh = logging.FileHandler(run_dir / "run.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler) for h in root.handlers):
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        root.addHandler(sh)
    return fh


# --------------------------------------------------------------------------- helpers


def _require(path) -> Path:
    if path is None:
        raise ConfigError("a required path was not given")
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"file not found: {p}")
    return p


def _classes(text: Optional[str], default) -> list:
    if not text:
        return sorted(default)
    return sorted(int(c) for c in text.replace(",", " ").split())


def _overrides(args) -> dict:
    merged = {}
    if args.config:
        merged.update(read_config_file(_require(args.config)))
    merged.update(parse_overrides(args.set))
    if args.seed is not None:
        merged["seed"] = args.seed
    return merged


def _phase_cfg(args, phase):
    over = {k: v for k, v in _overrides(args).items() if k not in ("lambda_pix", "lambda_clf")}
    return phase_config(phase, args.preset, over)


def _patches(plan: SplitPlan, split: str, classes, patch_size: int, residuals: bool = False) -> PatchSet:
    recs = [r for r in plan.splits[split] if r.label in classes]
    return PatchSet.from_records(recs, patch_size, classes, aux_fn=ww_residual if residuals else None)


def _load_evaluator(path):
    return checkpoint.load_model(_require(path), "evaluator")


def _resume(path, names):
    head, models, optim = checkpoint.load(_require(path), with_optim=True)
    missing = [n for n in names if n not in models]
    if missing:
        raise CheckpointError(f"{path} lacks {missing}")
    checkpoint.restore_rng_state(head["rng_state"])
    return head, models, optim or {}


def _save_metrics(run_dir: Path, metrics: dict):
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args, run_dir):
    specs = synthcam.synth_models(args.models)
    out = Path(args.out) if args.out else run_dir / "data"
    manifest = synthcam.make_dataset(specs, args.n, out, size=args.size, seed=args.seed or 0, workers=args.workers)
    (out / "models.json").write_text(json.dumps([synthcam.spec_to_dict(s) for s in specs], indent=1))
    print(manifest)
    return EXIT_OK


def cmd_split(args, run_dir):
    records = read_manifest(_require(args.manifest))
    labels = sorted({r.label for r in records})
    p_classes = _classes(args.p_classes, labels)
    q_classes = _classes(args.q_classes, p_classes)
    plan = build_splits(records, q_classes, p_classes, seed=args.seed or 0)
    out = Path(args.out) if args.out else run_dir / "splits.json"
    plan.save(out)
    report = plan.report()
    print(json.dumps({"totals": report["totals"], "counts": report["counts"]}, indent=1))
    return EXIT_OK


def cmd_train_e0(args, run_dir):
    cfg = _phase_cfg(args, "e0")
    plan = SplitPlan.load(_require(args.splits))
    data = _patches(plan, "q_data", plan.q_classes, cfg.patch_size, residuals=True)
    kw = {}
    if args.resume:
        head, models, optim = _resume(args.resume, ["evaluator"])
        kw = dict(bundle=models["evaluator"], start_epoch=head["epoch"], optimizer_state=optim.get("e0"))
    result = trainer.train_e0(data, cfg, log_path=run_dir / "train_log.csv", **kw)
    result.metrics["train_mse"] = trainer.residual_mse(result.models["evaluator"], data)
    trainer.save_result(run_dir / "evaluator.ckpt", result, cfg)
    _save_metrics(run_dir, result.metrics)
    print(run_dir / "evaluator.ckpt")
    return EXIT_OK


def cmd_train_streams(args, run_dir):
    cfg = _phase_cfg(args, "streams")
    plan = SplitPlan.load(_require(args.splits))
    data = _patches(plan, "q_data", plan.q_classes, cfg.patch_size)
    heldout = _patches(plan, "p_test", plan.q_classes, cfg.patch_size)
    if args.resume:
        head, models, optim = _resume(args.resume, ["evaluator"])
        bundle, kw = models["evaluator"], dict(start_epoch=head["epoch"], optimizer_state=optim or None)
    else:
        bundle, kw = _load_evaluator(args.evaluator), {}
    result = trainer.train_streams(data, bundle, cfg, heldout, log_path=run_dir / "train_log.csv", **kw)
    trainer.save_result(run_dir / "evaluator.ckpt", result, cfg)
    _save_metrics(run_dir, result.metrics)
    print(json.dumps(result.metrics))
    return EXIT_OK


def cmd_train_cama(args, run_dir):
    over = _overrides(args)
    default = LOSS_WEIGHTS[args.preset]
    weights = LossWeights(*(float(over.get(k, default[k])) for k in ("lambda_pix", "lambda_clf")))
    cfg = _phase_cfg(args, "cama")
    plan = SplitPlan.load(_require(args.splits))
    data = _patches(plan, "q_data", plan.q_classes, cfg.patch_size)
    evaluator = _load_evaluator(args.evaluator)
    kw = {}
    if args.resume:
        head, models, optim = _resume(args.resume, ["generator", "discriminator"])
        kw = dict(models=models, start_epoch=head["epoch"], optimizer_state=optim or None)
    result = trainer.train_cama(
        data, evaluator, cfg, weights, log_path=run_dir / "train_log.csv", dump_path=run_dir / "diverged.ckpt", **kw
    )
    trainer.save_result(
        run_dir / "cama.ckpt", result, cfg, {"weights": {"lambda_pix": weights.lambda_pix, "lambda_clf": weights.lambda_clf},
                                              "known_classes": plan.q_classes}
    )
    print(run_dir / "cama.ckpt")
    return EXIT_OK


def cmd_train_target(args, run_dir):
    cfg = _phase_cfg(args, "target")
    plan = SplitPlan.load(_require(args.splits))
    classes = _classes(args.classes, plan.p_classes)
    data = _patches(plan, "p_data", classes, cfg.patch_size)
    heldout = _patches(plan, "p_test", classes, cfg.patch_size)
    kw = {}
    if args.resume:
        head, models, optim = _resume(args.resume, ["target"])
        kw = dict(model=models["target"], start_epoch=head["epoch"], optimizer_state=optim.get("target"))
    result = trainer.train_target(data, args.arch, args.preproc, cfg, heldout, log_path=run_dir / "train_log.csv", **kw)
    trainer.save_result(run_dir / "target.ckpt", result, cfg)
    _save_metrics(run_dir, result.metrics)
    print(json.dumps(result.metrics))
    return EXIT_OK


def _known_classes(args, head_known=None, n=None):
    if args.known_classes:
        return _classes(args.known_classes, [])
    if head_known:
        return sorted(head_known)
    return list(range(1, n + 1))


def cmd_anonymize(args, run_dir):
    path = _require(args.ckpt)
    head = checkpoint.read_header(path)
    gen = checkpoint.load_model(path, "generator")
    known = _known_classes(args, head.get("known_classes"), gen.n_classes)
    img = read_image(_require(args.input))
    out = from_uint8(to_uint8(bench.generator_anonymizer(gen, known)(img.pixels, args.target)))
    out_path = Path(args.out) if args.out else run_dir / "anonymized.png"
    write_png(out_path, out)
    if args.delta:
        write_png(args.delta, amplified_delta(img.pixels, out))
    value = psnr(img.pixels, out)
    log.info("PSNR %.2f dB", value)
    _save_metrics(run_dir, {"psnr": value, "target": args.target})
    print(f"{out_path} psnr={value:.2f}")
    return EXIT_OK


def _eval_images(plan: SplitPlan, classes):
    return [read_image(r.path, r.label) for r in plan.splits["p_test"] if r.label in classes]


def _evaluate_grid(anonymize_fn, targets, plan, known, attack_name):
    rows = []
    for path in targets:
        clf = checkpoint.load_model(_require(path), "target")
        images = _eval_images(plan, clf.classes)
        inside = [im for im in images if im.label in known]
        outside = [im for im in images if im.label not in known]
        for subset in (inside, outside):
            if subset:
                rows.append(bench.evaluate_anonymizer(anonymize_fn, clf, subset, known, attack=attack_name))
    return rows


def _finish_report(args, run_dir, rows):
    text = bench.emit_report(rows, run_dir)
    print(text, end="")
    problems = bench.check_thresholds(rows, args.min_tsr, args.min_psnr)
    for p in problems:
        log.error("threshold failed: %s", p)
    return EXIT_THRESHOLD if problems else EXIT_OK


def cmd_evaluate(args, run_dir):
    plan = SplitPlan.load(_require(args.splits))
    path = _require(args.ckpt)
    head = checkpoint.read_header(path)
    gen = checkpoint.load_model(path, "generator")
    known = _known_classes(args, head.get("known_classes") or plan.q_classes, gen.n_classes)
    rows = _evaluate_grid(bench.generator_anonymizer(gen, known), args.target_ckpt, plan, known, "cama")
    return _finish_report(args, run_dir, rows)


def cmd_attack(args, run_dir):
    plan = SplitPlan.load(_require(args.splits))
    proxy_path = _require(args.proxy)
    head = checkpoint.read_header(proxy_path)
    name = "evaluator" if "evaluator" in head["models"] else next(iter(head["models"]))
    proxy = checkpoint.load_model(proxy_path, name)
    known = _known_classes(args, getattr(proxy, "classes", None) or plan.q_classes)
    base = bench.AttackConfig.defaults(args.kind)
    cfg = bench.AttackConfig(
        args.kind,
        args.epsilon if args.epsilon is not None else base.epsilon,
        args.alpha if args.alpha is not None else base.alpha,
        args.steps if args.steps is not None else base.steps,
        args.gamma if args.gamma is not None else base.ddn_gamma,
    )
    rows = _evaluate_grid(bench.attack_anonymizer(proxy, cfg, known), args.target_ckpt, plan, known, args.kind)
    return _finish_report(args, run_dir, rows)


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train-e0": cmd_train_e0,
    "train-streams": cmd_train_streams,
    "train-cama": cmd_train_cama,
    "train-target": cmd_train_target,
    "anonymize": cmd_anonymize,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
}


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value file of config overrides")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--preset", default="desk", choices=("desk", "paper"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cama", description="Camera-model anonymization toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")

    s = sub.add_parser("synth", parents=[common], help="render a synthetic multi-camera corpus")
    s.add_argument("--models", type=int, default=3)
    s.add_argument("--n", type=int, default=300, help="images per model")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")

    s = sub.add_parser("split", parents=[common], help="partition a manifest into q_data / p_data / p_test")
    s.add_argument("--manifest", required=True, help="manifest CSV or directory-per-class root")
    s.add_argument("--q-classes", help="attacker-known classes, e.g. 1,2,3")
    s.add_argument("--p-classes", help="target-classifier classes")
    s.add_argument("--out")

    for name, phase_help in (
        ("train-e0", "train the residual extractor"),
        ("train-streams", "train the two evaluator streams"),
        ("train-cama", "train the anonymizer"),
        ("train-target", "train a target classifier"),
    ):
        s = sub.add_parser(name, parents=[common], help=phase_help)
        s.add_argument("--splits", required=True)
        s.add_argument("--resume", help="checkpoint to continue from")
        if name in ("train-streams", "train-cama"):
            s.add_argument("--evaluator", required=name == "train-cama", help="evaluator checkpoint")
        if name == "train-target":
            s.add_argument("--arch", default="small")
            s.add_argument("--preproc", default="RGB")
            s.add_argument("--classes")

    s = sub.add_parser("anonymize", parents=[common], help="anonymize one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--target", type=int, required=True, help="target class label")
    s.add_argument("--out")
    s.add_argument("--delta", help="write the amplified difference image here")
    s.add_argument("--known-classes")

    for name in ("evaluate", "attack"):
        s = sub.add_parser(name, parents=[common], help=f"{name} against target classifiers")
        s.add_argument("--splits", required=True)
        s.add_argument("--target-ckpt", action="append", required=True)
        s.add_argument("--known-classes")
        s.add_argument("--min-tsr", type=float)
        s.add_argument("--min-psnr", type=float)
        if name == "evaluate":
            s.add_argument("--ckpt", required=True, help="anonymizer checkpoint")
        else:
            s.add_argument("--proxy", required=True, help="evaluator or classifier checkpoint")
            s.add_argument("--kind", choices=bench.ATTACKS, default="pgd")
            s.add_argument("--epsilon", type=float, help="8-bit units")
            s.add_argument("--alpha", type=float, help="8-bit units")
            s.add_argument("--steps", type=int)
            s.add_argument("--gamma", type=float)
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in COMMANDS and not argv[0].startswith("-"):
        parser.print_usage(sys.stderr)
        if argv:
            print(f"cama: unknown subcommand {argv[0]!r}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
    run_dir = make_run_dir(args.command)
    handler = _attach_log(run_dir, args.verbose)
    try:
        resolved = {"command": args.command, "argv": argv, "args": vars(args)}
        phase = {"train-e0": "e0", "train-streams": "streams", "train-cama": "cama", "train-target": "target"}
        if args.command in phase:
            resolved["phase_config"] = _phase_cfg(args, phase[args.command]).to_dict()
        inputs = [getattr(args, k, None) for k in ("manifest", "splits", "evaluator", "ckpt", "input", "proxy", "resume", "config")]
        inputs += list(getattr(args, "target_ckpt", None) or [])
        digest = record_run(run_dir, resolved, inputs)
        log.info("run %s (inputs %s)", run_dir, digest[:12])
        return COMMANDS[args.command](args, run_dir)
    except CamaError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"cama: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
