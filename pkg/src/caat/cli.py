"""Command-line front end: ``caat score | train | eval | report``.

Every command is a pure function of its config file, input artifacts and
seed.  Output goes to ``--out``, else ``out`` in the config, else
``$CAAT_OUT_ROOT/<command>`` (default root ``runs``).
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps reductions, and therefore artifacts, reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .config import ExperimentConfig, load_config  # noqa: E402
from .criticality import (BottleneckSet, accumulate_rpc, build_adversarial_set,  # noqa: E402
                          export_csv, resolve_tau, select_top_tau, summarize_per_matrix)
from .data import generate_synthetic, load_cifar10_binary, subsample  # noqa: E402
from .errors import (ArtifactError, CaatError, ConfigError, ContractError,  # noqa: E402
                     DependencyError, FormatError, UsageError)
from .peft import allocate, uniform_plan  # noqa: E402
from .report import build_report, render_table  # noqa: E402
from .train import caat_train, evaluate, full_at_train, write_metrics  # noqa: E402
from .vit import build_model, load_checkpoint, save_checkpoint  # noqa: E402

log = logging.getLogger("caat")

OUT_ROOT_ENV = "CAAT_OUT_ROOT"
MODES = ("clean", "full", "caat", "lora-all", "mask-only")
EXIT_FILE = ArtifactError.exit_code


def _dump(path, data):
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def resolve_out(args, cfg: ExperimentConfig, default_name):
    if args.out:
        out = Path(args.out)
    elif cfg.out:
        out = Path(cfg.out)
    else:
        out = Path(os.environ.get(OUT_ROOT_ENV, "runs")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed)


def load_data(cfg: ExperimentConfig):
    """Train and test splits matching the model's input shape."""
    d, m = cfg.data, cfg.model
    if d.source == "synthetic":
        if d.classes != m.num_classes:
            raise ConfigError(f"data.classes={d.classes} but model.num_classes={m.num_classes}")
        common = dict(classes=d.classes, image_size=m.image_size, channels=m.channels,
                      separation=d.separation, seed=d.seed, noise=d.noise)
        train = generate_synthetic(per_class=d.per_class, split="train", **common)
        test = generate_synthetic(per_class=d.test_per_class, split="test", **common)
    else:
        train, test = load_cifar10_binary(d.path)
        if (m.image_size, m.channels, m.num_classes) != (32, 3, 10):
            raise ConfigError("CIFAR-10 needs model.image_size=32, channels=3, num_classes=10")
    if d.train_limit:
        train = train.take(np.arange(min(d.train_limit, len(train))))
    if d.test_limit:
        test = test.take(np.arange(min(d.test_limit, len(test))))
    return train, test


def load_store(path, cfg: ExperimentConfig, required=True):
    if path is None:
        if required:
            raise DependencyError("a --checkpoint is required; produce one with `caat train`")
        return build_model(cfg.model_config())
    return load_checkpoint(path, expected=cfg.model_config())


def load_bottleneck(path):
    """Read ``bottleneck.json`` (or the score directory holding it)."""
    hint = "run `caat score --checkpoint <model.ckpt> --out <dir>` first and pass --bottleneck <dir>"
    if path is None:
        raise DependencyError(f"caat mode needs criticality scores; {hint}")
    path = Path(path)
    if path.is_dir():
        path = path / "bottleneck.json"
    if not path.is_file():
        raise DependencyError(f"bottleneck file not found: {path}; {hint}")
    try:
        data = json.loads(path.read_text())
        bottleneck = BottleneckSet(data["indices"], data["total"], data["tau"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a bottleneck file ({exc})") from None
    return bottleneck, data


# -- commands -------------------------------------------------------------------

def cmd_score(args):
    cfg = load_experiment(args)
    store = load_store(args.checkpoint, cfg)
    out = resolve_out(args, cfg, "score")
    train, _ = load_data(cfg)
    crit = cfg.criticality
    if crit.sample_count > len(train):
        raise ConfigError(
            f"criticality.sample_count={crit.sample_count} exceeds the {len(train)} training samples")
    corpus = subsample(train, crit.sample_count, cfg.seed)
    attack = cfg.criticality_attack()
    adv = build_adversarial_set(store, corpus, attack, crit.batch_size, cfg.seed)
    scores = accumulate_rpc(store, adv, crit.batch_size)
    tau = resolve_tau(cfg.train.tau, store.size)
    bottleneck = select_top_tau(scores, tau)
    counts = summarize_per_matrix(store, bottleneck)
    sizes = {p: int(store[p].size) for p in store.paths}
    top = sorted((p for p in store.paths if counts[p]), key=lambda p: (-counts[p], store.paths.index(p)))[:10]

    export_csv(out / "criticality.csv", scores, bottleneck, store)
    summary = {"sample_count": scores.sample_count, "batch_count": scores.batch_count,
               "tau": tau, "tau_setting": cfg.train.tau, "total": store.size,
               "attack": attack.to_dict(), "per_matrix": counts, "sizes": sizes, "top_paths": top,
               "checkpoint": Path(args.checkpoint).name}
    _dump(out / "summary.json", summary)
    _dump(out / "bottleneck.json", {"indices": bottleneck.indices.tolist(), "total": store.size,
                                    "tau": tau, "sample_count": scores.sample_count,
                                    "attack": attack.to_dict()})
    rows = [[p, counts[p], sizes[p], f"{100.0 * counts[p] / sizes[p]:.2f}"] for p in store.paths]
    text = (f"bottleneck: {tau} of {store.size} parameters from {scores.sample_count} "
            f"adversarial samples (budget {attack.budget:.6g})\n\n"
            + render_table(["path", "critical", "size", "density_pct"], rows) + "\n")
    (out / "summary.txt").write_text(text)
    print(f"top critical paths ({tau} of {store.size} parameters selected):")
    for p in top:
        print(f"  {p:<28} {counts[p]:>7} / {sizes[p]}")
    return 0


def _plan_for(mode, store, cfg: ExperimentConfig, args):
    t = cfg.train
    if mode == "lora-all":
        return uniform_plan(store, "lora", t.rank, meta={"mode": mode})
    bottleneck, data = load_bottleneck(args.bottleneck)
    if bottleneck.total != store.size:
        raise ContractError(
            f"bottleneck covers {bottleneck.total} parameters but the checkpoint has {store.size}; "
            "score the same checkpoint you train")
    meta = {"mode": mode, "sample_count": data.get("sample_count"),
            "bottleneck_tau": bottleneck.tau}
    indirect = "none" if mode == "mask-only" else t.indirect
    return allocate(store, bottleneck, rank=t.rank, sigma_tre_mode=t.sigma_tre_mode,
                    indirect=indirect, head_trainable=t.head_trainable, meta=meta)


def cmd_train(args):
    cfg = load_experiment(args)
    mode = args.mode
    store = load_store(args.checkpoint, cfg, required=mode in ("caat", "mask-only"))
    tcfg = cfg.train_config()
    if mode == "clean":
        tcfg = replace(tcfg, attack=replace(tcfg.attack, budget=0.0))
    plan = None
    if mode in ("caat", "mask-only", "lora-all"):
        plan = _plan_for(mode, store, cfg, args)
    out = resolve_out(args, cfg, mode)
    train, test = load_data(cfg)
    attacks = cfg.eval_attacks()
    if plan is None:
        result = full_at_train(store, train, tcfg, test, attacks)
        plan_doc = {"meta": {"mode": mode}, "total_params": store.size,
                    "trainable_params": store.size, "tuned_fraction": 1.0, "entries": []}
        plan_text = f"all {store.size} parameters trainable ({mode})\n"
    else:
        result = caat_train(store, train, plan, tcfg, test, attacks)
        plan_doc = plan.to_dict()
        plan_text = plan.to_table()
    save_checkpoint(result.store, out / "model.ckpt")
    write_metrics(out / "metrics.jsonl", result.log)
    _dump(out / "plan.json", plan_doc)
    (out / "plan.txt").write_text(plan_text)
    (out / "config.txt").write_text(cfg.to_text())
    final = result.final
    robust = "  ".join(f"{k} {v:.2f}" for k, v in (final["robust_acc"] or {}).items())
    print(f"{mode}: tuned {plan_doc['trainable_params']} / {plan_doc['total_params']} "
          f"({100.0 * plan_doc['trainable_params'] / plan_doc['total_params']:.2f}%)  "
          f"clean {final['clean_acc']:.2f}  {robust}".rstrip())
    return 0


def cmd_eval(args):
    cfg = load_experiment(args)
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint")
    store = load_checkpoint(args.checkpoint)
    names = cfg.eval.attacks if args.attacks is None else tuple(
        a.strip() for a in args.attacks.split(",") if a.strip())
    attacks = cfg.eval_attacks(names)
    out = resolve_out(args, cfg, "eval")
    _, test = load_data(cfg)
    result = evaluate(store, test, attacks, cfg.eval.batch_size, cfg.seed)
    doc = result.to_dict()
    doc["attacks"] = {k: v.to_dict() for k, v in attacks.items()}
    doc["checkpoint"] = Path(args.checkpoint).name
    _dump(out / "eval.json", doc)
    rows = [["clean", f"{result.clean_acc:.2f}"]]
    rows += [[k, f"{v:.2f}"] for k, v in result.robust_acc.items()]
    table = render_table(["attack", "accuracy_pct"], rows)
    (out / "eval.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_report(args):
    written = build_report(args.root, args.out)
    print((Path(args.out or args.root) / "report.txt").read_text(), end="")
    for path in written:
        log.info("wrote %s", path)
    return 0


# -- entry point -------------------------------------------------------------------

def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="caat", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"caat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (key=value text or JSON)")
    common.add_argument("--seed", type=_seed, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = sub.add_parser("score", parents=[common], help="score robust parameter criticality")
    p.add_argument("--checkpoint", required=True, help="model checkpoint to score")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", parents=[common], help="adversarial training in one of several modes")
    p.add_argument("--mode", choices=MODES, default="caat")
    p.add_argument("--checkpoint", help="starting checkpoint (fresh init when omitted)")
    p.add_argument("--bottleneck", help="bottleneck.json or score directory (caat, mask-only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="clean and robust accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attacks", help="comma-separated attack names; empty for clean only")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="consolidate run directories into a report")
    p.add_argument("root", help="directory tree holding run and score outputs")
    p.add_argument("--out", help="report directory (defaults to root)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CaatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())
