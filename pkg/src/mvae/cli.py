"""Command-line entry points: train, eval, weaksweep, check."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .checks import run_checks
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    DEFAULT_IS_SAMPLES,
    cross_modality_accuracy,
    estimate_log_conditional,
    estimate_log_joint,
    estimate_log_marginal,
)
from .gaussian import product_of_experts
from .model import MvaeModel
from .numerics import RngStream
from .training import NonFiniteObjectiveError, make_weak_split, train

EVAL_STREAM = 0xE7A1
ACCURACY_STREAM = 0xACC


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def cmd_train(config_path, out_dir, env=None) -> int:
    try:
        cfg = load_config(config_path, env)
        data, _ = cfg.datasets()
        model = cfg.build_model()
        trained, history = train(model, data, cfg.train_config())
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc))
    except NonFiniteObjectiveError as exc:
        return _fail(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, out / "checkpoint")
    (out / "history.csv").write_text(history.to_csv(seed=cfg.seed))
    (out / "config.resolved.json").write_text(cfg.dumps())
    print(f"trained {cfg.train_config().epochs} epochs, final objective {history.records[-1].objective:.4f}")
    return 0


def _eval_rows(cfg: RunConfig, model: MvaeModel, test) -> list[list]:
    e = cfg.eval
    n = int(e.get("n_samples", DEFAULT_IS_SAMPLES))
    n_prior = int(e.get("n_prior_samples", n))
    limit = int(e.get("n_examples", 200))
    batch = test.to_batch()
    batch = batch.take(np.arange(min(limit, len(batch))))
    names = [s.name for s in model.specs]
    proposals = e.get("proposals") or [[names[0]], names]
    marginal = e.get("marginal_target", names[0])
    joint = e.get("joint_targets", names)
    cond = e.get("conditional", [names[0], names[1]] if len(names) > 1 else None)
    root = RngStream(cfg.seed, stream_id=EVAL_STREAM)
    rows = []
    for p, prop in enumerate(proposals):
        label = "+".join(prop)
        st = root.spawn(p)
        r = estimate_log_marginal(model, batch, marginal, prop, n, st.spawn(0))
        rows.append(["marginal", marginal, label, _fmt(r.estimate), n, _fmt(r.log_weight_variance), cfg.seed])
        r = estimate_log_joint(model, batch, joint, prop, n, st.spawn(1))
        rows.append(["joint", "+".join(joint), label, _fmt(r.estimate), n, _fmt(r.log_weight_variance), cfg.seed])
        if cond is not None:
            r = estimate_log_conditional(model, batch, cond[0], cond[1], n, n_prior, st.spawn(2), prop)
            rows.append(["conditional", f"{cond[0]}|{cond[1]}", label, _fmt(r.estimate), n,
                         _fmt(r.log_weight_variance), cfg.seed])
    acc = e.get("accuracy")
    if acc:
        a = cross_modality_accuracy(model, batch, acc[0], acc[1], root.spawn(len(proposals)))
        rows.append(["accuracy", f"{acc[0]}->{acc[1]}", acc[0], _fmt(a), 1, "", cfg.seed])
    return rows


def cmd_eval(checkpoint, config_path, out_dir, env=None) -> int:
    try:
        cfg = load_config(config_path, env)
        model = load_checkpoint(checkpoint)
        expected = cfg.build_model()
        if expected.config() != model.config():
            return _fail("checkpoint model does not match the config's model block")
        _, test = cfg.datasets()
        rows = _eval_rows(cfg, model, test)
    except (ConfigError, CheckpointError, OSError, ValueError) as exc:
        return _fail(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["estimator", "target", "proposal", "estimate", "n_samples", "log_weight_variance", "seed"]
    text = _csv(header, rows)
    (out / "metrics.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_weaksweep(config_path, fractions, out_dir, env=None) -> int:
    try:
        cfg = load_config(config_path, env)
        data, test = cfg.datasets()
        if len(data.arrays) != 2:
            return _fail("weaksweep needs a bimodal dataset")
        tc = cfg.train_config()
        acc_stream = RngStream(cfg.seed, stream_id=ACCURACY_STREAM)
        rows = []
        for f in fractions:
            split = make_weak_split(data, f, cfg.seed)
            model, _ = train(cfg.build_model(), split.pool(), tc)
            names = [s.name for s in model.specs]
            acc = cross_modality_accuracy(model, test.to_batch(), names[0], names[1], acc_stream)
            rows.append([repr(float(f)), len(split.paired), repr(acc), cfg.seed])
            print(f"fraction {f}: {len(split.paired)} paired, accuracy {acc:.4f}")
    except (ConfigError, OSError, ValueError, NonFiniteObjectiveError) as exc:
        return _fail(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "weaksweep.csv").write_text(_csv(["fraction", "paired_count", "accuracy", "seed"], rows))
    return 0


def cmd_check(poe=product_of_experts) -> int:
    results = run_checks(poe)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def _fractions(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from exc
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("fractions must lie in [0, 1]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvae", description="Multimodal VAE training and evaluation")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train a model from a config")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    e = sub.add_parser("eval", help="importance-sampled likelihood metrics for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--out", required=True)
    w = sub.add_parser("weaksweep", help="accuracy versus fraction of paired examples")
    w.add_argument("config")
    w.add_argument("--fractions", type=_fractions, required=True)
    w.add_argument("--out", required=True)
    sub.add_parser("check", help="run the fast oracle suite")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.out)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.config, args.out)
    if args.command == "weaksweep":
        return cmd_weaksweep(args.config, args.fractions, args.out)
    return cmd_check()


if __name__ == "__main__":
    sys.exit(main())
