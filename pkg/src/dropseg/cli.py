"""Command-line pipeline: phantom | train | infer | eval | compare | plot.

Every subcommand takes ``--config FILE`` (a flat JSON object whose keys are
the command's option names), ``--seed N`` and ``--out DIR``. Flags override
config values; unknown config keys are rejected. Relative paths inside a
config file resolve against the file's directory.

Exit codes: 0 success, 1 user/config error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import model as mdl
from . import metrics, plotting, report
from .errors import ConfigError, DegenerateGroundTruth, DropsegError, InvariantViolation
from .phantom import PhantomParams, generate_dataset
from .seqdropout import DropoutPolicy
from .volgrid import (
    BinaryMask,
    ProbabilityVolume,
    load_mvol,
    load_study,
    normalize_study,
    parse_sequences,
    read_manifest,
    save_mvol,
)

log = logging.getLogger("dropseg")

# option name -> (default, is_path)
_PHANTOM_KEYS = {f.name: (None, False) for f in fields(PhantomParams)}
_PHANTOM_KEYS.update({"n_train": (100, False), "n_val": (10, False), "n_test": (55, False),
                      "out": (None, True)})
COMMAND_KEYS = {
    "phantom": _PHANTOM_KEYS,
    "train": {
        "manifest": (None, True), "out": (None, True), "seed": (0, False),
        "steps": (2000, False), "learning_rate": (1e-3, False), "momentum": (0.9, False),
        "p_pos": (0.5, False), "hidden_channels": (32, False), "dropout": ("on", False),
        "sequences": ("pre_gd_t1,post_gd_t1,flair", False), "policy": (None, False),
        "prior": (0.01, False),
    },
    "infer": {
        "checkpoint": (None, True), "manifest": (None, True), "out": (None, True),
        "splits": ("val,test", False), "seed": (0, False),
    },
    "eval": {
        "manifest": (None, True), "probs": (None, True), "out": (None, True),
        "threshold": (None, False), "youden_from": (None, False), "split": ("test", False),
        "size_limit_mm3": (10.0, False), "seed": (0, False),
    },
    "compare": {"report_a": (None, True), "report_b": (None, True), "out": (None, True),
                "seed": (0, False)},
    "plot": {"csv": ([], True), "out": (None, True), "seed": (0, False)},
}


def _resolve_options(command: str, args: argparse.Namespace) -> dict:
    keys = COMMAND_KEYS[command]
    opts = {k: d for k, (d, _) in keys.items()}
    if args.config:
        cfg_path = Path(args.config)
        try:
            cfg = json.loads(cfg_path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(cfg) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        base = cfg_path.resolve().parent
        for k, v in cfg.items():
            if keys[k][1] and v is not None:
                v = [str(base / p) for p in v] if isinstance(v, list) else str(base / v)
            opts[k] = v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None and v != []:
            opts[k] = v
    for k, (_, is_path) in keys.items():
        v = opts.get(k)
        if is_path and v:
            opts[k] = [str(Path(p).resolve()) for p in v] if isinstance(v, list) else str(Path(v).resolve())
    return opts


def _require(opts, *names):
    for n in names:
        if opts.get(n) in (None, "", []):
            raise ConfigError(f"missing required option {n!r}")


def _on_off(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("on", "true", "1", "yes"):
        return True
    if s in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {v!r}")


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_phantom(opts: dict) -> int:
    _require(opts, "out")
    pdict = {f.name: opts[f.name] for f in fields(PhantomParams) if opts.get(f.name) is not None}
    params = PhantomParams.from_dict(pdict)
    entries = generate_dataset(params, int(opts["n_train"]), int(opts["n_val"]),
                               int(opts["n_test"]), opts["out"])
    print(f"wrote {len(entries)} cases to {opts['out']}")
    return 0


def _load_split(manifest, splits):
    root = Path(manifest).parent
    entries = [e for e in read_manifest(manifest) if e.split in splits]
    return [load_study(e, root) for e in entries]


def cmd_train(opts: dict) -> int:
    _require(opts, "manifest", "out")
    dropout = _on_off(opts["dropout"])
    seqs = tuple(s.key for s in parse_sequences(opts["sequences"]))
    cfg = mdl.TrainConfig(
        learning_rate=float(opts["learning_rate"]), momentum=float(opts["momentum"]),
        steps=int(opts["steps"]), seed=int(opts["seed"]), dropout_enabled=dropout,
        p_pos=float(opts["p_pos"]), hidden_channels=int(opts["hidden_channels"]),
        sequences=seqs, prior=float(opts["prior"]),
    )
    policy = DropoutPolicy.from_weights(opts["policy"]) if dropout and opts["policy"] else None
    train_set = _load_split(opts["manifest"], {"train"})
    val_set = _load_split(opts["manifest"], {"val"})
    result = mdl.train(train_set, val_set, cfg, policy)

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    mdl.save_checkpoint(result.checkpoint, out / "model.mdsc")
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "mask"])
        for step, (loss, mask) in enumerate(zip(result.losses, result.masks)):
            w.writerow([step, f"{loss:.9g}", mask])
    hist = result.checkpoint.metadata["mask_histogram"]
    print("mask histogram: " + ", ".join(f"{k}:{v}" for k, v in hist.items()))
    print(f"final loss {result.checkpoint.metadata['final_loss']:.4g}; wrote {out / 'model.mdsc'}")
    return 0


def _model_identity(ckpt: mdl.Checkpoint, path) -> dict:
    return {
        "name": "dropout" if ckpt.metadata.get("dropout") else "baseline",
        "checkpoint": Path(path).name,
        "sequences": list(ckpt.spec.sequences),
        "input_channels": ckpt.spec.input_channels,
    }


def cmd_infer(opts: dict) -> int:
    _require(opts, "checkpoint", "manifest", "out")
    ckpt = mdl.load_checkpoint(opts["checkpoint"])
    net = ckpt.network()
    splits = {s.strip() for s in str(opts["splits"]).split(",") if s.strip()}
    root = Path(opts["manifest"]).parent
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for entry in read_manifest(opts["manifest"]):
        if entry.split not in splits:
            continue
        study = normalize_study(load_study(entry, root))
        prob = mdl.infer_study(net, study)
        save_mvol(prob, out / f"{entry.case_id}.mvol")
        written.append({"case_id": entry.case_id, "split": entry.split,
                        "sequences": [s.key for s in study.sequences]})
    _write_json({"model": _model_identity(ckpt, opts["checkpoint"]), "cases": written},
                out / "infer.json")
    print(f"wrote {len(written)} probability volumes to {out}")
    return 0


def _load_prob(probs_dir, case_id) -> ProbabilityVolume:
    vol = load_mvol(Path(probs_dir) / f"{case_id}.mvol")
    if not isinstance(vol, ProbabilityVolume):
        raise ConfigError(f"{case_id}: expected a probability volume")
    return vol


def cmd_eval(opts: dict) -> int:
    _require(opts, "manifest", "probs", "out")
    if (opts["threshold"] is None) == (opts["youden_from"] is None):
        raise ConfigError("give exactly one of --threshold or --youden-from")
    root = Path(opts["manifest"]).parent
    entries = read_manifest(opts["manifest"])
    out = Path(opts["out"])
    (out / "roc").mkdir(parents=True, exist_ok=True)

    def _pairs(split):
        pairs = []
        for e in entries:
            if e.split != split:
                continue
            if not e.gt:
                raise ConfigError(f"{e.case_id}: no ground truth in manifest")
            gt = load_mvol(root / e.gt)
            if not isinstance(gt, BinaryMask):
                raise ConfigError(f"{e.case_id}: ground truth is not a mask")
            pairs.append((e.case_id, _load_prob(opts["probs"], e.case_id), gt))
        return pairs

    if opts["youden_from"] is not None:
        val = _pairs(opts["youden_from"])
        if not val:
            raise ConfigError(f"no {opts['youden_from']!r} cases to pick a threshold from")
        curve = metrics.roc_curve([p for _, p, _ in val], [g for _, _, g in val])
        threshold = metrics.youden_threshold(curve)
        metrics.write_roc_csv(curve, out / f"roc_{opts['youden_from']}_pooled.csv")
        source = report.threshold_record(
            "youden", threshold,
            {"split": opts["youden_from"], "pooled_cases": len(val),
             "j": float(max(curve.tpr - curve.fpr))},
        )
    else:
        threshold = float(opts["threshold"])
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        source = report.threshold_record("fixed", threshold)

    rows, curves, skipped = [], {}, []
    for case_id, prob, gt in _pairs(opts["split"]):
        try:
            row, curve = report.evaluate_case(case_id, prob, gt, threshold,
                                              float(opts["size_limit_mm3"]))
        except DegenerateGroundTruth as exc:
            print(f"notice: skipping {case_id}: {exc}", file=sys.stderr)
            skipped.append({"case_id": case_id, "reason": str(exc)})
            continue
        rows.append(row)
        curves[case_id] = curve
        metrics.write_roc_csv(curve, out / "roc" / f"{case_id}.csv")

    info_path = Path(opts["probs"]) / "infer.json"
    model_id = json.loads(info_path.read_text())["model"] if info_path.exists() else {}
    rep = report.build_report(model_id, threshold, source, rows, skipped)
    _write_json(rep, out / "report.json")
    if curves:
        plotting.roc_figure(curves, out / "roc.png", title=model_id.get("name", ""),
                            mean_curve=plotting.mean_roc(list(curves.values())))
    agg = rep["aggregate"]
    print(f"threshold {threshold:.4g} ({source['source']}); "
          + "; ".join(f"{m} {agg[m]['mean']:.3f}" for m in report.REPORT_METRICS
                      if agg[m]["mean"] is not None))
    return 1 if skipped else 0


def cmd_compare(opts: dict) -> int:
    _require(opts, "report_a", "report_b", "out")
    try:
        a = json.loads(Path(opts["report_a"]).read_text())
        b = json.loads(Path(opts["report_b"]).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read report: {exc}") from None
    block = report.compare_reports(a, b)
    merged = dict(a)
    merged["comparison"] = block
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(merged, out / "comparison.json")
    name_a = a.get("model", {}).get("name", "A")
    name_b = b.get("model", {}).get("name", "B")
    if name_a == name_b:
        name_a, name_b = f"{name_a} (A)", f"{name_b} (B)"
    shown = ("dice", "fp_no_limit", "fp_10mm3")
    plotting.comparison_boxplot(
        {m: {name_a: report.metric_values(a, m), name_b: report.metric_values(b, m)} for m in shown},
        out / "comparison.png",
        {m: block["metrics"][m]["p"] for m in shown},
    )
    for m, r in block["metrics"].items():
        print(f"{m:12s} U={r['u']:.1f} p={r['p']:.4g} ({r['mode']})")
    return 0


def cmd_plot(opts: dict) -> int:
    _require(opts, "csv", "out")
    curves = []
    for p in opts["csv"]:
        try:
            curves.append((Path(p).stem, metrics.read_roc_csv(p)))
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    out = Path(opts["out"])
    if out.suffix.lower() != ".svg":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "roc.svg"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    plotting.write_roc_svg(curves, out)
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dropseg", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (file for plot)")
        return p

    p = common(sub.add_parser("phantom", help="generate a synthetic dataset"))
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)

    p = common(sub.add_parser("train", help="train a dropout or baseline model"))
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--p-pos", dest="p_pos", type=float)
    p.add_argument("--hidden", dest="hidden_channels", type=int)
    p.add_argument("--dropout", choices=["on", "off"])
    p.add_argument("--sequences", help="baseline input, e.g. pre_gd_t1,post_gd_t1,flair")

    p = common(sub.add_parser("infer", help="write probability volumes"))
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--splits", help="comma-separated, default val,test")

    p = common(sub.add_parser("eval", help="score probability volumes"))
    p.add_argument("--manifest")
    p.add_argument("--probs", help="directory written by infer")
    p.add_argument("--threshold", type=float)
    p.add_argument("--youden-from", dest="youden_from", help="split to pick the threshold on")
    p.add_argument("--split", help="split to evaluate, default test")
    p.add_argument("--size-limit-mm3", dest="size_limit_mm3", type=float)

    p = common(sub.add_parser("compare", help="rank-sum comparison of two reports"))
    p.add_argument("report_a", nargs="?")
    p.add_argument("report_b", nargs="?")

    p = common(sub.add_parser("plot", help="render ROC CSVs to an SVG"))
    p.add_argument("csv", nargs="*")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        opts = _resolve_options(args.command, args)
        return COMMANDS[args.command](opts)
    except (InvariantViolation, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except (DropsegError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
