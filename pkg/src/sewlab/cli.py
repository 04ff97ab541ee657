"""Command-line entry point: sewlab <command> [--config FILE] [--key value ...].

Config files are flat ``key = value`` text; ``#`` starts a comment. Every key
is also a flag (``conv_channels`` -> ``--conv-channels``), and flags win over
the file. Lists are comma separated.
"""

import argparse
import json
import os
import statistics
import sys
from dataclasses import fields
from importlib import resources

import numpy as np

from sewlab.attacks import (ReverseConfig, fineprune_attack, finetune_attack,
                            reverse_engineer_trigger, save_trigger, unlearn_attack)
from sewlab.data import LabeledDataset, gen_synthetic, load_dataset, save_dataset, split
from sewlab.errors import StageError
from sewlab.eval.experiment import ExperimentConfig, run_experiment
from sewlab.eval.metrics import cda, wacc
from sewlab.eval.report import emit_report
from sewlab.nn.checkpoint import load_checkpoint, save_checkpoint
from sewlab.nn.layers import make_cnn
from sewlab.specificity import measure_spec
from sewlab.watermark import (KeyDataset, build_key_dataset, embed_baseline, embed_sew,
                              has_patch, load_key, make_key, save_key, train_clean)

COMMANDS = ("gen-data", "train", "embed", "measure", "attack", "sweep", "report")
OUT_ENV = "SEWLAB_OUT"
CONFIG_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
EXTRA_KEYS = {"out": str, "seeds": tuple}


class ConfigError(ValueError):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = problems


def _elem_type(name):
    default = getattr(ExperimentConfig, name, None)
    if name == "seeds":
        return int
    if default is None:
        default = CONFIG_FIELDS[name].default_factory()
    return type(default[0]) if default else str


def parse_value(name, raw):
    """Convert text to the field's declared type or raise ValueError."""
    kind = EXTRA_KEYS.get(name) or CONFIG_FIELDS[name].type
    raw = raw.strip()
    if kind is tuple:
        elem = _elem_type(name)
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(elem(s) for s in items)
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return kind(raw)


def read_config(path):
    """Parse a config file into {key: typed value}; collects every bad line."""
    values, problems = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"{path}:{lineno}: expected 'key = value'")
                continue
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_FIELDS and key not in EXTRA_KEYS:
                problems.append(f"{path}:{lineno}: unknown field '{key}'")
                continue
            try:
                values[key] = parse_value(key, raw)
            except ValueError as exc:
                problems.append(f"{path}:{lineno}: field '{key}': {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def bundled_config(name):
    return resources.files("sewlab.configs").joinpath(f"{name}.conf")


def resolve_config_path(path):
    if os.path.exists(path):
        return path
    bundled = bundled_config(path)
    if bundled.is_file():
        return str(bundled)
    raise ConfigError([f"config file '{path}' not found (and no bundled config of that name)"])


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="sewlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    helps = {
        "gen-data": "generate the synthetic dataset and its train/test split",
        "train": "train the clean control model",
        "embed": "embed a watermark (--mode sew|baseline)",
        "measure": "measure the noise bound of a checkpoint on its key set",
        "attack": "run one removal attack against a checkpoint",
        "sweep": "run the full experiment over several seeds",
        "report": "run the full experiment for one seed and write the report",
    }
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=helps[cmd], description=helps[cmd])
        p.add_argument("--config", help="flat key = value config file, or a bundled name (demo)")
        for name in list(CONFIG_FIELDS) + list(EXTRA_KEYS):
            p.add_argument(_flag(name), dest=name, default=None, metavar="VALUE")
        if cmd in ("train", "embed"):
            p.add_argument("--data", help="directory with train/test .sewdata (default: output dir)")
        if cmd == "embed":
            p.add_argument("--mode", choices=("sew", "baseline"), default="sew")
            p.add_argument("--sigma-spec", dest="sigma_spec",
                           help="'auto' or 'fixed:VALUE'")
        if cmd in ("measure", "attack"):
            p.add_argument("--checkpoint", help="model checkpoint (SEWCKPT1)")
            p.add_argument("--key", help="key file (SEWKEY1); default: <out>/key.sewkey")
            p.add_argument("--keyset", help="key set (SEWDATA1); default: <out>/keyset.sewdata")
        if cmd == "attack":
            p.add_argument("--data", help="directory with train/test .sewdata (default: output dir)")
            p.add_argument("--attack", choices=("finetune", "fineprune", "unlearn"),
                           default="finetune")
            p.add_argument("--param", type=float,
                           help="learning rate (finetune, unlearn) or pruning ratio (fineprune)")
        if cmd == "report":
            p.add_argument("--from-json", help="re-emit an existing report JSON instead of running")
    return parser


def _rewrite_sigma(argv):
    """``embed --sigma auto|fixed:V`` is sugar for --sigma-spec."""
    out = list(argv)
    if out and out[0] == "embed":
        for i, tok in enumerate(out):
            if tok == "--sigma" and i + 1 < len(out) and (
                    out[i + 1] == "auto" or out[i + 1].startswith("fixed:")):
                out[i] = "--sigma-spec"
            elif tok.startswith("--sigma=") and (
                    tok[8:] == "auto" or tok[8:].startswith("fixed:")):
                out[i] = "--sigma-spec=" + tok[8:]
    return out


def resolve(args):
    """Merge file and flags into (ExperimentConfig, out_dir, seeds)."""
    values = {}
    if args.config:
        values.update(read_config(resolve_config_path(args.config)))
    problems = []
    for name in list(CONFIG_FIELDS) + list(EXTRA_KEYS):
        raw = getattr(args, name, None)
        if raw is None:
            continue
        try:
            values[name] = parse_value(name, raw)
        except ValueError as exc:
            problems.append(f"field '{name}' ({_flag(name)}): {exc}")
    if "seed" not in values and not (args.command == "sweep" and "seeds" in values):
        problems.append("field 'seed': required (set it in the config file or pass --seed)")
    if problems:
        raise ConfigError(problems)
    out = values.pop("out", None) or os.environ.get(OUT_ENV) or "sewlab-out"
    seeds = values.pop("seeds", None)
    if seeds is None:
        seeds = (values.get("seed", 0),)
    values.setdefault("seed", seeds[0])
    try:
        cfg = ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"invalid configuration: {exc}"]) from exc
    return cfg, out, tuple(seeds)


def _need(path, what):
    if not path or not os.path.exists(path):
        raise ConfigError([f"{what}: file '{path}' not found"])
    return path


def _data(args, cfg, out):
    root = getattr(args, "data", None) or out
    train = load_dataset(_need(os.path.join(root, "train.sewdata"), "training data"))
    test = load_dataset(_need(os.path.join(root, "test.sewdata"), "test data"))
    return train, test


def _load_keyset(args, out):
    key = load_key(_need(args.key or os.path.join(out, "key.sewkey"), "key"))
    ds = load_dataset(_need(args.keyset or os.path.join(out, "keyset.sewdata"), "key set"))
    if not np.all(has_patch(ds.images, key)):
        raise ConfigError(["key set: samples do not carry the given key"])
    ks = KeyDataset(ds.images, np.full(len(ds), key.target, dtype=np.int64), ds.labels, key)
    return key, ks


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args, cfg, out):
    ds = gen_synthetic(cfg.classes, cfg.n_per_class, cfg.image_size, seed=cfg.seed_for("data"),
                       channels=cfg.channels, amplitude=cfg.amplitude, jitter=cfg.jitter,
                       texture_jitter=cfg.texture_jitter)
    train, test = split(ds, cfg.train_fraction, cfg.seed_for("split"))
    save_dataset(train, os.path.join(out, "train.sewdata"))
    save_dataset(test, os.path.join(out, "test.sewdata"))
    print(f"wrote {len(train)} training and {len(test)} test samples to {out}")


def _init_net(cfg, train):
    return make_cnn(train.image_shape, train.num_classes, cfg.conv_channels,
                    seed=cfg.seed_for("init"))


def cmd_train(args, cfg, out):
    train, test = _data(args, cfg, out)
    net = train_clean(_init_net(cfg, train), train, cfg.train_config())
    save_checkpoint(net, os.path.join(out, "clean.ckpt"))
    acc = cda(net, test)
    _write_json(os.path.join(out, "train.json"), {"cda": acc, "config": cfg.to_dict()})
    print(f"CDA {acc:.2f}%  -> {os.path.join(out, 'clean.ckpt')}")


def parse_sigma_spec(text):
    """'auto' -> ('auto', 0.0); 'fixed:0.01' -> ('fixed', 0.01)."""
    if text == "auto":
        return "auto", 0.0
    if text.startswith("fixed:"):
        try:
            value = float(text[6:])
        except ValueError:
            raise ConfigError([f"field 'sigma': bad fixed value in {text!r}"]) from None
        if value < 0:
            raise ConfigError([f"field 'sigma': fixed value must be >= 0, got {value}"])
        return "fixed", value
    raise ConfigError([f"field 'sigma': expected 'auto' or 'fixed:VALUE', got {text!r}"])


def cmd_embed(args, cfg, out):
    train, test = _data(args, cfg, out)
    key = make_key(train.image_shape, cfg.patch, target=cfg.target, seed=cfg.seed_for("key"),
                   num_classes=train.num_classes)
    keyset = build_key_dataset(train, key, cfg.key_size, seed=cfg.seed_for("keyset"))
    init = _init_net(cfg, train)
    info = {"mode": args.mode}
    if args.mode == "baseline":
        net = embed_baseline(init, train, keyset, cfg.train_config())
    else:
        mode, sigma = (parse_sigma_spec(args.sigma_spec) if args.sigma_spec
                       else (cfg.sigma_mode, cfg.sigma))
        log = {}
        net = embed_sew(init, train, keyset, cfg.embed_config(mode, sigma), log=log)
        info.update(sigma_mode=mode, final_sigma=log["final_sigma"],
                    sigma_history=[[int(s), float(v)] for s, v in log["sigma_history"]])
    name = "sew" if args.mode == "sew" else "baseline"
    save_checkpoint(net, os.path.join(out, f"{name}.ckpt"))
    save_key(key, os.path.join(out, "key.sewkey"))
    save_dataset(LabeledDataset(keyset.images, keyset.true_labels, train.num_classes),
                 os.path.join(out, "keyset.sewdata"))
    info.update(cda=cda(net, test), wacc=wacc(net, keyset), config=cfg.to_dict())
    _write_json(os.path.join(out, f"embed_{name}.json"), info)
    print(f"{name}: CDA {info['cda']:.2f}%  WACC {info['wacc']:.2f}%"
          + (f"  sigma {info['final_sigma']:.4f}" if "final_sigma" in info else ""))


def cmd_measure(args, cfg, out):
    net = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    _, ks = _load_keyset(args, out)
    rep = measure_spec(net, ks, cfg.measure_config())
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    path = os.path.join(out, f"spec_{stem}.json")
    _write_json(path, rep.to_dict())
    state = "converged" if rep.converged else "not converged"
    print(f"Spec {rep.spec:.6f} ({state}, {rep.iterations} iterations, "
          f"beta_U {rep.beta_u:.4f}, per-sample converged {rep.converged_fraction:.2%})")


def cmd_attack(args, cfg, out):
    net = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    _, ks = _load_keyset(args, out)
    train, test = _data(args, cfg, out)
    attacker = split(train, cfg.attacker_fraction, cfg.seed_for("attacker"))[0]
    seed = cfg.seed_for("attack")
    if args.attack == "finetune":
        lr = args.param if args.param is not None else cfg.finetune_lrs[0]
        res = finetune_attack(net, attacker, lr, cfg.finetune_epochs, test, ks, seed=seed)
    elif args.attack == "fineprune":
        ratio = args.param if args.param is not None else cfg.prune_ratios[0]
        res = fineprune_attack(net, attacker, ratio, cfg.prune_epochs, test, ks,
                               lr=cfg.prune_lr, seed=seed)
    else:
        rc = ReverseConfig(beta=cfg.reverse_beta, steps=cfg.reverse_steps, lr=cfg.reverse_lr,
                           seed=seed)
        trig = reverse_engineer_trigger(net, attacker, ks.target, rc, holdout=test)
        save_trigger(trig, os.path.join(out, "trigger.sewtrig"))
        lr = args.param if args.param is not None else cfg.unlearn_lr
        res = unlearn_attack(net, attacker, trig, lr, cfg.unlearn_epochs, test, ks, seed=seed)
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    save_checkpoint(res.net, os.path.join(out, f"{stem}_{args.attack}.ckpt"))
    row = dict(res.row(), config=res.config)
    _write_json(os.path.join(out, f"{stem}_{args.attack}.json"), row)
    print(f"{args.attack}: CDA {res.cda_before:.2f} -> {res.cda_after:.2f}  "
          f"WACC {res.wacc_before:.2f} -> {res.wacc_after:.2f}")


def _progress(msg):
    print(f"  {msg}", file=sys.stderr, flush=True)


def cmd_report(args, cfg, out):
    if args.from_json:
        with open(_need(args.from_json, "report")) as fh:
            doc = json.load(fh)
    else:
        doc = run_experiment(cfg, progress=_progress).to_dict()
    paths = emit_report(doc, out)
    _summary(doc)
    for p in paths:
        print(f"wrote {p}")


def _summary(d):
    pre, post = d["models"]["pre"], d["models"]["post"]
    print(f"seed {d['seed']}: clean CDA {d['clean']['cda']:.2f} WACC {d['clean']['wacc']:.2f} | "
          f"pre CDA {pre['cda']:.2f} WACC {pre['wacc']:.2f} Spec {pre['spec']['spec']:.4f} | "
          f"post CDA {post['cda']:.2f} WACC {post['wacc']:.2f} Spec {post['spec']['spec']:.4f}")


def cmd_sweep(args, cfg, out, seeds):
    docs = []
    for seed in seeds:
        run_cfg = ExperimentConfig(**dict(cfg.to_dict(), seed=seed))
        doc = run_experiment(run_cfg, progress=_progress).to_dict()
        emit_report(doc, os.path.join(out, f"seed{seed}"))
        _summary(doc)
        docs.append(doc)
    summary = {"run_id": cfg.run_id, "seeds": list(seeds), "metrics": {}}
    for model in ("pre", "post"):
        for metric in ("cda", "wacc"):
            vals = [d["models"][model][metric] for d in docs]
            summary["metrics"][f"{model}_{metric}"] = _mean_std(vals)
        summary["metrics"][f"{model}_spec"] = _mean_std(
            [d["models"][model]["spec"]["spec"] for d in docs])
    cells = {}
    for d in docs:
        for r in d["attacks"]:
            cells.setdefault(f"{r['model']}:{r['attack']}:{r['param']!r}", []).append(r)
    summary["attacks"] = {k: {"cda_after": _mean_std([r["cda_after"] for r in v]),
                              "wacc_after": _mean_std([r["wacc_after"] for r in v])}
                          for k, v in cells.items()}
    _write_json(os.path.join(out, "sweep_summary.json"), summary)
    print(f"wrote {os.path.join(out, 'sweep_summary.json')}")


def _mean_std(vals):
    return {"mean": statistics.fmean(vals),
            "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0}


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "embed": cmd_embed,
            "measure": cmd_measure, "attack": cmd_attack, "report": cmd_report}


def dispatch(argv):
    parser = build_parser()
    argv = list(argv)
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0
        parser.print_usage(sys.stderr)
        print(f"sewlab: unknown command {argv[0]!r}" if argv else "sewlab: missing command",
              file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(_rewrite_sigma(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg, out, seeds = resolve(args)
        os.makedirs(out, exist_ok=True)
        if args.command == "sweep":
            cmd_sweep(args, cfg, out, seeds)
        else:
            HANDLERS[args.command](args, cfg, out)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"sewlab: config error: {p}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"sewlab: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"sewlab: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
