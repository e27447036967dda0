"""Command line front end.

Configuration comes from an optional ``key = value`` file with dotted keys
(``task.shots``, ``model.blocks``, ``run.leak`` ...) and from flags; flags win.
Every command echoes its resolved configuration to ``resolved.cfg`` in the
output directory. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .masking import (
    LayerMask,
    MaskArtifact,
    load_masks,
    mask_iou,
    save_masks,
    sparsity,
)
from .model import ModelConfig, layer_type, load_checkpoint, pretrain_surrogate, save_checkpoint
from .regularizer import ConfigError
from .training import (
    FewShotTask,
    RunConfig,
    TaskConfig,
    apply_artifact,
    delta_report,
    evaluate,
    evaluate_base_new,
    generate_synthetic_task,
    read_feature_file,
    run_mask_tuning,
    write_diagnostics,
    write_feature_file,
    write_metrics,
)

OUT_ENV = "MASKTUNE_OUT"
SECTIONS = {"task": TaskConfig, "model": ModelConfig, "run": RunConfig}
COMMAND_SECTIONS = {
    "gen": ("task",),
    "pretrain": ("model",),
    "tune": ("run",),
    "eval": (),
    "analyze": ("run",),
    "pack": (),
    "unpack": (),
}

log = logging.getLogger("masktune")


class UsageError(Exception):
    pass


# -- config ----------------------------------------------------------------------------

def _parse_value(kind, text, key):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None
    return text


def _field_kind(section, name):
    for f in fields(SECTIONS[section]):
        if f.name == name:
            return f.type
    raise UsageError(f"unknown config key {section}.{name}")


def parse_assignments(lines, origin="<flags>"):
    """``["a.b = 1", ...]`` into ``{"a.b": typed value}``; unknown keys raise."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise UsageError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(_field_kind(section, name), value, key)
    return out


def read_config_file(path):
    try:
        with open(path) as fh:
            return parse_assignments(fh.read().splitlines(), path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None


@dataclass
class CliConfig:
    command: str
    config_path: str = None
    overrides: dict = field(default_factory=dict)
    out: str = None
    verbosity: int = 0

    def resolved(self):
        """Merged values of the sections this command uses, file < flags."""
        values = read_config_file(self.config_path) if self.config_path else {}
        values.update(self.overrides)
        sections = {}
        for sec in COMMAND_SECTIONS[self.command]:
            kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(sec + ".")}
            try:
                sections[sec] = SECTIONS[sec](**kw)
            except (TypeError, ValueError) as exc:
                raise UsageError(str(exc)) from None
        return sections


def format_config(sections):
    lines = []
    for sec, obj in sections.items():
        for k, v in asdict(obj).items():
            lines.append(f"{sec}.{k} = {v!r}" if isinstance(v, float) else f"{sec}.{k} = {v}")
    return "\n".join(lines) + ("\n" if lines else "")


def _out_dir(args):
    out = args.out or os.path.join(os.environ.get(OUT_ENV, "masktune-out"), args.command)
    os.makedirs(out, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _write_json(path, record):
    _write(path, json.dumps(record, indent=2, sort_keys=True) + "\n")


def table(header, rows):
    """Right-aligned text table with a dashed rule under the header."""
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(cells[0]), "  ".join("-" * w for w in widths)] + [fmt(r) for r in cells[1:]]) + "\n"


# -- task files ------------------------------------------------------------------------

def _manifest_text(cfg, task):
    items = {
        "seed": cfg.seed,
        "classes": task.num_classes,
        "shots": task.shots,
        "base_classes": cfg.base_classes,
        "tokens": cfg.tokens,
        "width": cfg.width,
        "class_ids": ",".join(map(str, task.class_ids)),
        "base_split": ",".join(map(str, task.base_classes)),
        "new_split": ",".join(map(str, task.new_classes)),
    }
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                out[k] = v
    ints = lambda s: np.array([int(t) for t in s.split(",") if t], dtype=np.int64)
    return {
        "seed": int(out["seed"]), "classes": int(out["classes"]), "shots": int(out["shots"]),
        "base_classes": int(out["base_classes"]), "tokens": int(out["tokens"]),
        "width": int(out["width"]), "class_ids": ints(out["class_ids"]),
        "base_split": ints(out["base_split"]), "new_split": ints(out["new_split"]),
    }


def load_task_dir(path):
    """``(manifest, prototypes, base (x, y), FewShotTask)`` from a ``gen`` directory."""
    man = read_manifest(os.path.join(path, "manifest.txt"))
    shape = (man["tokens"], man["width"])

    def tokens(name):
        x, y, _ = read_feature_file(os.path.join(path, name))
        return x.reshape(len(y), *shape), y

    G, _, _ = read_feature_file(os.path.join(path, "prototypes.rmtf"))
    G = G / np.linalg.norm(G, axis=1, keepdims=True)
    base = tokens("base.rmtf")
    tr, te = tokens("train.rmtf"), tokens("test.rmtf")
    task = FewShotTask(tr[0], tr[1], te[0], te[1], man["class_ids"], man["shots"],
                       base_classes=man["base_split"], new_classes=man["new_split"])
    return man, G, base, task


def _split(task, split):
    if split == "all":
        return task
    if split == "base":
        return task.subset(task.base_classes)
    if split == "new":
        return task.subset(task.new_classes)
    raise UsageError(f"unknown split {split!r}")


# -- mask text format --------------------------------------------------------------------

def masks_to_text(artifact):
    lines = [f"policy = {artifact.policy}", f"seed = {artifact.seed}",
             f"config_hash = {artifact.config_hash}"]
    for rec in artifact.layers:
        shape = "x".join(map(str, rec.shape))
        lines.append(f"layer {rec.name} shape={shape} alpha={rec.alpha!r} granularity={rec.granularity}")
        bits = rec.bits.reshape(-1, rec.shape[-1]) if rec.shape else rec.bits.reshape(1, -1)
        lines.extend("".join(map(str, row)) for row in bits)
    return "\n".join(lines) + "\n"


def masks_from_text(text, origin="<text>"):
    lines = text.splitlines()
    head = {}
    i = 0
    while i < len(lines) and not lines[i].startswith("layer "):
        if lines[i].strip():
            k, _, v = lines[i].partition("=")
            head[k.strip()] = v.strip()
        i += 1
    layers = []
    while i < len(lines):
        parts = lines[i].split()
        try:
            attrs = dict(p.split("=", 1) for p in parts[2:])
            shape = tuple(int(s) for s in attrs["shape"].split("x"))
            rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            body = lines[i + 1:i + 1 + rows]
            bits = np.array([[int(c) for c in row] for row in body], dtype=np.uint8).reshape(shape)
        except (KeyError, ValueError, IndexError) as exc:
            raise UsageError(f"{origin}: malformed layer block at line {i + 1}") from exc
        if bits.max(initial=0) > 1:
            raise UsageError(f"{origin}: non-binary digit in layer {parts[1]}")
        layers.append(LayerMask(parts[1], shape, float(attrs["alpha"]), attrs["granularity"], bits))
        i += 1 + rows
    return MaskArtifact(layers, head.get("policy", ""), int(head.get("seed", 0)),
                        head.get("config_hash", "0" * 32))


# -- commands ------------------------------------------------------------------------------

def cmd_gen(args, sections, out):
    cfg = sections["task"]
    base, task = generate_synthetic_task(cfg)
    n_base = len(base.labels)
    write_feature_file(os.path.join(out, "base.rmtf"), base.tokens, base.labels, cfg.base_classes)
    write_feature_file(os.path.join(out, "train.rmtf"), task.train_x, task.train_y, task.num_classes)
    write_feature_file(os.path.join(out, "test.rmtf"), task.test_x, task.test_y, task.num_classes)
    write_feature_file(os.path.join(out, "prototypes.rmtf"), base.prototypes,
                       np.arange(cfg.base_classes), cfg.base_classes)
    _write(os.path.join(out, "manifest.txt"), _manifest_text(cfg, task))
    print(f"wrote {n_base} base and {len(task.train_y)}/{len(task.test_y)} train/test samples to {out}")


def cmd_pretrain(args, sections, out):
    cfg = sections["model"]
    man, G, (x, y), _ = load_task_dir(args.data)
    if cfg.d_in != man["width"]:
        raise UsageError(f"model.d_in={cfg.d_in} but task width is {man['width']}")
    model = pretrain_surrogate(cfg, G, x, y)
    path = os.path.join(out, "checkpoint.rmtw")
    save_checkpoint(model, path)
    acc, _ = evaluate(model, x, y, np.arange(len(G)))
    _write_json(os.path.join(out, "pretrain.json"), {"base_accuracy": acc, "tau": model.tau})
    print(f"base accuracy {acc:.2f}  tau {model.tau:.4f}  -> {path}")


def cmd_tune(args, sections, out):
    cfg = sections["run"]
    _, _, _, task = load_task_dir(args.data)
    model = load_checkpoint(args.checkpoint)
    report = run_mask_tuning(model, _split(task, args.split), cfg)
    save_masks(report.artifact, os.path.join(out, "masks.rmtm"))
    write_metrics(report, os.path.join(out, "metrics.txt"))
    if cfg.debug:
        write_diagnostics(report, os.path.join(out, "diagnostics.txt"))
    record = {
        "policy": report.artifact.policy,
        "split": args.split,
        "leak": cfg.leak if cfg.regularized else 0.0,
        "zero_shot_accuracy": report.zero_shot_accuracy,
        "accuracy": report.accuracy,
        "per_class_accuracy": [float(v) for v in report.per_class_accuracy],
        "sparsity": report.sparsity,
        "layer_sparsity": {r.name: 100.0 * r.zero_count / r.size for r in report.artifact.layers},
        "config_hash": report.artifact.config_hash,
        "epochs": [asdict(r) for r in report.epochs],
    }
    _write_json(os.path.join(out, "report.json"), record)
    print(f"zero-shot {report.zero_shot_accuracy:.2f}  tuned {report.accuracy:.2f}  "
          f"sparsity {report.sparsity:.3f}%  ({report.wall_clock:.1f}s)")


def cmd_eval(args, sections, out):
    _, _, _, task = load_task_dir(args.data)
    model = load_checkpoint(args.checkpoint)
    if args.masks:
        apply_artifact(model, load_masks(args.masks))
    if args.split == "base-new":
        b, n, h = evaluate_base_new(model, task)
        record = {"base": b, "new": n, "harmonic_mean": h}
        text = table(["base", "new", "H"], [[f"{b:.2f}", f"{n:.2f}", f"{h:.2f}"]])
    else:
        sub = _split(task, args.split)
        acc, per_class = evaluate(model, sub.test_x, sub.test_y, sub.class_ids)
        record = {"accuracy": acc, "per_class_accuracy": [float(v) for v in per_class]}
        rows = [[int(c), f"{v:.2f}"] for c, v in zip(sub.class_ids, per_class)]
        text = table(["class", "accuracy"], rows) + f"overall {acc:.2f}\n"
    record["masks"] = args.masks
    _write(os.path.join(out, "eval.txt"), text)
    _write_json(os.path.join(out, "eval.json"), record)
    sys.stdout.write(text)


def cmd_analyze(args, sections, out):
    if args.what == "delta":
        if not (args.data and args.checkpoint):
            raise UsageError("analyze delta needs --data and --checkpoint")
        _, _, _, task = load_task_dir(args.data)
        model = load_checkpoint(args.checkpoint)
        per_layer, groups = delta_report(model, _split(task, args.split), sections["run"])
        text = table(["layer", "type", "delta"],
                     [[n, layer_type(n), f"{v:.6e}"] for n, v in per_layer.items()])
        text += table(["group", "mean delta"], [[g, f"{v:.6e}"] for g, v in groups.items()])
        record = {"layers": per_layer, "groups": groups}
    elif args.what == "sparsity":
        if len(args.artifacts) != 1:
            raise UsageError("analyze sparsity takes one artifact")
        art = load_masks(args.artifacts[0])
        rows = [[r.name, r.size, r.zero_count, f"{100.0 * r.zero_count / r.size:.4f}"] for r in art.layers]
        total = sparsity(art)
        text = table(["layer", "size", "zeros", "sparsity%"], rows) + f"total {total:.6f}\n"
        record = {"layers": {r[0]: float(r[3]) for r in rows}, "total": total}
    else:
        if len(args.artifacts) != 2:
            raise UsageError("analyze iou takes two artifacts")
        iou = mask_iou(load_masks(args.artifacts[0]), load_masks(args.artifacts[1]))
        text = f"iou {iou:.3f}\n"
        record = {"iou": iou, "artifacts": args.artifacts}
    _write(os.path.join(out, f"{args.what}.txt"), text)
    _write_json(os.path.join(out, f"{args.what}.json"), record)
    sys.stdout.write(text)


def cmd_pack(args, sections, out):
    with open(args.input) as fh:
        art = masks_from_text(fh.read(), args.input)
    save_masks(art, args.output)
    print(f"packed {len(art.layers)} layers -> {args.output}")


def cmd_unpack(args, sections, out):
    _write(args.output, masks_to_text(load_masks(args.input)))
    print(f"unpacked -> {args.output}")


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "tune": cmd_tune, "eval": cmd_eval,
    "analyze": cmd_analyze, "pack": cmd_pack, "unpack": cmd_unpack,
}


# -- argument parsing ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="masktune", description="Regularized binary mask tuning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False, checkpoint=False):
        sp.add_argument("--config", help="key = value file with dotted keys")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if data:
            sp.add_argument("--data", required=True, help="directory written by gen")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    g = sub.add_parser("gen", help="write a synthetic task")
    common(g)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--classes", type=int)
    g.add_argument("--shots", type=int)

    pt = sub.add_parser("pretrain", help="pretrain the frozen surrogate encoder")
    common(pt, data=True)
    pt.add_argument("--seed", type=int)

    t = sub.add_parser("tune", help="learn binary masks")
    common(t, data=True, checkpoint=True)
    t.add_argument("--policy", choices=["amt", "mmt", "pmt", "dmt"])
    t.add_argument("--regularized", action="store_true", default=None)
    t.add_argument("--leak", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, help="sets run.init_seed, run.data_seed and run.gate_seed")
    t.add_argument("--split", choices=["all", "base"], default="all")

    e = sub.add_parser("eval", help="accuracy of a checkpoint with optional masks")
    common(e, data=True, checkpoint=True)
    e.add_argument("--masks")
    e.add_argument("--split", choices=["all", "base", "new", "base-new"], default="all")

    a = sub.add_parser("analyze", help="delta, sparsity or iou reports")
    common(a)
    a.add_argument("what", choices=["delta", "sparsity", "iou"])
    a.add_argument("artifacts", nargs="*")
    a.add_argument("--data")
    a.add_argument("--checkpoint")
    a.add_argument("--split", choices=["all", "base"], default="all")

    for name, helptext in (("pack", "text masks -> binary artifact"), ("unpack", "binary artifact -> text")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("input")
        sp.add_argument("output")
    return p


def _overrides(args):
    over = parse_assignments(args.set)
    flag = lambda key, value: value is not None and over.__setitem__(key, value)
    if args.command == "gen":
        flag("task.seed", args.seed)
        flag("task.classes", args.classes)
        flag("task.shots", args.shots)
    elif args.command == "pretrain":
        flag("model.init_seed", args.seed)
    elif args.command == "tune":
        flag("run.policy", args.policy)
        flag("run.regularized", args.regularized)
        flag("run.leak", args.leak)
        flag("run.epochs", args.epochs)
        for k in ("init_seed", "data_seed", "gate_seed"):
            flag(f"run.{k}", args.seed)
    return over


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cli = CliConfig(args.command, args.config, _overrides(args), args.out, args.verbose)
        sections = cli.resolved()
        out = _out_dir(args)
        _write(os.path.join(out, "resolved.cfg"), format_config(sections))
        t0 = time.perf_counter()
        COMMANDS[args.command](args, sections, out)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    except (UsageError, ConfigError) as exc:
        print(f"masktune {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic, not a traceback
        if args.verbose > 1:
            raise
        print(f"masktune {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
