"""Command-line runner: one subcommand per workflow, configured by an INI file.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
``--set section.key=value`` overrides, then dedicated flags such as
``--seed`` or ``--budget``. Unknown sections or keys are rejected.

Every run writes into ``<out>/<YYYYmmdd-HHMMSS>-seed<seed>/`` and starts by
saving ``config.ini`` with the fully resolved configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric or data error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as C
from . import data as D
from . import diagnostics as G
from . import early_exit as X
from . import euler as E
from . import model as M
from . import numerics as nm
from . import search as S
from . import training as T
from .errors import ConfigError, DataError, DomainError, NumericError, SearchError, StateError

log = logging.getLogger("eulerformer")

SUBCOMMANDS = ("ode-verify", "pretrain", "finetune", "search", "infer",
               "exit-train", "exit-eval", "analyze")
EXIT_THRESHOLDS = "0,0.01,0.05,0.07,0.1,0.2,0.3,0.4,0.5"


def _dataclass_defaults(cls, skip=()):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name not in skip}


DEFAULTS = {
    "run": {"seed": 0, "out": "runs", "workers": 1},
    "data": {"corpus": "synthetic", "synthetic_chars": 100_000, "valid_fraction": 0.1,
             "eval_windows": 32},
    # vocab_size 0: take it from the corpus
    "model": {**_dataclass_defaults(M.ModelConfig), "vocab_size": 0},
    "train": _dataclass_defaults(T.TrainConfig, skip=("seed",)),
    "task": {"name": "brackets", "n_train": 2000, "n_valid": 500, "seq_len": 32},
    "search": {"iters": 6, "budget": 100, "random_fraction": 0.3},
    "exit": {"thresholds": EXIT_THRESHOLDS},
    "ode": {"field": "exp", "total_time": 1.0, "steps": "0.1,0.05,0.025"},
    "analyze": {"iters": "6,4"},
}


class UsageError(Exception):
    """Bad invocation or configuration; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"[{section}] {key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def resolve_config(path=None, overrides=()) -> dict:
    """Defaults, then the INI file, then ``section.key=value`` overrides."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config file {path}: {exc}") from None
        for sec in parser.sections():
            if sec not in cfg:
                raise UsageError(f"unknown config section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in cfg[sec]:
                    raise UsageError(f"unknown key {key!r} in [{sec}]")
                cfg[sec][key] = _coerce(sec, key, raw)
    for item in overrides:
        name, sep, raw = item.partition("=")
        sec, dot, key = name.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if sec not in cfg or key not in cfg[sec]:
            raise UsageError(f"unknown config key {name!r}")
        cfg[sec][key] = _coerce(sec, key, raw)
    return cfg


def write_config(cfg: dict, path: Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec, vals in cfg.items():
        parser[sec] = {k: str(v) for k, v in vals.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def make_run_dir(out, seed: int) -> Path:
    base = Path(out) / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    run, k = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{k}")
        k += 1
    run.mkdir(parents=True)
    return run


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} path {p} does not exist")
    return p


def load_corpus(cfg: dict) -> D.Corpus:
    src = cfg["data"]["corpus"]
    if src == "synthetic":
        text = D.synthetic_text(cfg["data"]["synthetic_chars"], 0)
        return D.Corpus.from_text(text, cfg["data"]["valid_fraction"])
    return D.Corpus.from_file(src, cfg["data"]["valid_fraction"])


def model_config(cfg: dict, vocab: int) -> M.ModelConfig:
    kw = dict(cfg["model"])
    kw["vocab_size"] = kw["vocab_size"] or vocab
    return M.ModelConfig(**kw)


def train_config(cfg: dict) -> T.TrainConfig:
    return T.TrainConfig(**cfg["train"], seed=cfg["run"]["seed"])


def task_sets(task: dict):
    name = task["name"]
    if name not in D.TASKS:
        raise UsageError(f"unknown task {name!r}; choose from {sorted(D.TASKS)}")
    make = D.TASKS[name]
    seq = task["seq_len"]
    # distinct data seeds for the two splits, fixed so every command sees the same sets
    return make(task["n_train"], seq_len=seq, seed=1), make(task["n_valid"], seq_len=seq, seed=2)


def eval_set_for(ckpt: C.Checkpoint, cfg: dict):
    """Validation set matching the checkpoint: task sets for fine-tuned models, corpus windows otherwise."""
    task = ckpt.provenance.get("task_config")
    if task is not None:
        return task_sets(task)[1], True
    corpus = load_corpus(cfg)
    if ckpt.corpus_id and corpus.id != ckpt.corpus_id:
        raise DataError(f"corpus id {corpus.id} does not match checkpoint corpus {ckpt.corpus_id}")
    seq = int(ckpt.train_config.get("seq_len", 32))
    return T.LMEvalSet.from_corpus(corpus, seq, cfg["data"]["eval_windows"],
                                   seed=cfg["run"]["seed"]), False


def read_schedule(path) -> E.StepSchedule:
    try:
        raw = json.loads(Path(path).read_text())
        return E.StepSchedule(raw["base_step"], raw["scales"], raw["total_time"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read schedule {path}: {exc}") from None


def write_schedule(sched: E.StepSchedule, path) -> None:
    Path(path).write_text(json.dumps({"base_step": sched.base_step, "scales": sched.scales,
                                      "total_time": sched.total_time}, indent=2) + "\n")


def pick_schedule(args, config: M.ModelConfig) -> E.StepSchedule:
    if getattr(args, "schedule", None):
        return read_schedule(_existing(args.schedule, "schedule"))
    if getattr(args, "iters", None):
        return S.uniform_schedule(S.SearchSpace(args.iters, config.total_time, config.s))
    return config.unit_schedule()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_ode_verify(args, cfg, run: Path) -> None:
    ode = cfg["ode"]
    T_end = ode["total_time"]
    fields = {"exp": lambda: E.exponential_growth(T_end),
              "sine": lambda: E.sine_forced(0.0, T_end)}
    if ode["field"] not in fields:
        raise UsageError(f"unknown field {ode['field']!r}; choose from {sorted(fields)}")
    field = fields[ode["field"]]()
    y0 = [1.0] if ode["field"] == "exp" else [0.0]
    steps = _floats(ode["steps"])
    glob, order = E.error_order_scan(field, y0, T_end, steps)
    loc, local_order = E.local_order_scan(field, y0, steps)
    with open(run / "ode_verify.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "local_error", "global_error", "fitted_order"])
        for (s, ge), (_, le) in zip(glob, loc):
            w.writerow([repr(s), repr(le), repr(ge), repr(order)])
    write_json(run / "summary.json", {"field": field.name, "global_order": order,
                                      "local_order": local_order})
    print(f"{field.name}: global order {order:.4f}, local order {local_order:.4f}")


def cmd_pretrain(args, cfg, run: Path) -> None:
    corpus = load_corpus(cfg)
    config = model_config(cfg, corpus.vocab_size)
    tc = train_config(cfg)
    tlog = T.TrainLog()
    ckpt = T.pretrain(config, corpus, tc, tlog)
    C.save(ckpt, run / "checkpoint")
    tlog.write_csv(run / "train_log.csv")
    ev = T.LMEvalSet.from_corpus(corpus, tc.seq_len, cfg["data"]["eval_windows"], seed=tc.seed)
    ppl = T.evaluate(ckpt, config.unit_schedule(), ev)
    write_json(run / "metrics.json", {"valid_perplexity": ppl,
                                      "final_train_loss": ckpt.provenance["final_train_loss"]})
    print(f"checkpoint {run / 'checkpoint'}  valid perplexity {ppl:.4f}")


def cmd_finetune(args, cfg, run: Path) -> None:
    ckpt = C.load(_existing(args.checkpoint, "checkpoint"))
    train, valid = task_sets(cfg["task"])
    tc = train_config(cfg)
    tlog = T.TrainLog()
    out, acc = T.finetune_classifier(ckpt, train, valid, tc, freeze_backbone=args.freeze_backbone,
                                     log=tlog)
    out.provenance["task_config"] = dict(cfg["task"])
    C.save(out, run / "checkpoint")
    tlog.write_csv(run / "train_log.csv")
    write_json(run / "metrics.json", {"valid_accuracy": acc})
    print(f"checkpoint {run / 'checkpoint'}  valid accuracy {acc:.4f}")


def cmd_search(args, cfg, run: Path) -> None:
    ckpt = C.load(_existing(args.checkpoint, "checkpoint"))
    ev, is_task = eval_set_for(ckpt, cfg)
    sc = cfg["search"]
    config = ckpt.config
    space = S.SearchSpace(sc["iters"], config.total_time, config.s)
    res = S.search_schedule(lambda sch: T.evaluate(ckpt, sch, ev), space, sc["budget"],
                            seed=cfg["run"]["seed"], maximize=is_task,
                            random_fraction=sc["random_fraction"], workers=cfg["run"]["workers"])
    res.write_audit(run / "search_audit.csv")
    write_schedule(res.schedule, run / "schedule.json")
    baseline = res.trials[0].metric
    full = T.evaluate(ckpt, config.unit_schedule(), ev)
    metric = "accuracy" if is_task else "perplexity"
    write_json(run / "metrics.json", {
        "metric": metric, "full_depth": full, "uniform": baseline, "searched": res.metric,
        "relative_change_percent": G.relative_change(res.metric, full),
        "scales": res.schedule.scales, "trials": len(res.trials)})
    print(f"{metric}: full {full:.4f}  uniform {baseline}  searched {res.metric:.4f}  "
          f"scales {res.schedule.scales}")


def cmd_infer(args, cfg, run: Path) -> None:
    ckpt = C.load(_existing(args.checkpoint, "checkpoint"))
    sched = pick_schedule(args, ckpt.config)
    ev, is_task = eval_set_for(ckpt, cfg)
    metric = T.evaluate(ckpt, sched, ev)
    name = "accuracy" if is_task else "perplexity"
    if is_task:
        preds = T.predict(ckpt, sched, ev.X)
        with open(run / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "prediction"])
            w.writerows(zip(range(len(preds)), ev.y.tolist(), preds.tolist()))
    write_schedule(sched, run / "schedule.json")
    write_json(run / "metrics.json", {name: metric, "scales": sched.scales})
    print(f"{name} {metric:.4f} with scales {sched.scales}")


def cmd_exit_train(args, cfg, run: Path) -> None:
    ckpt = C.load(_existing(args.checkpoint, "checkpoint"))
    task = ckpt.provenance.get("task_config")
    if task is None:
        raise UsageError("exit-train needs a checkpoint produced by finetune")
    sched = pick_schedule(args, ckpt.config)
    train, _ = task_sets(task)
    tlog = T.TrainLog()
    heads = X.train_exit_heads(ckpt, sched, train, train_config(cfg), tlog)
    heads.save(run / "exit_heads")
    tlog.write_csv(run / "train_log.csv")
    print(f"exit heads {run / 'exit_heads'} for scales {sched.scales}")


def cmd_exit_eval(args, cfg, run: Path) -> None:
    ckpt = C.load(_existing(args.checkpoint, "checkpoint"))
    heads = X.ExitHeads.load(_existing(args.heads, "heads"))
    task = ckpt.provenance.get("task_config")
    if task is None:
        raise UsageError("exit-eval needs a checkpoint produced by finetune")
    _, valid = task_sets(task)
    stats = X.sweep(ckpt, heads, _floats(cfg["exit"]["thresholds"]), valid)
    X.write_sweep_csv(run / "exit_sweep.csv", stats)
    for s in stats:
        print(f"threshold {s.threshold:<5g} avg iterations {s.avg_iterations:.3f}  "
              f"accuracy {s.accuracy:.4f}")


def cmd_analyze(args, cfg, run: Path) -> None:
    ckpt = C.load(_existing(args.checkpoint, "checkpoint"))
    config = ckpt.config
    ev, is_task = eval_set_for(ckpt, cfg)
    tokens = ev.X if is_task else ev.windows[:, :-1]
    with nm.no_grad():
        _, full = M.run_backbone(ckpt.bank, tokens, config.unit_schedule(), config)
        rows = []
        for iters in _ints(cfg["analyze"]["iters"]):
            sched = S.uniform_schedule(S.SearchSpace(iters, config.total_time, config.s))
            _, red = M.run_backbone(ckpt.bank, tokens, sched, config)
            rows.append((iters, G.hidden_diff(full, red)))
    profile = G.cosine_profile(full)
    G.write_cosine_csv(run / "cosine.csv", profile)
    G.write_diff_csv(run / "hidden_diff.csv", rows)
    print(f"mean consecutive-derivative cosine {profile.mean:.4f}")
    for iters, rep in rows:
        print(f"{iters} iterations: absolute {rep.absolute:.4g}  relative {rep.relative:.4g}")


COMMANDS = {
    "ode-verify": cmd_ode_verify, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "search": cmd_search, "infer": cmd_infer, "exit-train": cmd_exit_train,
    "exit-eval": cmd_exit_eval, "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file; sections " + ", ".join(f"[{s}]" for s in DEFAULTS))
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="overrides [run] out (parent of run directories)")
    common.add_argument("--workers", type=int, help="overrides [run] workers (concurrent search trials)")

    p = _Parser(prog="eulerformer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"eulerformer {__version__} (checkpoint format {C.FORMAT_VERSION}, "
                           f"exit-heads format {C.FORMAT_VERSION})")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_, *extra):
        sp = sub.add_parser(name, parents=[common], help=help_)
        for flag in extra:
            flag(sp)
        return sp

    ckpt = lambda sp: sp.add_argument("--checkpoint", help="checkpoint directory")  # noqa: E731
    sched = lambda sp: (sp.add_argument("--schedule", help="schedule JSON written by search"),  # noqa: E731
                        sp.add_argument("--iters", type=int, help="uniform schedule with this many iterations"))
    add("ode-verify", "Euler error-order scan on an analytic field")
    add("pretrain", "pre-train a language model")
    add("finetune", "fine-tune a classifier head on a synthetic task", ckpt,
        lambda sp: sp.add_argument("--freeze-backbone", action="store_true"))
    add("search", "search per-iteration step scales at a reduced iteration count", ckpt,
        lambda sp: sp.add_argument("--iters", type=int, help="overrides [search] iters"),
        lambda sp: sp.add_argument("--budget", type=int, help="overrides [search] budget"))
    add("infer", "evaluate a checkpoint under a schedule", ckpt, sched)
    add("exit-train", "train per-iteration exit heads on a fine-tuned checkpoint", ckpt, sched)
    add("exit-eval", "entropy-threshold sweep over trained exit heads", ckpt,
        lambda sp: sp.add_argument("--heads", help="exit-head directory from exit-train"))
    add("analyze", "cosine profile and hidden-state differences", ckpt)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("eulerformer: error: a subcommand is required: " + ", ".join(SUBCOMMANDS),
              file=sys.stderr)
        return 1
    try:
        overrides = list(args.set)
        for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("workers", "run.workers")):
            if getattr(args, flag) is not None:
                overrides.append(f"{key}={getattr(args, flag)}")
        if args.command == "search":
            for flag in ("iters", "budget"):
                if getattr(args, flag) is not None:
                    overrides.append(f"search.{flag}={getattr(args, flag)}")
        cfg = resolve_config(args.config, overrides)
        if cfg["run"]["workers"] < 1:
            raise UsageError("workers must be >= 1")
        for attr in ("checkpoint", "heads", "schedule"):
            if getattr(args, attr, None) is not None:
                _existing(getattr(args, attr), attr)
        if cfg["data"]["corpus"] != "synthetic":
            _existing(cfg["data"]["corpus"], "corpus")
        run = make_run_dir(cfg["run"]["out"], cfg["run"]["seed"])
        write_config(cfg, run / "config.ini")
        COMMANDS[args.command](args, cfg, run)
        print(f"run directory {run}")
        return 0
    except (UsageError, ConfigError, StateError) as exc:
        print(f"eulerformer {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, DataError, DomainError, SearchError, FloatingPointError) as exc:
        print(f"eulerformer {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
