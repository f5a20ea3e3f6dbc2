"""Command-line entry point.

Exit codes: 0 success, 1 pipeline errors (partial outputs written),
2 configuration errors.
"""

from __future__ import annotations

import argparse
import copy
import difflib
import json
import logging
import sys
from pathlib import Path

from .agents import PromptTemplates, Roles, TaskContext
from .bank import KnowledgeBank
from .data import check_known_shape, few_shot_split, load_multivariate, load_ucr_tsv
from .errors import AlignmentError, ConfigError, CorruptSnapshot, EmptyDataset, FormatError, InsufficientSamples, KbtscError
from .pipeline import ABLATIONS, Pipeline, RunConfig, RunDir, ablation_table, latest_snapshot, run_variant
from .plotting import ImageCache, PlotConfig, render_line_plot
from .vlm_client import RemoteClient, RemoteConfig, ScriptedClient, TranscriptLog

log = logging.getLogger("kbtsc")

DEFAULT_CONFIG = {
    "dataset": {
        "name": None,
        "description": "",
        "format": "ucr",
        "train": None,
        "test": None,
        "dir": None,
        "check_shape": False,
    },
    "split": {"k": 3, "seed": 0},
    "thresholds": {"tau_drop": None, "tau_promote": 5, "tau_remove": -2, "top_n": 3},
    "plot": PlotConfig().to_dict(),
    "client": {
        "kind": "scripted",
        "script": None,
        "base_url": RemoteConfig.base_url,
        "model": RemoteConfig.model,
        "api_key_env": RemoteConfig.api_key_env,
        "temperature": 0.2,
        "timeout_s": RemoteConfig.timeout_s,
        "r_net": 3,
        "r_schema": 2,
        "backoff_s": RemoteConfig.backoff_s,
        "max_output": {},
    },
    "run": {"out_dir": "run", "enrich_inter": False, "epochs": 1, "max_test": None, "prompt_dir": None},
}
PATH_KEYS = (("dataset", "train"), ("dataset", "test"), ("dataset", "dir"), ("client", "script"), ("run", "prompt_dir"))


def _merge(base: dict, override: dict, trail=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(trail + (key,))}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in ("max_output",):
            out[key] = _merge(base[key], value, trail + (key,))
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown override key {dotted}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown override key {dotted}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[keys[-1]] = value


def load_config(path, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    base_dir = Path.cwd()
    if path:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, doc)
        base_dir = path.parent
    for o in overrides:
        apply_override(cfg, o)
    for section, key in PATH_KEYS:
        value = cfg[section][key]
        if value and not Path(value).is_absolute():
            cfg[section][key] = str((base_dir / value).resolve())
    return cfg


def load_datasets(cfg: dict):
    d = cfg["dataset"]
    try:
        if d["format"] == "ucr":
            if not d["train"]:
                raise ConfigError("dataset.train is required")
            train = load_ucr_tsv(d["train"], d["name"], d["description"])
            test = load_ucr_tsv(d["test"], train.name, d["description"]) if d["test"] else None
        elif d["format"] == "multivariate":
            if not d["dir"] or not d["name"]:
                raise ConfigError("dataset.dir and dataset.name are required for multivariate data")
            train = load_multivariate(d["dir"], d["name"], d["description"], "TRAIN")
            test = load_multivariate(d["dir"], d["name"], d["description"], "TEST")
        else:
            raise ConfigError(f"unknown dataset.format {d['format']!r}")
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file missing: {exc}") from None
    if d["check_shape"]:
        check_known_shape(train, "TRAIN")
        if test is not None:
            check_known_shape(test, "TEST")
    return train, test


def make_client(cfg: dict, transcript: TranscriptLog):
    c = cfg["client"]
    if c["kind"] == "scripted":
        if not c["script"]:
            raise ConfigError("client.script is required for the scripted client")
        try:
            return ScriptedClient.from_jsonl(c["script"], transcript)
        except FileNotFoundError:
            raise ConfigError(f"script file {c['script']} not found") from None
    if c["kind"] == "remote":
        rc = RemoteConfig(
            base_url=c["base_url"],
            model=c["model"],
            api_key_env=c["api_key_env"],
            timeout_s=float(c["timeout_s"]),
            r_net=int(c["r_net"]),
            backoff_s=float(c["backoff_s"]),
        )
        return RemoteClient(rc, transcript)
    raise ConfigError(f"unknown client.kind {c['kind']!r}")


def build_pipeline(cfg: dict, out_dir) -> Pipeline:
    train_ds, test_ds = load_datasets(cfg)
    split = few_shot_split(train_ds, int(cfg["split"]["k"]), int(cfg["split"]["seed"]), test_ds)
    if cfg["run"]["max_test"] is not None:
        split = type(split)(split.train, split.val, split.test[: int(cfg["run"]["max_test"])], split.k, split.seed, split.label_set)
    t = cfg["thresholds"]
    try:
        run_cfg = RunConfig(
            k=int(cfg["split"]["k"]),
            seed=int(cfg["split"]["seed"]),
            tau_drop=t["tau_drop"],
            tau_promote=int(t["tau_promote"]),
            tau_remove=int(t["tau_remove"]),
            top_n=int(t["top_n"]),
            enrich_inter=bool(cfg["run"]["enrich_inter"]),
            epochs=int(cfg["run"]["epochs"]),
        )
        plot_cfg = PlotConfig.from_dict(cfg["plot"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    run_dir = RunDir(out_dir)
    safe = copy.deepcopy(cfg)
    run_dir.write_config(safe)
    client = make_client(cfg, TranscriptLog(run_dir.transcript))
    roles = Roles(
        client,
        templates=PromptTemplates(cfg["run"]["prompt_dir"]),
        plot_config=plot_cfg,
        images=ImageCache(run_dir.images),
        temperature=float(cfg["client"]["temperature"]),
        r_schema=int(cfg["client"]["r_schema"]),
        max_output=cfg["client"]["max_output"],
    )
    ctx = TaskContext.from_dataset(train_ds)
    return Pipeline(roles, ctx, split, run_cfg, run_dir)


def _load_bank(path) -> KnowledgeBank:
    path = Path(path)
    if path.is_dir():
        path = latest_snapshot(path)
    return KnowledgeBank.restore(path.read_text(encoding="utf-8"))


def _exit_for(metrics) -> int:
    return 1 if metrics is not None and metrics.role_failure_count else 0


# -- commands ---------------------------------------------------------------


def cmd_warmup(args, cfg):
    pipe = build_pipeline(cfg, args.out)
    bank = pipe.warmup()
    print(f"warmup: {len(bank)} bullets, {bank.token_count()} words -> {args.out}")
    return 1 if any(r.errors for r in pipe.records) else 0


def cmd_train(args, cfg):
    pipe = build_pipeline(cfg, args.out)
    if args.bank:
        bank = _load_bank(args.bank)
        pipe.resume_from(bank)
    else:
        bank = pipe.warmup()
    pipe.train(bank)
    print(f"train: {len(bank)} bullets after {len(pipe.records)} steps -> {args.out}")
    return 1 if any(r.errors for r in pipe.records) else 0


def cmd_test(args, cfg):
    if not args.bank:
        raise ConfigError("test needs --bank (a trained snapshot or run directory)")
    pipe = build_pipeline(cfg, args.out)
    bank = _load_bank(args.bank)
    pipe.resume_from(bank)
    metrics, _ = pipe.run_test(pipe.split.test, bank)
    print(f"test accuracy {metrics.accuracy:.4f} ({metrics.correct}/{metrics.n})")
    return _exit_for(metrics)


def cmd_run(args, cfg):
    pipe = build_pipeline(cfg, args.out)
    metrics, bank = pipe.run()
    print(f"run: accuracy {metrics.accuracy:.4f} ({metrics.correct}/{metrics.n}), bank {len(bank)} bullets -> {args.out}")
    return _exit_for(metrics)


def cmd_ablate(args, cfg):
    out = Path(args.out)
    results = {}
    for variant in ABLATIONS:
        slug = variant.replace("/", "").replace("&", "and").replace(" ", "_")
        results[variant] = run_variant(variant, lambda v, s=slug: build_pipeline(cfg, out / s))
    table = ablation_table(results)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    (out / "ablation.json").write_text(
        json.dumps({k: v.to_dict() for k, v in results.items()}, indent=1) + "\n", encoding="utf-8"
    )
    print(table, end="")
    return 1 if any(m.role_failure_count for m in results.values()) else 0


def cmd_inspect(args, cfg):
    bank = _load_bank(args.target)
    print(f"phase={bank.phase} next_id={bank.next_id} bullets={len(bank)} words={bank.token_count()}")
    for bid in sorted(bank.bullets):
        b = bank.bullets[bid]
        scope = ",".join(b.class_scope) if b.class_scope else "-"
        t = b.tags
        print(
            f"[{b.id:>4}] {b.section:<11} {b.tier:<9} score={b.score:>3} "
            f"h/x/n={t['helpful']}/{t['harmful']}/{t['neutral']} scope={scope} :: {b.content}"
        )
    rejected = [e for e in bank.op_log if not e["accepted"]]
    print(f"op_log: {len(bank.op_log)} entries, {len(rejected)} rejected")
    return 0


def cmd_replay(args, cfg):
    snap = KnowledgeBank.restore(
        (latest_snapshot(args.target) if Path(args.target).is_dir() else Path(args.target)).read_text(encoding="utf-8")
    )
    rebuilt = KnowledgeBank.replay(snap.op_log)
    if rebuilt.state() == snap.state():
        print("banks identical")
        return 0
    a = json.dumps(snap.state(), indent=1).splitlines()
    b = json.dumps(rebuilt.state(), indent=1).splitlines()
    print("\n".join(difflib.unified_diff(a, b, "snapshot", "replayed", lineterm="")))
    return 1


def cmd_plot(args, cfg):
    train, test = load_datasets(cfg)
    ds = train if args.split == "train" or test is None else test
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"index {args.index} out of range for {len(ds)} samples")
    png = render_line_plot(ds.samples[args.index], PlotConfig.from_dict(cfg["plot"]))
    Path(args.png).write_bytes(png)
    print(f"wrote {args.png} ({len(png)} bytes)")
    return 0


COMMANDS = {
    "warmup": cmd_warmup,
    "train": cmd_train,
    "test": cmd_test,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
    "replay": cmd_replay,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kbtsc", description="Knowledge-bank few-shot time-series classification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--client", choices=["scripted", "remote"])
        sp.add_argument("--script", help="scripted-client response file (JSON lines)")
        if out:
            sp.add_argument("--out", help="output run directory")

    for name in ("warmup", "run", "ablate"):
        common(sub.add_parser(name))
    for name in ("train", "test"):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--bank", help="bank snapshot (or run directory) to start from")
    for name in ("inspect", "replay"):
        sp = sub.add_parser(name)
        sp.add_argument("target", help="bank snapshot or run directory")
    sp = sub.add_parser("plot")
    common(sp, out=False)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--split", choices=["train", "test"], default="train")
    sp.add_argument("--out", dest="png", required=True, help="PNG file to write")
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command not in ("inspect", "replay"):
            overrides = list(args.set)
            if args.client:
                overrides.append(f"client.kind={args.client}")
            if args.script:
                overrides.append(f"client.script={json.dumps(str(Path(args.script).resolve()))}")
            cfg = load_config(args.config, overrides)
            if getattr(args, "out", None) is None and args.command != "plot":
                args.out = cfg["run"]["out_dir"]
        return COMMANDS[args.command](args, cfg)
    except (
        ConfigError,
        CorruptSnapshot,
        FileNotFoundError,
        FormatError,
        EmptyDataset,
        AlignmentError,
        InsufficientSamples,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KbtscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
