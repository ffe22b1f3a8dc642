"""Command-line pipeline: ``train-fp -> search -> finetune -> eval`` plus ``attribution-report``.

Every subcommand takes ``--config PATH`` and any number of ``--set key=value``
overrides.  Exit status is 0 on success, 1 on usage errors and 2 on runtime
errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .artifacts import (
    ATTRIBUTION_COLUMNS,
    provenance,
    write_csv,
    write_json,
    write_metrics,
    write_provenance,
)
from .config import ConfigError, RunConfig, load_config, version_string
from .data import CIFAR_MEAN, CIFAR_STD, Dataset, generate_synthetic, load_cifar_binary, load_raw_tensor
from .model import build_model, load_checkpoint, parse_layers, save_checkpoint, train_fp_reference
from .quant import QuantPolicy
from .search import SearchConfig, evaluate, finetune, lr_at, policy_capacity_p, run_search

log = logging.getLogger("mpqsearch")

COMMANDS = ("train-fp", "search", "finetune", "eval", "attribution-report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpqsearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def load_role(cfg: RunConfig, role: str) -> Dataset:
    d = cfg.section(f"data.{role}")
    fmt = d["format"]
    if fmt == "synthetic":
        return generate_synthetic(d["classes"], d["n"], d["shape"], d["seed"], d["noise"], d["amplitude"], name=f"{role}-synthetic-{d['seed']}")
    if fmt == "cifar-binary":
        mean = d["mean"] or CIFAR_MEAN
        std = d["std"] or CIFAR_STD
        keep = d["labels"] or None
        ds = load_cifar_binary(d["path"], 10, mean, std, keep)
        if d["classes"] != ds.classes:
            raise ValueError(f"data.{role}.classes = {d['classes']} but the file yields {ds.classes} classes")
        return ds
    if fmt == "raw-tensor":
        ds = load_raw_tensor(d["path"], d["mean"] or None, d["std"] or None)
        if tuple(ds.shape) != tuple(d["shape"]):
            raise ValueError(f"data.{role}.shape = {d['shape']} but the file holds {ds.shape}")
        return ds
    raise ConfigError(f"data.{role}.format must be synthetic, cifar-binary or raw-tensor, got {fmt!r}")


def deploy_split(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Deterministic train/test split of the deployment data (test = trailing fraction)."""
    ds = load_role(cfg, "deploy")
    n_test = int(round(cfg["data.deploy.test_fraction"] * len(ds)))
    n_test = min(max(n_test, 1), len(ds) - 1)
    cut = len(ds) - n_test
    return ds.subset(np.arange(cut), ds.name + "-train"), ds.subset(np.arange(cut, len(ds)), ds.name + "-test")


def search_config(cfg: RunConfig) -> SearchConfig:
    s = cfg.section("search")
    return SearchConfig(seed=cfg["run.seed"], act_max=cfg["model.act_max"], **s)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run `{hint}` first")
    return path


def cmd_train_fp(cfg: RunConfig, prov: dict) -> None:
    out = cfg.output_dir
    seed = cfg["run.seed"]
    rows = []
    for role, ds in (("search", load_role(cfg, "search")), ("deploy", deploy_split(cfg)[0])):
        specs = parse_layers(cfg["model.layers"], ds.classes)
        params = build_model(specs, ds.shape, ds.classes, seed)
        params, trace = train_fp_reference(params, ds, cfg["fp.epochs"], cfg["fp.lr"], seed, cfg["fp.batch_size"])
        params.meta = {"role": role, "dataset": ds.name}
        path = out / f"fp_{role}.ckpt"
        save_checkpoint(params, path)
        write_provenance(path, prov)
        rows += [{"role": role, "epoch": e, "loss": loss} for e, loss in enumerate(trace)]
        log.info("trained %s reference on %s (%d samples)", role, ds.name, len(ds))
    write_csv(out / "fp_train.csv", ("role", "epoch", "loss"), rows)
    write_provenance(out / "fp_train.csv", prov)


def cmd_search(cfg: RunConfig, prov: dict) -> None:
    out = cfg.output_dir
    ref = load_checkpoint(_require(out / "fp_search.ckpt", "train-fp"))
    ds = load_role(cfg, "search")
    result = run_search(search_config(cfg), ds, ref, dataset_id=ds.name)
    policy = result.policy
    policy.meta["provenance"] = {k: prov[k] for k in ("config_hash", "seed", "version")}
    policy.save(out / "policy.json")
    write_metrics(out / "metrics.csv", result.trace)
    for name in ("policy.json", "metrics.csv"):
        write_provenance(out / name, prov)
    if result.trace:
        plotting.plot_risk_trace(result.trace, out / "metrics.png")
    log.info("policy %s, BOPs %.4g%s", policy.pairs(), result.bops, " (over budget)" if result.budget_exceeded else "")


def cmd_finetune(cfg: RunConfig, prov: dict) -> None:
    out = cfg.output_dir
    policy = QuantPolicy.load(_require(out / "policy.json", "search"))
    train, _ = deploy_split(cfg)
    seed = cfg["run.seed"]
    if cfg["finetune.init"] == "fp":
        init = load_checkpoint(_require(out / "fp_deploy.ckpt", "train-fp"))
    elif cfg["finetune.init"] == "scratch":
        init = build_model(parse_layers(cfg["model.layers"], train.classes), train.shape, train.classes, seed)
    else:
        raise ConfigError(f"finetune.init must be 'fp' or 'scratch', got {cfg['finetune.init']!r}")
    epochs, lr = cfg["finetune.epochs"], cfg["finetune.lr"]
    params, acc = finetune(policy, train, epochs, lr, seed, init, cfg["model.act_max"], cfg["finetune.batch_size"])
    params.meta = {"role": "finetuned", "dataset": train.name}
    save_checkpoint(params, out / "finetuned.ckpt")
    rows = [{"epoch": e, "lr": lr_at(e - 1, epochs, lr) if e else 0.0, "accuracy": a} for e, a in enumerate(acc)]
    write_csv(out / "finetune.csv", ("epoch", "lr", "accuracy"), rows)
    plotting.plot_accuracy_trace(acc, out / "finetune.png")
    for name in ("finetuned.ckpt", "finetune.csv"):
        write_provenance(out / name, prov)


def _deployed(cfg: RunConfig):
    out = cfg.output_dir
    policy = QuantPolicy.load(_require(out / "policy.json", "search"))
    params = load_checkpoint(_require(out / "finetuned.ckpt", "finetune"))
    ref = load_checkpoint(_require(out / "fp_deploy.ckpt", "train-fp"))
    _, test = deploy_split(cfg)
    return policy, params, ref, test


def cmd_eval(cfg: RunConfig, prov: dict) -> None:
    out = cfg.output_dir
    policy, params, ref, test = _deployed(cfg)
    act = cfg["model.act_max"]
    res = evaluate(params, policy, test, ref, cfg["eval.topk"], act)
    fp = evaluate(ref, None, test, ref, cfg["eval.topk"], act)
    doc = dict(res.summary(), fp_accuracy=fp.accuracy, fp_bops=fp.bops, dataset=test.name, samples=len(test), topk=cfg["eval.topk"])
    write_json(out / "eval.json", doc)
    write_provenance(out / "eval.json", prov)
    log.info("accuracy %.4f (fp %.4f), mean ARD %.4f, BOPs %.4g", res.accuracy, fp.accuracy, res.mean_ard, res.bops)


def cmd_attribution_report(cfg: RunConfig, prov: dict) -> None:
    out = cfg.output_dir
    policy, params, ref, test = _deployed(cfg)
    res = evaluate(params, policy, test, ref, cfg["eval.topk"], cfg["model.act_max"])
    p_used = policy_capacity_p(policy, search_config(cfg))
    rows = [
        {
            "sample_id": i,
            "label": int(test.labels[i]),
            "ard": float(res.ards[i]),
            "max_attr_fp": float(res.maps_f[i].max()),
            "max_attr_q": float(res.maps_q[i].max()),
            "p_used": p_used,
        }
        for i in range(len(test))
    ]
    write_csv(out / "attribution.csv", ATTRIBUTION_COLUMNS, rows)
    write_provenance(out / "attribution.csv", prov)
    n = min(cfg["report.samples"], len(test))
    if n:
        plotting.plot_attribution_grid(res.maps_f[:n], res.maps_q[:n], test.labels[:n], res.ards[:n], out / "attribution.png")


HANDLERS = {
    "train-fp": cmd_train_fp,
    "search": cmd_search,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "attribution-report": cmd_attribution_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(COMMANDS)}")
        cfg = load_config(args.config, args.overrides)
    except (UsageError, ConfigError) as exc:
        print(f"mpqsearch: usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, provenance(args.command, cfg, version_string()))
    except ConfigError as exc:
        print(f"mpqsearch: usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"mpqsearch: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
