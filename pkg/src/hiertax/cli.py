"""Command-line pipeline: ``hiertax <command> [options]``.

Exit status: 0 success, 1 usage or configuration error, 2 data or contract
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from contextlib import nullcontext
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from hiertax import __version__
from hiertax.data import (
    Dataset,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_provider,
    save_dataset,
    stratified_split,
)
from hiertax.errors import ConfigError, ContractViolation, DataError, DimensionError, DivergenceError
from hiertax.evaluation import MetricsReport, compare_models, evaluate
from hiertax.inference import STRATEGIES, default_strategy, predict, read_predictions, write_predictions
from hiertax.model import CascadeModel, ModelConfig, Variant
from hiertax.taxonomy import (
    LEVELS,
    CleanRules,
    Level,
    TaxonomyTree,
    build_tree,
    filter_min_samples,
    read_label_file,
)
from hiertax.training import Stage, TrainConfig, fit, progressive_chain

log = logging.getLogger("hiertax")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# outputs -----------------------------------------------------------------


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()[:16]


class Outputs:
    """Stage files under temporary names; rename them all only on success."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        self.staged: dict[Path, Path] = {}

    def path(self, name: str) -> Path:
        """Temporary path to write ``name`` to."""
        self.dir.mkdir(parents=True, exist_ok=True)
        final = self.dir / name
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", suffix=".tmp", dir=self.dir)
        os.close(fd)
        self.staged[final] = Path(tmp)
        return Path(tmp)

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text, encoding="utf-8")

    def commit(self) -> list[Path]:
        for final, tmp in self.staged.items():
            os.replace(tmp, final)
        done = list(self.staged)
        self.staged = {}
        return done

    def discard(self) -> None:
        for tmp in self.staged.values():
            tmp.unlink(missing_ok=True)
        self.staged = {}


def write_manifest(out: Outputs, command: str, config: dict, seed, inputs: list) -> None:
    """Manifest beside the outputs: no timestamps, so equal runs give equal manifests."""
    cfg_text = json.dumps(config, sort_keys=True, default=str)
    outputs = {
        final.name: file_checksum(tmp)
        for final, tmp in sorted(out.staged.items())
    }
    manifest = {
        "command": command,
        "config": config,
        "config_checksum": hashlib.sha256(cfg_text.encode()).hexdigest()[:16],
        "seed": seed,
        "inputs": {str(p): file_checksum(p) for p in inputs if p},
        "outputs": outputs,
        "version": __version__,
    }
    out.write_text(f"{command}.manifest.json", json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


# config merging ----------------------------------------------------------


def merged_options(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    opts = dict(defaults)
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except ValueError as exc:
            raise ConfigError(f"{args.config}: not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        unknown = sorted(set(cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {unknown}")
        opts.update(cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, "", [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def parse_levels(text) -> list[Level]:
    items = text.split(",") if isinstance(text, str) else list(text)
    try:
        return [Level.parse(t.strip() if isinstance(t, str) else t) for t in items if str(t).strip()]
    except (KeyError, ValueError):
        raise ConfigError(f"unknown level in {text!r}") from None


def load_tree(path) -> TaxonomyTree:
    try:
        return TaxonomyTree.load(path)
    except FileNotFoundError:
        raise DataError(f"taxonomy file not found: {path}") from None


def read_dataset(path, tree, provider=None):
    try:
        prov = load_provider(provider) if provider else None
        return load_dataset(path, tree, prov)
    except FileNotFoundError as exc:
        raise DataError(f"file not found: {exc.filename}") from None


TRAIN_KEYS = [f.name for f in fields(TrainConfig)]


def train_config(opts: dict) -> TrainConfig:
    kw = {k: opts[k] for k in TRAIN_KEYS if opts.get(k) is not None}
    try:
        return TrainConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def model_config(opts: dict) -> ModelConfig:
    return ModelConfig(
        adapter_dim=int(opts.get("adapter_dim") or 0),
        widths=dict(opts.get("widths") or {}),
        dropout=dict(opts.get("dropout") or {}),
    )


def split_parts(ds, val_path, tree, provider):
    """(train, val, test-or-None) from a split column or a separate validation file."""
    if val_path:
        val = read_dataset(val_path, tree, provider)
        return ds, val, None
    if not np.any(ds.splits == "train") or not np.any(ds.splits == "val"):
        raise DataError("data has no train/val split column; run data-split or pass --val")
    test = ds.split("test") if np.any(ds.splits == "test") else None
    return ds.split("train"), ds.split("val"), test


# commands ----------------------------------------------------------------


def cmd_taxonomy_build(args, out: Outputs) -> dict:
    defaults = {"labels": None, "merge": None, "uncertain_markers": None}
    opts = merged_options(args, defaults)
    require(opts, "labels")
    rules = CleanRules()
    if opts["merge"] is not None:
        merge = opts["merge"]
        if isinstance(merge, list):
            try:
                merge = dict(item.split("=", 1) for item in merge)
            except ValueError:
                raise ConfigError("--merge expects FROM=TO") from None
        rules = CleanRules(merge=merge, uncertain_markers=rules.uncertain_markers)
    if opts["uncertain_markers"] is not None:
        rules = CleanRules(merge=rules.merge, uncertain_markers=tuple(opts["uncertain_markers"]))
    try:
        records = read_label_file(opts["labels"])
    except FileNotFoundError:
        raise DataError(f"label file not found: {opts['labels']}") from None
    tree, report = build_tree(records, rules)
    out.write_text("taxonomy.json", tree.to_text())
    out.write_text("clean_report.json", json.dumps(report.to_dict(), indent=1) + "\n")
    print(f"taxonomy {tree.checksum}: counts {list(tree.counts)}; {report.retained} of {report.input_count} records kept")
    return {"config": opts, "inputs": [opts["labels"]]}


def cmd_taxonomy_inspect(args, out: Outputs) -> dict:
    tree = load_tree(args.taxonomy)
    lines = [f"checksum {tree.checksum}"]
    for lv in LEVELS:
        lines.append(f"{lv.label:<8} {tree.n(lv)}")
    if args.name:
        lv = Level.parse(args.level or "species")
        idx = tree.index_of(lv, args.name)
        if lv == Level.SPECIES:
            path = tree.ancestor_path(idx)
        else:
            path = tuple(tree.ancestor_at(lv, idx, k) for k in range(lv)) + (idx,)
        lines.append("path: " + " > ".join(n for n in tree.name_path(tuple(path) + (-1,) * (5 - len(path))) if n))
        if lv < Level.SPECIES:
            kids = [tree.names[lv + 1][c] for c in tree.children(lv, idx)]
            lines.append(f"children ({len(kids)}): " + ", ".join(kids))
    print("\n".join(lines))
    return {"config": {"taxonomy": args.taxonomy, "level": args.level, "name": args.name},
            "inputs": [args.taxonomy]}


def cmd_data_synth(args, out: Outputs) -> dict:
    spec_defaults = {f.name: getattr(SyntheticSpec(), f.name) for f in fields(SyntheticSpec)}
    defaults = {**spec_defaults, "split": True}
    opts = merged_options(args, defaults)
    if args.seed is not None:
        opts["seed"] = args.seed
    kw = {k: opts[k] for k in spec_defaults}
    for k in ("level_counts", "dispersion", "samples_per_species"):
        if kw[k] is not None:
            kw[k] = tuple(kw[k])
    if kw["children_per_node"] is not None:
        kw["children_per_node"] = tuple(tuple(r) for r in kw["children_per_node"])
    ds = generate_synthetic(SyntheticSpec(**kw))
    if opts["split"]:
        ds = stratified_split(ds, SplitSpec(seed=opts["seed"]))
    out.write_text("taxonomy.json", ds.tree.to_text())
    save_dataset(ds, out.path("data.csv"))
    print(f"{len(ds)} records, dim {ds.dim}, taxonomy {ds.tree.checksum}")
    return {"config": opts, "inputs": [], "seed": opts["seed"]}


def cmd_data_filter(args, out: Outputs) -> dict:
    defaults = {"data": None, "taxonomy": None, "provider": None, "threshold": 10,
                "levels": "order,family,genus,species"}
    opts = merged_options(args, defaults)
    require(opts, "data", "taxonomy")
    tree = load_tree(opts["taxonomy"])
    ds = read_dataset(opts["data"], tree, opts["provider"])
    threshold = opts["threshold"]
    if isinstance(threshold, dict):
        levels = list(threshold)
    else:
        levels = parse_levels(opts["levels"])
    filtered, report = filter_min_samples(ds, threshold, levels)
    out.write_text("taxonomy.json", filtered.tree.to_text())
    save_dataset(filtered, out.path("data.csv"))
    out.write_text("filter_report.json", json.dumps(report, indent=1) + "\n")
    print(f"kept {report['retained']} of {len(ds)} records after {report['passes']} pass(es)")
    return {"config": opts, "inputs": [opts["data"], opts["taxonomy"], opts["provider"]]}


def cmd_data_split(args, out: Outputs) -> dict:
    defaults = {"data": None, "taxonomy": None, "provider": None, "fractions": [0.7, 0.15, 0.15],
                "stratify_level": "species", "seed": 42}
    opts = merged_options(args, defaults)
    require(opts, "data", "taxonomy")
    tree = load_tree(opts["taxonomy"])
    ds = read_dataset(opts["data"], tree, opts["provider"])
    spec = SplitSpec(tuple(opts["fractions"]), Level.parse(opts["stratify_level"]), int(opts["seed"]))
    ds = stratified_split(ds, spec)
    save_dataset(ds, out.path("data.csv"), with_split=True)
    counts = {s: int(np.sum(ds.splits == s)) for s in ("train", "val", "test")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return {"config": opts, "inputs": [opts["data"], opts["taxonomy"], opts["provider"]], "seed": opts["seed"]}


def _train_defaults() -> dict:
    base = asdict(TrainConfig())
    return {"variant": None, "data": None, "val": None, "taxonomy": None, "provider": None,
            **base, "adapter_dim": 0, "widths": None, "dropout": None}


def cmd_train(args, out: Outputs) -> dict:
    opts = merged_options(args, _train_defaults())
    if args.seed is not None:
        opts["seed"] = args.seed
    require(opts, "variant", "data", "taxonomy")
    variant = Variant.parse(opts["variant"])
    tree = load_tree(opts["taxonomy"])
    ds = read_dataset(opts["data"], tree, opts["provider"])
    train, val, test = split_parts(ds, opts["val"], tree, opts["provider"])
    config = train_config(opts)
    model = CascadeModel.for_tree(variant, tree, ds.dim, config=model_config(opts), seed=config.seed)
    rows = []
    result = fit(model, train, val, config, on_epoch=lambda e: rows.append(e.row()))
    model.save(out.path("model.npz"), {"train_config": config.to_dict(), "train_config_checksum": config.checksum})
    out.write_text("epochs.csv", _csv(rows))
    summary = {"best_epoch": result.best_epoch, "best_metric": result.best_metric,
               "epochs_run": len(result.logs), "stopped_early": result.stopped_early}
    out.write_text("train_summary.json", json.dumps(summary, indent=1) + "\n")
    print(f"{variant.value}: best epoch {result.best_epoch}, monitored F1 {result.best_metric:.4f}")
    return {"config": opts, "inputs": [opts["data"], opts["val"], opts["taxonomy"], opts["provider"]],
            "seed": config.seed}


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"


def cmd_train_progressive(args, out: Outputs) -> dict:
    defaults = {k: v for k, v in _train_defaults().items() if k not in ("variant", "data", "val")}
    defaults["stages"] = None
    opts = merged_options(args, defaults)
    if args.seed is not None:
        opts["seed"] = args.seed
    require(opts, "stages", "taxonomy")
    tree = load_tree(opts["taxonomy"])
    stages, inputs = [], [opts["taxonomy"], opts["provider"]]
    for item in opts["stages"]:
        if isinstance(item, str):
            if ":" not in item:
                raise ConfigError(f"stage {item!r} must look like VARIANT:DATA_PATH")
            variant, path = item.split(":", 1)
        else:
            variant, path = item["variant"], item["data"]
        ds = read_dataset(path, tree, opts["provider"])
        # each stage trains on its own (possibly re-filtered) label space
        ds = ds.rebased()
        train, val, test = split_parts(ds, None, ds.tree, None)
        stages.append(Stage(variant, train, val, test))
        inputs.append(path)
    config = train_config(opts)
    results = progressive_chain(stages, config, model_config(opts))
    summary = []
    for i, res in enumerate(results):
        name = f"stage{i + 1}-{res.variant}"
        res.model.save(out.path(f"{name}.npz"), {"train_config": config.to_dict()})
        out.write_text(f"{name}.taxonomy.json", stages[i].train.tree.to_text())
        out.write_text(f"{name}.epochs.csv", _csv([e.row() for e in res.fit.logs]))
        summary.append({"stage": name, "transferred": res.transferred, "best_epoch": res.fit.best_epoch,
                        "best_metric": res.fit.best_metric, "test_metrics": res.test_metrics})
        print(f"{name}: transferred {len(res.transferred)} layer(s), monitored F1 {res.fit.best_metric:.4f}")
    out.write_text("progressive_summary.json", json.dumps(summary, indent=1) + "\n")
    return {"config": opts, "inputs": inputs, "seed": config.seed}


def cmd_infer(args, out: Outputs) -> dict:
    defaults = {"model": None, "data": None, "taxonomy": None, "provider": None, "split": None,
                "strategy": None, "beam_width": 3, "feed_masked": False}
    opts = merged_options(args, defaults)
    require(opts, "model", "data", "taxonomy")
    tree = load_tree(opts["taxonomy"])
    model = CascadeModel.load(opts["model"], tree)
    ds = read_dataset(opts["data"], tree, opts["provider"])
    if opts["split"]:
        ds = ds.split(opts["split"])
        if len(ds) == 0:
            raise DataError(f"no records in split {opts['split']!r}")
    strategy = opts["strategy"] or default_strategy(model)
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    kw = {"feed_masked": bool(opts["feed_masked"])} if strategy == "levelwise" else {}
    preds = predict(model, tree, ds.features, strategy, int(opts["beam_width"]), **kw)
    write_predictions(out.path("predictions.csv"), ds.ids, preds, tree)
    print(f"{len(ds)} predictions ({strategy}); {int((~preds.path_valid).sum())} invalid paths")
    return {"config": opts, "inputs": [opts["model"], opts["data"], opts["taxonomy"], opts["provider"]]}


def cmd_eval(args, out: Outputs) -> dict:
    defaults = {"pred": None, "truth": None, "taxonomy": None, "provider": None, "baseline": None,
                "name": "", "split": None}
    opts = merged_options(args, defaults)
    require(opts, "pred", "truth", "taxonomy")
    tree = load_tree(opts["taxonomy"])
    try:
        ids, labels, strategy = read_predictions(opts["pred"])
    except FileNotFoundError:
        raise DataError(f"prediction file not found: {opts['pred']}") from None
    truth = _read_truth(opts["truth"], tree, opts["provider"])
    if opts["split"]:
        truth = truth.split(opts["split"])
    index = {sid: i for i, sid in enumerate(truth.ids)}
    missing = [sid for sid in ids if sid not in index]
    if missing:
        raise DataError(f"{len(missing)} predicted ids not in the truth file, e.g. {missing[0]!r}")
    true = truth.labels[[index[s] for s in ids]]
    levels = [lv for lv in LEVELS if np.all(labels[:, lv] >= 0)]
    if not levels:
        raise DataError("predictions define no complete level")
    baseline = None
    if opts["baseline"]:
        base = MetricsReport.load(opts["baseline"])
        if base.taxonomy_checksum != tree.checksum:
            raise DataError("baseline report was computed on a different taxonomy")
        baseline = base.distance
    report = evaluate(tree, labels, true, levels, opts["name"], strategy, baseline)
    out.write_text("metrics.json", report.to_json())
    d = report.distance
    tail = "" if d is None or d.mean_errors is None else f"; mean error distance {d.mean_errors:.3f}"
    if d is not None and d.severity_reduction is not None:
        tail += f"; severity reduction {100 * d.severity_reduction:.1f}%"
    deepest = levels[-1].label
    print(f"{deepest} accuracy {report.metrics[deepest]['accuracy']:.4f}{tail}")
    return {"config": opts, "inputs": [opts["pred"], opts["truth"], opts["taxonomy"], opts["baseline"]]}


def _read_truth(path, tree, provider):
    """Truth labels from a dataset file; feature columns are not needed."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"truth file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        need = ["id", *[lv.label for lv in LEVELS]]
        if not reader.fieldnames or any(c not in reader.fieldnames for c in need):
            raise DataError(f"{path}: header must contain {', '.join(need)}")
        ids, labels, splits = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                labels.append([tree.index_of(lv, row[lv.label]) for lv in LEVELS])
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            ids.append(row["id"])
            splits.append(row.get("split") or "unassigned")
    return Dataset(tree, ids, np.zeros((len(ids), 0)), np.array(labels), np.array(splits, dtype=object))


def cmd_compare(args, out: Outputs) -> dict:
    reports = [MetricsReport.load(p) for p in args.reports]
    for rep, path in zip(reports, args.reports):
        if not rep.model:
            rep.model = Path(path).stem
    cmp = compare_models(reports)
    out.write_text("comparison.csv", cmp.to_csv())
    out.write_text("comparison.txt", cmp.summary + "\n")
    print(cmp.summary)
    return {"config": {"reports": args.reports}, "inputs": list(args.reports)}


COMMANDS = {
    "taxonomy-build": cmd_taxonomy_build,
    "taxonomy-inspect": cmd_taxonomy_inspect,
    "data-synth": cmd_data_synth,
    "data-filter": cmd_data_filter,
    "data-split": cmd_data_split,
    "train": cmd_train,
    "train-progressive": cmd_train_progressive,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


# argument parsing --------------------------------------------------------


def _json(text: str):
    try:
        return json.loads(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not valid JSON: {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    common.add_argument("--out-dir", default=".", help="directory for outputs and the manifest")
    common.add_argument("--config", default=None, help="JSON file of option values; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hiertax", description="Hierarchy-aware classification over a five-level taxonomy.")
    p.add_argument("--version", action="version", version=f"hiertax {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("taxonomy-build", parents=[common], help="clean labels and build the tree")
    s.add_argument("--labels", help="CSV with class,order,family,genus,species columns")
    s.add_argument("--merge", action="append", metavar="FROM=TO", help="class merge rule (repeatable)")
    s.add_argument("--uncertain-marker", dest="uncertain_markers", action="append", metavar="TEXT")

    s = sub.add_parser("taxonomy-inspect", parents=[common], help="print counts or one taxon's path")
    s.add_argument("--taxonomy", required=True)
    s.add_argument("--level", default=None)
    s.add_argument("--name", default=None)

    s = sub.add_parser("data-synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--level-counts", type=_ints)
    s.add_argument("--dim", type=int)
    s.add_argument("--dispersion", type=_floats)
    s.add_argument("--noise", type=float)
    s.add_argument("--samples-per-species", type=_ints)
    s.add_argument("--no-split", dest="split", action="store_false", default=None)

    s = sub.add_parser("data-filter", parents=[common], help="drop taxa below a sample threshold")
    s.add_argument("--data")
    s.add_argument("--taxonomy")
    s.add_argument("--provider")
    s.add_argument("--threshold", type=int)
    s.add_argument("--levels", help="comma-separated levels (default order,family,genus,species)")

    s = sub.add_parser("data-split", parents=[common], help="stratified train/val/test split")
    s.add_argument("--data")
    s.add_argument("--taxonomy")
    s.add_argument("--provider")
    s.add_argument("--fractions", type=_floats)
    s.add_argument("--stratify-level")

    def training_flags(s):
        s.add_argument("--taxonomy")
        s.add_argument("--provider")
        s.add_argument("--lr", type=float)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--epochs", dest="max_epochs", type=int)
        s.add_argument("--early-stop-patience", type=int)
        s.add_argument("--scheduler-patience", type=int)
        s.add_argument("--adapter-dim", type=int)
        s.add_argument("--widths", type=_json, help='JSON, e.g. {"2L": [64]}')

    s = sub.add_parser("train", parents=[common], help="train one model variant")
    s.add_argument("--variant", choices=[v.value for v in Variant])
    s.add_argument("--data", help="dataset with a split column (or the training rows with --val)")
    s.add_argument("--val")
    s.add_argument("--loss-weights", type=_floats)
    training_flags(s)

    s = sub.add_parser("train-progressive", parents=[common], help="warm-started chain of variants")
    s.add_argument("--stage", dest="stages", action="append", metavar="VARIANT:DATA")
    training_flags(s)

    s = sub.add_parser("infer", parents=[common], help="decode predictions")
    s.add_argument("--model")
    s.add_argument("--data")
    s.add_argument("--taxonomy")
    s.add_argument("--provider")
    s.add_argument("--split")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--beam-width", type=int)
    s.add_argument("--feed-masked", action="store_true", default=None,
                   help="level-wise: feed ancestors masked under the predicted parent")

    s = sub.add_parser("eval", parents=[common], help="score predictions against truth")
    s.add_argument("--pred")
    s.add_argument("--truth")
    s.add_argument("--taxonomy")
    s.add_argument("--baseline", help="metrics.json of the baseline model")
    s.add_argument("--name", help="model tag stored in the report")
    s.add_argument("--split")

    s = sub.add_parser("compare", parents=[common], help="side-by-side table of metrics reports")
    s.add_argument("reports", nargs="+")
    return p


def _threads(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: list[str] | None = None) -> int:
    out = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = Outputs(args.out_dir)
        with _threads(args.threads):
            info = COMMANDS[args.command](args, out)
        write_manifest(out, args.command, info["config"], info.get("seed", args.seed), info["inputs"])
        out.commit()
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        _fail(out, exc)
        return 1
    except DivergenceError as exc:
        _fail(out, exc)
        return 3
    except (DataError, ContractViolation, DimensionError, KeyError, IndexError) as exc:
        _fail(out, exc)
        return 2
    except OSError as exc:
        _fail(out, exc)
        return 2


def _fail(out: Outputs | None, exc: Exception) -> None:
    if out is not None:
        out.discard()
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
    print(f"hiertax: error: {msg}", file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
