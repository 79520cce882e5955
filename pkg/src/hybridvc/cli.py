"""Command-line pipeline: synth -> train (per model) -> fuse -> eval, plus verify.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 verification failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from . import ensemble, features, fusion, lstm, metrics, verify

EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 1, 2, 3
MODELS = ("lstm-spatial", "lstm-motion", "fusion")


class ConfigError(features.DataError):
    pass


class VerificationFailed(Exception):
    pass


# -- run configs -------------------------------------------------------------

TRAIN_KEYS = {"train_manifest", "test_manifest", "val_manifest", "seed"}
SYNTH_EXTRA = {"val_fraction"}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for key in ("train_manifest", "test_manifest", "val_manifest"):
        if doc.get(key):
            doc[key] = str((path.parent / doc[key]).resolve())
    return doc


def _reject_unknown(doc: dict, allowed: set[str], what: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {', '.join(unknown)}")


def model_config(model: str, doc: dict):
    """Split a resolved train config into the model's hyperparameter object."""
    cls = fusion.FusionHyper if model == "fusion" else lstm.LstmTrainConfig
    names = _field_names(cls)
    _reject_unknown(doc, TRAIN_KEYS | names, model)
    kwargs = {k: v for k, v in doc.items() if k in names}
    if "hidden_sizes" in kwargs:
        kwargs["hidden_sizes"] = tuple(int(h) for h in kwargs["hidden_sizes"])
    try:
        cfg = cls(**kwargs)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {model} config: {exc}") from None
    return cfg


def _resolved(doc: dict, cfg) -> dict:
    out = {k: doc[k] for k in sorted(TRAIN_KEYS) if doc.get(k) is not None}
    for k, v in dataclasses.asdict(cfg).items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Hybrid LSTM / regularized-fusion video classification toolkit."""


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output directory (created).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON file of SynthSpec fields.")
@click.option("--seed", type=int, help="Overrides the config seed.")
@click.option("--classes", type=int)
@click.option("--train-per-class", type=int)
@click.option("--test-per-class", type=int)
@click.option("--t-min", type=int)
@click.option("--t-max", type=int)
@click.option("--d-s", type=int)
@click.option("--d-m", type=int)
@click.option("--temporal/--no-temporal", default=None)
@click.option("--correlation/--no-correlation", default=None)
@click.option("--noise", type=float)
@click.option("--nuisance", type=float)
@click.option("--dropout", type=float)
@click.option("--segments", type=int)
@click.option("--shared-dims", type=int)
@click.option("--unique-dims", type=int)
@click.option("--signal", type=float)
@click.option("--val-fraction", type=float, help="Share of the training split held out as val.json.")
def synth(out_dir, config_path, **flags):
    """Generate a synthetic dataset: train/test (and val) manifests plus feature files."""
    doc = {}
    if config_path:
        doc = read_config(config_path)
        _reject_unknown(doc, _field_names(features.SynthSpec) | SYNTH_EXTRA, "synth")
    doc.update({k: v for k, v in flags.items() if v is not None})
    val_fraction = float(doc.pop("val_fraction", 0.0))
    try:
        spec = features.SynthSpec(**doc)
        spec.validate()
        if not 0 <= val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid synthetic spec: {exc}") from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = features.synthesize(spec)
    splits = {"train": train, "test": test}
    if val_fraction > 0:
        splits["train"], splits["val"] = features.stratified_split(train, val_fraction, spec.seed)
    names = features.class_names_for(spec.classes)
    for name, samples in splits.items():
        features.write_dataset(out, name, samples, names)
    _dump(out / "synth_config.json", {**dataclasses.asdict(spec), "val_fraction": val_fraction})
    summary = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    click.echo(f"wrote {summary} videos ({spec.classes} classes, d_s={spec.d_s}, d_m={spec.d_m}) to {out}")


def _lstm_data(samples, stream):
    data = []
    for s in samples:
        y = s.label.astype(float)
        data.append((getattr(s, stream), s.class_index if y.sum() == 1 else y / y.sum()))
    return data


def _score(model, net, samples, names) -> ensemble.ScoreTable:
    ids = [s.id for s in samples]
    if model == "fusion":
        xs, xm, _ = features.pooled_arrays(samples)
        scores = fusion.fusion_predict(net, xs, xm)
    else:
        stream = model.split("-")[1]
        scores = lstm.lstm_predict(net, [getattr(s, stream) for s in samples])
    return ensemble.ScoreTable(ids, scores, model, names)


@cli.command()
@click.argument("model", type=click.Choice(MODELS))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, help="Overrides the config seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
def train(model, config_path, seed, out_dir):
    """Train one model; write checkpoint, epoch log, score tables and resolved config."""
    doc = read_config(config_path)
    if seed is not None:
        doc["seed"] = seed
    cfg = model_config(model, doc)
    for key in ("train_manifest", "test_manifest"):
        if not doc.get(key):
            raise ConfigError(f"config is missing {key}")
    names, train_set = features.load_manifest(doc["train_manifest"])
    if not train_set:
        raise features.DataError("training manifest is empty")
    eval_sets = {"test": features.load_manifest(doc["test_manifest"])[1]}
    if doc.get("val_manifest"):
        eval_sets["val"] = features.load_manifest(doc["val_manifest"])[1]
    features.check_consistent(train_set + [s for v in eval_sets.values() for s in v])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / f"{model}.config.json", _resolved(doc, cfg))
    history: list = []
    if model == "fusion":
        net = fusion.train_fusion(train_set, cfg, len(names), history)
        fusion.save_fusion(out / "fusion.hsfn", net)
        log_lines = [h.line() for h in history]
    else:
        stream = model.split("-")[1]
        net = lstm.train_lstm(_lstm_data(train_set, stream), cfg, len(names), history)
        lstm.save_lstm(out / f"{model}.hslm", net)
        log_lines = [f"epoch={h.epoch} iterations={h.iterations} loss={h.loss:.8g}" for h in history]
    (out / f"{model}.log").write_text("".join(line + "\n" for line in log_lines))
    for split, samples in eval_sets.items():
        if samples:
            table = _score(model, net, samples, names)
            ensemble.write_scores(out / f"{model}.{split}.scores", table)
            if all(s.label.sum() == 1 for s in samples):
                acc = metrics.accuracy(table, ensemble.labels_of(samples))
                click.echo(f"{model} {split} accuracy {acc:.4f}")
    if log_lines:
        click.echo(f"{model} final {log_lines[-1]}")


@cli.command()
@click.argument("tables", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--weights", help="Comma-separated fusion weights, one per table.")
@click.option("--cv", is_flag=True, help="Choose weights by grid search on validation tables.")
@click.option("--val-tables", multiple=True, type=click.Path(dir_okay=False), help="Validation score tables, same order as TABLES.")
@click.option("--val-manifest", type=click.Path(dir_okay=False))
@click.option("--metric", type=click.Choice(["accuracy", "map"]), default="accuracy", show_default=True)
@click.option("--step", type=float, default=0.1, show_default=True)
@click.option("--minmax", is_flag=True, help="Min-max rescale each table per class before fusing.")
def fuse(tables, out_path, weights, cv, val_tables, val_manifest, metric, step, minmax):
    """Late-fuse score tables: average (default), fixed weights, or cross-validated weights."""
    if weights and cv:
        raise click.UsageError("--weights and --cv are mutually exclusive")
    loaded = [ensemble.read_scores(t) for t in tables]
    if minmax:
        loaded = [ensemble.minmax_scale(t) for t in loaded]
    record: dict = {"tables": [str(t) for t in tables], "minmax": minmax}
    if cv:
        if len(val_tables) != len(tables) or not val_manifest:
            raise click.UsageError("--cv needs one --val-tables per table and --val-manifest")
        val = [ensemble.read_scores(t) for t in val_tables]
        if minmax:
            val = [ensemble.minmax_scale(t) for t in val]
        labels = ensemble.labels_of(features.load_dataset(val_manifest))
        w = ensemble.cross_validate_weights(val, labels, metric, step)
        record.update(method="cv", metric=metric, step=step)
    elif weights:
        try:
            w = ensemble.FusionWeights.normalized([float(x) for x in weights.split(",")])
        except ValueError as exc:
            raise click.UsageError(f"bad --weights: {exc}") from None
        if len(w.values) != len(loaded):
            raise click.UsageError(f"{len(w.values)} weights for {len(loaded)} tables")
        record["method"] = "fixed"
    else:
        w = ensemble.FusionWeights.uniform(len(loaded))
        record["method"] = "average"
    fused = ensemble.weighted_fuse(loaded, w, provenance=f"fused:{record['method']}")
    ensemble.write_scores(out_path, fused)
    record["weights"] = list(w.values)
    _dump(Path(str(out_path) + ".weights.json"), record)
    click.echo("weights " + " ".join(f"{x:.4f}" for x in w.values))


@cli.command(name="eval")
@click.argument("scores", type=click.Path(dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--metric", type=click.Choice(["accuracy", "map", "all"]), default="all", show_default=True)
@click.option("--out", "out_prefix", type=click.Path(dir_okay=False), help="Write PREFIX.txt and PREFIX.json reports.")
def eval_cmd(scores, manifest, metric, out_prefix):
    """Evaluate a score table against manifest labels."""
    table = ensemble.read_scores(scores)
    names, samples = features.load_manifest(manifest)
    labels = ensemble.labels_of(samples)
    report = metrics.evaluate(table, labels, names)
    if metric == "accuracy" and report.accuracy is None:
        raise features.DataError("accuracy needs single-label ground truth")
    if metric == "accuracy":
        text = f"accuracy: {report.accuracy:.6f}\n"
    elif metric == "map":
        text = "\n".join(l for l in report.to_text().splitlines() if not l.startswith("accuracy")) + "\n"
    else:
        text = report.to_text()
    click.echo(text, nl=False)
    if out_prefix:
        Path(out_prefix + ".txt").write_text(text)
        Path(out_prefix + ".json").write_text(report.to_json())


@cli.command(name="verify")
@click.argument("suite", type=click.Choice([*verify.SUITES, "all"]), default="all")
@click.option("--seed", type=int, default=0, show_default=True)
def verify_cmd(suite, seed):
    """Run oracle-backed self-checks; exit code 3 on any failure."""
    names = list(verify.SUITES) if suite == "all" else [suite]
    results = verify.run_suites(names, seed)
    for r in results:
        click.echo(r.line())
    if not all(r.passed for r in results):
        raise VerificationFailed(f"{sum(not r.passed for r in results)} check(s) failed")


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="hybridvc", standalone_mode=False)
        return rv if isinstance(rv, int) else 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.Abort) as exc:
        if isinstance(exc, click.UsageError):
            exc.show()
        return EXIT_USAGE
    except (features.DataError, fusion.TrainingError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except VerificationFailed as exc:
        click.echo(f"verification failed: {exc}", err=True)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
