"""Command-line entry point.

Commands mirror the pipeline: ``build`` constructs datasets from CoNLL
files, ``stats`` summarizes a built dataset, ``train``/``eval`` handle the
classifiers, ``probe`` runs the diagnostic classifiers, and ``report``
renders result tables. Every command writes a manifest into its output
directory. Exit codes: 0 success, 2 usage, 3 data error, 4 training
failure.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import __version__
from .builder import (BuilderError, build_dataset, load_split_ids, read_jsonl,
                      write_dataset)
from .conll import ConllError, read_conll_dir
from .evaluation import EvalReport, RunMetrics, emit_report
from .forms import LabelScheme
from .manifest import write_manifest

log = logging.getLogger(__name__)

EXIT_DATA = 3
EXIT_TRAINING = 4

RESOURCE_ENV = "RFSEL_RESOURCES"

DataError = (ConllError, BuilderError, FileNotFoundError, NotADirectoryError,
             json.JSONDecodeError, KeyError)


def resolve_resource(path: str | None) -> str | None:
    """Paths may live under the directory named by $RFSEL_RESOURCES."""
    if path is None:
        return None
    if Path(path).exists():
        return path
    root = os.environ.get(RESOURCE_ENV)
    if root and (Path(root) / path).exists():
        return str(Path(root) / path)
    return path


def apply_config_file(ctx: click.Context, params: dict) -> dict:
    """Fill parameters from --config JSON; explicit flags win."""
    config_path = params.pop("config", None)
    if not config_path:
        return params
    overrides = json.loads(Path(config_path).read_text(encoding="utf-8"))
    for key, value in overrides.items():
        key = key.replace("-", "_")
        if key not in params:
            raise click.UsageError(f"unknown config key {key!r}")
        source = ctx.get_parameter_source(key)
        if source is not None and source.name == "DEFAULT":
            params[key] = value
    return params


def fail(code: int, err: Exception) -> None:
    click.echo(f"error: {err}", err=True)
    sys.exit(code)


config_option = click.option("--config", type=click.Path(exists=True, dir_okay=False),
                             default=None, help="JSON file of flag defaults.")


@click.group()
@click.version_option(__version__)
@click.option("--verbose", is_flag=True, help="Log at INFO level.")
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--language", type=click.Choice(["en", "zh"]), required=True)
@click.option("--corpus-dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of CoNLL files.")
@click.option("--splits-dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory with train/dev/test .ids manifests.")
@click.option("--tags", type=click.Choice(["lexical", "entity"]), default="lexical",
              show_default=True)
@click.option("--tokenize", type=click.Choice(["word", "char"]), default=None,
              help="Defaults to char for zh, word for en.")
@click.option("--max-chars", type=int, default=512, show_default=True,
              help="zh character budget; 0 disables the filter.")
@click.option("--window", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@config_option
@click.pass_context
def build(ctx, **params):
    """Construct a delexicalised classification dataset."""
    params = apply_config_file(ctx, params)
    try:
        docs = read_conll_dir(params["corpus_dir"], params["language"])
        if not docs:
            raise BuilderError(f"no CoNLL documents under {params['corpus_dir']}")
        split_ids = load_split_ids(params["splits_dir"])
        dataset = build_dataset(
            docs, params["language"], split_ids,
            tags=params["tags"], tokenize=params["tokenize"],
            max_chars=params["max_chars"] or None,
            window=params["window"], seed=params["seed"])
        write_dataset(dataset, params["out"])
        write_manifest(params["out"], "build", params, [params["seed"]],
                       [params["corpus_dir"], params["splits_dir"]])
    except DataError as err:
        fail(EXIT_DATA, err)
    stats = dataset.stats
    click.echo(f"split sizes (train/dev/test): {stats.split_sizes[0]}/"
               f"{stats.split_sizes[1]}/{stats.split_sizes[2]}")
    click.echo(f"first mentions: {stats.pct_first_mentions:.2f}%")
    click.echo(f"proper names: {stats.pct_proper_names:.2f}%")
    click.echo(f"average tokens: {stats.avg_tokens:.2f}")
    click.echo(f"seen test referents: {stats.seen_ratio:.2f}%")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="A built dataset directory.")
def stats(data_dir):
    """Print the summary statistics of a built dataset."""
    try:
        payload = json.loads((Path(data_dir) / "stats.json").read_text("utf-8"))
    except DataError as err:
        fail(EXIT_DATA, err)
    for key in ("pct_first_mentions", "pct_proper_names", "avg_tokens",
                "seen_ratio", "split_sizes"):
        click.echo(f"{key}: {payload[key]}")


def _load_splits(data_dir: str) -> dict:
    out = {}
    for split in ("train", "dev", "test"):
        path = Path(data_dir) / f"{split}.jsonl"
        out[split] = read_jsonl(path) if path.exists() else []
    if not out["train"]:
        raise BuilderError(f"{data_dir} has no train.jsonl")
    return out


GRIDS = {
    "none": {},
    "fast": {"lr": (1e-3, 3e-3), "batch_size": (16, 32)},
    "full": None,  # the module default grid
}


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--arch", type=click.Choice(["crnn", "conatt"]), default="crnn",
              show_default=True)
@click.option("--init", type=click.Choice(["random", "static_embeddings",
                                           "contextual_lm"]),
              default="random", show_default=True)
@click.option("--scheme", required=True,
              type=click.Choice([s.name.lower() for s in LabelScheme]))
@click.option("--hidden-size", type=int, default=128, show_default=True)
@click.option("--embed-size", type=int, default=100, show_default=True)
@click.option("--dropout", type=float, default=0.1, show_default=True)
@click.option("--embeddings", default=None,
              help="Static embedding text file (token then floats).")
@click.option("--lm", default=None, help="Pretrained contextual encoder path.")
@click.option("--lm-finetune", is_flag=True)
@click.option("--append-target-embedding", is_flag=True,
              help="ConATT variant that also concatenates the mean target embedding.")
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--patience", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--runs", type=int, default=1, show_default=True,
              help="Repeated-run protocol when > 1 (tunes, retrains, averages).")
@click.option("--tune", "tune_grid", type=click.Choice(sorted(GRIDS)), default="none",
              show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@config_option
@click.pass_context
def train(ctx, **params):
    """Train a form classifier; with --runs > 1 run the full protocol."""
    from .experiment import (DEFAULT_RUN_SEEDS, TrainingError, model_display_name,
                             run_experiment, train_model)
    from .neural import ModelConfig, save_model

    params = apply_config_file(ctx, params)
    out = Path(params["out"])
    try:
        data = _load_splits(params["data_dir"])
        scheme = LabelScheme.parse(params["scheme"])
        language = data["train"][0].language
        if scheme.language != language:
            raise BuilderError(f"scheme {scheme.name} does not fit {language} data")
        config = ModelConfig(
            arch=params["arch"], init=params["init"], scheme=params["scheme"],
            hidden_size=params["hidden_size"], embed_size=params["embed_size"],
            dropout=params["dropout"], lm_finetune=params["lm_finetune"],
            seed=params["seed"],
            append_target_embedding=params["append_target_embedding"],
            embeddings_path=resolve_resource(params["embeddings"]),
            lm_path=resolve_resource(params["lm"]))
    except DataError as err:
        fail(EXIT_DATA, err)

    try:
        out.mkdir(parents=True, exist_ok=True)
        if params["runs"] > 1:
            report = run_experiment(config, data, n_runs=params["runs"],
                                    grid=GRIDS[params["tune_grid"]],
                                    epochs=params["epochs"],
                                    patience=params["patience"],
                                    out_dir=out, save_models=True)
            (out / "results.json").write_text(
                json.dumps([report.to_json()], indent=2, sort_keys=True) + "\n",
                encoding="utf-8")
            seeds = list(DEFAULT_RUN_SEEDS[:params["runs"]])
            click.echo(f"{report.model} {report.scheme}: "
                       f"macro-F1 {report.macro_f1:.2f} ± {report.macro_f1_std:.2f} "
                       f"over {report.n_runs} runs")
        else:
            result = train_model(config, data["train"], data["dev"],
                                 lr=params["lr"], batch_size=params["batch_size"],
                                 epochs=params["epochs"], patience=params["patience"])
            name = model_display_name(config)
            save_model(result.model, out / f"{name}_{scheme.key}.pt",
                       dev_metrics={"dev_macro_f1": result.dev_macro_f1,
                                    "best_epoch": result.best_epoch})
            seeds = [params["seed"]]
            click.echo(f"{name} {scheme.key}: dev macro-F1 {result.dev_macro_f1:.2f} "
                       f"(checkpoint in {out})")
        write_manifest(out, "train", params, seeds, [params["data_dir"]])
    except TrainingError as err:
        fail(EXIT_TRAINING, err)
    except DataError as err:
        fail(EXIT_DATA, err)


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--split", type=click.Choice(["train", "dev", "test"]), default="test",
              show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def eval_command(model_path, data_dir, split, out):
    """Score a checkpoint on one split of a built dataset."""
    from .experiment import model_display_name
    from .neural import load_model, predict_batch

    try:
        model = load_model(model_path)
        data = _load_splits(data_dir)[split]
        if not data:
            raise BuilderError(f"{data_dir} has no {split} instances")
        scheme = model.config.label_scheme
        gold = [inst.labels[scheme.key] for inst in data]
        pred = predict_batch(model, data)
        run = RunMetrics.from_predictions(model.config.seed, gold, pred,
                                          list(scheme.labels))
        report = EvalReport.from_runs(model_display_name(model.config),
                                      scheme.key, list(scheme.labels), [run])
        emit_report([report], out)
        write_manifest(out, "eval",
                       {"model": model_path, "data": data_dir, "split": split},
                       [model.config.seed], [model_path, data_dir])
    except DataError as err:
        fail(EXIT_DATA, err)
    click.echo(f"macro P/R/F: {report.macro_precision:.2f} "
               f"{report.macro_recall:.2f} {report.macro_f1:.2f}")


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Built dataset directory (instances to probe).")
@click.option("--corpus-dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="The CoNLL files the dataset was built from.")
@click.option("--split", type=click.Choice(["train", "dev", "test"]), default="test",
              show_default=True)
@click.option("--task", "tasks", multiple=True,
              help="Probing task name(s); default all seven.")
@click.option("--runs", type=int, default=5, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def probe(model_path, data_dir, corpus_dir, split, tasks, runs, out):
    """Train diagnostic classifiers on a model's representations."""
    from .neural import load_model
    from .probing import (TASKS, TASKS_BY_NAME, ProbingError, baseline,
                          extract_probing_instances, render_probe_table,
                          run_probe, write_probing_jsonl)

    try:
        model = load_model(model_path)
        data = _load_splits(data_dir)[split]
        if not data:
            raise BuilderError(f"{data_dir} has no {split} instances")
        language = model.config.label_scheme.language
        docs = read_conll_dir(corpus_dir, language)
        items = extract_probing_instances(model, data, docs)
        chosen = [TASKS_BY_NAME[n] for n in tasks] if tasks else list(TASKS)

        out_path = Path(out)
        out_path.mkdir(parents=True, exist_ok=True)
        write_probing_jsonl(items, out_path / "probing_instances.jsonl")
        rows = {"random": {}, "majority": {}, "model": {}}
        for task in chosen:
            labels = [item.labels[task.name] for item in items]
            rows["random"][task.name] = baseline(task, "random", labels, n_runs=runs)
            rows["majority"][task.name] = baseline(task, "majority", labels)
            rows["model"][task.name] = run_probe(items, task, n_runs=runs)
        table = render_probe_table(rows)
        (out_path / "probe_report.txt").write_text(table, encoding="utf-8")
        payload = {name: {t: {"accuracy": r.accuracy, "macro_f1": r.macro_f1,
                              "per_run": r.per_run}
                          for t, r in results.items()}
                   for name, results in rows.items()}
        (out_path / "probe_report.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "probe",
                       {"model": model_path, "data": data_dir, "split": split,
                        "tasks": [t.name for t in chosen]},
                       list(range(runs)), [model_path, data_dir, corpus_dir])
    except ProbingError as err:
        fail(EXIT_TRAINING, err)
    except DataError as err:
        fail(EXIT_DATA, err)
    click.echo(table)
    for task in chosen:
        result = rows["model"][task.name]
        click.echo(f"{task.name}: {result.cell()}")


@main.command()
@click.option("--runs", "run_dirs", multiple=True, required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Run directories containing results.json files.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--heatmaps/--no-heatmaps", default=True, show_default=True)
def report(run_dirs, out, heatmaps):
    """Merge run results into tables with gain percentages."""
    try:
        reports = []
        for run_dir in run_dirs:
            path = Path(run_dir) / "results.json"
            for row in json.loads(path.read_text(encoding="utf-8")):
                reports.append(EvalReport.from_json(row))
        if not reports:
            raise BuilderError("no results found")
        emit_report(reports, out, heatmaps=heatmaps)
        write_manifest(out, "report", {"runs": list(run_dirs)}, [],
                       list(run_dirs))
    except DataError as err:
        fail(EXIT_DATA, err)
    click.echo((Path(out) / "results.txt").read_text(encoding="utf-8"))


if __name__ == "__main__":
    main()
