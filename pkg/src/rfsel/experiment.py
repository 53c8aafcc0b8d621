"""Training loops and multi-run experiment orchestration.

An experiment tunes hyperparameters on the dev split by macro F1, retrains
the winning setting several times under distinct seeds, and reports the
averaged test metrics.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
from torch import nn

from .builder import RFSInstance
from .evaluation import EvalReport, RunMetrics, macro_prf
from .neural import (CRNN, ConATT, ModelConfig, Vocabulary, build_model,
                     predict_batch)

log = logging.getLogger(__name__)

DEFAULT_RUN_SEEDS = (11, 12, 13, 14, 15)
TUNING_SEED = 1

# The paper-side protocol fixes tuning to dev macro F1; the grids themselves
# are ours.
DEFAULT_GRID = {
    "lr": (3e-4, 1e-3, 3e-3),
    "batch_size": (16, 32, 64),
    "hidden_size": (128, 256),
    "dropout": (0.1, 0.3),
}


class TrainingError(Exception):
    pass


@dataclass
class TrainResult:
    model: Union[CRNN, ConATT]
    dev_macro_f1: float
    best_epoch: int
    history: list[dict]


def model_display_name(config: ModelConfig) -> str:
    suffix = {"random": "", "static_embeddings": "+static", "contextual_lm": "+lm"}
    return config.arch + suffix[config.init]


def _label_indices(instances: Sequence[RFSInstance], labels: Sequence[str],
                   scheme_key: str) -> torch.Tensor:
    index = {label: i for i, label in enumerate(labels)}
    return torch.tensor([index[inst.labels[scheme_key]] for inst in instances])


def train_model(config: ModelConfig,
                train_instances: Sequence[RFSInstance],
                dev_instances: Sequence[RFSInstance],
                lr: float = 1e-3,
                batch_size: int = 32,
                epochs: int = 30,
                patience: int = 5,
                vocab: Optional[Vocabulary] = None,
                deterministic: bool = True) -> TrainResult:
    """Adam + cross-entropy training with dev-macro-F1 early stopping."""
    if not train_instances:
        raise TrainingError("empty training set")
    if deterministic:
        torch.set_num_threads(1)
    if vocab is None and config.init != "contextual_lm":
        vocab = Vocabulary.from_instances(train_instances)
    model = build_model(config, vocab)
    scheme = config.label_scheme
    targets = _label_indices(train_instances, model.labels, scheme.key)
    dev_gold = [inst.labels[scheme.key] for inst in dev_instances]

    parameters = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(parameters, lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    rng = random.Random(config.seed)

    best_state = None
    best_f1 = float("-inf")
    best_epoch = -1
    since_best = 0
    history = []
    for epoch in range(epochs):
        model.train()
        order = list(range(len(train_instances)))
        rng.shuffle(order)
        epoch_loss = 0.0
        for lo in range(0, len(order), batch_size):
            chunk = [train_instances[i] for i in order[lo:lo + batch_size]]
            optimizer.zero_grad()
            _, logits = model([(i.pre, i.target, i.post) for i in chunk])
            loss = loss_fn(logits, targets[order[lo:lo + batch_size]])
            loss.backward()
            optimizer.step()
            epoch_loss += loss.detach().item() * len(chunk)
        if dev_instances:
            pred = predict_batch(model, dev_instances, batch_size)
            _, _, dev_f1 = macro_prf(dev_gold, pred, model.labels)
        else:
            dev_f1 = 0.0
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(train_instances),
                        "dev_macro_f1": dev_f1})
        if dev_f1 > best_f1 or best_state is None:
            best_f1, best_epoch, since_best = dev_f1, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if dev_instances and since_best >= patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_f1, best_epoch, history)


def tune(config: ModelConfig,
         train_instances: Sequence[RFSInstance],
         dev_instances: Sequence[RFSInstance],
         grid: Optional[dict] = None,
         epochs: int = 30,
         patience: int = 5) -> tuple[ModelConfig, dict, list[dict]]:
    """Grid search on dev macro F1; ties go to the earlier grid point."""
    grid = dict(DEFAULT_GRID if grid is None else grid)
    keys = sorted(grid)
    combos = [dict(zip(keys, values))
              for values in itertools.product(*(grid[k] for k in keys))]
    if not combos:
        combos = [{}]
    table = []
    best: Optional[tuple[float, ModelConfig, dict]] = None
    for combo in combos:
        candidate = replace(config,
                            seed=TUNING_SEED,
                            hidden_size=combo.get("hidden_size", config.hidden_size),
                            dropout=combo.get("dropout", config.dropout))
        result = train_model(candidate, train_instances, dev_instances,
                             lr=combo.get("lr", 1e-3),
                             batch_size=combo.get("batch_size", 32),
                             epochs=epochs, patience=patience)
        row = dict(combo)
        row["dev_macro_f1"] = result.dev_macro_f1
        table.append(row)
        log.info("tuning %s: %s -> dev macro-F1 %.2f",
                 model_display_name(config), combo, result.dev_macro_f1)
        if best is None or result.dev_macro_f1 > best[0]:
            best = (result.dev_macro_f1, candidate, combo)
    assert best is not None
    _, best_config, best_combo = best
    settings = {"lr": best_combo.get("lr", 1e-3),
                "batch_size": best_combo.get("batch_size", 32)}
    return best_config, settings, table


def run_experiment(config: ModelConfig,
                   data: dict[str, list[RFSInstance]],
                   n_runs: int = 5,
                   seeds: Sequence[int] = DEFAULT_RUN_SEEDS,
                   grid: Optional[dict] = None,
                   epochs: int = 30,
                   patience: int = 5,
                   out_dir: Optional[Union[str, Path]] = None,
                   save_models: bool = False) -> EvalReport:
    """Tune, retrain ``n_runs`` times with distinct seeds, score on test.

    A training failure mid-way aborts the experiment but leaves the
    completed runs on disk when ``out_dir`` is given.
    """
    if n_runs > len(seeds):
        raise ValueError(f"need {n_runs} seeds, got {len(seeds)}")
    scheme = config.label_scheme
    best_config, settings, tuning_table = tune(
        config, data["train"], data["dev"], grid=grid,
        epochs=epochs, patience=patience)
    test_gold = [inst.labels[scheme.key] for inst in data["test"]]

    runs: list[RunMetrics] = []
    name = model_display_name(config)
    out = Path(out_dir) if out_dir is not None else None
    try:
        for k in range(n_runs):
            seed = seeds[k]
            result = train_model(replace(best_config, seed=seed),
                                 data["train"], data["dev"],
                                 lr=settings["lr"], batch_size=settings["batch_size"],
                                 epochs=epochs, patience=patience)
            pred = predict_batch(result.model, data["test"])
            runs.append(RunMetrics.from_predictions(seed, test_gold, pred,
                                                    list(scheme.labels)))
            log.info("%s run %d (seed %d): test macro-F1 %.2f",
                     name, k, seed, runs[-1].macro_f1)
            if save_models and out is not None:
                from .neural import save_model
                save_model(result.model, out / f"{name}_{scheme.key}_seed{seed}.pt",
                           dev_metrics={"dev_macro_f1": result.dev_macro_f1})
    except Exception as err:
        if out is not None and runs:
            out.mkdir(parents=True, exist_ok=True)
            partial = {"model": name, "scheme": scheme.key, "error": str(err),
                       "completed_runs": [r.to_json() for r in runs]}
            (out / f"partial_{name}_{scheme.key}.json").write_text(
                json.dumps(partial, indent=2) + "\n", encoding="utf-8")
        raise TrainingError(f"run set aborted after {len(runs)} runs: {err}") from err

    report = EvalReport.from_runs(name, scheme.key, list(scheme.labels), runs)
    report.tuning = {"settings": settings, "table": tuning_table}
    return report
