"""Command-line entry point.

Subcommands wire the library end to end: simulate writes a synthetic
dataset directory, train fits models over one or more seeded trials,
evaluate produces MAE/RMSE reports, counterfactual re-forecasts under
transformed bolus doses, and inspect-k tabulates learned absorption
constants with the one-sided paired test.

Every command writes a manifest.json into its output directory recording
the command, config digest, seeds, and paths, so runs are reproducible.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .data import Dataset, load_dataset, save_dataset, split_train_test
from .evaluation import (
    counterfactual_table,
    evaluate_local_models,
    evaluate_model,
    paired_t_test_one_sided,
    summarize_trials,
)
from .models import Checkpoint, FeatureConfig
from .synth import SynthConfig, generate
from .training import TrainConfig, train_global, train_local

FEATURE_FLAGS = {
    "univariate": "univariate",
    "sparse": "sparse_exogenous",
    "sumtotal": "sum_total",
    "pk": "pharmacokinetic",
}


def _digest(path: Path | None) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, payload: dict, started: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "elapsed_seconds": round(time.time() - started, 3),
        **payload,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"{path}: invalid JSON ({exc})")


def _split_dataset(dataset: Dataset, test_steps: int) -> tuple[list, list]:
    train, test = [], []
    for record in dataset.records:
        a, b = split_train_test(record, test_steps)
        train.append(a)
        test.append(b)
    return train, test


@click.group()
@click.version_option(__version__)
def main():
    """Glucose forecasting with a learnable pharmacokinetic dose encoder."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="JSON file with generator settings.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def simulate(config_path: Path, out_dir: Path):
    """Generate a synthetic multi-patient dataset directory."""
    started = time.time()
    config = SynthConfig.from_dict(_load_json(config_path))
    try:
        dataset = generate(config)
        save_dataset(dataset, out_dir)
    except Exception as exc:
        raise click.ClickException(str(exc))
    _write_manifest(
        out_dir,
        "simulate",
        {
            "config_digest": _digest(config_path),
            "config": config.to_dict(),
            "seeds": [config.seed],
            "outputs": sorted(p.name for p in (out_dir / "patients").glob("*.csv")),
        },
        started,
    )
    click.echo(f"wrote {dataset.n_patients} patients x {dataset.grid.n_steps} steps to {out_dir}")


@main.command()
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--features", required=True, type=click.Choice(sorted(FEATURE_FLAGS)))
@click.option("--mode", default="global", type=click.Choice(["global", "local"]))
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="JSON file with training settings; defaults are used if omitted.")
@click.option("--trials", default=1, type=click.IntRange(min=1))
@click.option("--statics/--no-statics", "include_statics", default=False)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def train(data_dir, features, mode, config_path, trials, include_statics, out_dir):
    """Train one model per trial (global) or per trial and patient (local)."""
    started = time.time()
    base = TrainConfig.from_json(config_path) if config_path else TrainConfig()
    base = replace(base, mode=mode)
    feature_config = FeatureConfig(mode=FEATURE_FLAGS[features], include_statics=include_statics)

    ckpt_dir = out_dir / "checkpoints"
    log_dir = out_dir / "logs"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_dir.mkdir(parents=True, exist_ok=True)

    try:
        dataset = load_dataset(data_dir)
        train_records, _ = _split_dataset(dataset, base.test_steps)
        train_ds = Dataset(grid=dataset.grid, records=train_records, meta=dataset.meta)

        outputs = []
        seeds = []
        for t in range(trials):
            cfg = replace(base, seed=base.seed + t)
            seeds.append(cfg.seed)
            if mode == "local":
                results = train_local(train_ds, cfg, feature_config)
                for pid, res in results.items():
                    name = f"trial{t:02d}_{pid}.json"
                    Checkpoint(
                        model=res.model,
                        feature_config=feature_config,
                        pk=res.pk,
                        extra={"trial": t, "scope": "local", "patient_id": pid,
                               "train_config": cfg.to_dict()},
                    ).save(ckpt_dir / name)
                    outputs.append(name)
                    _write_history(log_dir / f"trial{t:02d}_{pid}.jsonl", res.history)
                    if res.pk is not None:
                        res.pk.to_json(ckpt_dir / f"trial{t:02d}_{pid}_pk.json")
            else:
                res = train_global(train_ds, cfg, feature_config)
                name = f"trial{t:02d}.json"
                Checkpoint(
                    model=res.model,
                    feature_config=feature_config,
                    pk=res.pk,
                    extra={"trial": t, "scope": "global", "train_config": cfg.to_dict()},
                ).save(ckpt_dir / name)
                outputs.append(name)
                _write_history(log_dir / f"trial{t:02d}.jsonl", res.history)
                if res.pk is not None:
                    res.pk.to_json(ckpt_dir / f"trial{t:02d}_pk.json")
    except click.ClickException:
        raise
    except Exception as exc:
        raise click.ClickException(str(exc))

    _write_manifest(
        out_dir,
        "train",
        {
            "config_digest": _digest(config_path),
            "train_config": base.to_dict(),
            "features": FEATURE_FLAGS[features],
            "mode": mode,
            "trials": trials,
            "seeds": seeds,
            "inputs": str(data_dir),
            "outputs": outputs,
        },
        started,
    )
    click.echo(f"wrote {len(outputs)} checkpoints to {ckpt_dir}")


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True))
            fh.write("\n")


def _checkpoint_files(ckpt_dir: Path) -> list[Path]:
    files = sorted(p for p in ckpt_dir.glob("trial*.json") if not p.name.endswith("_pk.json"))
    if not files:
        raise click.ClickException(f"no checkpoints found in {ckpt_dir}")
    return files


@main.command()
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--checkpoints", "ckpt_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def evaluate(data_dir, ckpt_dir, out_dir):
    """Rolling-forecast MAE/RMSE reports over all checkpoints."""
    started = time.time()
    report_dir = out_dir / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    try:
        dataset = load_dataset(data_dir)
        by_trial: dict[int, list[Checkpoint]] = {}
        for path in _checkpoint_files(ckpt_dir):
            ckpt = Checkpoint.load(path)
            by_trial.setdefault(int(ckpt.extra["trial"]), []).append(ckpt)

        per_trial_evals = []
        label = None
        for trial in sorted(by_trial):
            ckpts = by_trial[trial]
            cfg = TrainConfig.from_dict(ckpts[0].extra["train_config"])
            _, test_records = _split_dataset(dataset, cfg.test_steps)
            scope = ckpts[0].extra["scope"]
            label = f"{ckpts[0].model.architecture}-{ckpts[0].feature_config.mode}-{scope}"
            if scope == "local":
                fitted = {
                    c.extra["patient_id"]: (c.model, c.pk) for c in ckpts
                }
                missing = {r.patient_id for r in test_records} - set(fitted)
                if missing:
                    raise click.ClickException(
                        f"trial {trial}: no local checkpoint for patients {sorted(missing)}"
                    )
                ev = evaluate_local_models(
                    fitted, ckpts[0].feature_config, test_records, cfg.L, cfg.H
                )
            else:
                ckpt = ckpts[0]
                ev = evaluate_model(
                    ckpt.model, ckpt.feature_config, ckpt.pk, test_records, cfg.L, cfg.H
                )
            per_trial_evals.append(ev)

        report = summarize_trials(per_trial_evals, label)
        report.to_json(report_dir / "report.json")
        with open(report_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient", "mode", "metric", "subset", "trial_mean", "trial_sd"])
            for row in report.to_csv_rows():
                writer.writerow([row[0], row[1], row[2], row[3], repr(row[4]), repr(row[5])])
        with open(report_dir / "trials.json", "w", encoding="utf-8") as fh:
            json.dump(per_trial_evals, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except click.ClickException:
        raise
    except Exception as exc:
        raise click.ClickException(str(exc))

    _write_manifest(
        out_dir,
        "evaluate",
        {
            "inputs": {"data": str(data_dir), "checkpoints": str(ckpt_dir)},
            "outputs": ["reports/report.json", "reports/report.csv", "reports/trials.json"],
            "n_trials": len(per_trial_evals),
            "label": label,
        },
        started,
    )
    click.echo(f"wrote reports for {len(per_trial_evals)} trials to {report_dir}")


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--data", "data_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--scale", default=10.0, type=click.FloatRange(min_open=0))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def counterfactual(ckpt_path, data_dir, scale, out_dir):
    """Re-forecast the test period with bolus doses removed and scaled."""
    started = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        ckpt = Checkpoint.load(ckpt_path)
        if ckpt.feature_config.mode != "pharmacokinetic":
            raise click.ClickException(
                "counterfactual analysis requires a pharmacokinetic checkpoint"
            )
        cfg = TrainConfig.from_dict(ckpt.extra["train_config"])
        dataset = load_dataset(data_dir)
        _, test_records = _split_dataset(dataset, cfg.test_steps)

        summary = {"scale_factor": scale, "per_patient": {}}
        with open(out_dir / "counterfactual.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient", "origin_timestamp", "original", "zeroed", "scaled"])
            for record in test_records:
                table = counterfactual_table(
                    ckpt.model, ckpt.feature_config, ckpt.pk, record, cfg.L, cfg.H, scale
                )
                for i, origin in enumerate(table["origins"]):
                    writer.writerow(
                        [
                            record.patient_id,
                            record.grid.minutes_at(int(origin)),
                            repr(float(table["original"][i])),
                            repr(float(table["zeroed"][i])),
                            repr(float(table["scaled"][i])),
                        ]
                    )
                summary["per_patient"][record.patient_id] = table["means"]
        pooled = {
            key: float(np.mean([v[key] for v in summary["per_patient"].values()]))
            for key in ("original", "zeroed", "scaled")
        }
        summary["pooled_means"] = pooled
        with open(out_dir / "counterfactual_summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except click.ClickException:
        raise
    except Exception as exc:
        raise click.ClickException(str(exc))

    _write_manifest(
        out_dir,
        "counterfactual",
        {
            "inputs": {"checkpoint": str(ckpt_path), "data": str(data_dir)},
            "scale_factor": scale,
            "outputs": ["counterfactual.csv", "counterfactual_summary.json"],
        },
        started,
    )
    click.echo(f"wrote counterfactual table to {out_dir}")


@main.command("inspect-k")
@click.option("--checkpoints", "ckpt_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def inspect_k(ckpt_dir, out_dir):
    """Tabulate learned absorption constants and test k_bolus > k_basal."""
    started = time.time()
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        rows = []
        for path in _checkpoint_files(ckpt_dir):
            ckpt = Checkpoint.load(path)
            if ckpt.pk is None:
                continue
            trial = int(ckpt.extra["trial"])
            for i, pid in enumerate(ckpt.pk.patient_ids):
                rows.append(
                    (trial, pid, float(ckpt.pk.k_bolus[i]), float(ckpt.pk.k_basal[i]))
                )
        if not rows:
            raise click.ClickException(f"no pharmacokinetic checkpoints in {ckpt_dir}")
        rows.sort()
        with open(out_dir / "k_table.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["trial", "patient", "k_bolus", "k_basal"])
            for trial, pid, kb, ks in rows:
                writer.writerow([trial, pid, repr(kb), repr(ks)])

        k_bolus = np.array([r[2] for r in rows])
        k_basal = np.array([r[3] for r in rows])
        t_stat, p_value = paired_t_test_one_sided(k_bolus, k_basal)
        result = {
            "n_pairs": len(rows),
            "mean_k_bolus": float(k_bolus.mean()),
            "mean_k_basal": float(k_basal.mean()),
            "t_statistic": t_stat,
            "p_value": p_value,
            "alternative": "k_bolus > k_basal",
        }
        with open(out_dir / "k_test.json", "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except click.ClickException:
        raise
    except Exception as exc:
        raise click.ClickException(str(exc))

    _write_manifest(
        out_dir,
        "inspect-k",
        {
            "inputs": str(ckpt_dir),
            "outputs": ["k_table.csv", "k_test.json"],
            "n_pairs": result["n_pairs"],
        },
        started,
    )
    click.echo(
        f"k_bolus mean {result['mean_k_bolus']:.3f} vs k_basal mean "
        f"{result['mean_k_basal']:.3f}, one-sided p = {result['p_value']:.4f}"
    )


if __name__ == "__main__":
    main()
