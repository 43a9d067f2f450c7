"""Command-line harness: ``subknn <command> --config cfg.json [--seed N] [--out DIR]``.

Commands: train, eval, validate, ablate, theory, calib. The config file is a
flat JSON object; every key is listed in ``KEYS`` and anything else is
rejected before work starts. CSV outputs carry a header row, a trailing
newline and floats printed with 17 significant digits.

Exit codes: 0 ok, 2 config error, 3 data error (missing or malformed files),
4 numeric failure (diverged training, degenerate features).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen, metrics, ood_scoring, theory_lab, trainer
from .numcore import ContractError, DegenerateEmbeddingError, Rng, softmax
from .snn_layer import subspace_size

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("train", "eval", "validate", "ablate", "theory", "calib")
SCORERS = ("knn", "mahalanobis", "msp")
STRATEGIES = {"snn": "top", "random_subspace": "fixed", "least_relevance": "least"}
CALIB_LOSSES = (("nll", "nll"), ("ls", "label_smoothing"), ("fl", "focal"))

# key -> default; the default's type is the accepted type (None means "path or absent")
KEYS = {
    "seed": 0,
    "seeds": [1, 2, 3, 4, 5],
    "out": "out",
    # synthetic data
    "num_classes": 10,
    "ambient_dim": 256,
    "relevant_dims_per_class": 16,
    "class_separation": 4.0,
    "noise_sigma": 1.0,
    "samples_per_class": 500,
    "test_per_class": 100,
    "ood_count": 1000,
    "far_shift": None,
    "near_shift": None,
    # model and training
    "hidden": [128],
    "epochs": 100,
    "batch_size": 64,
    "lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "lr_drop_epochs": [50, 75, 90],
    "lr_drop_factor": 0.1,
    "loss": "nll",
    "alpha": 0.05,
    "gamma": 3.0,
    "r": 1.0,
    "strategy": "snn",
    # scoring
    "scorer": "knn",
    "k": 20,
    # files
    "checkpoint": None,
    "checkpoints": [],
    "checkpoint_losses": [],
    "data_dir": None,
    "ood_test": [],
    # validate / ablate
    "grid_r": [0.05, 0.15, 0.25, 0.35, 0.55, 0.75],
    "grid_k": [5, 10, 20, 50, 100, 200, 500, 1000],
    "noise_count": 1000,
    "sweep_r": [0.05, 0.15, 0.25, 0.35, 0.55, 0.75, 1.0],
    "sweep_k": [1, 5, 10, 20, 50, 100, 200, 500, 1000],
    # theory
    "dims": [2, 4, 8, 16],
    "theory_k": 100,
    "theory_N": 20000,
    "trials": 5,
    "n_eval": 200,
    "match": "level",
    "radius_quantile": 0.5,
}

_FLOAT_KEYS = {"class_separation", "noise_sigma", "lr", "momentum", "weight_decay",
               "lr_drop_factor", "alpha", "gamma", "r", "radius_quantile",
               "far_shift", "near_shift"}
_FLOAT_LIST_KEYS = {"grid_r", "sweep_r"}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- config --------------------------------------------------------------------

def _check_type(key, value):
    if key in _FLOAT_KEYS:
        if value is None and key in ("far_shift", "near_shift"):
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if key in _FLOAT_LIST_KEYS:
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of numbers")
        return [float(v) for v in value]
    default = KEYS[key]
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{key}: expected a path string")
        return value
    if key == "scorer":
        # one scorer name or a list of them
        names = [value] if isinstance(value, str) else value
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise ConfigError("scorer: expected a name or a list of names")
        return names
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        kind = type(default[0]) if default else str
        if not all(isinstance(v, kind) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of {kind.__name__}")
        return list(value)
    if isinstance(default, bool) or not isinstance(value, type(default)) or isinstance(value, bool):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_config(raw: dict) -> dict:
    """Merge ``raw`` over the defaults, rejecting unknown keys and bad types."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {k: _check_type(k, v) for k, v in KEYS.items()}
    for k, v in raw.items():
        cfg[k] = _check_type(k, v)
    for name in cfg["scorer"]:
        if name not in SCORERS:
            raise ConfigError(f"unknown scorer {name!r}; choose from {SCORERS}")
    if cfg["strategy"] not in STRATEGIES:
        raise ConfigError(f"unknown strategy {cfg['strategy']!r}")
    if cfg["match"] not in ("level", "gap"):
        raise ConfigError("match must be 'level' or 'gap'")
    if cfg["k"] < 1 or any(k < 1 for k in cfg["grid_k"] + cfg["sweep_k"]):
        raise ConfigError("every k must be >= 1")
    for r in [cfg["r"]] + cfg["grid_r"] + cfg["sweep_r"]:
        if not 0.0 < r <= 1.0:
            raise ConfigError(f"relevance ratio {r} outside (0, 1]")
    if not cfg["seeds"] or cfg["seed"] < 0 or any(s < 0 for s in cfg["seeds"]):
        raise ConfigError("seeds must be non-empty and non-negative")
    try:
        spec_from(cfg, cfg["seed"])
        train_config(cfg, cfg["seed"], cfg["r"], cfg["loss"])
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw)


def spec_from(cfg: dict, seed: int) -> datagen.SubspaceMixtureSpec:
    return datagen.SubspaceMixtureSpec(
        num_classes=cfg["num_classes"], ambient_dim=cfg["ambient_dim"],
        relevant_dims_per_class=cfg["relevant_dims_per_class"],
        class_separation=cfg["class_separation"], noise_sigma=cfg["noise_sigma"],
        samples_per_class=cfg["samples_per_class"], test_per_class=cfg["test_per_class"],
        seed=seed)


def train_config(cfg: dict, seed: int, r: float, loss: str) -> trainer.TrainConfig:
    kind = dict(CALIB_LOSSES).get(loss, loss)
    return trainer.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
        lr_drop_epochs=tuple(cfg["lr_drop_epochs"]), lr_drop_factor=cfg["lr_drop_factor"],
        loss=trainer.Loss(kind, cfg["alpha"], cfg["gamma"]), relevance_ratio=r, seed=seed)


# -- shared experiment steps ---------------------------------------------------------

@dataclass
class Benchmark:
    """ID splits plus the far and near OOD sets for one seed."""

    spec: datagen.SubspaceMixtureSpec
    data: datagen.IdData
    ood: dict  # name -> (n, d) inputs


def make_benchmark(cfg: dict, seed: int) -> Benchmark:
    spec = spec_from(cfg, seed)
    ood = {"far": datagen.generate_ood(spec, "far", cfg["far_shift"], cfg["ood_count"]),
           "near": datagen.generate_ood(spec, "near", cfg["near_shift"], cfg["ood_count"])}
    return Benchmark(spec, datagen.generate_id(spec), ood)


def train_model(cfg: dict, data: datagen.Dataset, seed: int, r: float,
                strategy: str = "snn", loss: str | None = None):
    """Build and train one model; returns (model, per-epoch loss history)."""
    hidden = tuple(cfg["hidden"])
    selection = STRATEGIES[strategy]
    fixed = None
    if selection == "fixed":
        fixed = ood_scoring.random_subspace_masks(
            data.num_classes, hidden[-1], subspace_size(r, hidden[-1]), seed)
    model = trainer.build_model(data.inputs.shape[1], hidden, data.num_classes, r, seed,
                                selection=selection, fixed_mask=fixed)
    return trainer.train(model, data, train_config(cfg, seed, r, loss or cfg["loss"]))


@dataclass
class Scorer:
    """Fitted OOD scorer on a trained model; ``score(inputs)`` returns ID-ness."""

    model: trainer.MlpModel
    bank: ood_scoring.EmbeddingBank
    maha: ood_scoring.MahalanobisModel | None = None

    @classmethod
    def fit(cls, model, train: datagen.Dataset, mahalanobis: bool = False) -> "Scorer":
        feats = trainer.extract_features(model, train.inputs)
        maha = None
        if mahalanobis:
            maha = ood_scoring.MahalanobisModel.fit(feats, train.labels, train.num_classes)
        return cls(model, ood_scoring.EmbeddingBank.build(feats, train.labels), maha)

    def score(self, inputs, scorer: str = "knn", k: int = 20) -> np.ndarray:
        if scorer == "msp":
            return ood_scoring.msp_score(self.model, inputs)
        feats = trainer.extract_features(self.model, inputs)
        if scorer == "knn":
            return ood_scoring.knn_score(self.bank, feats, k)
        if self.maha is None:
            self.maha = ood_scoring.MahalanobisModel.fit(
                self.bank.embeddings, self.bank.labels, int(self.bank.labels.max()) + 1)
        return ood_scoring.mahalanobis_score(self.maha, feats)


def detection_row(id_scores, ood_scores) -> tuple[float, float]:
    s = metrics.ScoreSet(id_scores, ood_scores)
    return metrics.fpr_at_95_tpr(s), metrics.auroc(s)


def benchmark_metrics(scorer: Scorer, bench: Benchmark, kind: str = "knn", k: int = 20) -> dict:
    """FPR95/AUROC on each OOD set and their mean over the sets."""
    sid = scorer.score(bench.data.test.inputs, kind, k)
    out = {}
    for name, x in bench.ood.items():
        out[f"fpr95_{name}"], out[f"auroc_{name}"] = detection_row(sid, scorer.score(x, kind, k))
    names = list(bench.ood)
    out["fpr95"] = float(np.mean([out[f"fpr95_{n}"] for n in names]))
    out["auroc"] = float(np.mean([out[f"auroc_{n}"] for n in names]))
    return out


# -- output ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def print_table(header, rows, file=None) -> None:
    cells = [list(header)] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r]
                              for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    for row in cells:
        print("  ".join(c.rjust(w) for c, w in zip(row, widths)), file=file or sys.stdout)


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# -- data files ------------------------------------------------------------------------

DATA_FILES = ("id_train", "id_val", "id_test", "ood_far", "ood_near")


def export_benchmark(bench: Benchmark, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    C = bench.spec.num_classes
    for name, ds in (("id_train", bench.data.train), ("id_val", bench.data.val),
                     ("id_test", bench.data.test)):
        ood_scoring.save_bank(directory / f"{name}.emb", ds.inputs, ds.labels)
    for name, x in bench.ood.items():
        # OOD rows carry the label C, one past the last class
        ood_scoring.save_bank(directory / f"ood_{name}.emb", x, np.full(len(x), C))
    manifest = dict(bench.spec.to_dict(), files=[f"{n}.emb" for n in DATA_FILES])
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(paths) -> None:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise DataError("missing input file(s): " + ", ".join(missing))


def _load_dataset(path, num_classes) -> datagen.Dataset:
    try:
        x, y = ood_scoring.load_bank(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return datagen.Dataset(x, y, num_classes)


def _load_inputs(path) -> np.ndarray:
    try:
        return ood_scoring.load_bank(path)[0]
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _load_checkpoint(path) -> trainer.MlpModel:
    try:
        return trainer.load_checkpoint(path)
    except (ValueError, struct.error) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _data_dir(cfg, checkpoint) -> Path:
    return Path(cfg["data_dir"]) if cfg["data_dir"] else Path(checkpoint).parent


# -- commands --------------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> int:
    seed = cfg["seed"]
    bench = make_benchmark(cfg, seed)
    model, history = train_model(cfg, bench.data.train, seed, cfg["r"], cfg["strategy"])
    out.mkdir(parents=True, exist_ok=True)
    trainer.save_checkpoint(model, out / "model.snn1")
    write_csv(out / "loss.csv", ["epoch", "loss"], enumerate(history))
    export_benchmark(bench, out)
    acc = trainer.id_accuracy(model, bench.data.test)
    print(f"trained r={cfg['r']} (s={model.output.s}) strategy={cfg['strategy']} "
          f"epochs={len(history)} test_acc={acc:.4f} -> {out / 'model.snn1'}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    ckpt = cfg["checkpoint"]
    if ckpt is None:
        raise ConfigError("eval needs 'checkpoint'")
    ddir = _data_dir(cfg, ckpt)
    ood_paths = cfg["ood_test"] or [ddir / "ood_far.emb", ddir / "ood_near.emb"]
    _require([ckpt, ddir / "id_train.emb", ddir / "id_test.emb", *ood_paths])
    model = _load_checkpoint(ckpt)
    train = _load_dataset(ddir / "id_train.emb", model.num_classes)
    test = _load_dataset(ddir / "id_test.emb", model.num_classes)
    if cfg["k"] > len(train):
        raise ConfigError(f"k={cfg['k']} exceeds the bank size {len(train)}")
    oods = {Path(p).stem: _load_inputs(p) for p in ood_paths}
    for name, x in oods.items():
        if x.shape[1] != model.input_dim:
            raise DataError(f"{name}: input dim {x.shape[1]} != model input dim {model.input_dim}")
    scorer = Scorer.fit(model, train)
    acc = trainer.id_accuracy(model, test)
    rows = []
    for kind in cfg["scorer"]:
        sid = scorer.score(test.inputs, kind, cfg["k"])
        for name, x in oods.items():
            fpr, auc = detection_row(sid, scorer.score(x, kind, cfg["k"]))
            rows.append([name, kind, cfg["k"], fpr, auc, acc])
    header = ["ood", "scorer", "k", "fpr95", "auroc", "id_acc"]
    write_csv(out / "eval.csv", header, rows)
    print_table(header, rows)
    return EXIT_OK


def select_best(cells) -> tuple[float, int, float]:
    """Highest AUROC over (r, k, auroc) cells; ties go to smaller k, then smaller r."""
    if not cells:
        raise ContractError("empty validation grid")
    return min(cells, key=lambda c: (-c[2], c[1], c[0]))


def cmd_validate(cfg: dict, out: Path) -> int:
    paths = cfg["checkpoints"] or ([cfg["checkpoint"]] if cfg["checkpoint"] else [])
    if not paths:
        raise ConfigError("validate needs 'checkpoints' (one per r)")
    if not cfg["grid_r"] or not cfg["grid_k"]:
        raise ConfigError("grid_r and grid_k must be non-empty")
    _require(paths)
    models = [_load_checkpoint(p) for p in paths]
    by_r = {}
    for r in cfg["grid_r"]:
        hit = [m for m in models if math.isclose(m.output.r, r, abs_tol=1e-9)]
        if hit:
            by_r[r] = hit[0]
    gaps = [r for r in cfg["grid_r"] if r not in by_r]
    if gaps:
        raise DataError("no checkpoint for r in " + ", ".join(f"{r:g}" for r in gaps))
    ddir = _data_dir(cfg, paths[0])
    _require([ddir / "id_train.emb", ddir / "id_val.emb"])
    C = models[0].num_classes
    train = _load_dataset(ddir / "id_train.emb", C)
    val = _load_dataset(ddir / "id_val.emb", C)
    if max(cfg["grid_k"]) > len(train):
        raise ConfigError(f"grid_k contains k > bank size {len(train)}")
    noise = datagen.gaussian_noise_validation(
        cfg["noise_count"], train.inputs.shape[1], Rng(cfg["seed"]).substream("validation-noise"))
    cells = []
    for r in cfg["grid_r"]:
        scorer = Scorer.fit(by_r[r], train)
        for k in cfg["grid_k"]:
            auc = detection_row(scorer.score(val.inputs, "knn", k),
                                scorer.score(noise, "knn", k))[1]
            cells.append((r, k, auc))
    best = select_best(cells)
    write_csv(out / "validate.csv", ["r", "k", "auroc"], cells)
    write_csv(out / "validate_best.csv", ["r", "k", "auroc"], [best])
    print_table(["r", "k", "auroc"], cells)
    print(f"best r={best[0]:g} k={best[1]} auroc={best[2]:.4f}")
    return EXIT_OK


SWEEP_HEADER = ["fpr95", "auroc", "fpr95_far", "fpr95_near", "auroc_far", "auroc_near"]


def _metric_row(results: list[dict]) -> list[float]:
    return [_median([r[key] for r in results]) for key in SWEEP_HEADER]


def cmd_ablate(cfg: dict, out: Path) -> int:
    """r-sweep at fixed k, k-sweep at fixed r, and the selection-strategy comparison.

    Every table holds medians over ``seeds``; ``ablate_runs.csv`` keeps the
    per-seed values.
    """
    r0, k0 = cfg["r"], cfg["k"]
    need_k = max([k0] + cfg["sweep_k"])
    if need_k > cfg["num_classes"] * (cfg["samples_per_class"] - max(1, cfg["samples_per_class"] // 10)):
        raise ConfigError(f"k={need_k} exceeds the training bank size")
    per_r = {r: [] for r in cfg["sweep_r"]}
    per_k = {k: [] for k in cfg["sweep_k"]}
    per_strategy = {s: [] for s in STRATEGIES}
    runs = []
    for seed in cfg["seeds"]:
        bench = make_benchmark(cfg, seed)
        cache = {}

        def scorer_for(r, strategy):
            if (r, strategy) not in cache:
                model, _ = train_model(cfg, bench.data.train, seed, r, strategy)
                cache[(r, strategy)] = Scorer.fit(model, bench.data.train)
            return cache[(r, strategy)]

        for r in cfg["sweep_r"]:
            res = benchmark_metrics(scorer_for(r, "snn"), bench, "knn", k0)
            per_r[r].append(res)
            runs.append(["r", seed, "snn", r, k0] + [res[h] for h in SWEEP_HEADER])
        for k in cfg["sweep_k"]:
            res = benchmark_metrics(scorer_for(r0, "snn"), bench, "knn", k)
            per_k[k].append(res)
            runs.append(["k", seed, "snn", r0, k] + [res[h] for h in SWEEP_HEADER])
        for strategy in STRATEGIES:
            res = benchmark_metrics(scorer_for(r0, strategy), bench, "knn", k0)
            per_strategy[strategy].append(res)
            runs.append(["strategy", seed, strategy, r0, k0] + [res[h] for h in SWEEP_HEADER])
        print(f"seed {seed} done", file=sys.stderr)
    r_rows = [[r, k0] + _metric_row(v) for r, v in per_r.items()]
    k_rows = [[r0, k] + _metric_row(v) for k, v in per_k.items()]
    s_rows = [[s, r0, k0] + _metric_row(v) for s, v in per_strategy.items()]
    write_csv(out / "ablate_r.csv", ["r", "k"] + SWEEP_HEADER, r_rows)
    write_csv(out / "ablate_k.csv", ["r", "k"] + SWEEP_HEADER, k_rows)
    write_csv(out / "ablate_strategy.csv", ["strategy", "r", "k"] + SWEEP_HEADER, s_rows)
    write_csv(out / "ablate_runs.csv", ["sweep", "seed", "strategy", "r", "k"] + SWEEP_HEADER, runs)
    for header, rows in ((["r", "k"], r_rows), (["r", "k"], k_rows), (["strategy", "r", "k"], s_rows)):
        print_table(header + SWEEP_HEADER[:2], [row[:len(header) + 2] for row in rows])
        print()
    return EXIT_OK


def cmd_theory(cfg: dict, out: Path) -> int:
    side = theory_lab.hypercube_side(10, 50000, 2048)
    print(f"hypercube_side(10, 50000, 2048) = {side:.10f}")
    report = theory_lab.dimension_sweep(
        cfg["dims"], cfg["theory_k"], cfg["theory_N"], cfg["trials"], cfg["seed"],
        match=cfg["match"], radius_quantile=cfg["radius_quantile"], n_eval=cfg["n_eval"])
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "theory.csv")
    print_table(["m", "delta_hat", "delta_true", "est_error"],
                [[r.m, r.delta_hat, r.delta_true, r.est_error] for r in report.rows])
    for m, why in report.failed.items():
        print(f"m={m} FAILED: {why}", file=sys.stderr)
    return EXIT_OK if not report.failed else EXIT_NUMERIC


def calibration_row(model, test: datagen.Dataset) -> tuple[float, float]:
    cal = metrics.CalibrationInput(softmax(trainer.logits(model, test.inputs)), test.labels)
    return metrics.ece(cal), metrics.sce(cal)


def cmd_calib(cfg: dict, out: Path) -> int:
    """ECE/SCE for every loss crossed with r=1 and r=cfg['r'].

    With ``checkpoints`` (and a parallel ``checkpoint_losses`` list) the models
    are loaded; otherwise the six models are trained here.
    """
    seed = cfg["seed"]
    rows = []
    if cfg["checkpoints"]:
        paths, tags = cfg["checkpoints"], cfg["checkpoint_losses"]
        if len(tags) != len(paths) or any(t not in dict(CALIB_LOSSES) for t in tags):
            raise ConfigError("checkpoint_losses must name nll/ls/fl for each checkpoint")
        _require(paths)
        models = [_load_checkpoint(p) for p in paths]
        ddir = _data_dir(cfg, paths[0])
        _require([ddir / "id_test.emb"])
        test = _load_dataset(ddir / "id_test.emb", models[0].num_classes)
        for tag, model in zip(tags, models):
            rows.append([tag, model.output.r, *calibration_row(model, test)])
    else:
        if cfg["r"] >= 1.0:
            raise ConfigError("calib compares r=1 against r<1; set 'r' below 1")
        bench = make_benchmark(cfg, seed)
        for tag, _ in CALIB_LOSSES:
            for r in (1.0, cfg["r"]):
                model, _ = train_model(cfg, bench.data.train, seed, r, "snn", loss=tag)
                rows.append([tag, r, *calibration_row(model, bench.data.test)])
    header = ["loss", "r", "ece", "sce"]
    write_csv(out / "calib.csv", header, rows)
    print_table(header, rows)
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "validate": cmd_validate,
            "ablate": cmd_ablate, "theory": cmd_theory, "calib": cmd_calib}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subknn", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed (ablate: run only this seed)")
    p.add_argument("--out", help="output directory (overrides the config 'out')")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg["seed"], cfg["seeds"] = args.seed, [args.seed]
        out = Path(args.out or cfg["out"])
        return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.TrainingDivergedError, DegenerateEmbeddingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
