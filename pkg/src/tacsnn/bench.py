"""Experiment runners that turn a :class:`RunConfig` into a report mapping."""
from __future__ import annotations

import time
from dataclasses import asdict, replace

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, build
from .model import ModelConfig, SpikingConvNet
from .sparsity import SimdModel, max_speedup, row_compressibility, run_lab, skip_fraction
from .temporal import CallCounter, GroupSizeError, SpikeTrain, TemporalOpConfig, TemporalResolutionError, error_probe
from .train import Dataset, load_mnist, load_synth_gesture, train

SCHEMA_VERSION = 1


def load_data(cfg: RunConfig) -> Dataset:
    d, t = cfg.data, cfg.model.timesteps
    if d.dataset == "mnist":
        return load_mnist(d.n_train, d.n_test, d.size, t)
    return load_synth_gesture(d.n_train, d.n_test, d.size, t, d.seed, **(d.generator or {}))


def _header(cfg: RunConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "name": cfg.name, "experiment": cfg.experiment,
            "fingerprint": cfg.fingerprint, "config": cfg.raw, "seeds": list(cfg.seeds)}


def summarize(operator: str, k: int, accs: list[float], conv_calls: float, predicted: int, elapsed: float,
              best: list[float] | None = None) -> dict:
    return {
        "operator": operator, "K": k,
        "mean_acc": float(np.mean(accs)) if accs else None,
        "std_acc": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
        "mean_best_acc": float(np.mean(best)) if best else None,
        "conv_calls": conv_calls, "predicted_conv_calls": predicted,
        "elapsed_s": elapsed, "status": "ok", "error": "",
    }


def run_training(cfg: RunConfig, data: Dataset | None = None, log=None) -> dict:
    """Train one model per seed; accuracies are final-epoch test accuracy in percent."""
    data = data if data is not None else load_data(cfg)
    runs = []
    for seed in cfg.seeds:
        model = SpikingConvNet(cfg.model, seed)
        result = train(model, data, cfg.train, seed, log=(lambda m, s=seed: log(s, m)) if log else None)
        runs.append({
            "seed": seed,
            "epochs": [asdict(e) for e in result.epochs],
            "best_acc": result.best_acc,
            "final_acc": result.final_acc,
            "conv_calls_total": result.conv_calls_total,
            "forward_passes": result.forward_passes,
            "conv_calls_per_forward": result.conv_calls_per_forward,
            "predicted_conv_calls": result.predicted_conv_calls,
            "output_timesteps": result.output_timesteps,
            "epoch_seconds": result.epoch_seconds,
        })
    report = _header(cfg)
    report.update({
        "operator": cfg.operator, "K": cfg.group_size,
        "output_timesteps": cfg.model.output_timesteps(),
        "predicted_conv_calls": cfg.model.predicted_conv_calls(),
        "runs": runs,
    })
    calls = runs[0]["conv_calls_per_forward"] if runs else 0.0
    report["summary"] = summarize(cfg.operator, cfg.group_size, [r["final_acc"] for r in runs], calls,
                                  cfg.model.predicted_conv_calls(),
                                  float(np.mean([r["epoch_seconds"] for r in runs])) if runs else 0.0,
                                  [r["best_acc"] for r in runs])
    return report


def run_sweep(cfg: RunConfig, k_values: list[int], log=None) -> dict:
    """One training report per K; infeasible K values become error rows."""
    report = _header(cfg)
    report["experiment"] = "sweep"
    report["k_values"] = list(k_values)
    runs, rows, data = [], [], None
    for k in k_values:
        try:
            sub = build(apply_overrides(cfg.raw, k=k), f"{cfg.name}-k{k}")
            sub.model.output_timesteps()
        except (ConfigError, TemporalResolutionError, GroupSizeError) as exc:
            row = summarize(cfg.operator, k, [], 0, 0, 0.0)
            row.update(status="error", error=str(exc), mean_acc=None, std_acc=None)
            rows.append(row)
            continue
        data = data if data is not None else load_data(sub)
        r = run_training(sub, data, log)
        runs.append(r)
        rows.append(r["summary"])
    report["runs"] = runs
    report["rows"] = rows
    return report


def run_sparsity(cfg: RunConfig) -> dict:
    o = cfg.options
    rho, w = float(o.get("rho", 0.1)), int(o.get("lane_width", 32))
    seed = cfg.seeds[0]
    t0 = time.perf_counter()
    rows = [r.as_dict() for r in run_lab(seed, rho, w, int(o.get("n_vectors", 10**6)))]
    model = SimdModel(w, rho)
    report = _header(cfg)
    report["analytic"] = {
        "skip_fraction": skip_fraction(model),
        "max_speedup": max_speedup(model),
        "delta_density": 2 * rho * (1 - rho),
        "row_compressibility_cin2": row_compressibility(rho, 2, 3),
        "row_compressibility_cin128": row_compressibility(rho, 128, 3),
    }
    report["statistics"] = rows
    report["elapsed_s"] = time.perf_counter() - t0
    return report


def run_error_probe(cfg: RunConfig) -> dict:
    o = cfg.options
    k_values = [int(k) for k in o.get("k_values", [2, 4, 8])]
    rho = float(o.get("rho", 0.1))
    t0 = time.perf_counter()
    probe = error_probe(T=int(o.get("timesteps", 16)), k_values=k_values, rhos=(rho, 0.0),
                        beta=float(o.get("beta", 0.9)), n_trials=int(o.get("n_trials", 100)), seed=cfg.seeds[0])
    c = probe.fitted_constant(rho, k_values[0])
    errs = [probe.mean_error[(k, rho)] for k in k_values]
    rows = [{"k": k, "rho": rho, "mean_error": probe.mean_error[(k, rho)], "sem_error": probe.sem_error[(k, rho)],
             "bound": probe.bound(k, rho, c), "zero_rate_error": probe.mean_error[(k, 0.0)]} for k in k_values]
    report = _header(cfg)
    report["error_probe"] = {
        "beta": probe.beta, "n_trials": probe.n_trials, "weight_frobenius_sq": probe.weight_frobenius_sq,
        "fitted_constant": c, "rows": rows,
        "monotone": all(a <= b for a, b in zip(errs, errs[1:])),
        "within_bound": all(r["mean_error"] <= r["bound"] * (1 + 1e-12) for r in rows),
        "zero_rate_exact": all(r["zero_rate_error"] == 0.0 for r in rows),
    }
    report["elapsed_s"] = time.perf_counter() - t0
    return report


def count_conv_calls(model_cfg: ModelConfig, batch: int = 1, seed: int = 0) -> tuple[int, int]:
    """(measured calls, output timesteps) for one eval-mode forward pass on a random binary train."""
    rng = np.random.default_rng(seed)
    shape = (model_cfg.timesteps, batch, model_cfg.in_channels, model_cfg.input_size, model_cfg.input_size)
    train_in = SpikeTrain.from_array((rng.random(shape) < 0.1).astype(np.float32))
    counter = CallCounter()
    model = SpikingConvNet(model_cfg, seed)
    model.forward(train_in, counter, "eval")
    return counter.conv_calls, model_cfg.output_timesteps()


def run_call_accounting(cfg: RunConfig) -> dict:
    variants = cfg.options.get("variants") or [{"kind": "baseline", "k": 1}]
    rows = []
    t0 = time.perf_counter()
    for v in variants:
        kind, k = v.get("kind", "baseline"), int(v.get("k", 1))
        try:
            layers = [TemporalOpConfig(kind, k) for _ in cfg.model.widths]
            mc = replace(cfg.model, layers=layers)
            measured, t_out = count_conv_calls(mc, seed=cfg.seeds[0])
            rows.append({"operator": kind, "K": k, "conv_calls": measured,
                         "predicted_conv_calls": mc.predicted_conv_calls(), "output_timesteps": t_out,
                         "status": "ok", "error": ""})
        except (ValueError, TemporalResolutionError) as exc:
            rows.append({"operator": kind, "K": k, "conv_calls": None, "predicted_conv_calls": None,
                         "output_timesteps": None, "status": "error", "error": str(exc)})
    report = _header(cfg)
    report["call_accounting"] = rows
    report["elapsed_s"] = time.perf_counter() - t0
    return report


def execute(cfg: RunConfig, k_values: list[int] | None = None, log=None) -> dict:
    if cfg.experiment == "sparsity_lab":
        return run_sparsity(cfg)
    if cfg.experiment == "error_probe":
        return run_error_probe(cfg)
    if cfg.experiment == "call_accounting":
        return run_call_accounting(cfg)
    k_values = k_values or cfg.k_values
    if k_values:
        return run_sweep(cfg, k_values, log)
    return run_training(cfg, log=log)

