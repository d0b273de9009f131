"""Desk-scale training loop and the ablation experiments as recipes.

One `train` call is fully deterministic given its config: batches, drop
plans, dropout masks, and bypass selections all come from counter-based
streams keyed by (seed, purpose, iteration), and BLAS is pinned to one
thread so re-runs are bit-identical.  Experiments fan independent cells
out across worker processes; results do not depend on worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import runio
from ._kernels import adam_step
from .budget import LayerTokenLedger, LRAxis, LRConfig, build_ledger, lr_at
from .corpus import Corpus, CorpusKind, make_corpus
from .model import (BypassConfig, BypassMetric, TokenLossEMA,
                    TransformerConfig, TransformerModel, lm_token_losses,
                    make_mlm_batch, mlm_loss, update_token_loss_ema)
from .schedule import (DropSchedule, ScheduleMode, _counter_rng, kept_length,
                       plan_iteration)
from .tensor import mean, no_grad

_DOMAIN_BATCH = 0x62617463    # "batc"
_DOMAIN_DROPOUT = 0x64726F70  # "drop"
_DOMAIN_BYPASS = 0x62797073   # "byps"
_DOMAIN_MLM = 0x6D6C6D30      # "mlm0"


class Method(Enum):
    BASELINE = "baseline"
    RANDOM_LTD = "random_ltd"
    TOKENBYPASS = "tokenbypass"


class TrainError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the metrics recorded so far."""

    def __init__(self, iteration: int, records):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.records = records


@dataclass(frozen=True)
class OptimizerConfig:
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    model: TransformerConfig
    sched: DropSchedule
    lr: LRConfig
    method: Method = Method.BASELINE
    batch_size: int = 16
    total_iters: int = 3000
    eval_every: int = 150
    seed: int = 1
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    bypass: BypassConfig | None = None
    corpus_kind: CorpusKind = CorpusKind.CHAR
    corpus_size: int = 120_000
    val_size: int = 8_192

    def __post_init__(self):
        if self.total_iters % self.eval_every != 0:
            raise TrainError(f"eval_every={self.eval_every} must divide "
                             f"total_iters={self.total_iters}")
        if self.lr.T != self.total_iters:
            raise TrainError(f"lr.T={self.lr.T} disagrees with "
                             f"total_iters={self.total_iters}")
        if self.sched.s != self.model.s:
            raise TrainError(f"schedule length {self.sched.s} disagrees "
                             f"with model length {self.model.s}")
        if self.method is Method.TOKENBYPASS and self.bypass is None:
            raise TrainError("tokenbypass method needs a bypass config")
        if self.corpus_size < 10 * self.model.s:
            raise TrainError(f"corpus_size={self.corpus_size} too small "
                             f"for sequence length {self.model.s}")


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    train_loss: float
    eval_loss: float
    ppl: float
    layertokens: int
    b_t: int
    lr: float


def accounting_schedule(cfg: TrainConfig) -> DropSchedule:
    """Schedule the LayerToken ledger runs on, per method.

    BASELINE consumes full length everywhere; TOKENBYPASS consumes a
    constant kept length over its span; RANDOM_LTD consumes its own
    drop schedule.
    """
    l = cfg.model.l
    if cfg.method is Method.BASELINE:
        return DropSchedule.no_drop(cfg.model.s, l, seed=cfg.sched.seed)
    if cfg.method is Method.TOKENBYPASS:
        b = max(1, round(cfg.bypass.keep_fraction * cfg.model.s))
        outside = (set(range(l))
                   - set(range(cfg.bypass.start_layer,
                               cfg.bypass.end_layer + 1)))
        return DropSchedule(s=cfg.model.s, b0=b, mode=ScheduleMode.CONSTANT,
                            exempt_layers=frozenset(outside),
                            seed=cfg.sched.seed)
    return cfg.sched


class AdamOptimizer:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, params, cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.moments = {p.name: (np.zeros(p.values.size, dtype=p.values.dtype),
                                 np.zeros(p.values.size, dtype=p.values.dtype))
                        for p in self.params}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                g = p.grad
                total += float(np.dot(g.reshape(-1), g.reshape(-1)))
        return math.sqrt(total)

    def step(self, lr: float):
        self.t += 1
        clip = self.cfg.grad_clip
        norm = self.grad_norm()
        scale = 1.0 if norm <= clip else clip / (norm + 1e-12)
        b1, b2 = self.cfg.betas
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad if scale == 1.0 else p.grad * scale
            m, v = self.moments[p.name]
            adam_step(p.values, g, m, v, lr, b1, b2, self.cfg.eps,
                      self.cfg.weight_decay, self.t)


def evaluate(model: TransformerModel, data: np.ndarray, batch_size: int,
             max_batches: int | None = None) -> float:
    """Mean token loss over consecutive full-length windows of `data`.

    Dropout off, full sequence length, no randomness consumed.
    """
    s = model.cfg.s
    n_windows = data.size // s
    if n_windows == 0:
        raise TrainError(f"evaluation stream shorter than one window ({s})")
    windows = data[:n_windows * s].reshape(n_windows, s)
    if max_batches is not None:
        windows = windows[:max_batches * batch_size]
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, windows.shape[0], batch_size):
            batch = windows[i:i + batch_size]
            logits = model.forward_baseline(batch)
            if model.cfg.causal:
                ce, _ = lm_token_losses(logits, batch)
                total += float(ce.values.sum())
                count += ce.values.size
            else:
                # deterministic pseudo-mask: every 7th position
                mask = np.zeros(batch.shape, dtype=bool)
                mask[:, ::7] = True
                ce = mlm_loss(logits, batch, mask)
                total += float(ce.values) * int(mask.sum())
                count += int(mask.sum())
    return total / count


def _sample_batch(train: np.ndarray, s: int, batch_size: int, seed: int,
                  t: int) -> np.ndarray:
    rng = _counter_rng(_DOMAIN_BATCH, seed, t)
    starts = rng.integers(0, train.size - s, size=batch_size)
    return np.stack([train[a:a + s] for a in starts])


def train(cfg: TrainConfig, corpus: Corpus | None = None,
          save_model_to=None) -> list[MetricsRecord]:
    """Run the full loop; returns one MetricsRecord per eval_every block.

    Deterministic: the metric log is a pure function of cfg (and the
    corpus, which itself is derived from cfg when not supplied).
    """
    if corpus is None:
        corpus = make_corpus(cfg.corpus_kind, cfg.seed, cfg.corpus_size,
                             cfg.val_size)
    model_cfg = cfg.model
    if model_cfg.vocab != corpus.vocab:
        model_cfg = replace(model_cfg, vocab=corpus.vocab)
    model = TransformerModel(model_cfg, dtype=np.float32)
    optim = AdamOptimizer(model.parameters(), cfg.optim)
    acct = accounting_schedule(cfg)
    ledger = build_ledger(acct, model_cfg.l, cfg.total_iters)
    ema = TokenLossEMA(model_cfg.vocab, cfg.bypass.ema_decay) \
        if cfg.method is Method.TOKENBYPASS else None

    records: list[MetricsRecord] = []
    with threadpool_limits(limits=1):
        for t in range(cfg.total_iters):
            batch = _sample_batch(corpus.train, model_cfg.s, cfg.batch_size,
                                  cfg.seed, t)
            drop_rng = (_counter_rng(_DOMAIN_DROPOUT, cfg.seed, t)
                        if model_cfg.dropout_rate > 0 else None)

            if model_cfg.causal:
                inputs, targets, mask = batch, batch, None
            else:
                mlm_rng = _counter_rng(_DOMAIN_MLM, cfg.seed, t)
                inputs, mask = make_mlm_batch(batch, corpus.mask_id,
                                              model_cfg.vocab, mlm_rng)
                targets = batch

            if cfg.method is Method.RANDOM_LTD:
                plans = plan_iteration(cfg.sched, t, model_cfg.l)
                logits = model.forward_random_ltd(inputs, plans, drop_rng)
            elif cfg.method is Method.TOKENBYPASS:
                sel_rng = _counter_rng(_DOMAIN_BYPASS, cfg.seed, t)
                logits = model.forward_tokenbypass(inputs, cfg.bypass, ema,
                                                   sel_rng, drop_rng)
            else:
                logits = model.forward_baseline(inputs, drop_rng)

            if model_cfg.causal:
                ce, ce_targets = lm_token_losses(logits, targets)
                loss = mean(ce)
            else:
                loss = mlm_loss(logits, targets, mask)
            train_loss = loss.item()

            if not math.isfinite(train_loss):
                records.append(MetricsRecord(t, train_loss, math.nan,
                                             math.nan,
                                             int(ledger.cumulative[t + 1]),
                                             kept_length(acct, t), math.nan))
                raise TrainingDiverged(t, records)

            model.zero_grad()
            loss.backward()
            lr = lr_at(cfg.lr, ledger, t)
            optim.step(lr)

            if ema is not None and model_cfg.causal:
                update_token_loss_ema(ema, ce_targets, ce.values)

            if (t + 1) % cfg.eval_every == 0:
                eval_loss = evaluate(model, corpus.val, cfg.batch_size)
                records.append(MetricsRecord(
                    iteration=t,
                    train_loss=train_loss,
                    eval_loss=eval_loss,
                    ppl=math.exp(eval_loss),
                    layertokens=int(ledger.cumulative[t + 1]),
                    b_t=kept_length(acct, t),
                    lr=lr,
                ))
    if save_model_to is not None:
        model.save(save_model_to)
    return records


# ---------------------------------------------------------------------------
# experiments


def _worker_count() -> int:
    env = os.environ.get("LTD_LAB_WORKERS")
    if env:
        return max(1, int(env))
    return min(2, os.cpu_count() or 1)


def _run_cell(args):
    name, cfg = args
    return name, train(cfg)


def _run_cells(cells: dict[str, TrainConfig]) -> dict[str, list[MetricsRecord]]:
    """Run independent training cells, possibly in parallel.

    Results are keyed by cell name, so worker count and completion
    order never affect the output.
    """
    workers = _worker_count()
    if workers <= 1 or len(cells) <= 1:
        return {name: train(cfg) for name, cfg in cells.items()}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(_run_cell, list(cells.items())))


def _mean_final_eval(records: list[MetricsRecord]) -> float:
    return records[-1].eval_loss


def matched_constant_kept_length(sched: DropSchedule, T: int) -> int:
    """Constant kept length with the same LayerToken saving as `sched`."""
    from .schedule import kept_length_array
    return max(1, round(float(kept_length_array(sched, T).mean())))


def compare_cell_configs(base: TrainConfig, methods, seeds) \
        -> dict[str, TrainConfig]:
    """Cell grid for the method comparison (criterion-7 style).

    Methods: baseline | random_ltd | constant_matched (same saving as
    the MSLG schedule) | constant_half + tokenbypass (the Set-2 pair at
    matched per-layer kept ratio).
    """
    l, s = base.model.l, base.model.s
    half = max(1, round(0.5 * s))
    cells = {}
    for seed in seeds:
        variants = {}
        if "baseline" in methods:
            variants["baseline"] = replace(
                base, method=Method.BASELINE,
                sched=DropSchedule.no_drop(s, l, seed=seed),
                lr=replace(base.lr, axis=LRAxis.ITERATION))
        if "random_ltd" in methods:
            variants["random_ltd"] = replace(
                base, method=Method.RANDOM_LTD,
                sched=replace(base.sched, seed=seed),
                lr=replace(base.lr, axis=LRAxis.LAYERTOKEN))
        if "constant_matched" in methods:
            b_const = matched_constant_kept_length(base.sched,
                                                   base.total_iters)
            variants["constant_matched"] = replace(
                base, method=Method.RANDOM_LTD,
                sched=DropSchedule(
                    s=s, b0=b_const, mode=ScheduleMode.CONSTANT,
                    exempt_layers=frozenset({0, l - 1}), seed=seed),
                lr=replace(base.lr, axis=LRAxis.LAYERTOKEN))
        if "constant_half" in methods:
            variants["constant_half"] = replace(
                base, method=Method.RANDOM_LTD,
                sched=DropSchedule(
                    s=s, b0=half, mode=ScheduleMode.CONSTANT,
                    exempt_layers=frozenset({0, l - 1}), seed=seed),
                lr=replace(base.lr, axis=LRAxis.LAYERTOKEN))
        if "tokenbypass" in methods:
            variants["tokenbypass"] = replace(
                base, method=Method.TOKENBYPASS,
                sched=DropSchedule.no_drop(s, l, seed=seed),
                lr=replace(base.lr, axis=LRAxis.ITERATION),
                bypass=BypassConfig(start_layer=1, end_layer=l - 2,
                                    keep_fraction=0.5,
                                    metric=BypassMetric.LOSS_EMA))
        for name, cfg in variants.items():
            cells[f"{name}_seed{seed}"] = replace(cfg, seed=seed)
    return cells


DEFAULT_COMPARE_METHODS = ("baseline", "random_ltd", "constant_matched",
                           "constant_half", "tokenbypass")


def experiment_compare(base: TrainConfig, methods=DEFAULT_COMPARE_METHODS,
                       seeds=(1, 2, 3), out_dir=None) -> dict:
    """Train every method under matched iterations and summarize.

    Per-cell metric CSVs carry the loss-vs-LayerToken curves; the
    report aggregates mean final eval losses per method.
    """
    cells = compare_cell_configs(base, methods, seeds)
    results = _run_cells(cells)
    report = {"experiment": "compare", "seeds": list(seeds), "cells": {}}
    outputs = []
    for method in methods:
        finals = []
        for seed in seeds:
            name = f"{method}_seed{seed}"
            records = results[name]
            finals.append(_mean_final_eval(records))
            if out_dir is not None:
                outputs.append(runio.write_metrics_csv(
                    Path(out_dir) / f"{name}.csv", records))
        report["cells"][method] = {
            "final_eval_loss": finals,
            "mean_final_eval_loss": float(np.mean(finals)),
        }
    if out_dir is not None:
        outputs.append(runio.write_json(Path(out_dir) / "summary.json",
                                        report))
    report["outputs"] = [str(p) for p in outputs]
    return report


def experiment_layer_sensitivity(base: TrainConfig, keep_fraction=0.5,
                                 seeds=(1, 2, 3), out_dir=None) -> dict:
    """Constant dropping applied to one layer at a time.

    Each cell exempts every layer except the probed one; a no-drop
    reference cell anchors the comparison.
    """
    l, s = base.model.l, base.model.s
    b = max(1, round(keep_fraction * s))
    cells = {}
    for seed in seeds:
        cells[f"nodrop_seed{seed}"] = replace(
            base, method=Method.BASELINE, seed=seed,
            sched=DropSchedule.no_drop(s, l, seed=seed),
            lr=replace(base.lr, axis=LRAxis.ITERATION))
        for layer in range(l):
            sched = DropSchedule(
                s=s, b0=b, mode=ScheduleMode.CONSTANT,
                exempt_layers=frozenset(set(range(l)) - {layer}), seed=seed)
            cells[f"layer{layer}_seed{seed}"] = replace(
                base, method=Method.RANDOM_LTD, seed=seed, sched=sched,
                lr=replace(base.lr, axis=LRAxis.ITERATION))
    results = _run_cells(cells)

    per_layer = {}
    for layer in range(l):
        finals = [_mean_final_eval(results[f"layer{layer}_seed{seed}"])
                  for seed in seeds]
        per_layer[layer] = float(np.mean(finals))
    nodrop = float(np.mean([_mean_final_eval(results[f"nodrop_seed{s_}"])
                            for s_ in seeds]))
    report = {"experiment": "sweep-layer", "seeds": list(seeds),
              "keep_fraction": keep_fraction, "kept_length": b,
              "per_layer_eval_loss": per_layer,
              "nodrop_eval_loss": nodrop}
    outputs = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        for name, records in results.items():
            outputs.append(runio.write_metrics_csv(out_dir / f"{name}.csv",
                                                   records))
        outputs.append(runio.write_csv(
            out_dir / "per_layer.csv", ["layer", "eval_loss"],
            [(layer, loss) for layer, loss in per_layer.items()]))
        outputs.append(runio.write_json(out_dir / "summary.json", report))
    report["outputs"] = [str(p) for p in outputs]
    return report


def experiment_dropout_interplay(base: TrainConfig, dropout_rate=0.1,
                                 seeds=(1,), out_dir=None) -> dict:
    """2x2 grid {baseline, random-LTD} x {dropout on, off} on a corpus
    small enough to overfit; reports each cell's overfitting gap
    (final eval loss minus best eval loss)."""
    cells = {}
    for seed in seeds:
        for method_name in ("baseline", "random_ltd"):
            for drop_name, rate in (("dropout", dropout_rate),
                                    ("nodropout", 0.0)):
                name = f"{method_name}_{drop_name}_seed{seed}"
                cfg = replace(
                    base, seed=seed,
                    model=replace(base.model, dropout_rate=rate))
                if method_name == "baseline":
                    cfg = replace(
                        cfg, method=Method.BASELINE,
                        sched=DropSchedule.no_drop(base.model.s, base.model.l,
                                                   seed=seed),
                        lr=replace(base.lr, axis=LRAxis.ITERATION))
                else:
                    cfg = replace(
                        cfg, method=Method.RANDOM_LTD,
                        sched=replace(base.sched, seed=seed),
                        lr=replace(base.lr, axis=LRAxis.LAYERTOKEN))
                cells[name] = cfg
    results = _run_cells(cells)

    report = {"experiment": "dropout-grid", "seeds": list(seeds),
              "dropout_rate": dropout_rate, "cells": {}}
    outputs = []
    for name, records in results.items():
        evals = [r.eval_loss for r in records]
        cell = name.rsplit("_seed", 1)[0]
        entry = report["cells"].setdefault(
            cell, {"final_eval_loss": [], "best_eval_loss": [],
                   "overfit_gap": []})
        entry["final_eval_loss"].append(evals[-1])
        entry["best_eval_loss"].append(min(evals))
        entry["overfit_gap"].append(evals[-1] - min(evals))
        if out_dir is not None:
            outputs.append(runio.write_metrics_csv(
                Path(out_dir) / f"{name}.csv", records))
    for entry in report["cells"].values():
        entry["mean_overfit_gap"] = float(np.mean(entry["overfit_gap"]))
    if out_dir is not None:
        outputs.append(runio.write_json(Path(out_dir) / "summary.json",
                                        report))
    report["outputs"] = [str(p) for p in outputs]
    return report
