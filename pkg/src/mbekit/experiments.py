"""Experiment families on top of the training loop.

grad_scan trains a character LM while snapshotting CE and MBE gradients
per parameter group (alignment, cross-batch consistency, oscillation
stats). run_conflict_suite trains the six conflicting-memory strategies
from identical init and tabulates L1 / MBE / separation. comparison_report
renders baseline-vs-treatment deltas from run summaries.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .controller import (
    GaptState,
    LossSmoother,
    ce_only_directive,
    composite_loss,
    gapt_step,
)
from .data import separation_metrics
from .diagnostics import (
    AlignmentSeries,
    GroupId,
    ce_mbe_alignment,
    cosine_similarity_with_flag,
    cross_batch_consistency,
    oscillation_stats,
    write_group_stats_csv,
)
from .entropy import mbe_alpha2
from .errors import ConfigError
from .nets import init_mlp_params, mlp_forward, parameter_group
from .tensor import Tensor
from .training import (
    RunLog,
    build_experiment,
    make_optimizer,
    train,
)

CONFLICT_STRATEGIES = (
    "pos-only", "neg-only", "pos-to-neg", "neg-to-pos", "mixed", "gapt-mbe",
)


# ---------------------------------------------------------------------------
# Gradient scan


@dataclass
class GradScanResult:
    alignment: dict  # GroupId -> AlignmentSeries (CE vs MBE)
    consistency: dict  # GroupId -> AlignmentSeries (CE across batches), k >= 2
    oscillation: dict  # GroupId -> OscillationStats
    run_log: RunLog


def _group_gradients(params, n_layers):
    """Concatenate current .grad per diagnostics group (sorted names)."""
    grouped = {}
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        grouped.setdefault(parameter_group(name, n_layers), []).append(p.grad.ravel())
    return {g: np.concatenate(vs) for g, vs in grouped.items()}


def grad_scan(config, k_batches=1, stride=1):
    """Train per config while snapshotting CE/MBE gradients per group.

    Per sampled step: CE gradients on k batches and MBE gradients on the
    same batches, each from its own backward pass over shared forward
    activations. Returns alignment and consistency series plus oscillation
    stats; CSVs land in config.output_dir when set.
    """
    if k_batches < 1:
        raise ConfigError("k_batches must be >= 1")
    exp = build_experiment(config)
    n_layers = exp.layer_count
    alignment = {}
    consistency = {}

    def snapshot(objective, params):
        for p in params.values():
            p.grad = None
        T.backward(objective)
        groups = _group_gradients(params, n_layers)
        for p in params.values():
            p.grad = None
        return groups

    def hook(step, tape, ce, reps, params):
        if step % stride != 0:
            return None
        graphs = [(ce, reps)]
        for _ in range(k_batches - 1):
            extra_batch = exp.sample_batch(hook.rng)
            graphs.append(exp.forward(params, extra_batch))

        ce_groups = []
        mbe_groups = []
        for ce_k, reps_k in graphs:
            tape.rewind()
            ce_groups.append(snapshot(ce_k, params))
            mbe_total = None
            for rep in reps_k:
                m = mbe_alpha2(rep, normalize=True)
                mbe_total = m if mbe_total is None else T.add(mbe_total, m)
            tape.rewind()
            mbe_groups.append(snapshot(mbe_total, params))
        tape.rewind()

        values = []
        for group in ce_groups[0]:
            # Groups the MBE objective never reaches (e.g. the output head)
            # have no gradient to compare against: degenerate, skipped.
            if any(group not in g for g in mbe_groups):
                continue
            ce_vecs = [g[group] for g in ce_groups]
            mbe_vecs = [g[group] for g in mbe_groups]
            value, degenerate = cosine_similarity_with_flag(ce_vecs[0], mbe_vecs[0])
            if degenerate:
                continue
            if k_batches > 1:
                value = ce_mbe_alignment(ce_vecs, mbe_vecs)
                consistency.setdefault(group, AlignmentSeries(group)).append(
                    step, cross_batch_consistency(ce_vecs)
                )
            alignment.setdefault(group, AlignmentSeries(group)).append(step, value)
            values.append(value)
        return float(np.mean(values)) if values else None

    hook.rng = np.random.default_rng(config.seed + 7919)
    run_log = train(config, scan_hook=hook)

    oscillation = {
        group: oscillation_stats(series.values)
        for group, series in alignment.items()
        if len(series) >= 8
    }
    result = GradScanResult(alignment=alignment, consistency=consistency,
                            oscillation=oscillation, run_log=run_log)
    if config.output_dir:
        _write_scan_csvs(Path(config.output_dir), result)
    return result


def _write_series_csv(path, series_by_group):
    groups = sorted(series_by_group)
    steps = sorted({s for g in groups for s in series_by_group[g].steps})
    lookup = {
        g: dict(zip(series_by_group[g].steps, series_by_group[g].values))
        for g in groups
    }
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [g.label() for g in groups])
        for step in steps:
            writer.writerow([step] + [lookup[g].get(step, "") for g in groups])


def _write_scan_csvs(out_dir, result):
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_series_csv(out_dir / "ce_mbe_alignment.csv", result.alignment)
    if result.consistency:
        _write_series_csv(out_dir / "ce_consistency.csv", result.consistency)
    write_group_stats_csv(out_dir / "oscillation.csv", result.oscillation)


# ---------------------------------------------------------------------------
# Conflict suite


@dataclass
class ConflictRow:
    strategy: str
    l1_pos: float
    l1_neg: float
    mbe_pos: float
    mbe_neg: float
    distance: float
    separation_ratio: float


@dataclass
class ConflictSuiteResult:
    rows: list = field(default_factory=list)

    def row(self, strategy):
        return next(r for r in self.rows if r.strategy == strategy)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strategy", "l1_pos", "l1_neg", "mbe_pos", "mbe_neg",
                            "distance", "separation_ratio"])
            for r in self.rows:
                writer.writerow([r.strategy, r.l1_pos, r.l1_neg, r.mbe_pos,
                                 r.mbe_neg, r.distance, r.separation_ratio])


def _strategy_batch(strategy, tasks, rng, batch_size, step, total_steps):
    (x1, y1), (x2, y2) = tasks
    half = max(1, batch_size // 2)
    if strategy == "pos-only":
        i = rng.integers(0, len(x1), size=batch_size)
        return x1[i], y1[i]
    if strategy == "neg-only":
        i = rng.integers(0, len(x2), size=batch_size)
        return x2[i], y2[i]
    if strategy == "pos-to-neg":
        x, y = (x1, y1) if step <= total_steps // 2 else (x2, y2)
        i = rng.integers(0, len(x), size=batch_size)
        return x[i], y[i]
    if strategy == "neg-to-pos":
        x, y = (x2, y2) if step <= total_steps // 2 else (x1, y1)
        i = rng.integers(0, len(x), size=batch_size)
        return x[i], y[i]
    # mixed and gapt-mbe share the interleaved batch layout
    i = rng.integers(0, len(x1), size=half)
    j = rng.integers(0, len(x2), size=half)
    return np.concatenate([x1[i], x2[j]]), np.concatenate([y1[i], y2[j]])


def run_conflict_suite(config):
    """Train all six strategies from identical init; tabulate the outcomes.

    The gapt-mbe strategy runs the phase controller with MBE weight on the
    hidden layer; everything else trains plain L1.
    """
    if config.experiment != "conflict":
        raise ConfigError("conflict suite requires experiment == 'conflict'")
    exp = build_experiment(config)
    gapt_cfg = config.gapt_config((1,))
    result = ConflictSuiteResult()

    for strategy in CONFLICT_STRATEGIES:
        params = init_mlp_params(exp.net)  # same seed: identical init
        optimizer = make_optimizer(config.optimizer, params)
        rng = np.random.default_rng(config.seed + 101)
        state = GaptState.initial(gapt_cfg)
        smoother = LossSmoother(gapt_cfg.ema_beta)
        use_gapt = strategy == "gapt-mbe"

        for step in range(1, config.total_steps + 1):
            batch = _strategy_batch(strategy, exp.tasks, rng, config.batch_size,
                                    step, config.total_steps)
            with T.Tape():
                loss, reps = exp.forward(params, batch)
                mbe = _conflict_batch_mbe(strategy, reps[0], config.batch_size)
                if use_gapt:
                    state, directive = gapt_step(
                        state,
                        smoother.smooth("ce", loss.item()),
                        {1: smoother.smooth("mbe", mbe.item())},
                        gapt_cfg,
                    )
                else:
                    directive = ce_only_directive(gapt_cfg)
                total = composite_loss(loss, {1: mbe}, directive)
                optimizer.zero_grad()
                T.backward(total)
                optimizer.step()

        result.rows.append(_conflict_row(strategy, exp, params))

    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / "conflict_suite.csv")
    return result


def _conflict_batch_mbe(strategy, rep, batch_size):
    """Hidden-layer MBE for the gate and the loss.

    Mixed-style batches stack the two tasks' halves; the regularized
    quantity is the mean of the per-task MBEs (the separation table's
    metric), not the joint cloud's, which joint compression would reduce
    by inflating the between-task direction instead of tightening tasks.
    """
    half = max(1, batch_size // 2)
    if strategy in ("mixed", "gapt-mbe") and rep.shape[0] >= 2 * half:
        a = mbe_alpha2(T.rows(rep, 0, half), normalize=True)
        b = mbe_alpha2(T.rows(rep, half, rep.shape[0]), normalize=True)
        return T.scalar_mul(T.add(a, b), 0.5)
    return mbe_alpha2(rep, normalize=True)


def _conflict_row(strategy, exp, params):
    (x1, _), (x2, _) = exp.eval_tasks
    reps1 = mlp_forward(exp.net, params, x1).layers[0].data
    reps2 = mlp_forward(exp.net, params, x2).layers[0].data
    separation = separation_metrics(reps1, reps2)
    return ConflictRow(
        strategy=strategy,
        l1_pos=exp.task_l1(params, 0),
        l1_neg=exp.task_l1(params, 1),
        mbe_pos=separation.per_task_mbe[0],
        mbe_neg=separation.per_task_mbe[1],
        distance=separation.distance,
        separation_ratio=separation.separation_ratio,
    )


# ---------------------------------------------------------------------------
# Comparison report


@dataclass
class ReportRow:
    metric: str
    base: float
    new: float

    @property
    def change_pct(self):
        if self.base == 0:
            return math.inf if self.new != 0 else 0.0
        return (self.new - self.base) / self.base * 100.0


@dataclass
class ComparisonReport:
    rows: list

    def render(self):
        lines = [f"{'metric':<16}{'base':>12}{'new':>12}{'change':>10}"]
        for r in self.rows:
            lines.append(
                f"{r.metric:<16}{r.base:>12.4f}{r.new:>12.4f}{r.change_pct:>9.2f}%"
            )
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "base", "new", "change_pct"])
            for r in self.rows:
                writer.writerow([r.metric, r.base, r.new, round(r.change_pct, 2)])


def comparison_report(base_summary, new_summary):
    """Baseline-vs-treatment table from two run summaries.

    Summaries are run-log summary dicts: final_val_ce plus per-layer
    final_mbe_norm. Experiment kinds must match when both declare one.
    """
    kind_a = _experiment_of(base_summary)
    kind_b = _experiment_of(new_summary)
    if kind_a and kind_b and kind_a != kind_b:
        raise ConfigError(f"mismatched experiment kinds: {kind_a!r} vs {kind_b!r}")

    rows = []
    if "final_val_ce" in base_summary and "final_val_ce" in new_summary:
        rows.append(ReportRow("val_ce", float(base_summary["final_val_ce"]),
                              float(new_summary["final_val_ce"])))
    for key in ("test_id_ce", "test_ood_ce"):
        if key in base_summary and key in new_summary:
            rows.append(ReportRow(key, float(base_summary[key]), float(new_summary[key])))
    base_mbe = base_summary.get("final_mbe_norm", {})
    new_mbe = new_summary.get("final_mbe_norm", {})
    shared = sorted(set(base_mbe) & set(new_mbe), key=lambda k: int(k))
    for layer in shared:
        rows.append(ReportRow(f"mbe_l{layer}", float(base_mbe[layer]),
                              float(new_mbe[layer])))
    if not rows:
        raise ConfigError("summaries share no comparable metrics")
    return ComparisonReport(rows=rows)


def _experiment_of(summary):
    config = summary.get("config") or {}
    return config.get("experiment")
