"""Run orchestration: optimizers, run configs, run logs, the training loop.

One process runs one experiment from a RunConfig; every step appends one
schema-complete record, evaluation runs every eval_every steps, and a
non-finite loss aborts with a parseable partial log on disk.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .controller import (
    COMPRESSION,
    MEMORIZATION,
    PHASE_NAMES,
    GaptConfig,
    GaptState,
    LossSmoother,
    ce_only_directive,
    composite_loss,
    gapt_step,
    lagrangian_directive,
)
from .data import (
    ArithmeticSpec,
    ConflictTaskSpec,
    batch_equations,
    char_corpus,
    gen_conflict_data,
    gen_multiplication_data,
    sample_block_batch,
)
from .entropy import mbe_alpha2
from .errors import (
    ConfigError,
    DegenerateRepresentationError,
    NonFiniteLossError,
    NonFiniteValueError,
)
from .nets import (
    MlpConfig,
    TransformerConfig,
    init_mlp_params,
    init_transformer_params,
    draw_param_shift,
    mlp_forward,
    transformer_forward,
)
from .tensor import Tape, Tensor

EXPERIMENTS = ("lm-pretrain", "conflict", "arithmetic", "grad-scan")
CONTROLLER_MODES = ("ce-only", "gapt", "lagrangian")


class Sgd:
    def __init__(self, params, learning_rate, weight_decay=0.0):
        self.params = params
        self.lr = learning_rate
        self.weight_decay = weight_decay

    def step(self):
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data -= self.lr * g

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class Adam:
    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999,
                 weight_decay=0.0, eps=1e-8):
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def make_optimizer(spec, params):
    if spec.kind == "sgd":
        return Sgd(params, spec.learning_rate, spec.weight_decay)
    if spec.kind == "adam":
        return Adam(params, spec.learning_rate, spec.beta1, spec.beta2,
                    spec.weight_decay)
    raise ConfigError(f"unknown optimizer kind {spec.kind!r}")


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0


@dataclass
class EarlyStopSpec:
    enabled: bool = False
    threshold_fraction: float = 0.20
    activation_step: int = None  # None: 45% of total_steps


class EarlyStopper:
    """Halts when validation CE degrades past best * (1 + threshold)."""

    def __init__(self, threshold_fraction, activation_step):
        if threshold_fraction <= 0:
            raise ConfigError("early-stop threshold_fraction must be > 0")
        self.threshold = threshold_fraction
        self.activation_step = activation_step
        self.best = None

    def update(self, value, step):
        halt = (
            self.best is not None
            and step > self.activation_step
            and value > self.best * (1.0 + self.threshold)
        )
        if self.best is None or value < self.best:
            self.best = value
        return halt


@dataclass
class RunConfig:
    experiment: str
    model: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    controller_mode: str = "ce-only"
    gapt: dict = field(default_factory=dict)
    total_steps: int = 1000
    batch_size: int = 32
    eval_every: int = 100
    early_stop: EarlyStopSpec = field(default_factory=EarlyStopSpec)
    seed: int = 0
    output_dir: str = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.controller_mode not in CONTROLLER_MODES:
            raise ConfigError(f"unknown controller mode {self.controller_mode!r}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")

    def gapt_config(self, default_layers):
        fields = dict(self.gapt)
        fields.setdefault("regularized_layers", tuple(default_layers))
        try:
            return GaptConfig(**fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid gapt config: {exc}") from exc


def _coerce(value):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(raw, overrides):
    """Apply --set key=value pairs (dotted paths) onto the raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into non-object at {part!r}")
        node[parts[-1]] = _coerce(value)
    return raw


def config_from_dict(raw):
    raw = dict(raw)
    try:
        if "optimizer" in raw:
            raw["optimizer"] = OptimizerSpec(**raw["optimizer"])
        if "early_stop" in raw:
            raw["early_stop"] = EarlyStopSpec(**raw["early_stop"])
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc


def load_config(path, overrides=()):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(apply_overrides(raw, overrides))


@dataclass
class RunRecord:
    step: int
    phase: str
    train_ce: float
    val_ce: float = None
    stall_mem: int = 0
    stall_comp: int = 0
    ce_min: float = math.inf
    transition: str = ""
    alignment_mean: float = None
    mbe_norm: dict = field(default_factory=dict)
    mbe_raw: dict = field(default_factory=dict)


@dataclass
class RunLog:
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def layer_ids(self):
        return sorted(self.records[0].mbe_norm) if self.records else []

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        layers = self.layer_ids()
        with open(out_dir / "steps.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["step", "phase", "train_ce", "val_ce", "s_m", "s_c",
                      "ce_min", "transition_reason", "alignment_mean"]
            header += [f"mbe_norm_l{i}" for i in layers]
            header += [f"mbe_raw_l{i}" for i in layers]
            writer.writerow(header)
            for r in self.records:
                row = [r.step, r.phase, r.train_ce,
                       "" if r.val_ce is None else r.val_ce,
                       r.stall_mem, r.stall_comp,
                       "inf" if math.isinf(r.ce_min) else r.ce_min,
                       r.transition,
                       "" if r.alignment_mean is None else r.alignment_mean]
                row += [r.mbe_norm.get(i, "") for i in layers]
                row += [r.mbe_raw.get(i, "") for i in layers]
                writer.writerow(row)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(_jsonable(self.summary | {"config": self.config}), fh, indent=2)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


class _Experiment:
    """One task family: data plumbing around a shared training loop."""

    # Subclasses set: params, layer_count, default_regularized, rep_rank_caps

    def sample_batch(self, rng):
        raise NotImplementedError

    def forward(self, params, batch):
        """Returns (ce_loss Tensor, reps list of (tokens, dim) Tensors)."""
        raise NotImplementedError

    def validation_ce(self, params):
        raise NotImplementedError

    def summary_extras(self, params):
        return {}


class _LmExperiment(_Experiment):
    def __init__(self, config):
        task = dict(config.task)
        corpus_path = task.get("corpus_path")
        if not corpus_path:
            raise ConfigError("lm task requires task.corpus_path")
        model = {"vocab_size": 256, "unet_skips": True, "seed": config.seed}
        model.update(config.model)
        self.net = TransformerConfig(**model)
        self.corpus = char_corpus(
            corpus_path,
            context_length=task.get("context_length", self.net.context_length),
            split_fraction=task.get("split_fraction", 0.1),
        )
        self.batch_size = config.batch_size
        self.eval_batches = task.get("eval_batches", 8)
        self.params = init_transformer_params(self.net)
        self.layer_count = self.net.layers
        self.default_regularized = interior_layers(self.net.layers)

    def sample_batch(self, rng):
        return sample_block_batch(self.corpus.train_blocks, self.batch_size, rng)

    def forward(self, params, batch):
        inputs, targets = batch
        bundle = transformer_forward(self.net, params, inputs)
        n, c = inputs.size, self.net.vocab_size
        ce = T.softmax_cross_entropy(
            T.reshape(bundle.logits, (n, c)), targets.reshape(-1)
        )
        return ce, bundle.layers

    def validation_ce(self, params):
        blocks = self.corpus.val_blocks
        total, count = 0.0, 0
        for start in range(0, min(len(blocks), self.eval_batches * self.batch_size),
                           self.batch_size):
            chunk = blocks[start:start + self.batch_size]
            ce, _ = self.forward(params, (chunk[:, :-1], chunk[:, 1:]))
            total += ce.item() * len(chunk)
            count += len(chunk)
        return total / count


class _ArithmeticExperiment(_Experiment):
    def __init__(self, config):
        task = dict(config.task)
        spec_fields = {k: v for k, v in task.items() if k in ArithmeticSpec.__dataclass_fields__}
        spec_fields.setdefault("seed", config.seed)
        if "train_digit_range" in spec_fields:
            spec_fields["train_digit_range"] = tuple(spec_fields["train_digit_range"])
        if "ood_digit_range" in spec_fields:
            spec_fields["ood_digit_range"] = tuple(spec_fields["ood_digit_range"])
        self.spec = ArithmeticSpec(**spec_fields)
        self.splits = gen_multiplication_data(self.spec)

        model = {"vocab_size": 14, "context_length": 32, "unet_skips": True,
                 "seed": config.seed}
        model.update(config.model)
        self.net = TransformerConfig(**model)
        self.batch_size = config.batch_size
        self.params = init_transformer_params(self.net)
        self.layer_count = self.net.layers
        self.default_regularized = interior_layers(self.net.layers)
        self._train = self.splits.train

    def _forward_equations(self, params, equations):
        inputs, targets, weights = batch_equations(equations)
        bundle = transformer_forward(self.net, params, inputs)
        n, c = inputs.size, self.net.vocab_size
        ce = T.softmax_cross_entropy(
            T.reshape(bundle.logits, (n, c)), targets.reshape(-1), weights.reshape(-1)
        )
        return ce, bundle.layers

    def sample_batch(self, rng):
        idx = rng.integers(0, len(self._train), size=self.batch_size)
        return [self._train[i] for i in idx]

    def forward(self, params, batch):
        return self._forward_equations(params, batch)

    def _split_ce(self, params, equations):
        total, count = 0.0, 0
        for start in range(0, len(equations), self.batch_size):
            chunk = equations[start:start + self.batch_size]
            ce, _ = self._forward_equations(params, chunk)
            total += ce.item() * len(chunk)
            count += len(chunk)
        return total / count

    def validation_ce(self, params):
        return self._split_ce(params, self.splits.val_ood)

    def summary_extras(self, params):
        return {
            "test_id_ce": self._split_ce(params, self.splits.test_id),
            "test_ood_ce": self._split_ce(params, self.splits.test_ood),
        }


class _ConflictExperiment(_Experiment):
    """Mixed-batch training on the two opposed regression tasks (L1 loss)."""

    def __init__(self, config):
        task = dict(config.task)
        model = {"seed": config.seed}
        model.update(config.model)
        self.net = MlpConfig(**model)
        teacher_cfg = MlpConfig(**{**model, "seed": task.get("teacher_seed", config.seed + 1)})
        teacher_params = init_mlp_params(teacher_cfg)
        delta = draw_param_shift(teacher_params, seed=task.get("delta_seed", config.seed + 2),
                                 scale=task.get("delta_scale", 0.5))
        spec_fields = {k: v for k, v in task.items()
                       if k in ConflictTaskSpec.__dataclass_fields__}
        spec_fields.setdefault("seed", config.seed)
        self.spec = ConflictTaskSpec(**spec_fields)
        self.tasks = gen_conflict_data(self.spec, teacher_cfg, teacher_params, delta)
        eval_spec = ConflictTaskSpec(
            n_per_task=task.get("eval_n", 512), sigma=self.spec.sigma,
            seed=self.spec.seed + 9999,
        )
        self.eval_tasks = gen_conflict_data(eval_spec, teacher_cfg, teacher_params, delta)
        self.batch_size = config.batch_size
        self.params = init_mlp_params(self.net)
        self.layer_count = 1
        self.default_regularized = (1,)

    def sample_batch(self, rng):
        (x1, y1), (x2, y2) = self.tasks
        half = max(1, self.batch_size // 2)
        i = rng.integers(0, len(x1), size=half)
        j = rng.integers(0, len(x2), size=half)
        return np.concatenate([x1[i], x2[j]]), np.concatenate([y1[i], y2[j]])

    def forward(self, params, batch):
        x, y = batch
        bundle = mlp_forward(self.net, params, x)
        loss = T.mean_all(T.abs_(T.sub(bundle.logits, Tensor(y))))
        return loss, bundle.layers

    def task_l1(self, params, task_index):
        x, y = self.eval_tasks[task_index]
        loss, _ = self.forward(params, (x, y))
        return loss.item()

    def validation_ce(self, params):
        return 0.5 * (self.task_l1(params, 0) + self.task_l1(params, 1))

    def summary_extras(self, params):
        return {"l1_task1": self.task_l1(params, 0),
                "l1_task2": self.task_l1(params, 1)}


def interior_layers(n_layers):
    """All but the first and last block, mirroring interior regularization."""
    if n_layers <= 2:
        return (1,) if n_layers == 1 else (2,)
    return tuple(range(2, n_layers))


def build_experiment(config):
    if config.experiment in ("lm-pretrain", "grad-scan"):
        return _LmExperiment(config)
    if config.experiment == "arithmetic":
        return _ArithmeticExperiment(config)
    if config.experiment == "conflict":
        return _ConflictExperiment(config)
    raise ConfigError(f"unknown experiment {config.experiment!r}")


def _rank_cap_log(rep):
    cap = min(rep.shape)
    return math.log(cap) if cap > 1 else 1.0


def measure_layer_mbe(reps, regularized, on_tape=True):
    """Per-layer normalized MBE; regularized layers stay on the tape.

    Returns (taped tensors by layer, normalized floats, raw-nats floats).
    """
    taped = {}
    norm_values = {}
    raw_values = {}
    for idx, rep in enumerate(reps, start=1):
        if on_tape and idx in regularized:
            value = mbe_alpha2(rep, normalize=True)
            taped[idx] = value
        else:
            value = mbe_alpha2(Tensor(rep.data), normalize=True)
        v = value.item()
        norm_values[idx] = v
        raw_values[idx] = v * _rank_cap_log(rep)
    return taped, norm_values, raw_values


def train(config, scan_hook=None):
    """Run one experiment; returns the RunLog (also written to output_dir).

    scan_hook(step, tape, ce, reps, params) runs inside the step's tape
    before the training backward; grad-scan uses it to snapshot per-group
    CE and MBE gradients (leaving all grads zeroed and the tape rewound).
    """
    exp = build_experiment(config)
    params = exp.params
    gapt_cfg = config.gapt_config(exp.default_regularized)
    regularized = set(gapt_cfg.regularized_layers)
    optimizer = make_optimizer(config.optimizer, params)
    rng = np.random.default_rng(config.seed)

    mode = config.controller_mode
    state = GaptState.initial(gapt_cfg) if mode == "gapt" else None
    smoother = LossSmoother(gapt_cfg.ema_beta)
    static_directive = None
    if mode == "ce-only":
        static_directive = ce_only_directive(gapt_cfg)
    elif mode == "lagrangian":
        static_directive = lagrangian_directive(gapt_cfg)

    stopper = None
    if config.early_stop.enabled:
        activation = config.early_stop.activation_step
        if activation is None:
            activation = int(0.45 * config.total_steps)
        stopper = EarlyStopper(config.early_stop.threshold_fraction, activation)

    log = RunLog(config=_config_dict(config))
    status = "completed"
    abort_info = None

    for step in range(1, config.total_steps + 1):
        batch = exp.sample_batch(rng)
        with Tape() as tape:
            bad = None
            ce_value = math.nan
            taped_mbe, mbe_norm, mbe_raw = {}, {}, {}
            try:
                ce, reps = exp.forward(params, batch)
                ce_value = ce.item()
                if not math.isfinite(ce_value):
                    bad = ("train_ce", ce_value)
                else:
                    need_tape_mbe = mode in ("gapt", "lagrangian")
                    taped_mbe, mbe_norm, mbe_raw = measure_layer_mbe(
                        reps, regularized if need_tape_mbe else set()
                    )
                    for idx, v in mbe_norm.items():
                        if not math.isfinite(v):
                            bad = (f"mbe_l{idx}", v)
                            break
            except (NonFiniteValueError, DegenerateRepresentationError) as exc:
                bad = ("forward", str(exc))
            if bad is not None:
                phase = PHASE_NAMES[state.phase] if state else _static_phase(static_directive)
                log.records.append(RunRecord(step=step, phase=phase, train_ce=ce_value,
                                             transition="non-finite-abort",
                                             mbe_norm=mbe_norm, mbe_raw=mbe_raw))
                status = "aborted"
                abort_info = {"step": step, "phase": phase,
                              "offending_quantity": bad[0], "value": bad[1]}
                break

            if mode == "gapt":
                state, directive = gapt_step(
                    state,
                    smoother.smooth("ce", ce_value),
                    {i: smoother.smooth(("mbe", i), mbe_norm[i]) for i in regularized},
                    gapt_cfg,
                )
            else:
                directive = static_directive

            alignment_mean = None
            if scan_hook is not None:
                alignment_mean = scan_hook(step, tape, ce, reps, params)

            loss = composite_loss(ce, taped_mbe, directive)
            optimizer.zero_grad()
            if loss._tape is not None:
                T.backward(loss)
            optimizer.step()

        record = RunRecord(
            step=step,
            phase=PHASE_NAMES[directive.phase],
            train_ce=ce_value,
            stall_mem=state.stall_mem if state else 0,
            stall_comp=state.stall_comp if state else 0,
            ce_min=state.ce_min if state else math.inf,
            transition=directive.transition.reason if directive.transition else "",
            alignment_mean=alignment_mean,
            mbe_norm=mbe_norm,
            mbe_raw=mbe_raw,
        )

        if step % config.eval_every == 0 or step == config.total_steps:
            record.val_ce = exp.validation_ce(params)
            if stopper is not None and stopper.update(record.val_ce, step):
                log.records.append(record)
                status = "early-stopped"
                break

        log.records.append(record)

    final_val = None
    for r in reversed(log.records):
        if r.val_ce is not None:
            final_val = r.val_ce
            break
    if status == "completed" and final_val is None:
        final_val = exp.validation_ce(params)

    last = log.records[-1] if log.records else None
    log.summary = {
        "status": status,
        "steps_run": last.step if last else 0,
        "final_val_ce": final_val,
        "final_mbe_norm": dict(last.mbe_norm) if last else {},
        "final_mbe_raw": dict(last.mbe_raw) if last else {},
        "controller_mode": mode,
        "regularized_layers": sorted(regularized),
        "seed": config.seed,
    }
    if abort_info:
        log.summary["abort"] = abort_info
    if status != "aborted":
        log.summary.update(exp.summary_extras(params))

    if config.output_dir:
        log.write(config.output_dir)
    if status == "aborted":
        exc = NonFiniteLossError(abort_info["step"], abort_info["phase"],
                                 abort_info["offending_quantity"], abort_info["value"])
        exc.run_log = log
        raise exc
    return log


def _static_phase(directive):
    return PHASE_NAMES[directive.phase] if directive else "mem"


def _config_dict(config):
    raw = asdict(config)
    return _jsonable(raw)
