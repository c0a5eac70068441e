"""Gated phase transitions between memorization and compression.

The controller is a pure transition function over (state, ce_loss,
per-layer mbe): one branch per step, strict if/else, improvement deltas
computed against the pre-update minima. It emits a directive saying how to
weight CE and per-layer MBE in the step's loss, reflecting the phase after
the update.

A fixed-weight (Lagrangian) directive and a plain CE directive are provided
for the baseline modes; neither ever transitions.
"""

import math
from dataclasses import dataclass, field

from . import tensor as T
from .errors import NonFiniteValueError

MEMORIZATION = 1
COMPRESSION = 2

PHASE_NAMES = {MEMORIZATION: "mem", COMPRESSION: "comp"}

REASON_MEM_PATIENCE = "mem-patience"
REASON_COMP_PATIENCE = "comp-patience"
REASON_CE_DEGRADED = "ce-degraded"


@dataclass(frozen=True)
class GaptConfig:
    """Thresholds and patience for the phase gate.

    delta: improvement threshold shared by the CE and MBE stall tests.
    tau: relative CE degradation that aborts compression.
    ema_beta: harness-side smoothing of the losses fed to the gate
      (0 = off, the default: raw per-step batch losses).
    """

    delta: float = 1e-3
    tau: float = 0.02
    patience_mem: int = 50
    patience_comp: int = 25
    lambda_mbe: float = 0.05
    regularized_layers: tuple = ()
    ema_beta: float = 0.0

    def __post_init__(self):
        if self.delta <= 0 or self.tau <= 0:
            raise ValueError("delta and tau must be strictly positive")
        if self.patience_mem < 1 or self.patience_comp < 1:
            raise ValueError("patience values must be >= 1")
        if self.lambda_mbe < 0:
            raise ValueError("lambda_mbe must be >= 0")
        if not (0.0 <= self.ema_beta < 1.0):
            raise ValueError("ema_beta must lie in [0, 1)")
        object.__setattr__(self, "regularized_layers", tuple(self.regularized_layers))
        if self.lambda_mbe > 0 and not self.regularized_layers:
            raise ValueError("regularized_layers must be nonempty when lambda_mbe > 0")


@dataclass(frozen=True)
class GaptState:
    phase: int = MEMORIZATION
    stall_mem: int = 0
    stall_comp: int = 0
    ce_min: float = math.inf
    mbe_min: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def initial(cls, config):
        return cls(mbe_min={layer: math.inf for layer in config.regularized_layers})


@dataclass(frozen=True)
class Transition:
    from_phase: int
    to_phase: int
    reason: str


@dataclass(frozen=True)
class PhaseDirective:
    phase: int
    ce_weight: float
    mbe_weights: dict
    transition: Transition = None


def _directive(phase, config, transition=None):
    lam = config.lambda_mbe if phase == COMPRESSION else 0.0
    weights = {layer: lam for layer in config.regularized_layers}
    return PhaseDirective(phase=phase, ce_weight=1.0, mbe_weights=weights, transition=transition)


def gapt_step(state, ce_loss, mbe_per_layer, config):
    """One controller update; returns (new_state, directive).

    Branch order matters: in compression the CE-degradation check runs
    before any MBE bookkeeping, so a degraded step never updates the
    per-layer minima.
    """
    if not math.isfinite(ce_loss):
        raise NonFiniteValueError(f"controller received non-finite ce_loss: {ce_loss}")
    missing = [l for l in config.regularized_layers if l not in mbe_per_layer]
    if missing:
        raise KeyError(f"mbe_per_layer is missing regularized layers {missing}")

    delta_e = state.ce_min - ce_loss
    ce_min = min(state.ce_min, ce_loss)
    steps = state.step_count + 1
    transition = None

    if state.phase == MEMORIZATION:
        stall_mem = 0 if delta_e > config.delta else state.stall_mem + 1
        if stall_mem >= config.patience_mem:
            transition = Transition(MEMORIZATION, COMPRESSION, REASON_MEM_PATIENCE)
            new_state = GaptState(
                phase=COMPRESSION,
                stall_mem=0,
                stall_comp=0,
                ce_min=math.inf,
                mbe_min={layer: math.inf for layer in config.regularized_layers},
                step_count=steps,
            )
        else:
            new_state = GaptState(
                phase=MEMORIZATION,
                stall_mem=stall_mem,
                stall_comp=state.stall_comp,
                ce_min=ce_min,
                mbe_min=dict(state.mbe_min),
                step_count=steps,
            )
    else:
        if ce_loss > ce_min * (1.0 + config.tau):
            transition = Transition(COMPRESSION, MEMORIZATION, REASON_CE_DEGRADED)
            new_state = GaptState(
                phase=MEMORIZATION,
                stall_mem=0,
                stall_comp=0,
                ce_min=ce_min,
                mbe_min=dict(state.mbe_min),
                step_count=steps,
            )
        else:
            delta_m = max(
                state.mbe_min[l] - mbe_per_layer[l] for l in config.regularized_layers
            )
            mbe_min = {
                l: min(state.mbe_min[l], mbe_per_layer[l])
                for l in config.regularized_layers
            }
            stall_comp = 0 if delta_m > config.delta else state.stall_comp + 1
            if stall_comp >= config.patience_comp:
                transition = Transition(COMPRESSION, MEMORIZATION, REASON_COMP_PATIENCE)
                new_state = GaptState(
                    phase=MEMORIZATION,
                    stall_mem=0,
                    stall_comp=0,
                    ce_min=ce_min,
                    mbe_min=mbe_min,
                    step_count=steps,
                )
            else:
                new_state = GaptState(
                    phase=COMPRESSION,
                    stall_mem=state.stall_mem,
                    stall_comp=stall_comp,
                    ce_min=ce_min,
                    mbe_min=mbe_min,
                    step_count=steps,
                )

    return new_state, _directive(new_state.phase, config, transition)


class LossSmoother:
    """EMA over the scalar losses handed to the gate; identity at beta=0.

    Lives in the harness: the transition function itself stays pure and
    sees whatever the smoother emits.
    """

    def __init__(self, beta):
        self.beta = beta
        self._state = {}

    def smooth(self, key, value):
        if self.beta == 0.0:
            return value
        prev = self._state.get(key)
        new = value if prev is None else self.beta * prev + (1.0 - self.beta) * value
        self._state[key] = new
        return new


def lagrangian_directive(config):
    """Fixed CE + lambda*MBE weighting; no transitions ever.

    With lambda_mbe == 0 this collapses to the plain-CE directive.
    """
    if config.lambda_mbe == 0:
        return ce_only_directive(config)
    return _directive(COMPRESSION, config)


def ce_only_directive(config):
    """Plain cross-entropy baseline: memorization weights, forever."""
    return _directive(MEMORIZATION, config)


def composite_loss(ce, mbe_per_layer, directive):
    """ce_weight * ce + sum_i w_i * mbe_i as a tape scalar.

    Layers with zero weight are skipped (their MBE need not be on the tape);
    a nonzero weight whose layer is absent from the map is an error.
    """
    loss = ce if directive.ce_weight == 1.0 else T.scalar_mul(ce, directive.ce_weight)
    for layer, weight in sorted(directive.mbe_weights.items()):
        if weight == 0.0:
            continue
        if layer not in mbe_per_layer:
            raise KeyError(f"directive weights layer {layer} absent from the MBE map")
        loss = T.add(loss, T.scalar_mul(mbe_per_layer[layer], weight))
    return loss
