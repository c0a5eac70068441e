import csv
import json
import math

import numpy as np
import pytest

from mbekit import tensor as T
from mbekit.errors import ConfigError, NonFiniteLossError
from mbekit.tensor import Tensor
from mbekit.training import (
    Adam,
    EarlyStopper,
    RunConfig,
    Sgd,
    _Experiment,
    apply_overrides,
    config_from_dict,
    interior_layers,
    load_config,
    train,
)


class TestOptimizers:
    def test_sgd_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([0.5, -0.5])
        Sgd({"p": p}, learning_rate=0.1).step()
        np.testing.assert_allclose(p.data, [0.95, 2.05])

    def test_adam_first_step_size_is_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([3.0])
        Adam({"p": p}, learning_rate=0.01).step()
        # Bias correction makes the first update ~lr regardless of grad scale.
        np.testing.assert_allclose(p.data, [-0.01], atol=1e-8)

    def test_adam_converges_on_quadratic(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam({"p": p}, learning_rate=0.1)
        for _ in range(400):
            p.grad = 2.0 * p.data
            opt.step()
        assert abs(p.data[0]) < 1e-3


class TestEarlyStopper:
    def test_injected_sequence_halts_at_third_eval(self):
        stopper = EarlyStopper(threshold_fraction=0.2, activation_step=0)
        assert not stopper.update(1.0, 1)
        assert not stopper.update(0.9, 2)
        assert stopper.update(1.2, 3)

    def test_activation_step_gates_halting(self):
        stopper = EarlyStopper(threshold_fraction=0.2, activation_step=10)
        assert not stopper.update(1.0, 1)
        assert not stopper.update(2.0, 5)  # degraded but before activation
        assert stopper.update(2.5, 11)

    def test_improvement_never_halts(self):
        stopper = EarlyStopper(threshold_fraction=0.2, activation_step=0)
        for step, v in enumerate([1.0, 0.9, 0.8, 0.7], start=1):
            assert not stopper.update(v, step)


class TestRunConfig:
    def test_rejects_unknown_experiment(self):
        with pytest.raises(ConfigError):
            RunConfig(experiment="nope")

    def test_rejects_unknown_mode(self):
        with pytest.raises(ConfigError):
            RunConfig(experiment="conflict", controller_mode="magic")

    def test_overrides_dotted_paths(self):
        raw = {"experiment": "conflict", "optimizer": {"kind": "sgd"}}
        apply_overrides(raw, ["optimizer.learning_rate=0.5", "total_steps=7",
                              "gapt.lambda_mbe=0.2", "controller_mode=gapt"])
        config = config_from_dict(raw)
        assert config.optimizer.learning_rate == 0.5
        assert config.total_steps == 7
        assert config.gapt == {"lambda_mbe": 0.2}
        assert config.controller_mode == "gapt"

    def test_bad_override_format(self):
        with pytest.raises(ConfigError, match="key=value"):
            apply_overrides({}, ["oops"])

    def test_load_config_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"experiment": "conflict", "total_steps": 3}))
        config = load_config(path, ["seed=9"])
        assert config.total_steps == 3 and config.seed == 9

    def test_load_config_bad_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_interior_layers(self):
        assert interior_layers(4) == (2, 3)
        assert interior_layers(12) == tuple(range(2, 12))


class _ConstantExperiment(_Experiment):
    """Constant loss and constant representation: a synthetic feed for the
    controller; all gradients are zero so parameters never move."""

    def __init__(self, ce_values=None):
        self.params = {"w": Tensor(np.zeros((4, 3)), requires_grad=True)}
        self.layer_count = 1
        self.default_regularized = (1,)
        self.rep = np.vstack([np.diag([2.0, 1.0, 0.5]), np.zeros(3)])
        self.ce_values = ce_values
        self.calls = 0

    def sample_batch(self, rng):
        return None

    def forward(self, params, batch):
        self.calls += 1
        value = 1.0
        if self.ce_values is not None:
            value = self.ce_values[min(self.calls - 1, len(self.ce_values) - 1)]
        zero = T.scalar_mul(T.mean_all(params["w"]), 0.0)
        ce = T.add_scalar(zero, value)
        rep = T.add(T.scalar_mul(params["w"], 0.0), Tensor(self.rep))
        return ce, [rep]

    def validation_ce(self, params):
        return 1.0


def constant_config(**kw):
    base = dict(experiment="conflict", controller_mode="gapt",
                optimizer={"kind": "sgd", "learning_rate": 0.0},
                gapt={"delta": 1e-3, "tau": 0.05, "patience_mem": 3,
                      "patience_comp": 2, "lambda_mbe": 0.1,
                      "regularized_layers": [1]},
                total_steps=40, batch_size=4, eval_every=100)
    base.update(kw)
    return config_from_dict(base)


@pytest.fixture
def constant_feed(monkeypatch):
    exp = _ConstantExperiment()
    monkeypatch.setattr("mbekit.training.build_experiment", lambda config: exp)
    return exp


class TestLoopWithSyntheticFeed:
    def test_gapt_phase_cycles_under_constant_feed(self, constant_feed):
        # Hand simulation: memorization stalls for p_m steps, compression
        # entry resets the tracked minima so its first step is a free
        # patience reset, giving a steady cycle of p_m + p_c + 1 steps.
        config = constant_config(total_steps=40)
        log = train(config)
        phases = [r.phase for r in log.records]
        period = 3 + 2 + 1
        tail = phases[2 * period:]
        for i in range(len(tail) - period):
            assert tail[i] == tail[i + period]
        assert "comp" in phases and "mem" in phases

    def test_ce_only_never_transitions(self, constant_feed):
        config = constant_config(controller_mode="ce-only")
        log = train(config)
        assert all(r.phase == "mem" for r in log.records)
        assert all(r.transition == "" for r in log.records)

    def test_lagrangian_never_transitions(self, constant_feed):
        config = constant_config(controller_mode="lagrangian")
        log = train(config)
        assert all(r.phase == "comp" for r in log.records)
        assert all(r.transition == "" for r in log.records)

    def test_log_completeness(self, constant_feed):
        config = constant_config(total_steps=25, eval_every=10)
        log = train(config)
        assert [r.step for r in log.records] == list(range(1, 26))
        eval_steps = [r.step for r in log.records if r.val_ce is not None]
        assert eval_steps == [10, 20, 25]  # multiples plus the final step

    def test_abort_on_nonfinite_loss(self, monkeypatch, tmp_path):
        exp = _ConstantExperiment(ce_values=[1.0, 1.0, float("nan")])
        monkeypatch.setattr("mbekit.training.build_experiment", lambda config: exp)
        config = constant_config(total_steps=10, output_dir=str(tmp_path / "run"))
        with pytest.raises(NonFiniteLossError) as excinfo:
            train(config)
        assert excinfo.value.step == 3
        log = excinfo.value.run_log
        assert log.summary["status"] == "aborted"
        assert log.summary["abort"]["offending_quantity"] == "train_ce"
        # Partial log on disk is parseable and schema-complete.
        with open(tmp_path / "run" / "steps.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert rows[-1]["transition_reason"] == "non-finite-abort"
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["status"] == "aborted"


class TestConflictTraining:
    CONFIG = dict(
        experiment="conflict",
        optimizer={"kind": "sgd", "learning_rate": 0.05},
        task={"n_per_task": 64, "eval_n": 64},
        model={"hidden_dim": 16},
        total_steps=60,
        batch_size=16,
        eval_every=30,
        seed=3,
    )

    def test_mixed_training_reduces_both_losses(self):
        log = train(config_from_dict(self.CONFIG))
        assert log.summary["status"] == "completed"
        first = log.records[0].train_ce
        assert log.summary["l1_task1"] < first
        assert log.summary["l1_task2"] < first

    def test_reproducibility_bit_identical(self):
        a = train(config_from_dict(self.CONFIG))
        b = train(config_from_dict(self.CONFIG))
        assert len(a.records) == len(b.records)
        for ra, rb in zip(a.records, b.records):
            assert ra == rb
        assert a.summary == b.summary

    def test_run_log_files(self, tmp_path):
        config = config_from_dict({**self.CONFIG, "output_dir": str(tmp_path / "r")})
        log = train(config)
        with open(tmp_path / "r" / "steps.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(log.records)
        assert rows[0]["phase"] == "mem"
        assert "mbe_norm_l1" in rows[0]
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert summary["config"]["experiment"] == "conflict"


class TestArithmeticTraining:
    def test_small_run_completes_with_eval_metrics(self):
        config = config_from_dict(dict(
            experiment="arithmetic",
            task={"count_train": 400, "count_test_id": 40, "count_test_ood": 40,
                  "count_val_ood": 20},
            model={"layers": 2, "model_dim": 16, "heads": 2, "context_length": 16,
                   "unet_skips": True},
            total_steps=12,
            batch_size=8,
            eval_every=6,
            seed=1,
        ))
        log = train(config)
        assert log.summary["status"] == "completed"
        assert math.isfinite(log.summary["test_id_ce"])
        assert math.isfinite(log.summary["test_ood_ce"])
        assert set(log.records[0].mbe_norm) == {1, 2}


class TestLmTraining:
    def test_char_lm_short_run(self, tmp_path):
        corpus = tmp_path / "corpus.txt"
        corpus.write_bytes((b"the quick brown fox jumps over the lazy dog. " * 200))
        config = config_from_dict(dict(
            experiment="lm-pretrain",
            task={"corpus_path": str(corpus), "context_length": 16, "eval_batches": 2},
            model={"layers": 2, "model_dim": 16, "heads": 2, "context_length": 16},
            total_steps=10,
            batch_size=4,
            eval_every=5,
            seed=2,
        ))
        log = train(config)
        assert log.summary["status"] == "completed"
        assert log.records[-1].val_ce is not None
        assert log.summary["final_val_ce"] < math.log(256) + 0.5
