import itertools

import numpy as np
import pytest
from scipy import stats

from mpct import autodiff as ad
from mpct.data import SynthTransformSpec, synth_build
from mpct.errors import ConfigError, NumericDomainError
from mpct.losses import StepContext, build_objectives, consistency_loss, rotations
from mpct.training import (Adam, OptimizerState, Trainer, TrainingConfig, TrainingDiverged, TripleSelection,
                           adam_step, default_eval_plan, lr_at, sample_triple, train, tune_allocator)

PERMS = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def tiny_config(**kw):
    base = dict(gen_width=4, gen_down=2, gen_res=1, disc_width=4, disc_layers=2, eval_every=2, epochs=1)
    base.update(kw)
    return TrainingConfig(**base)


def perm_sets(n=3, count=6, seed=0, size=8):
    specs = {d: SynthTransformSpec("channel_permutation", PERMS[(d - 1) % 3]) for d in range(1, n + 1)}
    return synth_build(count, (3, size, size), specs, seed)


def one_param(value):
    p = ad.Tensor(np.array([value]), requires_grad=True)
    return ad.ParamSet([("w", p)])


def test_adam_first_step_example():
    params = one_param(1.0)
    adam_step(OptimizerState.zeros(params), params, {"w": np.array([0.1])}, 1e-4)
    assert params["w"].data[0] == pytest.approx(1.0 - 1e-4 * 0.1 / (0.1 + 1e-8), abs=1e-15)
    assert params["w"].data[0] == pytest.approx(0.99990, abs=1e-8)


def test_adam_zero_gradient_only_advances_t():
    params = one_param(2.0)
    state = OptimizerState.zeros(params)
    adam_step(state, params, {"w": np.zeros(1)}, 1e-3)
    assert params["w"].data[0] == 2.0
    assert state.t == 1 and state.m["w"][0] == 0.0 and state.v["w"][0] == 0.0


def test_adam_parallel_runs_bitwise_identical():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(3, 2)) for _ in range(100)]
    out = []
    for _ in range(2):
        params = ad.ParamSet([("w", ad.Tensor(np.ones((3, 2)), requires_grad=True))])
        opt = Adam(params)
        for g in grads:
            opt.step({"w": g}, 1e-3)
        out.append(params["w"].data.tobytes())
    assert out[0] == out[1]


def test_adam_rejects_non_finite_before_touching_anything():
    params = ad.ParamSet([("a", ad.Tensor(np.ones(2), requires_grad=True)),
                          ("b", ad.Tensor(np.ones(2), requires_grad=True))])
    state = OptimizerState.zeros(params)
    with pytest.raises(NumericDomainError, match="'b'"):
        adam_step(state, params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, 1e-3)
    assert state.t == 0 and np.all(params["a"].data == 1.0)
    with pytest.raises(ValueError):
        adam_step(state, params, {"a": np.ones(3), "b": np.ones(2)}, 1e-3)


def test_lr_examples():
    assert lr_at(0, 1e-4, 50) == 1e-4
    assert lr_at(5, 1e-4, 50) == 1e-4
    assert lr_at(45, 1e-4, 50) == pytest.approx(2e-5, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1, 1e-4, 50)


@pytest.mark.parametrize("total", [1, 10, 25, 50, 200])
def test_lr_non_increasing(total):
    vals = [lr_at(e, 1e-4, total) for e in range(total + 15)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(v >= 0 for v in vals)


def test_triple_selection_validation():
    assert TripleSelection(1, 2, 3).subset() == {1, 2, 3}
    with pytest.raises(ConfigError):
        TripleSelection(1, 1, 2)


def test_three_domains_always_full_set():
    rng = np.random.default_rng(0)
    assert all(sample_triple(3, rng).subset() == {1, 2, 3} for _ in range(200))


def test_sample_triple_needs_three_domains():
    with pytest.raises(ConfigError, match="auxiliary"):
        sample_triple(2, np.random.default_rng(0))


def test_sample_triple_uniform_over_subsets():
    rng = np.random.default_rng(2024)
    draws = 100_000
    counts = dict.fromkeys(map(frozenset, itertools.combinations(range(1, 6), 3)), 0)
    marg = np.zeros(6)
    for _ in range(draws):
        s = sample_triple(5, rng).subset()
        counts[s] += 1
        marg[list(s)] += 1
    obs = np.array(list(counts.values()))
    assert np.all(np.abs(obs - draws / 10) <= 0.05 * draws / 10)
    assert stats.chisquare(obs).pvalue > 0.001
    # each domain appears with probability 3/N
    assert np.allclose(marg[1:] / draws, 3 / 5, atol=0.01)


def test_sample_triple_deterministic():
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [tuple(sample_triple(6, r1)) for _ in range(50)] == [tuple(sample_triple(6, r2)) for _ in range(50)]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(mode="bogus").validate()
    with pytest.raises(ConfigError):
        TrainingConfig(alpha=-1).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(n_domains=2).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(n_domains=2, auxiliary_domain=2).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(auxiliary_domain=4).validate()
    TrainingConfig(n_domains=2, auxiliary_domain=3).validate()


def test_eval_plan():
    pairs, triples = default_eval_plan(TrainingConfig())
    assert len(pairs) == 6 and len(triples) == 6
    pairs, triples = default_eval_plan(TrainingConfig(n_domains=2, auxiliary_domain=3))
    assert pairs == [(1, 2), (2, 1)] and triples == [(1, 2, 3), (2, 1, 3)]


@pytest.mark.parametrize("mode_name", ["pairwise", "conditional"])
def test_ablation_reports_but_excludes_consistency(mode_name):
    trainer = Trainer(tiny_config(mode=mode_name, consistency_enabled=False), perm_sets())
    b = trainer.train_step()
    assert b.consistency > 0
    assert b.total == pytest.approx(b.dual + trainer.config.alpha * b.gan, rel=1e-12)


def test_two_domain_mode_uses_single_triple_objective():
    cfg = tiny_config(n_domains=2, auxiliary_domain=3, mode="pairwise")
    trainer = Trainer(cfg, perm_sets())
    assert all(trainer.next_roles() == [(1, 2, 3)] for _ in range(5))
    roles = trainer.next_roles()
    batches = trainer.next_batches(roles)
    bundle = trainer.objectives(batches, roles).bundle
    ctx = StepContext(trainer.bank, batches, trainer.discs)
    assert bundle.consistency == pytest.approx(consistency_loss(ctx, 1, 2, 3).item(), rel=1e-12)
    full = build_objectives(StepContext(trainer.bank, batches, trainer.discs), rotations(1, 2, 3), cfg.alpha).bundle
    assert bundle.total != pytest.approx(full.total, rel=1e-6)


@pytest.mark.parametrize("mode_name", ["pairwise", "conditional"])
def test_generator_step_descends_with_frozen_critics(mode_name):
    trainer = Trainer(tiny_config(mode=mode_name), perm_sets())
    roles = trainer.next_roles()
    batches = trainer.next_batches(roles)
    before = trainer.objectives(batches, roles).bundle.total_G
    d_before = {n: p.data.copy() for n, p in trainer.disc_params.items()}
    trainer.train_step(batches, roles, lr=1e-6, update_discriminator=False)
    after = trainer.objectives(batches, roles).bundle.total_G
    assert after < before
    assert all(np.array_equal(p.data, d_before[n]) for n, p in trainer.disc_params.items())


def test_non_finite_loss_aborts_with_checkpoint_path():
    trainer = Trainer(tiny_config(), perm_sets())
    trainer.last_checkpoint = "runs/x/checkpoints/step-000010.mpct"
    next(iter(trainer.gen_params.values())).data[...] = np.nan
    with pytest.raises(TrainingDiverged, match="step-000010"):
        trainer.train_step()


def test_zero_epochs_reports_initial_metrics_only():
    trainer, history = train(tiny_config(epochs=0), perm_sets())
    assert trainer.step == 0
    assert len(history.rows) == 1 and history.rows[0]["step"] == 0
    assert history.rows[0]["total"] is None and "gap_mean" in history.rows[0]


def test_train_is_deterministic():
    cfg = tiny_config(max_steps=3, seed=4)
    t1, h1 = train(cfg, perm_sets())
    t2, h2 = train(cfg, perm_sets())
    assert h1.rows == h2.rows
    assert [r["step"] for r in h1.rows] == [0, 2, 3]
    for (_, a), (_, b) in zip(t1.gen_params.items(), t2.gen_params.items()):
        assert a.data.tobytes() == b.data.tobytes()
    t3, h3 = train(tiny_config(max_steps=3, seed=5), perm_sets())
    assert h3.rows[-1]["gap_mean"] != h1.rows[-1]["gap_mean"]


def test_trainer_requires_all_domains():
    sets = perm_sets()
    del sets[3]
    with pytest.raises(ConfigError):
        Trainer(tiny_config(), sets)


def test_steps_per_epoch_and_lr():
    trainer = Trainer(tiny_config(batch_size=4, epochs=3), perm_sets(count=10))
    assert trainer.steps_per_epoch == 3 and trainer.total_steps == 9
    assert trainer.lr() == trainer.config.lr0


def test_allocator_tuning_is_idempotent():
    first = tune_allocator()
    assert isinstance(first, bool)
    assert tune_allocator() == first
