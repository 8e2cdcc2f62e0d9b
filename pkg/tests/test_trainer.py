import numpy as np
import pytest

from esftlab import trainer as tr
from esftlab.autodiff import Tensor
from esftlab.model import ROUTED, MoEModel, MoEModelConfig, model_forward
from esftlab.selection import ExpertSelection, build_train_mask
from esftlab.tasks import Corpus, TaskSpec, gen_tasks
from esftlab.trainer import (
    Adam,
    NonFiniteLoss,
    TrainConfig,
    TrainReport,
    attach_lora,
    evaluate_forgetting,
    lora_parameter_count,
    merge_lora,
    mix_datasets,
    sample_selection_subset,
    train,
    windows,
)


def model8(**kw):
    return MoEModel(MoEModelConfig(**{**dict(vocab_size=16, d_model=8, n_layers=2, n_routed_experts=8,
                                             n_shared_experts=1, top_k=2, expert_hidden_dim=8,
                                             max_seq_len=16, seed=0), **kw}))


@pytest.fixture(scope="module")
def corpus():
    spec = TaskSpec("t", (0, 16), "markov", n_docs=60, doc_length=(16, 24), concentration=0.2, seed=4)
    return gen_tasks([spec], 16)["t"]


def cfg(**kw):
    return TrainConfig(**{**dict(method="fft", learning_rate=1e-2, batch_size=4, seq_len=12, max_steps=20,
                                 eval_every=10, seed=0), **kw})


# ---------------------------------------------------------------- data


def test_subset_exact_fit_and_determinism():
    c = Corpus([np.arange(10), np.arange(6), np.arange(8)], "x", 10)
    sub = sample_selection_subset(c, 3, 8, seed=1)
    assert len(sub) == 3 and all(len(d) == 8 for d in sub.documents)
    assert sub.token_count == c.token_count
    again = sample_selection_subset(c, 3, 8, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(sub.documents, again.documents))


def test_subset_deficit_named():
    c = Corpus([np.arange(10)], "x", 10)
    with pytest.raises(ValueError, match="6 short"):
        sample_selection_subset(c, 2, 8)


def test_subset_accepts_reference_scale():
    c = Corpus([np.zeros(2 ** 17, dtype=int)], "x", 2)
    assert sample_selection_subset(c, 32, 4096, validate_only=True) is None


def test_windows_shape():
    c = Corpus([np.arange(25)], "x", 25)
    w = windows(c, 8)
    assert w.shape == (3, 9)
    assert w[1, 0] == 8 and w[0, -1] == 8


@pytest.mark.parametrize("ratio,plan", [((1, 0), "TTTT"), ((1, 1), "TATA"), ((2, 1), "TTATTA")])
def test_mixing_schedule(ratio, plan):
    c = Corpus([np.arange(5)], "x", 5)
    sched = mix_datasets(c, c, ratio)
    assert "".join(s[0].upper() for s in sched.plan(len(plan))) == plan


def test_mixing_requires_sources():
    c = Corpus([np.arange(5)], "x", 5)
    with pytest.raises(ValueError):
        mix_datasets(c, None, (1, 1))
    with pytest.raises(ValueError):
        mix_datasets(None, c, (1, 1))
    assert mix_datasets(c, None, (1, 0)).plan(2) == ["task", "task"]


def test_batches_are_labelled_and_sized(corpus):
    sched = mix_datasets(corpus, corpus, (1, 1))
    rng = np.random.default_rng(0)
    label, b = sched.batch(1, 4, 12, rng)
    assert label == "alignment" and b.shape == (4, 13)


# ---------------------------------------------------------------- LoRA


def test_lora_zero_init_identity():
    model = model8()
    toks = np.array([[1, 2, 3, 4, 5]])
    before = model_forward(model, toks).data.copy()
    attach_lora(model, 8, 2.0)
    assert model_forward(model, toks).data.tobytes() == before.tobytes()


def test_lora_parameter_count_closed_form():
    model = attach_lora(model8(), 4, 2.0)
    d, h, L, n_exp = 8, 8, 2, 8 + 1
    per_layer = 4 * 4 * (d + d) + n_exp * (4 * (d + h) + 4 * (h + d))
    assert lora_parameter_count(model) == L * per_layer


def test_lora_rank_too_large():
    from esftlab.model import ConfigError

    with pytest.raises(ConfigError):
        attach_lora(model8(expert_hidden_dim=3), 4, 2.0)


def test_lora_merge_preserves_function():
    model = attach_lora(model8(), 2, 2.0, seed=1)
    rng = np.random.default_rng(0)
    for g, n, t in model.parameters():
        if n.endswith(".B"):
            t.data[:] = rng.standard_normal(t.shape) * 0.1
    toks = np.array([[3, 1, 4, 1, 5, 9]])
    before = model_forward(model, toks).data.copy()
    merge_lora(model)
    assert lora_parameter_count(model) == 0 and model.lora_scaling is None
    np.testing.assert_allclose(model_forward(model, toks).data, before, atol=1e-12)


def test_lora_training_moves_only_adapters(corpus):
    model = attach_lora(model8(), 2, 2.0)
    snap = model.snapshot()
    mask = build_train_mask(model, None, "none", adapters=True)
    train(model, mask, mix_datasets(corpus, None, (1, 0)), cfg(method="lora", max_steps=5))
    for (g, n), raw in model.snapshot().items():
        if n.endswith(".B"):
            assert raw != snap[(g, n)]
        elif not g.kind.startswith("lora:"):
            assert raw == snap[(g, n)]


# ---------------------------------------------------------------- training


def test_empty_mask_changes_nothing(corpus):
    model = model8()
    snap = model.snapshot()
    w = windows(corpus, 12, 8)
    rep = train(model, build_train_mask(model, None, "none"), mix_datasets(corpus, None, (1, 0)), cfg(),
                {"task": w})
    assert model.snapshot() == snap
    assert len({r["task_loss"] for r in rep.records}) == 1
    assert rep.optimizer_state_groups == []


def test_fft_reduces_task_loss(corpus):
    model = model8()
    w = windows(corpus, 12, 16)
    rep = train(model, build_train_mask(model, None, "all", True, True), mix_datasets(corpus, None, (1, 0)),
                cfg(max_steps=50, eval_every=25), {"task": w})
    assert rep.records[-1]["task_loss"] < rep.records[0]["task_loss"]
    assert [r["step"] for r in rep.records] == [0, 25, 50]


def test_esft_mask_freezes_everything_else(corpus):
    model = model8()
    sel = ExpertSelection([[0, 3], [2, 5]], 0.2, "token_selection_ratio", [0.3, 0.3])
    mask = build_train_mask(model, sel)
    snap = model.snapshot()
    rep = train(model, mask, mix_datasets(corpus, None, (1, 0)), cfg(max_steps=30))
    after = model.snapshot()
    for (g, n), raw in snap.items():
        if g in mask.groups:
            assert after[(g, n)] != raw
        else:
            assert after[(g, n)] == raw, (g, n)
    assert set(rep.optimizer_state_groups) == {str(g) for g in mask.groups}
    assert all(g.kind == ROUTED for g in mask.groups)


def test_adam_state_only_for_trainable():
    model = model8()
    groups = {g for g in model.groups if g.kind == ROUTED and g.expert == 1}
    opt = Adam(model, groups, 1e-3)
    assert {g for g, _ in opt.state} == groups


def test_adam_first_step_is_lr_times_sign():
    model = model8()
    g = next(g for g in model.groups if g.kind == ROUTED)
    opt = Adam(model, {g}, 0.01)
    p = model.groups[g]["w_in"]
    before = p.data.copy()
    p.grad = np.full(p.shape, -3.0)
    opt.step()
    np.testing.assert_allclose(p.data - before, 0.01, rtol=1e-6)


def test_training_is_deterministic(corpus):
    def run():
        model = model8()
        rep = train(model, build_train_mask(model, None, "all", True, True), mix_datasets(corpus, corpus, (1, 1)),
                    cfg(), {"general": windows(corpus, 12, 4)})
        return [{k: v for k, v in r.items() if k != "seconds_per_step"} for r in rep.records], model.snapshot()

    assert run() == run()


def test_non_finite_loss_aborts(corpus, monkeypatch):
    model = model8()
    monkeypatch.setattr(tr, "sequence_loss", lambda m, b: Tensor(np.nan))
    with pytest.raises(NonFiniteLoss, match="step 1"):
        train(model, build_train_mask(model, None, "all", True, True), mix_datasets(corpus, None, (1, 0)), cfg())


def test_report_round_trip(tmp_path, corpus):
    model = model8()
    rep = train(model, build_train_mask(model, None, "all", True, True), mix_datasets(corpus, None, (1, 0)),
                cfg(max_steps=4, eval_every=2), {"task": windows(corpus, 12, 2), "general": windows(corpus, 12, 2)})
    rep.save(tmp_path / "r.jsonl")
    back = TrainReport.load(tmp_path / "r.jsonl")
    assert back.records == rep.records and back.trainable_param_count == rep.trainable_param_count
    assert all(r["kl_vs_vanilla"] >= 0 for r in rep.records)
    assert rep.records[0]["kl_vs_vanilla"] == 0.0


def test_config_validation():
    from esftlab.model import ConfigError

    with pytest.raises(ConfigError):
        TrainConfig(method="sgd")
    with pytest.raises(ConfigError):
        TrainConfig(method="esft_gate", p=1.5)
    assert TrainConfig.for_method("esft_gate").p == 0.1


# ---------------------------------------------------------------- forgetting


def test_forgetting_identical_models(corpus):
    m = model8()
    f = evaluate_forgetting(m, m.clone(), corpus, 12)
    assert f.kl == 0.0 and f.delta_loss == 0.0


def test_forgetting_nonnegative_on_random_pairs(corpus):
    for seed in range(3):
        f = evaluate_forgetting(model8(seed=seed), model8(seed=seed + 10), corpus, 12)
        assert f.kl > 0


def test_forgetting_config_mismatch(corpus):
    with pytest.raises(ValueError):
        evaluate_forgetting(model8(), model8(expert_hidden_dim=4), corpus, 12)
