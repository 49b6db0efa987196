import math
from dataclasses import replace

import numpy as np
import pytest

from mhim import mining
from mhim.aggregators import EmptyBagError
from mhim.data import Bag, SyntheticSpec, generate
from mhim.metrics import auc
from mhim.numerics import ParameterError, Tape
from mhim.params_io import ParamFileError, load_params, save_params
from mhim.recycle import assemble
from mhim.training import (
    NumericAbort,
    TrainConfig,
    TrainConfigError,
    baseline_step,
    classification_loss,
    consistency_loss,
    cosine_lr,
    ema_update,
    fit,
    history_csv,
    infer,
    initialize,
    mine,
    pretrain_baseline,
    stream,
    train_step,
)

import oracles

SMALL = dict(dim=16, attn_dim=8, grn_heads=4, grn_queries=4, msa_heads=4, epochs=2,
             mask_ratio_high=0.1, mask_ratio_low=0.5, early_stopping=False)


def _cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def _bags(n=8, d=5, seed=0, sizes=(6, 12)):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.normal(size=(int(rng.integers(*sizes)), d))
        y = i % 2
        x[0] += 2.0 * y
        out.append(Bag(f"b{i}", x, y))
    return out


def _scratch_state(**kw):
    st = initialize(_cfg(init_mode="scratch", **kw), 5)
    st.total_steps = 100
    return st


# -- losses -------------------------------------------------------------------


def test_bce_values_and_gradient():
    t = Tape()
    store = {"l": np.array([[0.7]])}
    loss = classification_loss(t, t.param(store, "l"), 1)
    assert abs(loss.value[0, 0] - math.log1p(math.exp(-0.7))) <= 1e-15
    t.backward(loss)
    assert abs(t.gradients(store)["l"][0, 0] - (oracles.sigmoid(0.7) - 1)) <= 1e-15
    t = Tape()
    assert abs(classification_loss(t, t.constant([[-800.0]]), 0).value[0, 0]) <= 1e-300
    rng = np.random.default_rng(0)
    p = {"l": rng.normal(size=(1, 1)) * 3}
    for y in (0, 1):
        assert oracles.gradcheck(lambda t, p: classification_loss(t, t.param(p, "l"), y),
                                 p, rng, probes=10) <= 1e-4


def test_consistency_uniform_is_log_d():
    t = Tape()
    d = 7
    f = np.full((1, d), 0.3)
    assert abs(consistency_loss(t, f, t.constant(f), 1.0).value[0, 0] - math.log(d)) <= 1e-14


def test_consistency_rejects_bad_temperature():
    t = Tape()
    with pytest.raises(ParameterError):
        consistency_loss(t, np.ones((1, 3)), t.constant(np.ones((1, 3))), 0.0)


def test_consistency_gibbs_inequality():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = int(rng.integers(2, 20))
        ft, fs = rng.normal(size=(1, d)) * 3, rng.normal(size=(1, d)) * 3
        tau = float(rng.choice([0.1, 0.5, 1.0, 2.0]))
        val = consistency_loss(Tape(), ft, Tape().constant(fs), tau).value[0, 0]
        p = oracles.softmax_vec(ft[0] / tau)
        entropy = -np.sum(p[p > 0] * np.log(p[p > 0]))
        assert val >= entropy - 1e-12


def test_consistency_minimised_at_teacher_distribution():
    rng = np.random.default_rng(2)
    ft = rng.normal(size=(1, 6))
    tau = 0.5
    store = {"fs": np.zeros((1, 6))}
    for _ in range(20000):
        t = Tape()
        loss = consistency_loss(t, ft, t.param(store, "fs"), tau)
        t.backward(loss)
        store["fs"] -= 5.0 * t.gradients(store)["fs"]
    p = oracles.softmax_vec(ft[0] / tau)
    q = oracles.softmax_vec(store["fs"][0])
    assert np.sum(p * np.log(p / q)) <= 1e-6


def test_consistency_gradients():
    rng = np.random.default_rng(3)
    p = {"fs": rng.normal(size=(1, 9)), "ft": rng.normal(size=(1, 9))}

    def f(t, p):
        return consistency_loss(t, t.param(p, "ft"), t.param(p, "fs"), 0.5)

    assert oracles.gradcheck(f, p, rng, probes=10, names=["fs"]) <= 1e-4
    t = Tape()
    loss = f(t, p)
    t.backward(loss)
    g = t.gradients(p)
    assert not np.any(g["ft"])


# -- EMA ------------------------------------------------------------------------


def test_ema_examples():
    t = {"w": np.array([[1.0, 2.0]])}
    s = {"w": np.array([[5.0, -1.0]])}
    ema_update(t, s, 0.0)
    assert np.array_equal(t["w"], s["w"])
    t = {"w": np.array([[3.0]])}
    s = {"w": np.array([[1.0]])}
    for n in range(1, 201):
        ema_update(t, s, 0.9999)
        assert abs((t["w"][0, 0] - 1.0) - 2.0 * 0.9999 ** n) <= 1e-12
    with pytest.raises(ValueError):
        ema_update({"w": np.ones((1, 2))}, {"w": np.ones((2, 1))}, 0.5)


def test_ema_closed_form_trajectory():
    rng = np.random.default_rng(4)
    lam = 0.9
    theta0 = 1.7
    teacher = {"w": np.array([[theta0]])}
    students = rng.normal(size=60)
    for s in students:
        ema_update(teacher, {"w": np.array([[s]])}, lam)
    n = students.size
    closed = lam ** n * theta0 + (1 - lam) * sum(lam ** (n - 1 - i) * students[i] for i in range(n))
    assert abs(teacher["w"][0, 0] - closed) <= 1e-10


# -- schedule ---------------------------------------------------------------------


def test_cosine_lr():
    assert cosine_lr(2e-4, 0, 1000) == 2e-4
    assert cosine_lr(2e-4, 1000, 1000) == 0.0
    assert abs(cosine_lr(2e-4, 500, 1000) - 1e-4) <= 1e-18
    assert cosine_lr(2e-4, 2000, 1000) == 0.0


# -- initialisation ----------------------------------------------------------------


def test_init_scratch_teacher_is_independent_draw():
    cfg = _cfg(init_mode="scratch")
    st = initialize(cfg, 5)
    other = initialize(replace(cfg, framework="baseline"), 5)
    for k in st.student.params:
        assert np.array_equal(st.student.params[k], other.student.params[k])
        assert not np.array_equal(st.teacher.params[k], st.student.params[k])
    again = initialize(cfg, 5)
    for k in st.teacher.params:
        assert np.array_equal(st.teacher.params[k], again.teacher.params[k])


def test_init_from_pretrained(tmp_path):
    base = initialize(_cfg(framework="baseline", seed=9), 5)
    path = tmp_path / "pre.bin"
    save_params(path, base.student.params, base.student.hyper())
    st = initialize(_cfg(init_mode="teacher_init"), 5, path)
    for k, v in base.student.params.items():
        assert st.teacher.params[k].tobytes() == v.tobytes()
    assert not np.array_equal(st.student.params["proj.weight"], base.student.params["proj.weight"])
    st = initialize(_cfg(), 5, path)
    for k in ("proj.weight", "proj.bias"):
        assert st.student.params[k].tobytes() == base.student.params[k].tobytes()
    assert not np.array_equal(st.student.params["classifier.weight"],
                              base.student.params["classifier.weight"])
    with pytest.raises(ParamFileError):
        initialize(_cfg(), 5, tmp_path / "missing.bin")
    with pytest.raises(ParamFileError):
        initialize(_cfg(), 5)
    wrong = initialize(_cfg(framework="baseline", dim=8, grn_heads=4), 5)
    with pytest.raises(ParamFileError):
        initialize(_cfg(), 5, wrong.student.params)


def test_teacher_carries_no_optimizer_state():
    st = _scratch_state()
    train_step(st, _bags()[1], np.random.default_rng(0))
    assert set(st.optimizer.m) <= set(st.student.params) | set(st.grn.params)
    assert "grn.queries" not in st.optimizer.m
    for k in st.teacher.params:
        assert st.teacher.params[k].shape == st.student.params[k].shape


# -- steps -------------------------------------------------------------------------


def test_alpha_zero_is_pure_bce():
    st = _scratch_state(alpha=0.0)
    rep = train_step(st, _bags()[1], np.random.default_rng(0))
    assert rep.loss == rep.l_cls


def test_loss_composition_every_step():
    st = _scratch_state(alpha=0.7)
    rng = np.random.default_rng(1)
    for bag in _bags() * 2:
        rep = train_step(st, bag, rng)
        assert abs(rep.loss - (rep.l_cls + 0.7 * rep.l_con)) <= 1e-12


def test_lambda_one_freezes_teacher():
    st = _scratch_state(ema_momentum=1.0)
    before = {k: v.copy() for k, v in st.teacher.params.items()}
    train_step(st, _bags()[0], np.random.default_rng(2))
    for k, v in before.items():
        assert st.teacher.params[k].tobytes() == v.tobytes()


def test_teacher_only_moves_by_ema():
    st = _scratch_state(ema_momentum=0.5)
    rng = np.random.default_rng(3)
    for bag in _bags():
        old = {k: v.copy() for k, v in st.teacher.params.items()}
        train_step(st, bag, rng)
        for k, v in st.teacher.params.items():
            assert np.max(np.abs(v - (0.5 * old[k] + 0.5 * st.student.params[k]))) <= 1e-15


def test_queries_move_only_by_ema():
    st = _scratch_state(grn_momentum=0.8)
    q0 = st.grn.queries.q.copy()
    seen = []
    original = st.grn.update_queries
    st.grn.update_queries = lambda r: (seen.append(r.copy()), original(r))
    rep = train_step(st, _bags()[3], np.random.default_rng(4))
    assert rep.plan.recycle_idx.size > 0 and len(seen) == 1
    assert np.max(np.abs(st.grn.queries.q - (0.8 * q0 + 0.2 * seen[0]))) <= 1e-15


def test_baseline_reduction_single_step():
    kw = dict(mask_ratio_high=0.0, mask_ratio_low=0.0, grn_queries=0, alpha=0.0,
              ema_momentum=1.0, init_mode="scratch")
    mh = initialize(_cfg(**kw), 5)
    base = initialize(_cfg(framework="baseline", **kw), 5)
    mh.total_steps = base.total_steps = 10
    bag = _bags()[5]
    train_step(mh, bag, np.random.default_rng(0))
    baseline_step(base, bag)
    for k, v in base.student.params.items():
        assert np.max(np.abs(mh.student.params[k] - v)) <= 1e-12


def test_numeric_abort_names_tensor():
    st = _scratch_state()
    st.student.params["classifier.bias"][:] = np.nan
    with pytest.raises(NumericAbort, match="student logits"):
        train_step(st, _bags()[0], np.random.default_rng(0))


def _student_loss(st, bag, plan, f_t):
    """train_step's student graph as a function of one merged parameter store."""
    cfg = st.config

    def loss(t, p):
        st.student.params = p
        st.grn.params = p
        h = st.student.project(t, bag.features)
        z = t.gather_rows(h, plan.kept_idx)
        rec = st.grn.forward(t, t.gather_rows(h, plan.recycle_idx))
        z = assemble(t, z, rec)
        out = st.student.aggregate(t, z)
        l_cls = classification_loss(t, out.logits, bag.label)
        return t.add(l_cls, t.scale(consistency_loss(t, f_t, out.embedding, cfg.temperature),
                                    cfg.alpha))

    return loss


@pytest.mark.parametrize("model", ["gated", "msa"])
def test_full_student_pass_gradient(model):
    st = _scratch_state(model=model, msa_layers=1)
    bag = _bags(seed=5)[1]
    plan, f_t = mine(st, bag.features, np.random.default_rng(0), 0.1)
    store = {**st.student.params, **st.grn.params}
    rng = np.random.default_rng(6)
    assert oracles.gradcheck(_student_loss(st, bag, plan, f_t), store, rng, probes=10,
                             step=1e-5) <= 1e-4


# -- loops -------------------------------------------------------------------------


def test_fit_zero_epochs_equals_initialize():
    cfg = _cfg(init_mode="scratch")
    st, hist, _ = fit(_bags(), cfg, epochs=0)
    ref = initialize(cfg, 5)
    assert hist == []
    for k, v in ref.student.params.items():
        assert st.student.params[k].tobytes() == v.tobytes()
    for k, v in ref.teacher.params.items():
        assert st.teacher.params[k].tobytes() == v.tobytes()


def test_fit_is_deterministic():
    cfg = _cfg(init_mode="scratch", epochs=3)
    a, ha, pa = fit(_bags(), cfg, keep_plans=True)
    b, hb, pb = fit(_bags(), cfg, keep_plans=True)
    assert history_csv(ha) == history_csv(hb)
    for k, v in a.student_params().items():
        assert v.tobytes() == b.student_params()[k].tobytes()
    assert pa.keys() == pb.keys()


def test_fit_needs_both_classes():
    bags = [b for b in _bags() if b.label == 1]
    with pytest.raises(TrainConfigError):
        fit(bags, _cfg(init_mode="scratch"))


def test_early_stopping_halts():
    cfg = _cfg(init_mode="scratch", epochs=50, early_stopping=True, patience=1, lr=0.5)
    _, hist, _ = fit(_bags(), cfg)
    assert len(hist) < 50


def test_streams_are_independent():
    a = stream(0, "shuffle", 0).random(4)
    b = stream(0, "shuffle", 1).random(4)
    c = stream(0, "mining").random(4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(a, stream(0, "shuffle", 0).random(4))


def _separable(seed=0):
    spec = SyntheticSpec(n_bags=16, min_instances=20, max_instances=40, d_in=8, pos_ratio=0.2,
                         separation=6.0, noise_ratio=0.0)
    return generate(spec, seed).bags


def test_pretrain_zero_epochs_and_round_trip(tmp_path):
    bags = _separable()
    cfg = _cfg(pretrain_epochs=0)
    params = pretrain_baseline(bags, cfg, tmp_path / "p.bin")
    init = initialize(replace(cfg, framework="baseline"), 8)
    loaded, hyper = load_params(tmp_path / "p.bin")
    for k, v in init.student.params.items():
        assert params[k].tobytes() == v.tobytes() == loaded[k].tobytes()
    assert hyper["family"] == "gated"


def test_pretrain_fits_separable_data():
    bags = _separable()
    cfg = _cfg(pretrain_epochs=30, lr=2e-3)
    params = pretrain_baseline(bags, cfg)
    model = initialize(replace(cfg, framework="baseline"), 8).student
    model.params = params
    probs = [infer(model, None, b).score for b in bags]
    assert auc(probs, [b.label for b in bags]) >= 0.99
    assert all(p > 0.5 for p, b in zip(probs, bags) if b.label == 1)


def test_infer_is_pure_and_k0_is_plain_forward():
    st = _scratch_state()
    bag = _bags()[2]
    q = st.grn.queries.q.copy()
    a, b = infer(st.student, st.grn, bag), infer(st.student, st.grn, bag)
    assert a.prob.tobytes() == b.prob.tobytes()
    assert a.attention.tobytes() == b.attention.tobytes()
    assert a.instance_scores.tobytes() == b.instance_scores.tobytes()
    assert np.array_equal(q, st.grn.queries.q)
    assert abs(a.attention.sum() - 1) <= 1e-12 and a.attention.size == bag.n
    st0 = _scratch_state(grn_queries=0)
    plain = st0.student.forward(Tape(record=False), bag.features, trainable=False)
    res = infer(st0.student, st0.grn, bag)
    assert abs(res.prob[0] - oracles.sigmoid(plain.logits.value[0, 0])) <= 1e-15
    assert np.array_equal(res.attention, plain.attention / plain.attention.sum())
    with pytest.raises(EmptyBagError):
        infer(st.student, st.grn, np.zeros((0, 5)))


def test_mining_plan_is_valid_during_training():
    st = _scratch_state()
    rep = train_step(st, _bags()[7], np.random.default_rng(8))
    plan = rep.plan
    n = plan.n
    assert plan.high_mask.sum() == mining.ceil_count(rep.beta_h_eff, n)
    assert np.array_equal(np.union1d(plan.kept_idx, plan.recycle_idx), plan.survivors)
