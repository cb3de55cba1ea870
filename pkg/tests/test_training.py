import copy

import numpy as np
import pytest

from cattransfer import autodiff as ad
from cattransfer.autodiff import Tape, Tensor
from cattransfer.dsmt import OverlapMap, assemble_source, weak_student_forward
from cattransfer.sgcn import sgcn_forward
from cattransfer.synthetic import ConfigError
from cattransfer import training as tr


def fresh(cfg, bundle, **kw):
    cfg = cfg.replace(**kw)
    return tr.init_state(cfg, bundle)


def snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# loss terms


def test_loss_mil_examples():
    y = np.array([[1.0, 0.0, 1.0]])
    assert tr.loss_mil(np.full((1, 3), 0.5), y).item() == pytest.approx(np.log(2))
    assert tr.loss_mil(y, y).item() <= 1e-6


def test_loss_full_all_background():
    c_f = 5
    logits = np.zeros((4, c_f + 1))
    loss = tr.loss_full(logits, np.ones((4, 4)), np.full(4, c_f), np.zeros(4, bool),
                        np.zeros((0, 4)))
    assert loss.item() == pytest.approx(np.log(c_f + 1))


def test_loss_full_perfect_limit():
    logits = np.full((2, 3), -50.0)
    logits[0, 1] = logits[1, 2] = 50.0
    deltas = np.array([[0.1, 0.2, 0.0, 0.3], [0, 0, 0, 0.0]])
    loss = tr.loss_full(logits, deltas, np.array([1, 2]), np.array([True, False]), deltas[:1])
    assert loss.item() < 1e-12


def test_loss_full_box_term_uses_foreground_only():
    logits = np.zeros((3, 2))
    deltas = np.array([[0.5, 0, 0, 0], [9.0, 9, 9, 9], [0, 0, 0, 0]])
    with_fg = tr.loss_full(logits, deltas, [0, 1, 0], np.array([True, False, False]),
                           np.zeros((1, 4))).item()
    assert with_fg == pytest.approx(np.log(2) + 0.125 / 4)


def test_loss_cons_full_identity_and_empty_overlap():
    rng = np.random.default_rng(0)
    c_f, c_w = 4, 3
    logits = rng.normal(size=(5, c_f + 1))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    m = OverlapMap(((0, 0), (2, 1)), c_f, c_w)
    teacher_probs = np.zeros((5, c_w + 1))
    teacher_probs[:, 0] = probs[:, 0]
    teacher_probs[:, 1] = probs[:, 2]
    d = rng.normal(size=(5, 4))
    assert tr.loss_cons_full(d, logits, d, teacher_probs, m).item() == pytest.approx(0, abs=1e-15)
    empty = OverlapMap((), c_f, c_w)
    td = d + 1.0
    assert tr.loss_cons_full(d, logits, td, teacher_probs, empty).item() == pytest.approx(1.0)


def test_loss_cons_weak_examples():
    v = np.array([[0.2, 0.7]])
    assert tr.loss_cons_weak(v, v).item() == 0.0
    assert tr.loss_cons_weak([[0.5]], [[0.0]]).item() == pytest.approx(0.125)


def test_loss_gradients():
    rng = np.random.default_rng(1)
    y = (rng.random((3, 4)) > 0.5).astype(float)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert ad.grad_check(lambda t: tr.loss_mil(ad.sigmoid(t), y), x) < 1e-6
    target = rng.uniform(size=(3, 4))
    assert ad.grad_check(lambda t: tr.loss_cons_weak(ad.sigmoid(t), target), x) < 1e-6
    logits = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    deltas = rng.normal(size=(6, 4)) * 0.3
    fg = np.array([1, 0, 1, 1, 0, 0], bool)
    assert ad.grad_check(lambda t: tr.loss_full(t, deltas, [0, 4, 1, 2, 4, 4], fg,
                                                np.zeros((3, 4))), logits) < 1e-4


def test_teacher_aggregate():
    probs = np.array([[0.1, 0.5, 0.4]])
    assert np.array_equal(tr.teacher_image_aggregate(probs), [[0.1, 0.5]])
    uniform = np.full((6, 4), 0.25)
    assert np.allclose(tr.teacher_image_aggregate(uniform, [0, 2, 6]), 0.25)
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(4), size=5)
    base = tr.teacher_image_aggregate(p)
    p[3, :3] = np.minimum(p[3, :3] + 0.3, 1.0)
    assert np.all(tr.teacher_image_aggregate(p) >= base)
    s = tr.teacher_image_aggregate(np.array([[0.6, 0.1, 0.3], [0.6, 0.2, 0.2]]),
                                   mode="sum_clamped")
    assert np.allclose(s, [[1.0, 0.3]])
    with pytest.raises(ConfigError):
        tr.teacher_image_aggregate(probs, mode="mean")


# --------------------------------------------------------------------------
# optimiser and batching


def test_sgd_update_order():
    p = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    opt = tr.SGD(lr=0.1, momentum=0.9, weight_decay=0.01)
    for g in ([[1.0, 1.0]], [[0.5, -1.0]]):
        p.grad = np.array(g)
        opt.step({"p": p})
    g1 = np.array([[1.0, 1.0]]) + 0.01 * np.array([[1.0, -2.0]])
    x1 = np.array([[1.0, -2.0]]) - 0.1 * g1
    g2 = np.array([[0.5, -1.0]]) + 0.01 * x1
    x2 = x1 - 0.1 * (0.9 * g1 + g2)
    assert np.allclose(p.data, x2, atol=1e-15)


def test_batch_indices_cover_each_epoch():
    n, size = 7, 3
    seen = [i for step in range(7) for i in tr.batch_indices(n, size, step, 5, 1)]
    for e in range(3):
        assert sorted(seen[e * n:(e + 1) * n]) == list(range(n))
    assert tr.batch_indices(n, size, 2, 5, 1) == tr.batch_indices(n, size, 2, 5, 1)
    assert tr.batch_indices(n, size, 0, 5, 1) != tr.batch_indices(n, size, 0, 5, 2)


def test_lr_decay(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle, lr_decay_steps=2, lr_decay_gamma=0.5)
    lrs = []
    for s in range(5):
        st.step = s
        lrs.append(st.current_lr())
    assert lrs == pytest.approx([0.002, 0.002, 0.001, 0.001, 0.0005])


# --------------------------------------------------------------------------
# train_step


def test_step_reports_and_counts(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle)
    rep = tr.step_on_bundle(st, small_bundle)
    assert st.step == 1
    parts = rep.l_mil + small_cfg.lambda_full * rep.l_full + \
        small_cfg.lambda_cons * (rep.l_cons_f + rep.l_cons_w)
    assert rep.loss == pytest.approx(parts, rel=1e-12)


def test_zero_weights_match_pure_mil(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle, lambda_full=0.0, lambda_cons=0.0)
    oracle = copy.deepcopy(st)
    tr.step_on_bundle(st, small_bundle)

    fb, wb = tr._batches(oracle, small_bundle)
    params = oracle.trainable()
    tr.SGD.zero_grad(params)
    with Tape() as tape:
        g = oracle.graph
        sem = sgcn_forward(g.A_hat_f, g.A_hat_w, g.B, g.H0_f, g.H0_w, oracle.sgcn)
        mil = weak_student_forward(wb.features, oracle.weak, wb.offsets,
                                   (sem.H_w, oracle.sgcn.g_w))
        tape.backward(tr.loss_mil(mil.image_scores, wb.labels))
    oracle.optimizer.step(params, oracle.current_lr())
    got = st.trainable()
    for k, p in params.items():
        assert np.array_equal(got[k].data, p.data), k


def test_ema_after_step(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle, ema_alpha=0.9)
    tr.step_on_bundle(st, small_bundle)
    before = snapshot(st.teacher.named())
    tr.step_on_bundle(st, small_bundle)
    src = assemble_source(st.teacher, st.full, st.weak, st.overlap)
    # source is computed from the post-SGD students, teacher from before
    for k, t in st.teacher.named().items():
        assert np.allclose(t.data, 0.9 * before[k] + 0.1 * src[k], rtol=0, atol=1e-14)


def test_alpha_zero_teacher_is_source(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle, ema_alpha=0.0)
    tr.step_on_bundle(st, small_bundle)
    src = assemble_source(st.teacher, st.full, st.weak, st.overlap)
    for k, t in st.teacher.named().items():
        assert np.array_equal(t.data, src[k])


def test_initial_teacher_is_source(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle)
    src = assemble_source(st.teacher, st.full, st.weak, st.overlap)
    for k, t in st.teacher.named().items():
        assert np.array_equal(t.data, src[k])


def test_lambda_cons_linearity(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle)
    for _ in range(2):
        tr.step_on_bundle(st, small_bundle)
    fb, wb = tr._batches(st, small_bundle)
    totals = {}
    for c in (0.0, 1.0, 3.0):
        st.config = st.config.replace(lambda_cons=c)
        total, terms = tr.compute_loss(st, fb, wb)
        totals[c] = total.item()
    cons = terms["l_cons_f"].item() + terms["l_cons_w"].item()
    assert totals[1.0] - totals[0.0] == pytest.approx(cons, rel=1e-12)
    assert totals[3.0] - totals[0.0] == pytest.approx(3 * cons, rel=1e-12)


def test_setting_a_leaves_disabled_params(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle, enable_dsmt=False, enable_sgcn=False)
    full0 = snapshot(st.full.named())
    sg0 = snapshot(st.sgcn.named())
    weak0 = snapshot(st.weak.named())
    t0 = snapshot(st.teacher.named())
    for _ in range(3):
        rep = tr.step_on_bundle(st, small_bundle)
    assert rep.l_full == 0.0 and rep.l_cons_f == 0.0
    assert all(np.array_equal(st.full.named()[k].data, v) for k, v in full0.items())
    assert all(np.array_equal(st.sgcn.named()[k].data, v) for k, v in sg0.items())
    assert any(not np.array_equal(st.weak.named()[k].data, v) for k, v in weak0.items())
    # plain mean teacher: no source for background and regression
    assert np.array_equal(st.teacher.reg.W.data, t0["reg.W"])
    assert np.array_equal(st.teacher.cls.W.data[:, -1], t0["cls.W"][:, -1])


def test_trainable_sets(small_cfg, small_bundle):
    names = set(fresh(small_cfg, small_bundle).trainable())
    assert any(n.startswith("sgcn.") for n in names) and any(n.startswith("full.") for n in names)
    assert not any(n.startswith("teacher.") for n in names)
    b = set(fresh(small_cfg, small_bundle, enable_sgcn=False).trainable())
    assert not any(n.startswith("sgcn.") for n in b)


def test_non_finite_loss_raises(small_cfg, small_bundle):
    st = fresh(small_cfg, small_bundle)
    st.weak.phi_c.W.data[:] = np.nan
    with pytest.raises(tr.NumericalError, match="l_mil"):
        tr.step_on_bundle(st, small_bundle)
    assert st.step == 0


def test_config_category_mismatch(small_cfg, small_bundle):
    with pytest.raises(ConfigError):
        tr.init_state(small_cfg.replace(c_w=small_cfg.c_w + 1), small_bundle)


# --------------------------------------------------------------------------
# checkpoints and runs


def test_checkpoint_round_trip_trajectory(small_cfg, small_bundle, tmp_path):
    st = fresh(small_cfg, small_bundle)
    for _ in range(3):
        tr.step_on_bundle(st, small_bundle)
    path = tmp_path / "ck.json"
    tr.save_checkpoint(st, path)
    a = [tr.step_on_bundle(st, small_bundle) for _ in range(10)]
    restored = tr.load_checkpoint(fresh(small_cfg, small_bundle), path)
    assert restored.step == 3
    b = [tr.step_on_bundle(restored, small_bundle) for _ in range(10)]
    assert a == b
    for k, v in st.all_params().items():
        assert np.array_equal(restored.all_params()[k].data, v.data)


def test_checkpoint_rejects_bad_files(small_cfg, small_bundle, tmp_path):
    st = fresh(small_cfg, small_bundle)
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    with pytest.raises(ConfigError):
        tr.load_checkpoint(st, bad)
    bad.write_text('{"format": "other", "version": 1}')
    with pytest.raises(ConfigError):
        tr.load_checkpoint(st, bad)
    good = tmp_path / "good.json"
    tr.save_checkpoint(st, good)
    other = fresh(small_cfg, small_bundle, hidden2=small_cfg.d + 1)
    with pytest.raises(ConfigError):
        tr.load_checkpoint(other, good)
    assert tr.checkpoint_config_text(good) == small_cfg.to_text()


def test_zero_steps_empty_log(small_cfg, small_bundle):
    st, rows = tr.run_training(small_cfg.replace(steps=0), small_bundle)
    assert rows == [] and st.step == 0
    assert tr.metrics_csv(rows) == ",".join(tr.LOG_COLUMNS) + "\n"


def test_run_training_rows_and_determinism(small_cfg, small_bundle):
    cfg = small_cfg.replace(steps=7, eval_every=3)
    _, rows = tr.run_training(cfg, small_bundle)
    _, rows2 = tr.run_training(cfg, small_bundle)
    assert [r["step"] for r in rows] == [3, 6, 7]
    assert tr.metrics_csv(rows) == tr.metrics_csv(rows2)
    for r in rows:
        assert 0 <= r["map"] <= 1 and 0 <= r["corloc"] <= 1 and 0 <= r["corloc_train"] <= 1
