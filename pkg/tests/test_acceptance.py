"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The heavyweight criteria
share the session-scoped desk fixtures from conftest; everything downstream
of the fixed seeds is bit-deterministic.
"""

import json
import math

import numpy as np
import pytest

from gcmkit import (AttackConfig, CwParams, GcmConfig, GcmPlacement, NormConstraint,
                    SampleRecord, Tensor, accuracy, attack_robustness, backward,
                    build_model, cascade, cw, evaluate, finite_difference_gradient,
                    forward_eval, gcm_apply, gcm_grad_multiplier, pgd, project,
                    synthesize_dataset, train, write_report, TrainConfig)
from gcmkit import ops
from gcmkit.attacks import INF
from gcmkit.autodiff import Tape
from gcmkit.experiments import clean_accuracy
from gcmkit.gcm import gcm_node, scalar_map
from gcmkit.metrics import adversarial_accuracy
from gcmkit.models import grad_wrt_input, prepare_inputs, save_checkpoint
from gcmkit.signmap import per_pixel_sign_entropy, sign_map

from conftest import rel_err
from test_projection import brute_force_projection, sample_near_ball

EPS_ATTACK = 8 / 255
FGSM = AttackConfig("fgsm", NormConstraint(INF, EPS_ATTACK))
PGD10 = AttackConfig("pgd", NormConstraint(INF, EPS_ATTACK), steps=10)
GCM_DEFAULT = GcmConfig(w=1e20, eps=1e-8)

N_EVAL = 1500


@pytest.fixture(scope="session")
def report_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance_reports")


def _passed(n, message):
    print(f"[criterion {n:2d}] PASS: {message}")


# -- criterion 1: autodiff vs central finite differences ---------------------


def _fd_vs_backward(rng, apply_op, x_arr):
    x = Tensor(x_arr)
    probe = Tape()
    out_shape = apply_op(probe, probe.leaf(x.data)).shape
    c = rng.uniform(-1.0, 1.0, out_shape).astype(np.float32)

    def build(tape, xn):
        return ops.sum_all(tape, ops.mul(tape, apply_op(tape, xn), tape.leaf(c)))

    tape = Tape()
    xn = tape.leaf(x.data, is_input=True)
    g = backward(tape, build(tape, xn)).input_gradient.data

    def f(t):
        tp = Tape()
        return float(build(tp, tp.leaf(t.data, is_input=True)).value)

    return rel_err(g, finite_difference_gradient(f, x, 1e-3).data)


def _smallcnn_fd_check(model, x, y):
    """Full-network check; skips coordinates whose +/-h interval crosses a
    relu or pooling kink, where central differences are not a derivative
    oracle. Returns (worst rel err, fraction of valid coordinates)."""

    def loss_and_pattern(arr):
        _, tape = forward_eval(model, Tensor(arr))
        loss = ops.softmax_cross_entropy(tape, tape.logits, y)
        pattern = []
        for node in tape.operations:
            if node.name == "relu":
                pattern.append(node.parents[0].value > 0)
            elif node.name == "maxpool2":
                v = node.parents[0].value
                n_, h_, w_, c_ = v.shape
                win = (v[:, :h_ // 2 * 2, :w_ // 2 * 2, :]
                       .reshape(n_, h_ // 2, 2, w_ // 2, 2, c_)
                       .transpose(0, 1, 3, 5, 2, 4).reshape(n_, h_ // 2, w_ // 2, c_, 4))
                pattern.append(win.argmax(axis=-1))
        return float(loss.value), pattern

    _, tape = forward_eval(model, x)
    bundle = backward(tape, ops.softmax_cross_entropy(tape, tape.logits, y))

    worst = 0.0
    valid_total = 0
    coord_total = 0

    def check_tensor(analytic, base, setter):
        nonlocal worst, valid_total, coord_total
        flat = base.data.reshape(-1)
        fd = np.zeros(flat.size)
        valid = np.zeros(flat.size, dtype=bool)
        for i in range(flat.size):
            xp, xm = flat.copy(), flat.copy()
            xp[i] = np.float32(float(flat[i]) + 1e-3)
            xm[i] = np.float32(float(flat[i]) - 1e-3)
            fp, pp = setter(xp.reshape(base.shape))
            fm, pm = setter(xm.reshape(base.shape))
            if all(np.array_equal(a, b) for a, b in zip(pp, pm)):
                valid[i] = True
                fd[i] = (fp - fm) / (float(xp[i]) - float(xm[i]))
        a = analytic.reshape(-1)[valid]
        b = fd[valid]
        denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
        worst = max(worst, float(np.abs(a - b).max() / denom))
        valid_total += int(valid.sum())
        coord_total += flat.size

    check_tensor(bundle.input_gradient.data, x, lambda arr: loss_and_pattern(arr))
    for pid, tensor in model.param_tensors().items():
        def set_param_eval(arr, pid=pid, shape=tensor.shape):
            saved = model.param_tensors()[pid]
            model.set_param(pid, Tensor(arr.reshape(shape)))
            try:
                return loss_and_pattern(x.data)
            finally:
                model.set_param(pid, saved)
        check_tensor(bundle.params[pid].data, tensor, set_param_eval)
    return worst, valid_total / coord_total


def test_criterion_01_autodiff_finite_differences():
    rng = np.random.default_rng(1001)
    worst = {}

    w = rng.uniform(-1, 1, (5, 4)).astype(np.float32)
    b = rng.uniform(-1, 1, 4).astype(np.float32)
    k = rng.uniform(-1, 1, (3, 3, 2, 3)).astype(np.float32)
    kb = rng.uniform(-1, 1, 3).astype(np.float32)
    other = rng.uniform(-1, 1, (3, 5)).astype(np.float32)

    cases = {
        "dense": (lambda t, xn: ops.dense(t, xn, t.leaf(w), t.leaf(b)),
                  lambda: rng.uniform(-1, 1, (3, 5)).astype(np.float32)),
        "conv2d": (lambda t, xn: ops.conv2d(t, xn, t.leaf(k), t.leaf(kb), stride=1, padding=1),
                   lambda: rng.uniform(-1, 1, (2, 5, 5, 2)).astype(np.float32)),
        "relu": (lambda t, xn: ops.relu(t, xn),
                 lambda: (rng.uniform(0.05, 1.0, (4, 6))
                          * rng.choice([-1.0, 1.0], (4, 6))).astype(np.float32)),
        "maxpool2": (lambda t, xn: ops.maxpool2(t, xn),
                     lambda: (rng.permutation(2 * 4 * 4 * 2).reshape(2, 4, 4, 2) * 0.011
                              + rng.uniform(-0.004, 0.004, (2, 4, 4, 2))).astype(np.float32)),
        "flatten": (lambda t, xn: ops.flatten(t, xn),
                    lambda: rng.uniform(-1, 1, (2, 3, 2, 2)).astype(np.float32)),
        "add": (lambda t, xn: ops.add(t, xn, t.leaf(other)),
                lambda: rng.uniform(-1, 1, (3, 5)).astype(np.float32)),
        "mul": (lambda t, xn: ops.mul(t, xn, t.leaf(other)),
                lambda: rng.uniform(-1, 1, (3, 5)).astype(np.float32)),
        "scale": (lambda t, xn: ops.scale(t, xn, -1.7),
                  lambda: rng.uniform(-1, 1, (3, 5)).astype(np.float32)),
        "sin": (lambda t, xn: ops.sin(t, xn),
                lambda: rng.uniform(-3, 3, (3, 6)).astype(np.float32)),
        "cos": (lambda t, xn: ops.cos(t, xn),
                lambda: rng.uniform(-3, 3, (3, 6)).astype(np.float32)),
        "gcm": (lambda t, xn: gcm_node(t, xn, GcmConfig(w=10.0, eps=0.01)),
                lambda: rng.uniform(0, 1, (3, 5)).astype(np.float32)),
    }
    for name, (apply_op, sampler) in cases.items():
        worst[name] = max(_fd_vs_backward(rng, apply_op, sampler()) for _ in range(100))
        assert worst[name] <= 1e-3, f"{name}: rel err {worst[name]}"

    # softmax cross-entropy directly (scalar head)
    ce_worst = 0.0
    for _ in range(100):
        y = rng.integers(0, 4, size=3)
        x = Tensor(rng.uniform(-2, 2, (3, 4)).astype(np.float32))
        tape = Tape()
        xn = tape.leaf(x.data, is_input=True)
        g = backward(tape, ops.softmax_cross_entropy(tape, xn, y)).input_gradient.data

        def f(t, y=y):
            tp = Tape()
            return float(ops.softmax_cross_entropy(tp, tp.leaf(t.data, is_input=True), y).value)

        ce_worst = max(ce_worst, rel_err(g, finite_difference_gradient(f, x, 1e-3).data))
    assert ce_worst <= 1e-3

    model = build_model({"arch": "smallcnn"}, seed=3)
    x = Tensor(rng.uniform(0, 1, (1, 28, 28, 1)).astype(np.float32))
    cnn_worst, valid_frac = _smallcnn_fd_check(model, x, np.array([4]))
    assert cnn_worst <= 1e-3, f"smallcnn rel err {cnn_worst}"
    assert valid_frac >= 0.8
    _passed(1, f"primitives worst {max(worst.values()):.1e}, softmax-ce {ce_worst:.1e}, "
               f"smallcnn {cnn_worst:.1e} over {valid_frac:.0%} kink-free coords")


def test_criterion_02_gcm_forward_bound():
    rng = np.random.default_rng(1002)
    x = Tensor(rng.uniform(0, 1, 1_000_000).astype(np.float32))
    out = gcm_apply(x, GCM_DEFAULT)
    diff = np.abs(out.data.astype(np.float64) - x.data.astype(np.float64))
    assert diff.max() <= GCM_DEFAULT.eps

    for _ in range(10):
        cfg = GcmConfig(w=10 ** rng.uniform(1, 20), eps=10 ** rng.uniform(-8, -3))
        xs = Tensor(rng.uniform(0, 1, 50_000).astype(np.float32))
        d = np.abs(gcm_apply(xs, cfg).data.astype(np.float64) - xs.data.astype(np.float64))
        assert d.max() <= cfg.eps, f"bound violated at w={cfg.w}, eps={cfg.eps}"
    _passed(2, "forward perturbation <= eps exactly at defaults and 10 random configs")


def test_criterion_03_gcm_gradient_law():
    rng = np.random.default_rng(1003)
    for cfg in (GCM_DEFAULT, GcmConfig(w=10.0, eps=0.01), GcmConfig(w=1e15, eps=1e-5),
                GcmConfig(w=2 * math.pi, eps=0.5)):
        x = Tensor(rng.uniform(0, 1, (4, 9)).astype(np.float32))
        tape = Tape()
        xn = tape.leaf(x.data, is_input=True)
        g = backward(tape, ops.sum_all(tape, gcm_node(tape, xn, cfg))).input_gradient.data
        assert np.array_equal(g, gcm_grad_multiplier(x, cfg).data), "bit mismatch"

    cfg = GcmConfig(w=10.0, eps=0.01)
    x = Tensor([0.3])
    fd = finite_difference_gradient(lambda t: scalar_map(t.item(), cfg), x, 1e-3)
    assert abs(fd.item() - gcm_grad_multiplier(x, cfg).item()) <= 1e-5
    _passed(3, "tape gradient == 1 + eps*w*cos(w*x) bitwise; FD match at w=10 within 1e-5")


def test_criterion_04_clean_accuracy_parity(desk, report_dir):
    acc_vanilla = clean_accuracy(desk.model, desk.test)
    wrapped = cascade(desk.model, GCM_DEFAULT, GcmPlacement.front())
    acc_cascade = clean_accuracy(wrapped, desk.test)
    (report_dir / "parity.json").write_text(
        json.dumps({"acc_vanilla": acc_vanilla, "acc_cascade": acc_cascade}, sort_keys=True))
    assert abs(acc_vanilla - acc_cascade) <= 0.01
    _passed(4, f"10k clean ACC vanilla {acc_vanilla:.4f} vs cascade {acc_cascade:.4f}")


def test_criterion_05_robustness_gap(desk, report_dir):
    acc = clean_accuracy(desk.model, desk.test)
    assert acc >= 0.95, f"desk model only reaches {acc:.3f} clean ACC"
    results = {}
    for attack, tag in ((FGSM, "fgsm"), (PGD10, "pgd")):
        vanilla = evaluate(desk.model, desk.test, attack, max_samples=N_EVAL)
        concealed = evaluate(desk.model, desk.test, attack, gcm_cfg=GCM_DEFAULT,
                             placement=GcmPlacement.front(), max_samples=N_EVAL)
        write_report(vanilla, report_dir / f"report_{tag}_vanilla.json")
        write_report(concealed, report_dir / f"report_{tag}_gcm.json")
        results[tag] = (vanilla.ar, concealed.ar)
        assert concealed.ar >= 0.85, f"{tag}: concealed AR {concealed.ar:.3f} < 0.85"
        assert concealed.ar - vanilla.ar >= 0.30, \
            f"{tag}: AR gap {concealed.ar - vanilla.ar:.3f} < 0.30"
    _passed(5, f"clean ACC {acc:.3f}; AR vanilla/GCM: "
               f"fgsm {results['fgsm'][0]:.3f}/{results['fgsm'][1]:.3f}, "
               f"pgd {results['pgd'][0]:.3f}/{results['pgd'][1]:.3f}")


def test_criterion_06_projection_oracle():
    cases_per_combo = 167   # 6 combos -> 1002 seeded cases
    eps = 0.02
    for p in (1, 2, INF):
        for dim in (2, 3):
            rng = np.random.default_rng(6000 + dim + int(1 if p == INF else p))
            for _ in range(cases_per_combo):
                r = sample_near_ball(rng, p, eps, dim)
                nc = NormConstraint(p, eps)
                got = project(Tensor(r), nc)
                bf = brute_force_projection(r.astype(np.float64), p, eps)
                assert np.linalg.norm(got.data.astype(np.float64) - bf) <= 2e-3
                again = project(got, nc)
                assert np.array_equal(got.data, again.data), "projection not idempotent"
    _passed(6, "1002 cases match the 1e-3-grid brute force within 2e-3; idempotent bitwise")


def test_criterion_07_pgd_analytic():
    class Quad:
        def logits(self, x):
            return np.zeros((x.shape[0], 2), dtype=np.float32)

        def loss_input_grad(self, x, y):
            return (-2.0 * (x.astype(np.float64) - 0.7)).astype(np.float32)

    adv = pgd(Quad(), Tensor([[0.5]]), np.array([0]),
              AttackConfig("pgd", NormConstraint(INF, 0.3), steps=10, step_size=0.02))
    interior_err = abs(adv.x_adv.item() - 0.7)
    assert interior_err <= 1e-3

    class Lin:
        def logits(self, x):
            return np.zeros((x.shape[0], 2), dtype=np.float32)

        def loss_input_grad(self, x, y):
            g = np.zeros_like(x)
            g[:, 0] = 1.0
            return g

    adv = pgd(Lin(), Tensor([[0.5, 0.5]]), np.array([0]),
              AttackConfig("pgd", NormConstraint(2, 0.1), steps=10, step_size=0.025))
    boundary_err = float(np.abs(adv.x_adv.data - np.array([[0.6, 0.5]])).max())
    assert boundary_err <= 1e-3
    _passed(7, f"interior maximizer err {interior_err:.1e}, boundary err {boundary_err:.1e}")


def test_criterion_08_cw_analytic_margin():
    model = build_model({"arch": "mlp", "widths": [2, 2]}, seed=0)
    dw = np.array([40.0, 0.0], dtype=np.float32)
    model.set_param("block1/dense.w", Tensor(np.stack([dw / 2, -dw / 2], axis=1)))
    model.set_param("block1/dense.b", Tensor(np.array([-10.0, 0.0], np.float32)))
    x0 = Tensor(np.array([[0.5, 0.5]], dtype=np.float32))   # distance 10/40 = 0.25
    cfg = AttackConfig("cw", NormConstraint(2, 1.0),
                       cw=CwParams(binary_search_steps=12, iterations=100))
    adv = cw(model, x0, np.array([0]), cfg)
    assert adv.success[0]
    assert 0.25 <= adv.norms[0] <= 0.25 * 1.05
    _passed(8, f"achieved L2 {adv.norms[0]:.5f} vs analytic distance 0.25000")


def test_criterion_09_metric_formulas():
    def rec(label, clean, adv, i):
        return SampleRecord(index=i, label=label, clean_pred=clean, adv_pred=adv,
                            norm=0.0, success=adv != label)

    records = [rec(0, 0, 0, 0), rec(0, 0, 1, 1), rec(0, 1, 0, 2), rec(0, 0, 0, 3)]
    assert accuracy(records) == 0.75
    assert attack_robustness(records) == 2 / 3
    with_noise = records + [rec(1, 0, 1, 4), rec(1, 2, 1, 5)]     # clean-incorrect
    assert attack_robustness(with_noise) == attack_robustness(records)
    assert attack_robustness([rec(0, 1, 0, 0)]) is None
    with pytest.raises(ValueError):
        accuracy([])
    _passed(9, "ACC/AR hand counts exact; exclusions and no-denominator handled")


def test_criterion_10_ablation_trends(desk, desk_easy):
    # position trend on the desk model: concealment everywhere defends at
    # least as well under attack as any single mid-network placement
    adv_acc = {}
    for name in ("block:block1", "block:block2", "block:block3", "all"):
        report = evaluate(desk.model, desk.test, FGSM, gcm_cfg=GCM_DEFAULT,
                          placement=GcmPlacement.parse(name), max_samples=600)
        adv_acc[name] = adversarial_accuracy(report.records)
    for name in ("block:block1", "block:block2", "block:block3"):
        assert adv_acc["all"] >= adv_acc[name], f"all < {name}: {adv_acc}"

    # magnitude trend in the regime where the concealed model resists the
    # full budget: AR(1e-3) <= AR(1e-8)
    ar = {}
    for eps in (1e-8, 1e-3):
        report = evaluate(desk_easy.model, desk_easy.test, PGD10,
                          gcm_cfg=GcmConfig(w=1e20, eps=eps),
                          placement=GcmPlacement.front(), max_samples=N_EVAL)
        ar[eps] = report.ar
    assert ar[1e-3] <= ar[1e-8], f"magnitude trend violated: {ar}"
    _passed(10, f"position adv-ACC {['%.3f' % adv_acc[k] for k in adv_acc]} (all >= blocks); "
                f"PGD AR 1e-3 {ar[1e-3]:.4f} <= 1e-8 {ar[1e-8]:.4f}")


def test_criterion_11_sign_map(desk):
    grad = np.array([[-0.5, 0.0], [0.2, -0.1]], np.float32).reshape(2, 2, 1)
    px = sign_map(grad).to_pixels()[:, :, 0]
    assert np.array_equal(px, np.array([[0, 128], [255, 0]], np.uint8))

    wrapped = cascade(desk.model, GCM_DEFAULT, GcmPlacement.front())
    idx = np.nonzero(desk.test.labels == 3)[0][:10]
    x = Tensor(prepare_inputs(desk.model, desk.test.images[idx]))
    y = desk.test.labels[idx]
    shape = desk.test.images.shape[1:]
    vanilla = [sign_map(g.reshape(shape)) for g in grad_wrt_input(desk.model, x, y).data]
    concealed = [sign_map(g.reshape(shape)) for g in grad_wrt_input(wrapped, x, y).data]
    h_v = per_pixel_sign_entropy(vanilla)
    h_c = per_pixel_sign_entropy(concealed)
    assert h_c > h_v
    _passed(11, f"pixel map bit-exact; sign entropy concealed {h_c:.3f} > vanilla {h_v:.3f}")


def test_criterion_12_determinism(desk, report_dir, tmp_path):
    # faithful rerun of criteria 4-5: rebuild the dataset, retrain the model
    # from the same seeds, regenerate every report file, compare bytes
    from conftest import DESK_SEED, DESK_TRAIN_N, DESK_TEST_N

    train_ds = synthesize_dataset(DESK_TRAIN_N, seed=DESK_SEED)
    test_ds = synthesize_dataset(DESK_TEST_N, seed=DESK_SEED + 1)
    model = build_model({"arch": "smallcnn"}, seed=0)
    train(model, train_ds, TrainConfig(learning_rate=0.2, epochs=3, batch_size=64, seed=0))

    save_checkpoint(desk.model, tmp_path / "first.gcmb")
    save_checkpoint(model, tmp_path / "second.gcmb")
    assert (tmp_path / "first.gcmb").read_bytes() == (tmp_path / "second.gcmb").read_bytes(), \
        "retraining with the same seed produced different parameters"

    rerun = tmp_path / "rerun"
    rerun.mkdir()
    acc_vanilla = clean_accuracy(model, test_ds)
    wrapped = cascade(model, GCM_DEFAULT, GcmPlacement.front())
    (rerun / "parity.json").write_text(
        json.dumps({"acc_vanilla": acc_vanilla, "acc_cascade": clean_accuracy(wrapped, test_ds)},
                   sort_keys=True))
    for attack, tag in ((FGSM, "fgsm"), (PGD10, "pgd")):
        write_report(evaluate(model, test_ds, attack, max_samples=N_EVAL),
                     rerun / f"report_{tag}_vanilla.json")
        write_report(evaluate(model, test_ds, attack, gcm_cfg=GCM_DEFAULT,
                              placement=GcmPlacement.front(), max_samples=N_EVAL),
                     rerun / f"report_{tag}_gcm.json")

    names = ["parity.json", "report_fgsm_vanilla.json", "report_fgsm_gcm.json",
             "report_pgd_vanilla.json", "report_pgd_gcm.json"]
    for name in names:
        assert (rerun / name).read_bytes() == (report_dir / name).read_bytes(), \
            f"{name} differs between runs"
    _passed(12, f"{len(names)} report files byte-identical across independent reruns")
