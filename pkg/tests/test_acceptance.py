"""End-to-end acceptance properties.

The fast half checks the numerical core against independent oracles
(finite differences, nested-loop convolution, closed-form attack optima,
channel masking, grid arithmetic) plus byte-wise reproducibility.

The second half retrains the notation grid at desk scale on
Fashion-MNIST and checks the headline accuracy/robustness trends. Those
tests are marked ``desk`` (deselected by default) and need the four IDX
files in $FASHION_MNIST_DIR; expect one to three hours on a laptop CPU:

    FASHION_MNIST_DIR=/data/fashion pytest -m desk tests/test_acceptance.py
"""

import os
import time

import numpy as np
import pytest

from robustcomp import tensor as T
from robustcomp.attack import AttackConfig, evaluate, pgd_attack, train_adversarial
from robustcomp.data import load_idx, make_synthetic, subset
from robustcomp.experiment import ExperimentConfig, run_pipeline
from robustcomp.nn import build_small_cnn
from robustcomp.prune import apply_prune, plan_prune
from robustcomp.quant import (compute_scheme, fake_quant, fake_quant_op,
                              ptq_calibrate, qat_epochs, quantize,
                              quantized_forward)
from robustcomp.seeds import derive_seed
from robustcomp.tensor import Tensor, cross_entropy
from robustcomp.train import TrainConfig, finetune, train_standard
from conftest import tiny_model
from test_tensor import conv_oracle, rel_err


class TestGradientOracle:
    def test_full_cnn_against_finite_differences(self):
        rng = np.random.default_rng(41)
        model = build_small_cnn(seed=13)
        x = rng.uniform(0, 1, (1, 1, 28, 28))
        y = np.array([5])

        def loss_value():
            return float(cross_entropy(model.forward(Tensor(x)), y).data)

        model.zero_grad()
        cross_entropy(model.forward(Tensor(x)), y).backward()
        h = 1e-5
        worst = 0.0
        for name in sorted(model.params):
            p = model.params[name]
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_value()
                flat[i] = orig - h
                fm = loss_value()
                flat[i] = orig
                fd = np.array((fp - fm) / (2 * h))
                auto = np.array(p.grad.reshape(-1)[i])
                worst = max(worst, float(rel_err(auto, fd)))
        assert worst <= 1e-4


class TestConvolutionOracle:
    def test_fifty_random_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 3))
            hw = int(rng.integers(k, k + 5))
            x = rng.standard_normal((cin, hw, hw))
            w = rng.standard_normal((cout, cin, k, k))
            b = rng.standard_normal(cout)
            got = T.conv2d(Tensor(x), Tensor(w), Tensor(b),
                           stride=stride, padding=padding).data
            want = conv_oracle(x, w, b, stride, padding)
            scale = max(1.0, np.abs(want).max())
            assert np.abs(got - want).max() <= 1e-12 * scale


class TestAttackConstraints:
    def test_thousand_random_attacks(self):
        rng = np.random.default_rng(99)
        models = [tiny_model(seed=s, channels=(3, 3), hw=8) for s in range(3)]
        digests = [m.param_digest() for m in models]
        for call in range(100):
            m = models[call % 3]
            x = rng.uniform(0, 1, (10, 1, 8, 8))
            y = rng.integers(0, 4, 10)
            eps = 0.0 if call % 10 == 0 else float(rng.uniform(0.01, 0.3))
            cfg = AttackConfig(eps=eps,
                               step_size=float(rng.uniform(0.005, 0.1)),
                               steps=int(rng.integers(1, 4)),
                               random_start=bool(call % 2),
                               seed=call)
            delta = pgd_attack(m, x, y, cfg, indices=rng.integers(0, 1 << 20, 10))
            assert np.abs(delta).max() <= eps
            adv = x + delta
            assert adv.min() >= 0.0 and adv.max() <= 1.0
            if eps == 0.0:
                assert (delta == 0.0).all()
        assert [m.param_digest() for m in models] == digests


class TestAttackOptimality:
    def test_linear_closed_form(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            w = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
            b = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
            model = lambda t: T.linear(t, w, b)
            x = rng.uniform(0.3, 0.7, (1, 6))
            y = np.array([int(rng.integers(0, 2))])
            eps = 0.1
            cfg = AttackConfig(eps=eps, step_size=eps / 10, steps=20,
                               random_start=False)
            delta = pgd_attack(model, x, y, cfg)
            dstar = eps * np.sign(w.data[1 - y[0]] - w.data[y[0]])
            loss_pgd = float(cross_entropy(model(Tensor(x + delta)), y).data)
            loss_opt = float(cross_entropy(model(Tensor(x + dstar[None])), y).data)
            assert abs(loss_pgd - loss_opt) <= 1e-6


class TestPruningOracle:
    @pytest.mark.parametrize("ratio", [0.25, 0.5, 0.8])
    def test_logits_match_channel_masking(self, ratio):
        from test_prune import masked_logits
        rng = np.random.default_rng(int(ratio * 100))
        for seed in (0, 1):
            model = tiny_model(seed=seed, channels=(4, 6), hw=8)
            plan = plan_prune(model, ratio)
            pruned = apply_prune(model, plan)
            x = rng.uniform(0, 1, (3, 1, 8, 8))
            want = masked_logits(model, x, plan.kept)
            got = pruned.forward(Tensor(x)).data
            scale = max(1.0, np.abs(want).max())
            assert np.abs(got - want).max() <= 1e-9 * scale


class TestQuantizationRoundTrip:
    @pytest.mark.parametrize("bits", [2, 4, 8, 16])
    @pytest.mark.parametrize("symmetric", [True, False])
    def test_interior_half_step_bound(self, bits, symmetric):
        rng = np.random.default_rng(bits + int(symmetric))
        lo, hi = (-0.9, 0.9) if symmetric else (-0.2, 1.7)
        scheme = compute_scheme(bits=bits, symmetric=symmetric,
                                vmin=lo, vmax=hi)
        s = scheme.scale
        r = rng.uniform(scheme.alpha + s, scheme.beta - s, size=100_000)
        assert np.abs(r - fake_quant(r, scheme)).max() <= s / 2 + 1e-12
        if symmetric:
            assert quantize(np.zeros(1), scheme)[0] == 0.0


class TestStraightThrough:
    def test_in_range_gradients_equal_float_gradients(self):
        model = tiny_model(seed=6, channels=(3, 4))
        data = make_synthetic(8, seed=2)
        qm = ptq_calibrate(model, data.images, bits=8)
        x, y = data.images, data.labels % 4

        cross_entropy(quantized_forward(qm, Tensor(x)), y).backward()
        master = {n: p.grad.copy() for n, p in model.params.items()}
        for p in model.params.values():
            p.grad = None

        leaves = {n: Tensor(fake_quant(model.params[n].data, s),
                            requires_grad=True)
                  for n, s in qm.weight_schemes.items()}
        ref = model.forward(Tensor(x), weight_override=leaves,
                            activation_hook=lambda site, t:
                            fake_quant_op(t, qm.act_schemes[site]))
        cross_entropy(ref, y).backward()
        for name, leaf in leaves.items():
            assert np.abs(master[name] - leaf.grad).max() <= 1e-10


class TestDeterminism:
    def test_two_runs_byte_identical(self, tmp_path):
        def run(tag):
            cfg = ExperimentConfig(synthetic=12, train_epochs=1, batch_size=6,
                                   compression="prune", prune_ratio=0.8,
                                   finetune_mode="none", eps=0.05,
                                   attack_steps_eval=2, seed=21,
                                   out_dir=str(tmp_path / tag))
            run_pipeline(cfg)
            return cfg.out_dir

        a, b = run("a"), run("b")
        for rel in (os.path.join("rep0", "final.model"),
                    os.path.join("rep0", "robustness.json"),
                    "report.csv"):
            with open(os.path.join(a, rel), "rb") as f:
                left = f.read()
            with open(os.path.join(b, rel), "rb") as f:
                right = f.read()
            assert left == right, rel


# ---------------------------------------------------------------------------
# Desk-scale Fashion-MNIST trend suite (opt-in, hours of CPU)
# ---------------------------------------------------------------------------

SEED = 0
EPS = 0.1
STEP = 0.01


def _idx_path(root, stem):
    for ext in ("", ".gz"):
        p = os.path.join(root, stem + ext)
        if os.path.exists(p):
            return p
    return None


def _eval(model, test, forward_fn=None):
    atk = AttackConfig(eps=EPS, step_size=STEP, steps=20,
                       seed=derive_seed(SEED, "eval-attack"))
    rep = evaluate(model, test, atk, forward_fn=forward_fn)
    return rep.clean_accuracy, rep.robust_accuracy


@pytest.fixture(scope="session")
def desk_results():
    root = os.environ.get("FASHION_MNIST_DIR")
    if not root:
        pytest.skip("set FASHION_MNIST_DIR to run the desk-scale suite")
    stems = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    paths = [_idx_path(root, s) for s in stems]
    if any(p is None for p in paths):
        pytest.skip(f"missing IDX files under {root}")
    train = load_idx(paths[0], paths[1], split="train")
    test = load_idx(paths[2], paths[3], split="test")
    train = subset(train, 10000, derive_seed(SEED, "subset-train"))
    test = subset(test, 2000, derive_seed(SEED, "subset-test"))
    calib = subset(train, 512, derive_seed(SEED, "calib")).images
    train_atk = AttackConfig(eps=EPS, step_size=STEP, steps=10,
                             seed=derive_seed(SEED, "train-attack"))
    ft_atk = AttackConfig(eps=EPS, step_size=STEP, steps=10,
                          seed=derive_seed(SEED, "finetune-attack"))
    r = {}

    def base(mode):
        model = build_small_cnn(derive_seed(SEED, "init", mode))
        tcfg = TrainConfig(epochs=5, batch_size=64,
                           seed=derive_seed(SEED, "train", mode), mode=mode)
        t0 = time.perf_counter()
        if mode == "adversarial":
            train_adversarial(model, train, tcfg, train_atk)
        else:
            train_standard(model, train, tcfg)
        return model, time.perf_counter() - t0

    f_st, _ = base("standard")
    f_rb, wall_rb = base("adversarial")
    r["f_st"] = _eval(f_st, test)
    r["f_rb"] = _eval(f_rb, test)
    r["wall_f_rb_train"] = wall_rb

    # pruning branch
    plan = plan_prune(f_st, 0.8)
    t0 = time.perf_counter()
    pruned = apply_prune(f_st, plan)
    wall_prune = time.perf_counter() - t0
    r["f_st^p"] = _eval(pruned, test)

    m = pruned.clone()
    finetune(m, train, "prune-std", epochs=3, attack_config=ft_atk,
             seed=derive_seed(SEED, "ft", "p-std"), batch_size=64)
    r["T_st(f_st^p)"] = _eval(m, test)

    m = pruned.clone()
    t0 = time.perf_counter()
    finetune(m, train, "prune-adv", epochs=3, attack_config=ft_atk,
             seed=derive_seed(SEED, "ft", "p-adv"), batch_size=64)
    r["wall_T_ad_prune"] = wall_prune + time.perf_counter() - t0
    r["T_ad(f_st^p)"] = _eval(m, test)

    # quantization branch
    t0 = time.perf_counter()
    qm = ptq_calibrate(f_st.clone(), calib, bits=8)
    wall_calib = time.perf_counter() - t0
    r["f_st^q"] = _eval(qm.model, test, forward_fn=qm)

    qm = ptq_calibrate(f_st.clone(), calib, bits=8)
    ftcfg = TrainConfig(epochs=3, batch_size=64, schedule=[(0, 0.01)],
                        seed=derive_seed(SEED, "ft", "q-adv"))
    t0 = time.perf_counter()
    qat_epochs(qm, train, ftcfg, attack_config=ft_atk, momentum=0.9)
    r["wall_T_ad_quant"] = wall_calib + time.perf_counter() - t0
    r["T_ad(f_st^q)"] = _eval(qm.model, test, forward_fn=qm)

    qm = ptq_calibrate(f_rb.clone(), calib, bits=8)
    ftcfg = TrainConfig(epochs=3, batch_size=64, schedule=[(0, 0.01)],
                        seed=derive_seed(SEED, "ft", "rb-q-std"))
    qat_epochs(qm, train, ftcfg, momentum=0.9)
    r["T_st(f_rb^q)"] = _eval(qm.model, test, forward_fn=qm)
    return r


@pytest.mark.desk
class TestDeskTrends:
    def test_standard_baseline(self, desk_results):
        clean, robust = desk_results["f_st"]
        assert clean >= 0.86
        assert robust <= 0.15

    def test_adversarial_baseline(self, desk_results):
        assert desk_results["f_rb"][1] >= 0.55

    def test_pruning_hurts_then_finetuning_recovers(self, desk_results):
        base = desk_results["f_st"][0]
        assert base - desk_results["f_st^p"][0] >= 0.25
        assert base - desk_results["T_st(f_st^p)"][0] <= 0.04

    def test_int8_ptq_nearly_lossless(self, desk_results):
        assert abs(desk_results["f_st"][0] - desk_results["f_st^q"][0]) <= 0.015

    def test_adversarial_finetuning_recovers_robustness_cheaply(self, desk_results):
        rb = desk_results["f_rb"][1]
        assert rb - desk_results["T_ad(f_st^p)"][1] <= 0.10
        assert rb - desk_results["T_ad(f_st^q)"][1] <= 0.10
        budget = 0.35 * desk_results["wall_f_rb_train"]
        assert desk_results["wall_T_ad_prune"] <= budget
        assert desk_results["wall_T_ad_quant"] <= budget

    def test_standard_finetuning_destroys_robustness(self, desk_results):
        rb = desk_results["f_rb"][1]
        assert rb - desk_results["T_st(f_rb^q)"][1] >= 0.30
