import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from cama import bench, nets
from cama.bench import AttackConfig, EvalRow
from cama.errors import ConfigError, LabelError
from cama.imaging import psnr


class Linear(nn.Module):
    """Logistic model over the flattened image; gradients have a closed form."""

    def __init__(self, d, k, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w = nn.Parameter(torch.randn(k, d, generator=g, dtype=torch.float64))
        self.b = nn.Parameter(torch.randn(k, generator=g, dtype=torch.float64))

    def forward(self, x):
        return x.flatten(1) @ self.w.T + self.b


def ce_grad_oracle(w, b, x, t):
    z = w @ x + b
    p = np.exp(z - z.max())
    p /= p.sum()
    p[t] -= 1.0
    return w.T @ p


class LevelClassifier(nn.Module):
    """Predicts the class whose reference grey level is nearest the image mean."""

    arch = "level"

    def __init__(self, classes, levels):
        super().__init__()
        self.classes = list(classes)
        self.levels = torch.tensor(levels, dtype=torch.float64)
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        m = x.double().mean(dim=(1, 2, 3))
        return -(m[:, None] - self.levels[None]).abs()


LEVELS = {1: 0.2, 2: 0.5, 3: 0.8, 4: 0.95}


def grey(label, size=8):
    return np.full((size, size, 3), LEVELS[label])


def test_attack_config_defaults_and_validation():
    assert AttackConfig.defaults("pgd") == AttackConfig("pgd", 4.53, 1.0, 40, 0.05)
    assert AttackConfig.defaults("ddn").steps == 100
    with pytest.raises(ConfigError):
        AttackConfig("cw")
    with pytest.raises(ConfigError):
        AttackConfig("pgd", epsilon=0)
    with pytest.raises(ConfigError):
        AttackConfig("ddn", ddn_gamma=1.0)


def test_fgsm_matches_closed_form_gradient(rng):
    model = Linear(12, 3, seed=1)
    x = rng.uniform(0.2, 0.8, size=(1, 3, 2, 2))
    out = bench.attack_fgsm(model, torch.as_tensor(x), [2], 0.01).numpy()
    g = ce_grad_oracle(model.w.detach().numpy(), model.b.detach().numpy(), x.ravel(), 2)
    np.testing.assert_allclose(out.ravel(), x.ravel() - 0.01 * np.sign(g), atol=1e-15)


def test_fgsm_zero_eps_is_identity(rng):
    x = torch.as_tensor(rng.random((2, 3, 2, 2)))
    assert torch.equal(bench.attack_fgsm(Linear(12, 2), x, [0, 1], 0.0), x)


def test_fgsm_psnr_on_interior_image(rng):
    x = torch.as_tensor(rng.uniform(0.1, 0.9, size=(1, 3, 4, 4)))
    out = bench.attack_fgsm(Linear(48, 3), x, [1], 4.53 / 255)
    assert psnr(x.numpy(), out.numpy()) == pytest.approx(20 * math.log10(255 / 4.53), abs=1e-9)


def test_pgd_single_step_equals_fgsm(rng):
    model = Linear(12, 3, seed=2)
    x = torch.as_tensor(rng.uniform(0.2, 0.8, size=(3, 3, 2, 2)))
    cfg = AttackConfig("pgd", epsilon=3.0, alpha=3.0, steps=1)
    torch.testing.assert_close(bench.attack_pgd(model, x, [0, 1, 2], cfg), bench.attack_fgsm(model, x, [0, 1, 2], 3 / 255))


def test_pgd_reaches_best_corner_of_linear_model(rng):
    # the margin of a 2-class linear model is maximized at a corner of the clipped box
    model = Linear(4, 2, seed=3)
    x = rng.uniform(0.3, 0.7, size=(1, 1, 2, 2))
    eps = 6 / 255
    cfg = AttackConfig("pgd", epsilon=6.0, alpha=1.0, steps=10)
    got = bench.attack_pgd(model, torch.as_tensor(x), [0], cfg).numpy().ravel()
    w = model.w.detach().numpy()
    best, best_margin = None, -np.inf
    for signs in itertools.product((-1, 0, 1), repeat=4):
        cand = np.clip(x.ravel() + eps * np.array(signs), 0, 1)
        margin = (w[0] - w[1]) @ cand
        if margin > best_margin:
            best, best_margin = cand, margin
    np.testing.assert_allclose(got, best, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.5, 8.0), st.floats(0.25, 3.0), st.integers(1, 8), st.integers(0, 1000))
def test_pgd_stays_in_ball_and_box(eps, alpha, steps, seed):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.random((2, 3, 4, 4)))
    out = bench.attack_pgd(Linear(48, 3, seed=seed), x, [0, 2], AttackConfig("pgd", eps, alpha, steps))
    assert float((out - x).abs().max()) <= eps / 255 + 1e-12
    assert 0 <= float(out.min()) and float(out.max()) <= 1


def test_ddn_radius_rule():
    assert bench.ddn_radius(1.0, True, 0.05) == pytest.approx(0.95)
    assert bench.ddn_radius(1.0, False, 0.05) == pytest.approx(1.05)
    r = bench.ddn_radius(torch.tensor([2.0, 2.0]), torch.tensor([True, False]), 0.1)
    torch.testing.assert_close(r, torch.tensor([1.8, 2.2]))


def test_ddn_follows_radius_schedule():
    model = Linear(48, 3, seed=4)
    x = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
    trace = []
    cfg = AttackConfig("ddn", alpha=0.2, steps=12, ddn_gamma=0.05)
    out = bench.attack_ddn(model, x, [1], cfg, trace=trace)
    assert float(trace[0]["dist"]) == 0.0
    assert float(trace[1]["dist"]) == pytest.approx(0.2 / 255 * math.sqrt(48))
    for prev, cur in zip(trace[1:], trace[2:]):
        factor = 0.95 if bool(prev["is_adv"]) else 1.05
        assert float(cur["dist"]) == pytest.approx(float(prev["dist"]) * factor, rel=1e-9)
    np.testing.assert_array_equal(out * 255, torch.round(out * 255))


def test_ddn_returns_smallest_successful_iterate():
    model = Linear(48, 3, seed=5)
    x = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
    trace = []
    out = bench.attack_ddn(model, x, [2], AttackConfig("ddn", alpha=2.0, steps=30), trace=trace)
    hits = [float(t["dist"]) for t in trace if bool(t["is_adv"])]
    assert hits, "toy attack should succeed"
    assert bench.proxy_predict(model, out).item() == 2
    assert float((out - x).norm()) <= min(hits) + math.sqrt(48) * 0.5 / 255


def test_attack_rejects_non_module():
    with pytest.raises(TypeError):
        bench.attack_fgsm(lambda x: x, torch.zeros(1, 3, 2, 2), [0], 0.1)


def test_evaluator_proxy_loss_matches_clf():
    ev = nets.build_evaluator(3, width=4, seed=0).eval()
    x = torch.rand(2, 3, 16, 16)
    lh, ll = ev(x)
    want = -0.5 * (torch.log_softmax(lh, 1)[range(2), [0, 2]] + torch.log_softmax(ll, 1)[range(2), [0, 2]]).sum()
    torch.testing.assert_close(bench.proxy_loss(ev, x, torch.tensor([0, 2])), want)


# evaluation


def test_target_pairs():
    assert bench.target_pairs(2, [3, 1, 2]) == [1, 3]
    assert bench.target_pairs(9, [3, 1, 2]) == [1, 2, 3]


def test_identity_anonymizer_scores_zero():
    f = LevelClassifier([1, 2, 3], [0.2, 0.5, 0.8])
    row = bench.evaluate_anonymizer(lambda p, t: p, f, [(grey(c), c) for c in (1, 2, 3)], [1, 2, 3], attack="identity")
    assert (row.tsr, row.usr) == (0.0, 0.0)
    assert row.mean_psnr == math.inf
    assert (row.overlap, row.distribution, row.n_pairs) == ("complete", "in", 6)


def test_hand_enumerated_scores():
    # only target 1 is reachable: pairs 2->1 and 3->1 succeed out of six
    f = LevelClassifier([1, 2, 3], [0.2, 0.5, 0.8])

    def anon(p, t):
        return grey(1) if t == 1 else p

    row = bench.evaluate_anonymizer(anon, f, [(grey(c), c) for c in (1, 2, 3)], [1, 2, 3])
    assert row.tsr == pytest.approx(1 / 3) and row.usr == pytest.approx(1 / 3)


def test_pair_counts_in_and_out_of_distribution():
    f = LevelClassifier([1, 2, 3, 4], [0.2, 0.5, 0.8, 0.95])
    ins = [(grey(c), c) for c in (1, 2, 3, 1, 2)]
    row = bench.evaluate_anonymizer(lambda p, t: grey(t), f, ins, [1, 2, 3])
    assert row.n_pairs == 5 * 2 and row.tsr == 1.0 and row.overlap == "partial"
    outs = [(grey(4), 4)] * 3
    row = bench.evaluate_anonymizer(lambda p, t: grey(t), f, outs, [1, 2, 3])
    assert row.n_pairs == 3 * 3 and row.distribution == "out" and row.usr == 1.0
    with pytest.raises(LabelError):
        bench.evaluate_anonymizer(lambda p, t: p, f, ins + outs, [1, 2, 3])


def test_classifier_must_cover_labels():
    f = LevelClassifier([1, 2], [0.2, 0.5])
    with pytest.raises(LabelError):
        bench.evaluate_anonymizer(lambda p, t: p, f, [(grey(3), 3)], [1, 2])


def test_outputs_quantized_before_scoring():
    # a shift of 0.4 levels rounds back to the original image
    f = LevelClassifier([1, 2], [0.2, 0.5])
    img = np.round(grey(1) * 255) / 255
    row = bench.evaluate_anonymizer(lambda p, t: p + 0.4 / 255, f, [(img, 1)], [1, 2])
    assert row.mean_psnr == math.inf


def test_generator_anonymizer_class_count():
    with pytest.raises(LabelError):
        bench.generator_anonymizer(nets.build_generator(2, 4), [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=30))
def test_score_pairs_in_unit_interval_and_usr_dominates(triples):
    triples = [(y, yt, p) for y, yt, p in triples if yt != y]
    if not triples:
        return
    tsr, usr, n = bench.score_pairs(triples)
    assert 0 <= tsr <= usr <= 1 and n == len(triples)


# reports


def rows():
    return [
        EvalRow("resnet50", "RGB", "complete", "in", "cama", 0.9, 0.95, 38.1, 100, 500),
        EvalRow("resnet50", "RGB", "complete", "in", "pgd", 0.25, 0.5, 41.0, 100, 500),
        EvalRow("densenet121", "FD", "complete", "in", "cama", 1 / 3, 0.5, 37.123456789, 100, 500),
    ]


def test_report_roundtrip(tmp_path):
    text = bench.emit_report(rows(), tmp_path)
    assert (tmp_path / "report.txt").read_text() == text
    assert bench.parse_report(tmp_path / "report.csv") == rows()
    assert bench.parse_report(bench.rows_to_csv(rows())) == rows()


def test_report_table_layout():
    lines = bench.render_table(rows()).splitlines()
    assert lines[0].split() == ["arch", "preproc", "complete/in/cama", "complete/in/pgd", "psnr"]
    assert lines[1].split()[:2] == ["resnet50", "RGB"]
    assert "90.0 (95.0)" in lines[1] and "25.0 (50.0)" in lines[1]
    assert lines[2].split()[:2] == ["densenet121", "FD"] and "-" in lines[2].split()


def test_empty_report_rejected():
    with pytest.raises(ValueError):
        bench.emit_report([])


def test_thresholds():
    assert bench.check_thresholds(rows(), min_tsr=0.2, min_psnr=30) == []
    bad = bench.check_thresholds(rows(), min_tsr=0.5)
    assert len(bad) == 2
    odd = EvalRow("a", "RGB", "complete", "in", "x", 0.5, 0.4, 40.0, 1, 2)
    assert "usr" in bench.check_thresholds([odd])[0]
