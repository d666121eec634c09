"""Acceptance suite: one test group per criterion, each tagged with ``criterion``.

Criteria 4, 5 and 8 are judged on the committed reference run in
``reference/``. Set ``DAGAN_FULL_ACCEPTANCE=1`` to recompute that run from
scratch (about 40 minutes single-core); the fresh run is then judged instead
and must also match the committed digests bit for bit.
"""

import json
import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from dagan.core import (
    Tensor,
    bce_from_logits,
    concat,
    conv2d,
    conv2d_transpose,
    grad_check,
    instance_norm,
    l1_loss,
    leaky_relu,
    precision,
    relu,
    sigmoid,
    softmax_cross_entropy,
    tanh,
)
from dagan.cyclegan import cycle_loss, discriminator_loss, generator_adv_loss, total_objective
from dagan.data import PremiseViolation, gen_synthetic_corpus, load_corpus
from dagan.detector import DetectorSpec, build_detector, detector_loss, match_anchors
from dagan.metrics import (
    BoundingBox,
    GroundTruth,
    MatchOutcome,
    average_precision,
    corloc,
    iou,
    mask_to_bbox,
    match_detections,
    mean_ap,
)
from dagan.nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_generator,
    build_patch_discriminator,
    discriminator_forward,
    generator_forward,
)
from dagan.pipeline import UPPER, parse_config, regime_order, run_compare

from oracles import ap_all_point, ap_voc11, greedy_match, mask_envelope, mean_ap_oracle, random_box, random_scene, raster_iou

REFERENCE = Path(__file__).resolve().parent.parent / "reference"
FULL = os.environ.get("DAGAN_FULL_ACCEPTANCE") == "1"
SEEDS = range(20)
BCE_TARGET = (np.random.default_rng(99).random((2, 3)) < 0.5).astype(float)
MINI = {
    "corpus.n_train_source": 10, "corpus.n_train_target": 10, "corpus.n_test_target": 6, "corpus.n_test_source": 4,
    "gan.total_steps": 3, "gan.base_width": 4, "gan.n_resblocks": 1, "gan.resize_to": 18, "gan.crop_to": 16,
    "gan.disc_layers": 2, "detector.epochs": 1, "detector.base_width": 4, "compare.replicates": 1,
}


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def away_from_zero(rng, *shape):
    # keeps kinked primitives (relu, abs, l1) clear of their kink
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


# ---------------------------------------------------------------------------
# criterion 1


def primitive_cases(rng):
    """(name, fn, inputs) for every differentiable primitive."""
    cases = [
        ("add", lambda a, b: (a + b).sum(), [rand(rng, 3, 4), rand(rng, 4)]),
        ("sub", lambda a, b: (a - b).mean(), [rand(rng, 2, 3), rand(rng, 2, 3)]),
        ("mul", lambda a, b: (a * b).sum(), [rand(rng, 3, 2), rand(rng, 1, 2)]),
        ("div", lambda a, b: (a / b).sum(), [rand(rng, 3), rand(rng, 3, lo=0.5, hi=2.0)]),
        ("pow", lambda a: (a**3).sum(), [rand(rng, 4)]),
        ("neg", lambda a: (-a * a).sum(), [rand(rng, 4)]),
        ("abs", lambda a: a.abs().sum(), [away_from_zero(rng, 5)]),
        ("exp", lambda a: a.exp().mean(), [rand(rng, 2, 3)]),
        ("sum_axis", lambda a: (a.sum(axis=1) ** 2).sum(), [rand(rng, 3, 4)]),
        ("mean_axis", lambda a: (a.mean(axis=0, keepdims=True) * a).sum(), [rand(rng, 3, 4)]),
        ("reshape_transpose", lambda a: (a.reshape(3, 4).transpose(1, 0) * np.arange(12).reshape(4, 3)).sum(),
         [rand(rng, 2, 6)]),
        ("getitem", lambda a: (a[1:, ::2] ** 2).sum(), [rand(rng, 3, 4)]),
        ("concat", lambda a, b: (concat([a, b], axis=1) ** 2).sum(), [rand(rng, 2, 2), rand(rng, 2, 3)]),
        ("relu", lambda a: (relu(a) ** 2).sum(), [away_from_zero(rng, 6)]),
        ("leaky_relu", lambda a: (leaky_relu(a, 0.2) ** 2).sum(), [away_from_zero(rng, 6)]),
        ("tanh", lambda a: tanh(a).sum(), [rand(rng, 6, lo=-2, hi=2)]),
        ("sigmoid", lambda a: (sigmoid(a) ** 2).sum(), [rand(rng, 6, lo=-3, hi=3)]),
        ("conv2d", lambda x, w, b: (conv2d(x, w, b, stride=2, padding=1) ** 2).sum(),
         [rand(rng, 1, 2, 6, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)]),
        ("conv2d_reflect", lambda x, w: (conv2d(x, w, padding=2, pad_mode="reflect") ** 2).sum(),
         [rand(rng, 1, 2, 5, 5), rand(rng, 2, 2, 3, 3)]),
        ("conv2d_transpose", lambda x, w, b: (conv2d_transpose(x, w, b, stride=2, padding=1) ** 2).sum(),
         [rand(rng, 1, 2, 3, 3), rand(rng, 2, 3, 4, 4), rand(rng, 3)]),
        ("instance_norm", lambda x, g, b: (instance_norm(x, g, b) * np.arange(32).reshape(1, 2, 4, 4)).sum(),
         [rand(rng, 1, 2, 4, 4), rand(rng, 2), rand(rng, 2)]),
        ("l1_loss", lambda a, b: l1_loss(a, b), [away_from_zero(rng, 2, 3), np.zeros((2, 3))]),
        ("bce_from_logits", lambda z: bce_from_logits(z, BCE_TARGET), [rand(rng, 2, 3, lo=-4, hi=4)]),
        ("softmax_cross_entropy", lambda z: softmax_cross_entropy(z, np.array([0, 2, 1])), [rand(rng, 3, 3)]),
    ]
    return cases


def composed_cases(rng, seed):
    gs = GeneratorSpec(base_width=2, n_resblocks=1, n_downsample=1)
    ds = DiscriminatorSpec(n_layers=2, base_width=2)
    g = build_generator(gs, seed)
    d = build_patch_discriminator(ds, seed + 1)
    x = rand(rng, 1, 3, 8, 8)
    y = rand(rng, 1, 3, 8, 8)
    det_spec = DetectorSpec(n_classes=2, image_side=16, grid=1, anchor_sizes=(0.5, 1.0), base_width=2)
    det = build_detector(det_spec, seed)
    gt = [GroundTruth(int(rng.integers(2)), random_box(rng, 16))]
    asg = [match_anchors(gt, det_spec)]
    img16 = rand(rng, 1, 3, 16, 16)

    def with_(params, name, w):
        return dict(params, **{name: w})

    return [
        ("generator_adv(D(G(x)))",
         lambda w, xin: generator_adv_loss(d, generator_forward(with_(g, "res0.c1.w", w), xin, gs)),
         [g["res0.c1.w"].data, x]),
        ("discriminator_loss",
         lambda w: discriminator_loss(with_(d, "conv1.w", w), y, generator_forward(g, x, gs)),
         [d["conv1.w"].data]),
        ("cycle_loss",
         lambda w: cycle_loss(with_(g, "stem.w", w), g, x),
         [g["stem.w"].data]),
        ("discriminator_forward",
         lambda xin: (discriminator_forward(d, xin, ds) ** 2).mean(),
         [y]),
        ("detector_loss",
         lambda w, xin: detector_loss(with_(det, "block1.w", w), xin, asg, [gt], det_spec),
         [det["block1.w"].data, img16]),
    ]


@pytest.mark.criterion(1, "gradient suite over 20 seeds, 64-bit central differences, tol 1e-4, < 2 min")
def test_criterion1_gradient_suite():
    started = time.perf_counter()
    failures = []
    n_checks = 0
    with precision(64):
        for seed in SEEDS:
            rng = np.random.default_rng([1, seed])
            for name, fn, inputs in primitive_cases(rng) + composed_cases(rng, seed):
                rep = grad_check(fn, inputs, tol=1e-4, max_coords=12, seed=seed)
                n_checks += 1
                if not rep.passed:
                    failures.append(f"seed {seed} {name}: {rep}")
    elapsed = time.perf_counter() - started
    print(f"{n_checks} gradient checks in {elapsed:.1f}s")
    assert not failures, "\n".join(failures)
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# criterion 2


@pytest.mark.criterion(2, "metric functions equal brute-force oracles on >= 50 instances; worked AP example")
class TestCriterion2MetricOracles:
    N = 60

    def test_iou(self):
        rng = np.random.default_rng(20)
        for _ in range(self.N):
            a, b = random_box(rng), random_box(rng)
            assert Fraction(iou(a, b)) == Fraction(float(raster_iou(a, b)))

    def test_match_detections(self):
        rng = np.random.default_rng(21)
        for _ in range(self.N):
            dets, gts = random_scene(rng)
            out = match_detections(dets, gts)
            expected = greedy_match(dets, gts)
            assert list(zip(out.detections, out.tp)) == expected

    def test_average_precision(self):
        rng = np.random.default_rng(22)
        for _ in range(self.N):
            flags = [bool(f) for f in rng.random(rng.integers(1, 20)) < 0.5]
            n_gt = sum(flags) + int(rng.integers(0, 4)) or 1
            assert average_precision(flags, n_gt) == pytest.approx(float(ap_all_point(flags, n_gt)), abs=1e-12)
            assert average_precision(flags, n_gt, "voc11") == pytest.approx(float(ap_voc11(flags, n_gt)), abs=1e-12)

    def test_worked_example(self):
        assert abs(average_precision([True, False, True], 2) - 0.8333333333) < 1e-9

    def test_mean_ap(self):
        rng = np.random.default_rng(23)
        for _ in range(self.N):
            scenes = [random_scene(rng, n_classes=3) for _ in range(rng.integers(1, 5))]
            dets, gts = [d for d, _ in scenes], [g for _, g in scenes]
            got = mean_ap(dets, gts, ["a", "b", "c"]).map
            assert got == pytest.approx(float(mean_ap_oracle(dets, gts, 3)), abs=1e-12)

    def test_corloc(self):
        rng = np.random.default_rng(24)
        for _ in range(self.N):
            scenes = [random_scene(rng) for _ in range(rng.integers(1, 5))]
            outcomes = [match_detections(d, g) for d, g in scenes]
            verdicts = [ok for d, g in scenes for _, ok in greedy_match(d, g)]
            got = corloc(outcomes)
            if not verdicts:
                assert got is None
            else:
                assert got == float(Fraction(sum(verdicts), len(verdicts)))
        assert corloc([MatchOutcome([True] * 5 + [False] * 5, [])]) == 0.5

    def test_mask_to_bbox(self):
        rng = np.random.default_rng(25)
        for _ in range(self.N):
            m = rng.random((9, 11)) < rng.uniform(0.02, 0.3)
            m[rng.integers(9), rng.integers(11)] = True
            assert tuple(mask_to_bbox(m).as_list()) == mask_envelope(m)


# ---------------------------------------------------------------------------
# criterion 3


@pytest.mark.criterion(3, "objective hand values; 2 ln 2 and ln 2 at zero logits; identity cycle loss is 0")
class TestCriterion3LossFormulas:
    def test_total_objective(self):
        assert total_objective(0.7, 0.7, 0.1, 0.2, 10) == 4.4
        rng = np.random.default_rng(30)
        for a, b, c, d, lam in rng.uniform(0, 3, size=(100, 5)):
            assert total_objective(a, b, c, d, lam) - (a + b + lam * (c + d)) == 0

    def test_zero_logit_losses(self):
        spec = DiscriminatorSpec(n_layers=2, base_width=4)
        with precision(64):
            zero = {k: Tensor(np.zeros_like(v.data)) for k, v in build_patch_discriminator(spec, 0).items()}
            x = np.random.default_rng(0).uniform(-1, 1, size=(2, 3, 16, 16))
            assert abs(discriminator_loss(zero, x, x[::-1]).item() - 2 * math.log(2)) < 1e-9
            assert abs(generator_adv_loss(zero, x).item() - math.log(2)) < 1e-9

    def test_identity_cycle(self):
        x = np.random.default_rng(1).uniform(-1, 1, size=(2, 3, 8, 8))
        assert cycle_loss(lambda t: t, lambda t: t, x).item() == 0.0


# ---------------------------------------------------------------------------
# reference run (criteria 4, 5, 7, 8)


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    committed = json.loads((REFERENCE / "compare.json").read_text())
    if not FULL:
        return committed, None
    root = tmp_path_factory.mktemp("full")
    payload = run_compare(parse_config(REFERENCE / "config.json"), root, allow_upper=True)
    return payload, committed


def _summary(reference):
    payload, _ = reference
    return payload["summary"], payload["rows"]


@pytest.mark.criterion(4, "median target mAP: source < CycleGAN with positive margin, CycleGAN >= ForwardGAN")
class TestCriterion4Ordering:
    def test_reference_scale(self):
        cfg = json.loads((REFERENCE / "config.json").read_text())
        c = cfg["corpus"]
        assert c["n_train_source"] >= 200 and c["n_train_target"] >= 200 and c["n_test_target"] >= 100
        assert c["n_classes"] == 3 and c["image_side"] == 64
        assert cfg["compare"]["replicates"] >= 3

    def test_ordering(self, reference):
        summary, rows = _summary(reference)
        assert all(len(r["seeds"]) >= 3 for r in rows)
        print(f"median mAP: {summary['map_median']}")
        assert summary["cycle_minus_source"] > 0
        assert summary["cycle_minus_forward"] >= 0

    def test_margin_recorded(self):
        summary = json.loads((REFERENCE / "compare.json").read_text())["summary"]
        assert summary["cycle_minus_source"] > 0

    def test_runtime_target(self):
        timing = json.loads((REFERENCE / "timing.json").read_text())
        print(f"reference compare wall time {timing['total'] / 60:.1f} min")
        assert timing["total"] < 3600


@pytest.mark.criterion(5, "best classic augmentation does not exceed the CycleGAN median target mAP")
def test_criterion5_augmentation(reference):
    summary, _ = _summary(reference)
    best = summary["best_augment"]
    print(f"best augmentation {best}: {summary['map_median'][best]:.4f} vs cycle_gan {summary['map_median']['cycle_gan']:.4f}")
    assert summary["cycle_minus_best_augment"] >= 0


@pytest.fixture(scope="module")
def mini_runs(tmp_path_factory):
    cfg = parse_config(None, MINI)
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return cfg, (a, run_compare(cfg, a, allow_upper=True)), (b, run_compare(cfg, b, allow_upper=True))


@pytest.mark.criterion(6, "no regime except the flagged upper bound reads target box annotations")
class TestCriterion6Premise:
    def test_guard_blocks_unflagged_reads(self, tmp_path):
        gen_synthetic_corpus(tmp_path, 2, 3, 2, 3, 64, seed=0, n_test_source=0)
        corpus = load_corpus(tmp_path)
        assert corpus.target_train.box_count() == 0
        for s in corpus.target_train_labeled.samples:
            with pytest.raises(PremiseViolation):
                s.boxes

    def test_pipeline_audit(self, mini_runs):
        _, (_, payload), _ = mini_runs
        audit = payload["audit"]
        assert audit["premise_ok"] and audit["violations"] == 0
        readers = {k.split("|")[0] for k in audit["reads"] if k.split("|")[1].startswith("target_train")}
        assert readers == {UPPER}

    def test_reference_audit(self, reference):
        payload, _ = reference
        assert payload["audit"]["premise_ok"]
        readers = {k.split("|")[0] for k in payload["audit"]["reads"] if k.split("|")[1].startswith("target_train")}
        assert readers <= {UPPER}


@pytest.mark.criterion(7, "repeated pipeline runs give bitwise identical checkpoints, loss CSVs and tables")
class TestCriterion7Determinism:
    def test_two_runs(self, mini_runs):
        cfg, (a, pa), (b, pb) = mini_runs
        assert [r["regime"] for r in pa["rows"]] == regime_order(cfg.compare, 64, True)
        assert pa["digests"] and pa["digests"] == pb["digests"]
        assert any(k.endswith(".ckpt") for k in pa["digests"]) and any(k.endswith(".csv") for k in pa["digests"])
        for name in ("compare.csv", "compare.json"):
            assert (a / "compare" / name).read_bytes() == (b / "compare" / name).read_bytes()

    def test_reference_digests(self, reference):
        payload, committed = reference
        if committed is None:
            pytest.skip("set DAGAN_FULL_ACCEPTANCE=1 to rerun the reference pipeline")
        assert payload["digests"] == committed["digests"]
        assert payload["rows"] == committed["rows"]


@pytest.mark.criterion(8, "CycleGAN translations stay closer to their sources than ForwardGAN ones (mean L1)")
def test_criterion8_structure(reference):
    summary, _ = _summary(reference)
    cyc, fwd = summary["cycle_gan_l1_to_source_median"], summary["forward_gan_l1_to_source_median"]
    print(f"mean L1 to source: cycle_gan {cyc:.4f}, forward_gan {fwd:.4f}")
    assert cyc < fwd
