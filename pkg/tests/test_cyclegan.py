import json
import math

import numpy as np
import pytest

from dagan.checkpoint import load_checkpoint
from dagan.core import Tensor, grad_check, precision
from dagan.cyclegan import (
    LOSS_COLUMNS,
    GanConfig,
    TrainingDiverged,
    cycle_loss,
    discriminator_loss,
    generator_adv_loss,
    generator_losses,
    init_state,
    read_loss_csv,
    run_training,
    total_objective,
    train,
    train_step,
    transform_dataset,
)
from dagan.data import edge_energy, gen_synthetic_corpus
from dagan.nets import DiscriminatorSpec, GeneratorSpec, build_generator, build_patch_discriminator

SMALL = dict(base_width=4, n_resblocks=1, resize_to=18, crop_to=16, disc_layers=2)


def zero_disc(spec=DiscriminatorSpec(n_layers=2, base_width=4)):
    return {k: Tensor(np.zeros_like(v.data)) for k, v in build_patch_discriminator(spec, 0).items()}


def batch(seed=0, b=2, s=16):
    return np.random.default_rng(seed).uniform(-1, 1, size=(b, 3, s, s))


def softplus(z):
    return np.logaddexp(0, z)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return gen_synthetic_corpus(tmp_path_factory.mktemp("c"), 12, 12, 4, 3, 64, seed=2, n_test_source=0)


class TestLosses:
    def test_discriminator_zero_logits(self):
        with precision(64):
            v = discriminator_loss(zero_disc(), batch(0), batch(1)).item()
        assert v == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_generator_zero_logits(self):
        with precision(64):
            assert generator_adv_loss(zero_disc(), batch()).item() == pytest.approx(math.log(2), abs=1e-9)

    def test_saturated_limits(self):
        with precision(64):
            d = zero_disc()
            # the final bias alone sets every patch logit
            d["final.b"] = Tensor(np.array([40.0]))
            assert generator_adv_loss(d, batch()).item() < 1e-15
            d["final.b"] = Tensor(np.array([-40.0]))
            assert generator_adv_loss(d, batch()).item() == pytest.approx(40.0, rel=1e-12)

    def test_discriminator_matches_scalar_formula(self):
        spec = DiscriminatorSpec(n_layers=2, base_width=4)
        with precision(64):
            d = build_patch_discriminator(spec, 3)
            real, fake = batch(2), batch(3)
            from dagan.nets import discriminator_forward

            lr = discriminator_forward(d, real, spec).data.ravel()
            lf = discriminator_forward(d, fake, spec).data.ravel()
            got = discriminator_loss(d, real, fake).item()
        expected = sum(softplus(-z) for z in lr) / lr.size + sum(softplus(z) for z in lf) / lf.size
        assert got == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        from dagan.core import ShapeError

        with pytest.raises(ShapeError):
            discriminator_loss(zero_disc(), batch(b=2), batch(b=1))

    def test_cycle_identity_is_zero(self):
        ident = lambda t: t  # noqa: E731
        assert cycle_loss(ident, ident, batch()).item() == 0.0

    def test_cycle_shift(self):
        x = np.random.default_rng(0).uniform(-0.5, 0.4, size=(2, 3, 8, 8))
        with precision(64):
            v = cycle_loss(lambda t: t + 0.25, lambda t: t + 0.25, x).item()
        assert v == pytest.approx(0.5, abs=1e-12)

    def test_cycle_matches_oracle(self):
        spec = GeneratorSpec(base_width=2, n_resblocks=1, n_downsample=1)
        with precision(64):
            g, f = build_generator(spec, 1), build_generator(spec, 2)
            x = batch(4, 1, 8)
            from dagan.nets import generator_forward

            composed = generator_forward(f, generator_forward(g, x, spec), spec).data
            assert cycle_loss(g, f, x).item() == pytest.approx(np.abs(composed - x).mean(), rel=1e-12)

    def test_total_objective(self):
        assert total_objective(0.7, 0.7, 0.1, 0.2, 10) == pytest.approx(4.4, abs=1e-12)
        assert total_objective(0.7, 0.3, 5.0, 9.0, 0) == 1.0
        rng = np.random.default_rng(0)
        for a, b, c, d, lam in rng.uniform(0, 5, size=(50, 5)):
            assert total_objective(a, b, c, d, lam) == a + b + lam * (c + d)

    def test_default_lambda(self):
        assert GanConfig().lambda_cycle == 10.0

    def test_generator_adv_grad(self):
        spec = GeneratorSpec(base_width=2, n_resblocks=1, n_downsample=1)
        with precision(64):
            g = build_generator(spec, 0)
            d = build_patch_discriminator(DiscriminatorSpec(n_layers=1, base_width=2), 1)
        from dagan.nets import generator_forward

        def loss(w):
            return generator_adv_loss(d, generator_forward(dict(g, **{"stem.w": w}), batch(0, 1, 8), spec))

        rep = grad_check(loss, [g["stem.w"].data], max_coords=30)
        assert rep.passed, str(rep)


class TestConfig:
    def test_crop_larger_than_resize(self):
        with pytest.raises(ValueError, match="crop_to <= resize_to"):
            GanConfig(resize_to=30, crop_to=32)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            GanConfig(mode="sideways")

    def test_forward_networks(self):
        assert GanConfig(mode="forward").networks == ("G", "D_Y")


class TestTrainStep:
    def test_forward_mode_skips_cycle(self):
        cfg = GanConfig(mode="forward", total_steps=2, **SMALL)
        state = init_state(cfg)
        assert set(state.params) == {"G", "D_Y"}
        state = train_step(state, batch(0, 1), batch(1, 1), cfg)
        row = dict(zip(LOSS_COLUMNS, state.history[0]))
        assert row["d_x"] == row["f_adv"] == row["cyc_fwd"] == row["cyc_bwd"] == 0.0

    def test_discriminator_updates_leave_generators(self):
        cfg = GanConfig(total_steps=2, **SMALL)
        with precision(32):
            state = init_state(cfg)
            before = {n: {k: v.data.copy() for k, v in state.params[n].items()} for n in ("G", "F")}
            x, y = Tensor(batch(0, 1)), Tensor(batch(1, 1))
            for d_name, real, gen, src in (("D_Y", y, "G", x), ("D_X", x, "F", y)):
                from dagan.nets import generator_forward

                fake = generator_forward(state.params[gen], src, cfg.generator_spec)
                discriminator_loss(state.params[d_name], real, fake).backward()
            for n in ("G", "F"):
                assert all(p.grad is None for p in state.params[n].values())
                for k, v in state.params[n].items():
                    np.testing.assert_array_equal(v.data, before[n][k])

    def test_every_term_reaches_both_generators(self):
        cfg = GanConfig(total_steps=1, **SMALL)
        with precision(64):
            state = init_state(cfg)
            x, y = batch(0, 1), batch(1, 1)

            def grads(drop=None):
                terms = generator_losses(state.params, x, y, cfg)
                parts = {k: (0.0 if k == drop else terms[k]) for k in ("g_adv", "f_adv", "cyc_fwd", "cyc_bwd")}
                for p in (*state.params["G"].values(), *state.params["F"].values()):
                    p.grad = None
                total_objective(parts["g_adv"], parts["f_adv"], parts["cyc_fwd"], parts["cyc_bwd"], 10.0).backward()
                return {n: np.concatenate([p.grad.ravel() for p in state.params[n].values() if p.grad is not None])
                        for n in ("G", "F")}

            full = grads()
            reach = {"g_adv": ["G"], "f_adv": ["F"], "cyc_fwd": ["G", "F"], "cyc_bwd": ["G", "F"]}
            for term, nets in reach.items():
                dropped = grads(term)
                for n in nets:
                    assert not np.allclose(full[n], dropped[n], atol=0, rtol=0), (term, n)

    def test_nan_aborts_with_step(self):
        cfg = GanConfig(total_steps=3, **SMALL)
        state = init_state(cfg)
        state = train_step(state, batch(0, 1), batch(1, 1), cfg)
        state.params["G"]["out.b"].data[0] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train_step(state, batch(2, 1), batch(3, 1), cfg)
        assert info.value.step == 2

    def test_past_budget_rejected(self):
        cfg = GanConfig(total_steps=1, **SMALL)
        state = train_step(init_state(cfg), batch(0, 1), batch(1, 1), cfg)
        with pytest.raises(ValueError):
            train_step(state, batch(0, 1), batch(1, 1), cfg)


class TestTraining:
    def test_determinism_over_fifty_steps(self, corpus):
        cfg = GanConfig(total_steps=50, seed=4, **SMALL)
        a = train(corpus.source_train, corpus.target_train, cfg)
        b = train(corpus.source_train, corpus.target_train, cfg)
        assert a.history == b.history
        for n in a.params:
            for k in a.params[n]:
                np.testing.assert_array_equal(a.params[n][k].data, b.params[n][k].data)

    def test_cycle_loss_halves(self, corpus):
        # threshold fixed from the reference run at the default architecture
        cfg = GanConfig(total_steps=500, seed=0)
        hist = np.array(train(corpus.source_train, corpus.target_train, cfg).history)
        cyc = hist[:, 5] + hist[:, 6]
        assert cyc[-50:].mean() < 0.5 * cyc[:50].mean()


class TestRunTraining:
    def test_cycle_checkpoint_contents(self, corpus, tmp_path):
        cfg = GanConfig(total_steps=3, **SMALL)
        run = run_training(corpus.source_train, corpus.target_train, cfg, tmp_path)
        tensors, meta = load_checkpoint(tmp_path / run.index["models"]["*"]["checkpoint"])
        assert {k.split("/")[0] for k in tensors} == {"G", "F", "D_X", "D_Y"}
        assert meta["config"]["total_steps"] == 3
        assert read_loss_csv(tmp_path / "model_losses.csv").shape == (3, len(LOSS_COLUMNS))

    def test_forward_checkpoint_lacks_reverse(self, corpus, tmp_path):
        cfg = GanConfig(total_steps=2, mode="forward", **SMALL)
        run = run_training(corpus.source_train, corpus.target_train, cfg, tmp_path)
        tensors, _ = load_checkpoint(tmp_path / run.index["models"]["*"]["checkpoint"])
        assert {k.split("/")[0] for k in tensors} == {"G", "D_Y"}

    def test_conditioned_three_classes(self, corpus, tmp_path):
        cfg = GanConfig(total_steps=2, conditioned=True, **SMALL)
        run = run_training(corpus.source_train, corpus.target_train, cfg, tmp_path)
        assert sorted(run.index["models"]) == sorted(corpus.source_train.classes)
        assert len(list(tmp_path.glob("*.ckpt"))) == 3
        for name, entry in run.index["models"].items():
            _, meta = load_checkpoint(tmp_path / entry["checkpoint"])
            assert meta["class"] == name

    def test_conditioned_fallback(self, corpus, tmp_path):
        missing = 1
        target = corpus.target_train.subset(
            [i for i, s in enumerate(corpus.target_train.samples) if missing not in s.labels]
        )
        cfg = GanConfig(total_steps=2, conditioned=True, **SMALL)
        with pytest.warns(UserWarning, match="absent from the target"):
            run = run_training(corpus.source_train, target, cfg, tmp_path)
        name = corpus.source_train.classes[missing]
        assert run.index["fallback"] == [name]
        assert run.index["models"][name]["checkpoint"] == "model.ckpt"

    def test_loss_csv_bytes_deterministic(self, corpus, tmp_path):
        cfg = GanConfig(total_steps=4, **SMALL)
        run_training(corpus.source_train, corpus.target_train, cfg, tmp_path / "a")
        run_training(corpus.source_train, corpus.target_train, cfg, tmp_path / "b")
        for name in ("model.ckpt", "model_losses.csv", "checkpoints.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestTransform:
    def test_boxes_preserved(self, corpus, tmp_path):
        cfg = GanConfig(total_steps=2, **SMALL)
        run = run_training(corpus.source_train, corpus.target_train, cfg, tmp_path / "gan")
        out = transform_dataset(run.index_path, corpus.source_train, tmp_path / "t")
        assert len(out) == len(corpus.source_train)
        assert [s.boxes for s in out.samples] == [s.boxes for s in corpus.source_train.samples]
        reread = [json.loads(l) for l in (tmp_path / "t" / "manifest.jsonl").read_text().splitlines()]
        src = [json.loads(l) for l in (corpus.source_train.root / "source_train.jsonl").read_text().splitlines()]
        assert [r["boxes"] for r in reread] == [r["boxes"] for r in src]

    def test_zero_final_layer_gives_flat_images(self, corpus, tmp_path):
        from dagan.checkpoint import save_checkpoint

        cfg = GanConfig(total_steps=1, **SMALL)
        run = run_training(corpus.source_train, corpus.target_train, cfg, tmp_path / "gan")
        path = tmp_path / "gan" / "model.ckpt"
        tensors, meta = load_checkpoint(path)
        tensors["G/out.w"] = np.zeros_like(tensors["G/out.w"])
        tensors["G/out.b"] = np.zeros_like(tensors["G/out.b"])
        save_checkpoint(path, tensors, meta)
        out = transform_dataset(run.index_path, corpus.source_train, tmp_path / "t")
        for img in out.images():
            # zero maps to the nearest byte level, 128
            np.testing.assert_allclose(img, 128 / 127.5 - 1, atol=1e-12)
        assert [s.boxes for s in out.samples] == [s.boxes for s in corpus.source_train.samples]

    def test_missing_class_model(self, corpus, tmp_path):
        cfg = GanConfig(total_steps=1, conditioned=True, **SMALL)
        run = run_training(corpus.source_train, corpus.target_train, cfg, tmp_path / "gan")
        index = json.loads(run.index_path.read_text())
        index["models"].pop(corpus.source_train.classes[0])
        run.index_path.write_text(json.dumps(index))
        with pytest.raises(KeyError):
            transform_dataset(run.index_path, corpus.source_train, tmp_path / "t")
