import numpy as np
import pytest

from promptalign.alignment import AlignConfig, PromptFeature, PromptSet
from promptalign.classifier import (WORKERS_ENV, ClassBank, class_distances,
                                    classify, cross_entropy_loss,
                                    loss_gradients, worker_count)
from promptalign.numerics import row_normalize_l2, softmax
from promptalign.ot import SinkhornSettings

TIGHT = SinkhornSettings(lam=0.05, max_iterations=5000, tolerance=1e-10)
# moderate regularization keeps every plan converged within the budget,
# which the gradient path requires
GRAD = AlignConfig(beta=1.0, tau=0.5,
                   sinkhorn=SinkhornSettings(lam=0.3, max_iterations=2000,
                                             tolerance=1e-9))


def feature(rng, tokens, d):
    return PromptFeature.from_raw(rng.normal(size=d), rng.normal(size=(tokens, d)))


def prompt_set(rng, count, tokens, d, side):
    return PromptSet(tuple(feature(rng, tokens, d) for _ in range(count)), side)


def bank(rng, k=3, n=2, tokens=3, d=6):
    sets = tuple(prompt_set(rng, n, tokens, d, "class") for _ in range(k))
    return ClassBank(sets, tuple(f"c{i}" for i in range(k)))


class TestClassBank:
    def test_requires_two_classes(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="two classes"):
            ClassBank((prompt_set(rng, 2, 3, 6, "class"),), ("only",))

    def test_requires_matching_names(self):
        rng = np.random.default_rng(1)
        sets = tuple(prompt_set(rng, 2, 3, 6, "class") for _ in range(2))
        with pytest.raises(ValueError, match="name"):
            ClassBank(sets, ("a",))

    def test_requires_shared_shape(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError, match="share"):
            ClassBank((prompt_set(rng, 2, 3, 6, "class"),
                       prompt_set(rng, 3, 3, 6, "class")), ("a", "b"))


class TestClassify:
    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(3)
        pred = classify(prompt_set(rng, 2, 3, 6, "image"), bank(rng),
                        AlignConfig(tau=0.5, sinkhorn=TIGHT))
        assert pred.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
        assert pred.probabilities.shape == (3,)

    def test_argmax_is_nearest_class(self):
        rng = np.random.default_rng(4)
        img = prompt_set(rng, 2, 3, 6, "image")
        b = bank(rng)
        cfg = AlignConfig(tau=0.5, sinkhorn=TIGHT)
        pred = classify(img, b, cfg)
        assert pred.argmax == int(np.argmin(pred.distances))
        assert pred.argmax == int(np.argmax(pred.probabilities))

    def test_self_class_wins(self):
        rng = np.random.default_rng(5)
        img = prompt_set(rng, 2, 3, 8, "image")
        own = PromptSet(img.prompts, "class")
        others = tuple(prompt_set(rng, 2, 3, 8, "class") for _ in range(2))
        b = ClassBank((own,) + others, ("own", "o1", "o2"))
        pred = classify(img, b, AlignConfig(tau=0.5, sinkhorn=TIGHT))
        assert pred.argmax == 0

    def test_single_prompt_single_token_reduces_to_cosine_softmax(self):
        rng = np.random.default_rng(6)
        d = 8
        img = prompt_set(rng, 1, 1, d, "image")
        sets = tuple(prompt_set(rng, 1, 1, d, "class") for _ in range(4))
        b = ClassBank(sets, tuple(str(i) for i in range(4)))
        tau = 0.1
        pred = classify(img, b, AlignConfig(beta=0.0, tau=tau, sinkhorn=TIGHT))
        cos = np.array([float(img.prompts[0].global_ @ s.prompts[0].global_)
                        for s in sets])
        np.testing.assert_allclose(pred.probabilities, softmax(cos / tau), atol=1e-12)


class TestCrossEntropyLoss:
    def test_matches_manual_formula(self):
        rng = np.random.default_rng(7)
        b = bank(rng)
        cfg = AlignConfig(tau=0.5, sinkhorn=TIGHT)
        batch = [(prompt_set(rng, 2, 3, 6, "image"), i % 3) for i in range(4)]
        loss = cross_entropy_loss(batch, b, cfg)
        expected = np.mean([-np.log(classify(s, b, cfg).probabilities[y])
                            for s, y in batch])
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_empty_batch_rejected(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError, match="empty"):
            cross_entropy_loss([], bank(rng), AlignConfig(sinkhorn=TIGHT))

    def test_label_out_of_range(self):
        rng = np.random.default_rng(9)
        b = bank(rng)
        img = prompt_set(rng, 2, 3, 6, "image")
        with pytest.raises(ValueError, match="out of range"):
            cross_entropy_loss([(img, 3)], b, AlignConfig(sinkhorn=TIGHT))


class TestWorkerCount:
    def test_default_is_one(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert worker_count() == 1

    def test_reads_env(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "4")
        assert worker_count() == 4

    def test_rejects_garbage(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "many")
        with pytest.raises(ValueError, match=WORKERS_ENV):
            worker_count()

    def test_floor_of_one(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "0")
        assert worker_count() == 1

    def test_output_identical_across_worker_counts(self, monkeypatch):
        rng = np.random.default_rng(10)
        b = bank(rng)
        cfg = AlignConfig(tau=0.5, sinkhorn=TIGHT)
        batch = [(prompt_set(rng, 2, 3, 6, "image"), i % 3) for i in range(3)]

        monkeypatch.setenv(WORKERS_ENV, "1")
        solo = [classify(s, b, cfg).probabilities for s, _ in batch]
        loss_solo = cross_entropy_loss(batch, b, cfg)
        monkeypatch.setenv(WORKERS_ENV, "4")
        multi = [classify(s, b, cfg).probabilities for s, _ in batch]
        loss_multi = cross_entropy_loss(batch, b, cfg)

        for p1, p4 in zip(solo, multi):
            np.testing.assert_array_equal(p1, p4)
        assert loss_solo == loss_multi


def perturbed_feature(feat, g_step, t_step):
    """Re-normalized copy; steps live in ambient space like the FD probe."""
    return PromptFeature.from_raw(feat.global_ + g_step, feat.tokens + t_step)


class TestLossGradients:
    def test_loss_matches_cross_entropy(self):
        rng = np.random.default_rng(11)
        b = bank(rng)
        batch = [(prompt_set(rng, 2, 3, 6, "image"), i % 3) for i in range(2)]
        grads = loss_gradients(batch, b, GRAD)
        assert grads.loss == pytest.approx(cross_entropy_loss(batch, b, GRAD), abs=1e-12)

    def test_gradients_tangent_to_sphere(self):
        rng = np.random.default_rng(12)
        b = bank(rng)
        img = prompt_set(rng, 2, 3, 6, "image")
        grads = loss_gradients([(img, 0)], b, GRAD)
        for m, fg in enumerate(grads.images[0]):
            assert abs(fg.global_ @ img.prompts[m].global_) < 1e-10
            radial = (fg.tokens * img.prompts[m].tokens).sum(axis=1)
            np.testing.assert_allclose(radial, 0.0, atol=1e-10)

    def test_unconverged_plan_rejected(self):
        rng = np.random.default_rng(13)
        b = bank(rng)
        img = prompt_set(rng, 2, 3, 6, "image")
        starved = AlignConfig(tau=0.5, sinkhorn=SinkhornSettings(0.05, 1, 1e-12))
        with pytest.raises(ValueError, match="converged"):
            loss_gradients([(img, 0)], b, starved)

    @pytest.mark.parametrize("seed", range(4))
    def test_image_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        b = bank(rng, k=2, n=2, tokens=3, d=4)
        img = prompt_set(rng, 2, 3, 4, "image")
        batch = [(img, seed % 2)]
        grads = loss_gradients(batch, b, GRAD)
        step = 1e-6
        worst = 0.0
        for m in range(2):
            analytic = np.concatenate([grads.images[0][m].global_,
                                       grads.images[0][m].tokens.ravel()])
            fd = np.zeros_like(analytic)
            d = img.prompts[m].dim
            for idx in range(analytic.size):
                def probe(sign):
                    g_step = np.zeros(d)
                    t_step = np.zeros_like(img.prompts[m].tokens)
                    if idx < d:
                        g_step[idx] = sign * step
                    else:
                        t_step.ravel()[idx - d] = sign * step
                    prompts = list(img.prompts)
                    prompts[m] = perturbed_feature(img.prompts[m], g_step, t_step)
                    moved = PromptSet(tuple(prompts), "image")
                    return cross_entropy_loss([(moved, batch[0][1])], b, GRAD)
                fd[idx] = (probe(1.0) - probe(-1.0)) / (2 * step)
            denom = max(np.abs(fd).max(), 1e-12)
            worst = max(worst, np.abs(analytic - fd).max() / denom)
        assert worst < 1e-4

    def test_class_gradients_match_finite_differences(self):
        rng = np.random.default_rng(200)
        b = bank(rng, k=2, n=2, tokens=2, d=4)
        img = prompt_set(rng, 2, 2, 4, "image")
        batch = [(img, 0), (img, 1)]
        grads = loss_gradients(batch, b, GRAD)
        step = 1e-6
        k, n = 1, 0
        target = b.classes[k].prompts[n]
        analytic = np.concatenate([grads.classes[k][n].global_,
                                   grads.classes[k][n].tokens.ravel()])
        fd = np.zeros_like(analytic)
        d = target.dim
        for idx in range(analytic.size):
            def probe(sign):
                g_step = np.zeros(d)
                t_step = np.zeros_like(target.tokens)
                if idx < d:
                    g_step[idx] = sign * step
                else:
                    t_step.ravel()[idx - d] = sign * step
                prompts = list(b.classes[k].prompts)
                prompts[n] = perturbed_feature(target, g_step, t_step)
                sets = list(b.classes)
                sets[k] = PromptSet(tuple(prompts), "class")
                moved = ClassBank(tuple(sets), b.names)
                return cross_entropy_loss(batch, moved, GRAD)
            fd[idx] = (probe(1.0) - probe(-1.0)) / (2 * step)
        denom = max(np.abs(fd).max(), 1e-12)
        assert np.abs(analytic - fd).max() / denom < 1e-4
