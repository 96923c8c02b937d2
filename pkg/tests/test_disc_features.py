import pytest
import torch

from gandetect import disc_features as df
from gandetect import gan_core
from gandetect.errors import DataError, NumericalError


def toy_problem(n_per_class: int = 20, dim: int = 20, seed: int = 0):
    """Well-separated 10-class blobs: class c sits at 5 * e_c."""
    gen = torch.Generator().manual_seed(seed)
    xs, ys = [], []
    for c in range(10):
        center = torch.zeros(dim)
        center[c] = 5.0
        xs.append(center + 0.1 * torch.randn((n_per_class, dim), generator=gen))
        ys.extend([c] * n_per_class)
    return torch.cat(xs), torch.tensor(ys)


class TestProbe:
    def test_full_width_dimension_pin(self):
        d = gan_core.make_discriminator(seed=0, width_divisor=1)
        feats = df.extract_features(d, torch.zeros(3, 32, 32))
        assert feats.shape == (28672,)
        assert df.FEATURE_DIM == 28672

    def test_last_block_is_identity_over_4x4_map(self, tiny_gan):
        _, d = tiny_gan
        gen = torch.Generator().manual_seed(3)
        chips = torch.rand((2, 3, 32, 32), generator=gen) * 2.0 - 1.0
        feats = df.extract_features_batch(d, chips)
        d.eval()
        with torch.no_grad():
            _, _, a3 = d.feature_maps(chips)
        assert torch.equal(feats[:, -a3.shape[1] * 16:], a3.flatten(1))

    def test_first_block_matches_window_max_oracle(self, tiny_gan):
        _, d = tiny_gan
        gen = torch.Generator().manual_seed(4)
        chips = torch.rand((2, 3, 32, 32), generator=gen) * 2.0 - 1.0
        feats = df.extract_features_batch(d, chips)
        d.eval()
        with torch.no_grad():
            a1, _, _ = d.feature_maps(chips)
        b, c = a1.shape[:2]
        oracle = torch.empty((b, c, 4, 4))
        for i in range(4):
            for j in range(4):
                win = a1[:, :, 4 * i:4 * i + 4, 4 * j:4 * j + 4]
                oracle[:, :, i, j] = win.amax(dim=(2, 3))
        assert torch.equal(feats[:, :c * 16], oracle.flatten(1))

    def test_probe_is_differentiable(self, tiny_gan):
        _, d = tiny_gan
        chips = torch.zeros((1, 3, 32, 32), requires_grad=True)
        df.pooled_features(d, chips).sum().backward()
        assert chips.grad is not None
        assert float(chips.grad.abs().sum()) > 0.0

    def test_single_matches_batch(self, tiny_gan):
        _, d = tiny_gan
        gen = torch.Generator().manual_seed(5)
        chips = torch.rand((3, 3, 32, 32), generator=gen) * 2.0 - 1.0
        batch = df.extract_features_batch(d, chips)
        for i in range(3):
            assert torch.equal(df.extract_features(d, chips[i]), batch[i])

    def test_shape_validation(self, tiny_gan):
        _, d = tiny_gan
        with pytest.raises(ValueError):
            df.extract_features(d, torch.zeros(3, 16, 16))
        with pytest.raises(ValueError):
            df.extract_features_batch(d, torch.zeros(2, 3, 16, 16))


class TestFit:
    def test_separable_toy_reaches_full_train_accuracy(self):
        x, y = toy_problem()
        clf = df.train_linear(x, y, l2_lambda=1e-4, seed=0, max_iter=500)
        cls, conf = df.classify_features(clf, x)
        assert torch.equal(cls, y)
        assert float(conf.min()) > 0.5

    def test_objective_history_non_increasing(self):
        x, y = toy_problem(seed=1)
        _, _, history = df.fit_multinomial_logistic(x, y, l2_lambda=1e-3, seed=2, max_iter=200)
        assert len(history) > 1
        for prev, cur in zip(history, history[1:]):
            assert cur <= prev + 1e-12

    def test_l2_shrinks_weight_norm(self):
        x, y = toy_problem(seed=2)
        norms = []
        for lam in (1e-4, 1e-2, 1.0):
            clf = df.train_linear(x, y, l2_lambda=lam, seed=0, max_iter=300)
            norms.append(float(clf.weights.norm()))
        assert norms[0] > norms[1] > norms[2]

    def test_seed_independent_optimum(self):
        x, y = toy_problem(seed=3)
        finals = []
        for seed in (0, 99):
            _, _, history = df.fit_multinomial_logistic(
                x, y, l2_lambda=1e-2, seed=seed, max_iter=2000, grad_tol=1e-6
            )
            finals.append(history[-1])
        assert finals[0] == pytest.approx(finals[1], abs=1e-6)

    def test_shift_invariant_predictions(self):
        x, y = toy_problem(seed=4)
        shift = torch.linspace(-3.0, 3.0, x.shape[1])
        clf_a = df.train_linear(x, y, l2_lambda=1e-3, seed=0, max_iter=300)
        clf_b = df.train_linear(x + shift, y, l2_lambda=1e-3, seed=0, max_iter=300)
        pa = clf_a.predict_proba(x)
        pb = clf_b.predict_proba(x + shift)
        assert torch.allclose(pa, pb, atol=1e-3)

    def test_missing_class_rejected(self):
        x, y = toy_problem()
        keep = y != 7
        with pytest.raises(DataError, match="7"):
            df.train_linear(x[keep], y[keep])

    def test_length_mismatch_and_min_rows(self):
        x, y = toy_problem()
        with pytest.raises(DataError):
            df.train_linear(x[:-1], y)
        with pytest.raises(DataError):
            df.train_linear(x[:5], y[:5])

    def test_proba_rows_sum_to_one(self):
        x, y = toy_problem(seed=5)
        clf = df.train_linear(x, y, l2_lambda=1e-3, seed=0, max_iter=100)
        proba = clf.predict_proba(x[:32])
        assert torch.allclose(proba.sum(dim=-1), torch.ones(32, dtype=torch.float64))
        assert float(proba.min()) >= 0.0

    def test_feature_dim_mismatch(self):
        x, y = toy_problem()
        clf = df.train_linear(x, y, l2_lambda=1e-3, seed=0, max_iter=50)
        with pytest.raises(DataError):
            clf.logits(torch.zeros(4, x.shape[1] + 1))

    def test_classifier_validation(self):
        good = dict(
            weights=torch.zeros(10, 4),
            bias=torch.zeros(10),
            mean=torch.zeros(4),
            std=torch.ones(4),
        )
        with pytest.raises(ValueError):
            df.LinearClassifier(l2_lambda=0.0, **good)
        bad = dict(good)
        bad["weights"] = torch.full((10, 4), float("nan"))
        with pytest.raises(NumericalError):
            df.LinearClassifier(l2_lambda=1e-3, **bad)


class TestChipClassification:
    def test_checkpoint_round_trip(self, tmp_path):
        x, y = toy_problem(seed=6)
        clf = df.train_linear(x, y, l2_lambda=1e-3, seed=0, max_iter=100)
        path = tmp_path / "clf.ckpt"
        df.save_classifier(path, clf)
        loaded = df.load_classifier(path)
        assert loaded.l2_lambda == clf.l2_lambda
        assert torch.equal(loaded.weights, clf.weights)
        assert torch.equal(loaded.mean, clf.mean)
        assert torch.equal(loaded.std, clf.std)
        assert torch.equal(loaded.predict_proba(x[:8]), clf.predict_proba(x[:8]))

    def test_classify_chips_matches_single(self, tiny_gan):
        _, d = tiny_gan
        gen = torch.Generator().manual_seed(7)
        chips = torch.rand((4, 3, 32, 32), generator=gen) * 2.0 - 1.0
        feats = df.extract_features_batch(d, chips)
        labels = torch.arange(10).repeat(2)
        rows = torch.cat([feats + 0.01 * i for i in range(5)])
        clf = df.train_linear(rows, labels, l2_lambda=1e-2, seed=0, max_iter=50)
        cls_b, conf_b = df.classify_chips(d, clf, chips)
        for i in range(4):
            cls_s, conf_s = df.classify_chip(d, clf, chips[i])
            assert cls_s == int(cls_b[i])
            assert conf_s == pytest.approx(float(conf_b[i]), rel=1e-6)
