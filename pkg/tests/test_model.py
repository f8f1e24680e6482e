import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wiselab import model as M
from wiselab.checkpoint import Checkpoint
from wiselab.errors import DataError, DomainError, StructuralError


def hand_net(spec: M.ModelSpec, **arrays) -> Checkpoint:
    lay = M.layout(spec)
    c = Checkpoint(lay, np.zeros(lay.total))
    for name, value in arrays.items():
        c = c.with_entry(name.replace("_", "."), np.asarray(value, dtype=float))
    return c


class TestLayout:
    def test_names_and_shapes(self):
        spec = M.ModelSpec((4, 5, 3), k=2)
        lay = M.layout(spec)
        assert lay.names == ["enc.0.weight", "enc.0.bias", "enc.1.weight", "enc.1.bias", "head"]
        assert lay.entry("head").shape == (3, 2)
        assert all(M.is_encoder(n) for n in lay.names[:-1]) and not M.is_encoder("head")

    def test_spec_validation(self):
        with pytest.raises(DomainError):
            M.ModelSpec((4,), k=2)
        with pytest.raises(DomainError):
            M.ModelSpec((4, 2), activation="tanh", k=2)

    def test_init_deterministic(self):
        spec = M.ModelSpec((4, 5, 3), k=2)
        assert M.init_checkpoint(spec, 1) == M.init_checkpoint(spec, 1)
        assert M.init_checkpoint(spec, 1) != M.init_checkpoint(spec, 2)
        assert np.all(M.init_checkpoint(spec, 1).view("enc.0.bias") == 0)


class TestForward:
    def test_identity_layer(self):
        spec = M.ModelSpec((3, 3), activation="identity", k=2, normalize_features=False)
        c = hand_net(spec, enc_0_weight=np.eye(3))
        x = np.array([0.5, -2.0, 3.0])
        assert np.array_equal(M.forward_features(spec, c, x), x)

    def test_hand_two_layer_relu(self):
        spec = M.ModelSpec((2, 2, 2), activation="relu", k=2, normalize_features=False)
        c = hand_net(
            spec,
            enc_0_weight=[[1.0, -1.0], [2.0, 0.5]],
            enc_0_bias=[0.0, 1.0],
            enc_1_weight=[[1.0, 2.0], [3.0, -1.0]],
            enc_1_bias=[0.5, 0.0],
            head=[[1.0, 0.0], [1.0, -1.0]],
        )
        x = np.array([1.0, 1.0])
        # layer 0: [1+2, -1+0.5+1] = [3, 0.5] -> relu -> [3, 0.5]
        # layer 1: [3*1 + 0.5*3 + 0.5, 3*2 - 0.5] = [5, 5.5], no activation after the last layer
        assert M.forward_features(spec, c, x).tolist() == [5.0, 5.5]
        # logits: [5 + 5.5, -5.5]
        assert M.logits(spec, c, x).tolist() == [10.5, -5.5]

    def test_relu_clips_hidden_negative(self):
        spec = M.ModelSpec((1, 1, 1), k=2, normalize_features=False)
        c = hand_net(spec, enc_0_weight=[[1.0]], enc_1_weight=[[1.0]], enc_1_bias=[-2.0])
        assert M.forward_features(spec, c, np.array([-3.0])).tolist() == [-2.0]

    @given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-10, 10)))
    @settings(max_examples=40, deadline=None)
    def test_normalized_embedding_unit_norm(self, X):
        spec = M.ModelSpec((4, 6, 3), k=2)
        c = M.init_checkpoint(spec, 0)
        emb = M.forward_features(spec, c, X)
        raw = np.linalg.norm(M.forward_cache(spec, c, X)["raw"], axis=1)
        nz = raw > 1e-150
        np.testing.assert_allclose(np.linalg.norm(emb[nz], axis=1), 1.0, atol=1e-12)

    def test_zero_embedding_stays_zero(self, caplog):
        spec = M.ModelSpec((2, 2), activation="identity", k=3)
        c = M.init_checkpoint(spec, 0)
        with caplog.at_level("WARNING"):
            emb = M.forward_features(spec, c, np.zeros(2))
            z = M.logits(spec, c, np.zeros(2))
        assert np.all(emb == 0) and np.all(z == 0)
        assert "zero norm" in caplog.text

    def test_dimension_mismatch(self):
        spec = M.ModelSpec((3, 2), k=2)
        with pytest.raises(StructuralError):
            M.forward_features(spec, M.init_checkpoint(spec, 0), np.zeros(4))

    def test_layout_mismatch(self):
        a, b = M.ModelSpec((3, 2), k=2), M.ModelSpec((3, 4), k=2)
        with pytest.raises(StructuralError):
            M.logits(a, M.init_checkpoint(b, 0), np.zeros(3))

    def test_batch_matches_rows(self):
        spec = M.ModelSpec((4, 6, 3), k=5)
        c = M.init_checkpoint(spec, 3)
        X = np.random.default_rng(0).normal(size=(7, 4))
        batch = M.logits(spec, c, X)
        for i in range(7):
            np.testing.assert_allclose(M.logits(spec, c, X[i]), batch[i], rtol=1e-14, atol=1e-15)

    def test_scale_invariance_for_linear_bias_free_encoder(self):
        spec = M.ModelSpec((4, 3), activation="identity", k=2)
        c = M.init_checkpoint(spec, 0)
        x = np.array([0.3, -1.0, 2.0, 0.5])
        np.testing.assert_allclose(M.logits(spec, c, x), M.logits(spec, c, 7.5 * x), rtol=1e-13)


class TestHeadAndLogits:
    def test_orthonormal_head(self):
        spec = M.ModelSpec((2, 2), activation="identity", k=2)
        c = hand_net(spec, enc_0_weight=np.eye(2), head=np.eye(2))
        assert M.logits(spec, c, np.array([0.0, 4.0])).tolist() == [0.0, 1.0]

    def test_hand_d2_k2(self):
        spec = M.ModelSpec((2, 2), activation="identity", k=2, normalize_features=False)
        c = hand_net(spec, enc_0_weight=np.eye(2), head=[[1.0, 2.0], [3.0, -1.0]])
        assert M.logits(spec, c, np.array([2.0, 1.0])).tolist() == [5.0, 3.0]

    def test_single_prototype_normalized(self):
        W = M.build_zero_shot_head([np.array([[3.0, 4.0]]), np.array([[0.0, -2.0]])])
        np.testing.assert_allclose(W, [[0.6, 0.0], [0.8, -1.0]])

    def test_three_prototypes_hand(self):
        # mean of (1,0), (2,2), (0,1) is (1,1) -> (1,1)/sqrt(2)
        W = M.build_zero_shot_head([np.array([[1.0, 0.0], [2.0, 2.0], [0.0, 1.0]])])
        np.testing.assert_allclose(W[:, 0], [2**-0.5, 2**-0.5], rtol=1e-15)

    def test_columns_unit_norm(self):
        r = np.random.default_rng(1)
        W = M.build_zero_shot_head([r.normal(size=(5, 4)) + 1 for _ in range(6)])
        np.testing.assert_allclose(np.linalg.norm(W, axis=0), 1.0, rtol=1e-14)

    def test_opposite_prototypes_degenerate(self):
        with pytest.raises(DataError, match="class 0"):
            M.build_zero_shot_head([np.array([[1.0, -2.0], [-1.0, 2.0]])])

    def test_empty_prototypes(self):
        with pytest.raises(DataError):
            M.build_zero_shot_head([np.ones((1, 2)), np.zeros((0, 2))])

    def test_zero_shot_model_replaces_head_only(self):
        spec = M.ModelSpec((3, 4, 2), k=2)
        c = M.init_checkpoint(spec, 0)
        X = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 1.0, 0]])
        y = np.array([0, 1, 0, 1])
        z = M.zero_shot_model(spec, c, X, y)
        enc = c.layout.mask(M.is_encoder)
        assert np.array_equal(z.values[enc], c.values[enc])
        emb = M.forward_features(spec, c, X)
        np.testing.assert_allclose(z.view("head"), M.build_zero_shot_head([emb[y == 0], emb[y == 1]]))


class TestPredictMargin:
    def test_examples(self):
        assert M.predict(np.array([3.0, 1.0, 0.0])) == 0
        assert M.margin(np.array([3.0, 1.0, 0.0])) == 2.0
        assert M.predict(np.array([1.0, 1.0])) == 0
        assert M.margin(np.array([1.0, 1.0])) == 0.0

    def test_margin_needs_two_classes(self):
        with pytest.raises(DomainError):
            M.margin(np.array([1.0]))

    # integer-valued logits keep the transforms exact in floating point
    @given(hnp.arrays(np.float64, (6, 4), elements=st.integers(-50, 50).map(float)), st.integers(-100, 100))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, z, c):
        assert np.array_equal(M.predict(z), M.predict(z + c))
        assert np.array_equal(M.margin(z), M.margin(z + c))

    @given(hnp.arrays(np.float64, (6, 4), elements=st.integers(-20, 20).map(float)))
    @settings(max_examples=60, deadline=None)
    def test_monotone_transform_invariance(self, z):
        assert np.array_equal(M.predict(z), M.predict(np.exp(z)))
        assert np.array_equal(M.predict(z), M.predict(z**3))
        assert np.array_equal(M.predict(z), M.predict(2.0 * z + 3.0))
