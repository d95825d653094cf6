import numpy as np
import pytest

from motionpipe import cnn
from motionpipe.errors import DataFormatError

import oracles


def _spec(layers, channels=2, length=16):
    return cnn.NetworkSpec(input_channels=channels, input_length=length, layers=tuple(layers))


def _small_spec():
    return _spec(
        [
            cnn.Conv1D(3, 4, 2),
            cnn.ReLU(),
            cnn.Max1D(2, 2),
            cnn.FullyConnected(5),
            cnn.ReLU(),
            cnn.SoftmaxOutput(3),
        ]
    )


# ---------------------------------------------------------------------------
# Layer operators vs naive oracles
# ---------------------------------------------------------------------------

def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 5))
        length = int(rng.integers(4, 20))
        filt = int(rng.integers(1, min(length, 6) + 1))
        stride = int(rng.integers(1, 4))
        x = rng.normal(size=(c_in, length))
        w = rng.normal(size=(c_out, c_in, filt))
        b = rng.normal(size=c_out)
        got = cnn.conv1d_forward(x, w, b, stride)
        want = oracles.naive_conv1d(x, w, b, stride)
        assert got.shape == want.shape
        assert np.abs(got - want).max() < 1e-12


def test_max_pool_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        channels = int(rng.integers(1, 5))
        length = int(rng.integers(4, 20))
        window = int(rng.integers(1, min(length, 5) + 1))
        stride = int(rng.integers(1, 4))
        x = rng.normal(size=(channels, length))
        got, got_arg = cnn.max1d_forward(x, window, stride)
        want, want_arg = oracles.naive_max1d(x, window, stride)
        assert np.array_equal(got, want)
        assert np.array_equal(got_arg, want_arg)


def test_max_pool_ties_take_first_offset():
    x = np.array([[2.0, 2.0, 1.0, 1.0, 3.0, 3.0]])
    out, arg = cnn.max1d_forward(x, window=2, stride=2)
    assert np.array_equal(out, [[2.0, 1.0, 3.0]])
    assert np.array_equal(arg, [[0, 0, 0]])


def test_conv_hand_example():
    # out[0] = 1*1 + 2*2 = 5, out[1] = 1*3 + 2*4 = 11, plus bias 10
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    w = np.array([[[1.0, 2.0]]])
    b = np.array([10.0])
    out = cnn.conv1d_forward(x, w, b, stride=2)
    assert np.array_equal(out, [[15.0, 21.0]])


def test_conv_output_length():
    assert cnn.conv_output_length(10, 3, 1) == 8
    assert cnn.conv_output_length(10, 3, 2) == 4
    assert cnn.conv_output_length(5, 5, 3) == 1


def test_softmax_rows_and_stability():
    probs = cnn.softmax(np.array([[1000.0, 1000.0, 999.0], [-2000.0, 0.0, 0.0]]))
    assert np.all(np.isfinite(probs))
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert probs[0, 0] == probs[0, 1]
    assert probs[1, 0] < 1e-300


def test_cross_entropy_hand_value():
    probs = np.array([[0.5, 0.5], [0.25, 0.75]])
    got = cnn.cross_entropy(probs, np.array([0, 1]))
    assert abs(got - (-np.log(0.5) - np.log(0.75)) / 2) < 1e-15


# ---------------------------------------------------------------------------
# Network spec
# ---------------------------------------------------------------------------

def test_layer_shapes_match_forward():
    spec = _small_spec()
    assert spec.layer_shapes() == ((4, 7), (4, 7), (4, 3), (5,), (5,), (3,))
    state = cnn.init_state(spec, 0)
    probs, cache = cnn.forward(spec, state, np.random.default_rng(0).normal(size=(2, 16)))
    assert probs.shape == (3,)
    assert abs(probs.sum() - 1.0) < 1e-12
    assert spec.feature_cutoff() == 4  # the ReLU after the last FC
    assert spec.num_classes() == 3


def test_spec_validation():
    with pytest.raises(ValueError, match="softmax output layer"):
        _spec([cnn.FullyConnected(4)])
    with pytest.raises(ValueError, match="exactly once"):
        _spec([cnn.SoftmaxOutput(2), cnn.FullyConnected(4), cnn.SoftmaxOutput(2)])
    with pytest.raises(ValueError, match="fully-connected"):
        _spec([cnn.Conv1D(3, 4, 1), cnn.SoftmaxOutput(2)])
    with pytest.raises(ValueError, match="shorter than filter"):
        _spec([cnn.Conv1D(20, 4, 1), cnn.FullyConnected(4), cnn.SoftmaxOutput(2)])
    with pytest.raises(ValueError, match="shorter than window"):
        _spec(
            [cnn.Conv1D(3, 4, 2), cnn.Max1D(9, 1), cnn.FullyConnected(4), cnn.SoftmaxOutput(2)]
        )
    with pytest.raises(ValueError, match="after flattening"):
        _spec([cnn.FullyConnected(4), cnn.Conv1D(3, 4, 1), cnn.SoftmaxOutput(2)])


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _gradcheck(spec, seed, atol=1e-6):
    rng = np.random.default_rng(seed)
    state = cnn.init_state(spec, rng)
    x = rng.normal(size=(spec.input_channels, spec.input_length))
    label = int(rng.integers(spec.num_classes()))

    _, grads = cnn.batch_gradients(spec, state, x[None], np.array([label]))

    arrays = [a for p in state.params if p is not None for a in p]
    analytic = [g for g in grads if g is not None]
    analytic = [a for pair in analytic for a in pair]

    def loss_fn():
        probs, _ = cnn.forward(spec, state, x)
        return -float(np.log(probs[label]))

    numeric = oracles.finite_difference_gradients(loss_fn, arrays)
    worst = 0.0
    for a, fd in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-4)
        worst = max(worst, float((np.abs(a - fd) / denom).max()))
    assert worst < atol, f"worst relative gradient error {worst}"


def test_gradients_match_finite_differences():
    _gradcheck(_small_spec(), seed=3)
    # no pooling, stride 1, two fc layers
    _gradcheck(
        _spec(
            [
                cnn.Conv1D(3, 3, 1),
                cnn.ReLU(),
                cnn.FullyConnected(6),
                cnn.ReLU(),
                cnn.FullyConnected(4),
                cnn.SoftmaxOutput(2),
            ],
            channels=1,
            length=10,
        ),
        seed=4,
    )
    # fc-only network
    _gradcheck(
        _spec([cnn.FullyConnected(5), cnn.ReLU(), cnn.SoftmaxOutput(2)], channels=2, length=6),
        seed=5,
    )


def test_tie_gradient_routes_to_first_position():
    # conv weight zero makes every pooling window all-tied, so the pool
    # gradient must land on window starts; the conv weight gradient then
    # reads the input at those positions
    spec = _spec(
        [cnn.Conv1D(1, 1, 1), cnn.Max1D(2, 2), cnn.FullyConnected(2), cnn.SoftmaxOutput(2)],
        channels=1,
        length=4,
    )
    state = cnn.NetworkState(
        params=[
            (np.zeros((1, 1, 1)), np.zeros(1)),
            None,
            (np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2)),
            (np.eye(2), np.zeros(2)),
        ]
    )
    x = np.array([[10.0, 20.0, 30.0, 40.0]])
    _, grads = cnn.batch_gradients(spec, state, x[None], np.array([0]))
    # pool grad is [1, 1]; first-offset routing reads x[0] and x[2]
    assert abs(grads[0][0][0, 0, 0] - 40.0) < 1e-12
    assert abs(grads[0][1][0] - 2.0) < 1e-12


def test_batch_gradients_average_individual_gradients():
    spec = _small_spec()
    rng = np.random.default_rng(6)
    state = cnn.init_state(spec, rng)
    x1 = rng.normal(size=(2, 16))
    x2 = rng.normal(size=(2, 16))
    loss_b, grads_b = cnn.batch_gradients(spec, state, np.stack([x1, x2]), np.array([0, 2]))
    loss_1, grads_1 = cnn.batch_gradients(spec, state, x1[None], np.array([0]))
    loss_2, grads_2 = cnn.batch_gradients(spec, state, x2[None], np.array([2]))
    assert abs(loss_b - (loss_1 + loss_2) / 2) < 1e-12
    for gb, g1, g2 in zip(grads_b, grads_1, grads_2):
        if gb is None:
            continue
        for part_b, part_1, part_2 in zip(gb, g1, g2):
            assert np.allclose(part_b, (part_1 + part_2) / 2, atol=1e-12)


def test_backward_rejects_bad_labels():
    spec = _small_spec()
    state = cnn.init_state(spec, 0)
    x = np.zeros((1, 2, 16))
    with pytest.raises(ValueError, match="label out of range"):
        cnn.batch_gradients(spec, state, x, np.array([3]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _toy_problem(seed=0):
    # two classes separated by which half of the series carries energy
    rng = np.random.default_rng(seed)
    samples, labels = [], []
    for i in range(12):
        x = rng.normal(scale=0.05, size=(2, 16))
        label = i % 2
        if label == 0:
            x[:, :8] += 1.0
        else:
            x[:, 8:] += 1.0
        samples.append(x)
        labels.append(label)
    return samples, labels


def test_train_is_deterministic_and_learns():
    spec = _spec(
        [cnn.Conv1D(3, 4, 1), cnn.ReLU(), cnn.Max1D(2, 2), cnn.FullyConnected(8),
         cnn.ReLU(), cnn.SoftmaxOutput(2)]
    )
    samples, labels = _toy_problem()
    config = cnn.TrainConfig(learning_rate=0.05, epochs=40, batch_size=4, seed=7)
    state1, losses1 = cnn.train(spec, samples, labels, config)
    state2, losses2 = cnn.train(spec, samples, labels, config)
    assert losses1 == losses2
    for p1, p2 in zip(state1.params, state2.params):
        if p1 is None:
            continue
        assert np.array_equal(p1[0], p2[0])
        assert np.array_equal(p1[1], p2[1])
    assert losses1[-1] < 0.1 * losses1[0]
    for x, label in zip(samples, labels):
        probs, _ = cnn.forward(spec, state1, x)
        assert int(np.argmax(probs)) == label


def test_train_validation():
    spec = _small_spec()
    samples = [np.zeros((2, 16)), np.zeros((2, 16))]
    config = cnn.TrainConfig(epochs=1)
    with pytest.raises(ValueError, match="no training sample for class"):
        cnn.train(spec, samples, [0, 1], config)  # class 2 absent
    with pytest.raises(ValueError, match="label out of range"):
        cnn.train(spec, samples, [0, 5], config)
    with pytest.raises(ValueError, match="does not match spec"):
        cnn.train(spec, [np.zeros((2, 9)), np.zeros((2, 9))], [0, 1], config)
    with pytest.raises(ValueError, match="sample count"):
        cnn.train(spec, samples, [0, 1, 2], config)


def test_train_config_validation():
    with pytest.raises(ValueError, match="learning_rate"):
        cnn.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="momentum"):
        cnn.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError, match="epochs"):
        cnn.TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="weight_decay"):
        cnn.TrainConfig(weight_decay=-1.0)


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def test_extract_features_cutoff_and_sign():
    spec = _small_spec()
    state = cnn.init_state(spec, 8)
    x = np.random.default_rng(8).normal(size=(2, 16))
    feats = cnn.extract_features(spec, state, x)
    assert feats.shape == (5,)
    assert feats.min() >= 0.0  # trailing ReLU keeps features nonnegative
    # equals the forward activations just before the softmax layer
    probs, _ = cnn.forward(spec, state, x)
    w, b = state.params[-1]
    assert np.allclose(cnn.softmax((feats @ w.T + b)[None])[0], probs, atol=1e-12)


def test_extract_features_without_trailing_relu():
    spec = _spec([cnn.FullyConnected(4), cnn.SoftmaxOutput(2)], channels=1, length=5)
    state = cnn.init_state(spec, 9)
    feats = cnn.extract_features(spec, state, np.ones((1, 5)))
    assert feats.shape == (4,)
    with pytest.raises(ValueError, match="does not match spec"):
        cnn.extract_features(spec, state, np.ones((2, 5)))


# ---------------------------------------------------------------------------
# Architecture text format
# ---------------------------------------------------------------------------

def test_architecture_round_trip():
    layers = cnn.default_architecture(3)
    text = cnn.format_architecture(layers)
    assert cnn.parse_architecture(text) == layers


def test_parse_architecture_ignores_comments():
    text = "# header\nconv 5 32 2  # conv layer\n\nrelu\nfc 64\nsoftmax 3\n"
    layers = cnn.parse_architecture(text)
    assert layers == (cnn.Conv1D(5, 32, 2), cnn.ReLU(), cnn.FullyConnected(64),
                      cnn.SoftmaxOutput(3))


def test_parse_architecture_errors_carry_line_numbers():
    with pytest.raises(DataFormatError, match="line 2"):
        cnn.parse_architecture("relu\nwavelet 3\n")
    with pytest.raises(DataFormatError, match="line 1"):
        cnn.parse_architecture("conv five 32 2\n")
    with pytest.raises(DataFormatError, match="line 3"):
        cnn.parse_architecture("relu\nfc 4\nmax 2\n")  # max needs two arguments


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

def test_model_round_trip_through_f32(tmp_path):
    spec = _small_spec()
    state = cnn.init_state(spec, 10)
    path = tmp_path / "net.cnn"
    cnn.save_model(spec, state, path)
    back_spec, back_state = cnn.load_model(path)
    assert back_spec == spec
    for orig, back in zip(state.params, back_state.params):
        if orig is None:
            assert back is None
            continue
        assert np.array_equal(back[0], orig[0].astype(np.float32).astype(np.float64))
        assert np.array_equal(back[1], orig[1].astype(np.float32).astype(np.float64))


def test_load_model_errors(tmp_path):
    bad = tmp_path / "bad.cnn"
    bad.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(DataFormatError, match="magic"):
        cnn.load_model(bad)

    spec = _spec([cnn.FullyConnected(2), cnn.SoftmaxOutput(2)], channels=1, length=3)
    state = cnn.init_state(spec, 0)
    good = tmp_path / "good.cnn"
    cnn.save_model(spec, state, good)
    blob = good.read_bytes()

    trunc = tmp_path / "trunc.cnn"
    trunc.write_bytes(blob[:-4])
    with pytest.raises(DataFormatError, match="truncated parameters"):
        cnn.load_model(trunc)

    extra = tmp_path / "extra.cnn"
    extra.write_bytes(blob + b"\x00\x00")
    with pytest.raises(DataFormatError, match="trailing"):
        cnn.load_model(extra)

    nospec = tmp_path / "nospec.cnn"
    nospec.write_bytes(b"CNN1" + np.array([5], dtype="<u4").tobytes() + b"hello")
    with pytest.raises(DataFormatError, match="input line"):
        cnn.load_model(nospec)
