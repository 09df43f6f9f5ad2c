import numpy as np
import pytest
from conftest import micro_batch, micro_model

from varflow.model import AcousticModel, ModelNotReady, frame_index, length_regulate
from varflow.numerics import Tensor, backward, finite_diff_param_grad, no_grad, rel_error
from varflow.training import total_loss


def test_length_regulate_examples():
    h = Tensor(np.array([[[1.0, 10.0], [2.0, 20.0]]]))
    out, mask = length_regulate(h, np.array([[2, 3]]))
    np.testing.assert_array_equal(out.data[0, :, 0], [1, 1, 2, 2, 2])
    assert mask.sum() == 5
    same, _ = length_regulate(h, np.array([[1, 1]]))
    np.testing.assert_array_equal(same.data, h.data)


def test_length_regulate_rejects_zero_duration():
    h = Tensor(np.ones((1, 2, 3)))
    with pytest.raises(ValueError):
        length_regulate(h, np.array([[2, 0]]))
    # a zero on a padded phoneme is fine
    out, mask = length_regulate(h, np.array([[2, 0]]), np.array([[True, False]]))
    assert mask.sum() == 2


def test_frame_index_pads_with_mask():
    idx, mask = frame_index(np.array([[1, 2], [3, 0]]), n_frames=4)
    np.testing.assert_array_equal(mask, [[1, 1, 1, 0], [1, 1, 1, 0]])
    np.testing.assert_array_equal(idx[0, :3], [0, 1, 1])


def test_encoder_shape_and_errors():
    model = micro_model()
    ids = np.array([[1, 2, 3]])
    h = model.encode(ids, np.ones((1, 3), bool))
    assert h.shape == (1, 3, 8)
    with pytest.raises(ValueError):
        model.encode(np.zeros((1, 0), int), np.zeros((1, 0), bool))
    with pytest.raises((ValueError, IndexError)):
        model.encode(np.array([[9]]), np.ones((1, 1), bool))


def test_positions_matter():
    model = micro_model()
    m = np.ones((1, 2), bool)
    a = model.encode(np.array([[1, 2]]), m).data[0]
    b = model.encode(np.array([[2, 1]]), m).data[0]
    assert not np.allclose(a[0], b[1])


def test_inference_durations_clamped_and_rounded():
    d = AcousticModel.durations_from_log(np.log(np.array([0.01, 0.5, 1.49, 2.5, 7.0])))
    np.testing.assert_array_equal(d, [1, 1, 1, 3, 7])


@pytest.mark.parametrize("mode,gran", [("flow", "frame"), ("flow", "phoneme"),
                                       ("reversed", "frame"), ("mse", "frame"),
                                       ("mse", "phoneme")])
def test_forward_shapes_every_variant(mode, gran):
    model = micro_model(mode, gran)
    batch = micro_batch(np.random.default_rng(0))
    out = model.forward(batch)
    assert out["mel"].shape == batch.mel.shape
    assert out["log_durations"].shape == batch.durations.shape
    syn = model.synthesize([1, 2, 3], sigma=0.333, seed=1)
    assert syn.mel.shape == (syn.durations.sum(), 4)
    assert syn.x_pitch.shape == (syn.durations.sum(),)


def test_identity_flow_decoder_input_is_h_plus_bias():
    model = micro_model()
    batch = micro_batch(np.random.default_rng(1))
    batch.pitch[:] = 0.0
    batch.energy[:] = 0.0
    out = model.forward(batch)
    h = out["h_frame"].data
    bias = model.pitch_proj.bias.data + model.energy_proj.bias.data
    expected = (h + bias) * batch.frame_mask[..., None]
    np.testing.assert_allclose(out["adapted"].h.data, expected, atol=1e-12)


def test_mse_perfect_predictor_zero_loss():
    model = micro_model("mse")
    batch = micro_batch(np.random.default_rng(2))
    with no_grad():
        h_ph = model.encode(batch.phonemes, batch.phoneme_mask)
        h_fr, fm = length_regulate(h_ph, batch.durations, batch.phoneme_mask)
        batch.pitch = model.pitch_model(h_fr, fm).data
        batch.energy = model.energy_model(h_fr, fm).data
    out = model.forward(batch)
    assert out["pitch_loss"].item() == 0.0 and out["energy_loss"].item() == 0.0


def test_reversed_ignores_latent_flow_does_not():
    batch = micro_batch(np.random.default_rng(3))
    other = Tensor(np.random.default_rng(4).normal(size=batch.pitch.shape))
    for mode, changes in (("reversed", False), ("flow", True)):
        model = micro_model(mode)
        base = model.forward(batch)["mel"].data
        moved = model.forward(batch, latent_override={"pitch": other})["mel"].data
        delta = np.max(np.abs(base - moved))
        assert (delta > 0) == changes, mode


def test_encoder_decoder_sizes_match_across_variants():
    def count(model, part):
        return sum(p.size for n, p in model.named_parameters() if n.startswith(part))

    flow, mse = micro_model("flow"), micro_model("mse")
    for part in ("embed", "encoder", "decoder", "mel_out", "duration_predictor"):
        assert count(flow, part) == count(mse, part) > 0


def test_masked_frames_give_no_mel_gradient():
    model = micro_model()
    batch = micro_batch(np.random.default_rng(5))
    pad = ~batch.frame_mask
    model.zero_grad()
    out = model.forward(batch)
    backward(total_loss(out, batch, 0.1)[1])
    g1 = {n: p.grad.copy() for n, p in model.named_parameters()}
    batch.mel[pad] = 1e3
    model.zero_grad()
    out = model.forward(batch)
    backward(total_loss(out, batch, 0.1)[1])
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.grad, g1[n], err_msg=n)


@pytest.mark.parametrize("mode,gran", [("flow", "frame"), ("flow", "phoneme"), ("mse", "frame")])
def test_full_loss_gradients(mode, gran):
    rng = np.random.default_rng(6)
    model = micro_model(mode, gran)
    for p in model.parameters():
        p.data += rng.normal(size=p.shape) * 0.1
    batch = micro_batch(rng, durations=((2, 1, 3),))
    model.zero_grad()
    backward(total_loss(model.forward(batch), batch, 0.1)[1])

    def loss():
        return total_loss(model.forward(batch), batch, 0.1)[1].item()

    for name, p in model.named_parameters():
        coords = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(3)]
        fd = finite_diff_param_grad(loss, p, 1e-6, coords)
        got = np.array([p.grad[c] for c in coords])
        want = np.array([fd[c] for c in coords])
        assert rel_error(got, want) < 1e-3, name


def test_synthesis_requires_stats():
    model = micro_model()
    model.stats = None
    with pytest.raises(ModelNotReady):
        model.synthesize([1, 2])


def test_synthesis_determinism_and_dropout_diversity():
    model = micro_model(dropout=0.3)
    a = model.synthesize([1, 2, 3, 4], sigma=0.0, seed=0)
    b = model.synthesize([1, 2, 3, 4], sigma=0.0, seed=9)
    assert np.array_equal(a.mel, b.mel)
    runs = [model.synthesize([1, 2, 3, 4], sigma=0.0, seed=s, dropout_at_inference=True)
            for s in range(4)]
    assert any(not np.array_equal(runs[0].mel, r.mel) for r in runs[1:])
    with pytest.raises(ValueError):
        model.synthesize([1, 2], sigma=-0.1)


def test_reversed_synthesis_feeds_raw_pitch():
    model = micro_model("reversed")
    syn = model.synthesize([1, 2, 3], sigma=0.5, seed=2)
    np.testing.assert_array_equal(syn.fed_pitch, syn.x_pitch)
    flow = micro_model("flow")
    syn = flow.synthesize([1, 2, 3], sigma=0.5, seed=2)
    np.testing.assert_array_equal(syn.fed_pitch, syn.z_pitch)


def test_trained_duration_error(trained_toy, toy_dataset):
    model = trained_toy["model"]
    errs = []
    for u in toy_dataset.utterances[:32]:
        with no_grad():
            h = model.encode(u.phonemes[None], np.ones((1, len(u.phonemes)), bool))
            d = model.durations_from_log(model.predict_durations(h, np.ones((1, len(u.phonemes)), bool)).data)
        errs.append(np.abs(d[0] - u.durations))
    assert np.mean(np.concatenate(errs)) < 2.0
