import numpy as np
import pytest

from cyclecap.data import FeatureGrid
from cyclecap.errors import DataError, FormatError
from cyclecap.gradcheck import check_gradients
from cyclecap.models import (ImageCaptioner, ModelBundle, init_state,
                             load_bundle, load_captioner, load_checkpoint,
                             save_bundle, save_captioner, teacher_forced_record,
                             unroll_captioner, unroll_german)
from cyclecap.tensor import Parameter, Tensor, sum_all
from cyclecap.training import nll_loss

from _reference import (ref_captioner_sequence, ref_encode_caption,
                        ref_german_sequence)
from conftest import random_ids, tiny_bundle, tiny_captioner


def rand_grid(rng, regions=3, dim=3):
    return FeatureGrid(rng.standard_normal((regions, dim)))


# --- soft-attention decoder ------------------------------------------------

def test_english_step_log_probs_normalize():
    rng = np.random.default_rng(0)
    model = tiny_captioner(seed=1)
    keys = model.project(rand_grid(rng))
    h, c = model.decoder.initial_state(keys)
    logp, h, c, weights = model.decoder.step(keys, h, c, 1)
    assert abs(np.log(np.exp(logp.data).sum())) < 1e-12
    assert abs(weights.data.sum() - 1.0) < 1e-12


def test_identical_regions_give_uniform_attention():
    model = tiny_captioner(seed=2)
    grid = FeatureGrid(np.tile([0.3, -0.2, 0.9], (5, 1)))
    keys = model.project(grid)
    h, c = model.decoder.initial_state(keys)
    _, _, _, weights = model.decoder.step(keys, h, c, 1)
    np.testing.assert_allclose(weights.data, np.full(5, 0.2), atol=1e-12)


def test_teacher_forced_loglik_matches_reference():
    rng = np.random.default_rng(3)
    model = tiny_captioner(seed=4)
    grid = rand_grid(rng)
    ids = random_ids(rng, 8, 4)
    keys = model.project(grid)
    logps, rows = unroll_captioner(model, keys, ids)
    loss, ntok = nll_loss(logps, ids[1:])
    ref_total, ref_rows = ref_captioner_sequence(model, grid.values, ids)
    assert ntok == len(ids) - 1
    assert loss.item() == pytest.approx(-ref_total, rel=1e-12)
    np.testing.assert_allclose(np.stack([r.data for r in rows]), ref_rows,
                               atol=1e-13)


# --- caption encoder --------------------------------------------------------

def test_single_token_encoding_has_one_row():
    bundle = tiny_bundle()
    states = bundle.cap_encoder.encode([4])
    assert states.shape == (1, 8)


def test_bidirectional_symmetry_with_shared_directions():
    bundle = tiny_bundle(seed=5)
    enc = bundle.cap_encoder
    for gate in ("r", "z", "n"):
        getattr(enc.bwd, f"w_{gate}").data = getattr(enc.fwd, f"w_{gate}").data.copy()
        getattr(enc.bwd, f"u_{gate}").data = getattr(enc.fwd, f"u_{gate}").data.copy()
        getattr(enc.bwd, f"b_{gate}").data = getattr(enc.fwd, f"b_{gate}").data.copy()
    ids = [4, 5, 6, 7]
    forward = enc.encode(ids).data
    reverse = enc.encode(ids[::-1]).data
    h = enc.hidden_dim
    swapped = np.concatenate([reverse[:, h:], reverse[:, :h]], axis=1)
    np.testing.assert_allclose(swapped, forward[::-1], atol=1e-12)


def test_zero_parameters_give_zero_states():
    bundle = tiny_bundle(seed=6)
    for p in bundle.cap_encoder.named().values():
        p.data = np.zeros_like(p.data)
    states = bundle.cap_encoder.encode([4, 5, 6])
    np.testing.assert_array_equal(states.data, np.zeros((3, 8)))


def test_encoder_matches_reference_and_rejects_empty():
    rng = np.random.default_rng(7)
    bundle = tiny_bundle(seed=8)
    ids = [int(x) for x in rng.integers(4, 8, size=5)]
    np.testing.assert_allclose(bundle.cap_encoder.encode(ids).data,
                               ref_encode_caption(bundle.cap_encoder, ids),
                               atol=1e-13)
    with pytest.raises(DataError):
        bundle.cap_encoder.encode([])


# --- dual-attention decoder --------------------------------------------------

def test_german_step_outputs_normalize_and_single_state_beta():
    rng = np.random.default_rng(9)
    bundle = tiny_bundle(seed=10)
    keys = bundle.captioner.project(rand_grid(rng))
    states = bundle.cap_encoder.encode([4])  # N = 1
    s, mem = bundle.de_decoder.initial_state(keys)
    logp, s, mem, region_w, caption_w = bundle.de_decoder.step(keys, states, s, mem, 1)
    assert abs(np.log(np.exp(logp.data).sum())) < 1e-12
    np.testing.assert_allclose(caption_w.data, [1.0])
    assert abs(region_w.data.sum() - 1.0) < 1e-12


def test_german_sequence_matches_reference():
    rng = np.random.default_rng(11)
    bundle = tiny_bundle(seed=12)
    grid = rand_grid(rng)
    en_ids = random_ids(rng, 8, 4)
    de_ids = random_ids(rng, 9, 3)
    keys = bundle.captioner.project(grid)
    cap_states = bundle.cap_encoder.encode(en_ids[1:])
    logps, region_rows, caption_rows = unroll_german(bundle, keys, cap_states, de_ids)
    loss, _ = nll_loss(logps, de_ids[1:])
    ref_total, ref_regions, ref_captions = ref_german_sequence(
        bundle, grid.values, en_ids, de_ids)
    assert loss.item() == pytest.approx(-ref_total, rel=1e-12)
    np.testing.assert_allclose(np.stack([r.data for r in region_rows]),
                               ref_regions, atol=1e-13)
    np.testing.assert_allclose(np.stack([r.data for r in caption_rows]),
                               ref_captions, atol=1e-13)


def test_teacher_forced_record_shapes():
    rng = np.random.default_rng(13)
    bundle = tiny_bundle(seed=14)
    grid = rand_grid(rng)
    en_ids = random_ids(rng, 8, 5)   # N = 6 targets
    de_ids = random_ids(rng, 9, 3)   # M = 4 targets
    record = teacher_forced_record(bundle, grid, en_ids, de_ids)
    assert record.en_to_regions.shape == (6, 3)
    assert record.de_to_regions.shape == (4, 3)
    assert record.de_to_en.shape == (4, 6)


# --- init state ---------------------------------------------------------------

def test_init_state_zero_rows_gives_tanh_bias():
    rng = np.random.default_rng(15)
    w = Parameter(rng.standard_normal((3, 4)), "w")
    b = Parameter(rng.standard_normal(4), "b")
    out = init_state(Tensor(np.zeros((5, 3))), w, b)
    np.testing.assert_allclose(out.data, np.tanh(b.data), atol=1e-14)


def test_init_state_permutation_invariant():
    rng = np.random.default_rng(16)
    w = Parameter(rng.standard_normal((3, 4)), "w")
    b = Parameter(rng.standard_normal(4), "b")
    rows = rng.standard_normal((5, 3))
    a = init_state(Tensor(rows), w, b).data
    c = init_state(Tensor(rows[::-1].copy()), w, b).data
    np.testing.assert_allclose(a, c, atol=1e-14)


def test_init_state_gradients():
    rng = np.random.default_rng(17)
    w = Parameter(rng.standard_normal((3, 4)), "w")
    b = Parameter(rng.standard_normal(4), "b")
    rows = Tensor(rng.standard_normal((5, 3)))
    result = check_gradients("init", lambda: sum_all(init_state(rows, w, b)),
                             {"w": w, "b": b})
    assert result.max_error < 1e-3


# --- checkpoints ----------------------------------------------------------------

def test_captioner_checkpoint_roundtrip(tmp_path):
    model = tiny_captioner(seed=18)
    path = tmp_path / "part1.ckpt"
    save_captioner(model, path)
    loaded = load_captioner(path)
    for name, p in model.named_parameters().items():
        np.testing.assert_array_equal(loaded.named_parameters()[name].data, p.data)


def test_bundle_checkpoint_roundtrip_and_kind_check(tmp_path):
    bundle = tiny_bundle(seed=19)
    path = tmp_path / "bundle.ckpt"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert loaded.dims == bundle.dims
    for name, p in bundle.named_parameters().items():
        np.testing.assert_array_equal(loaded.named_parameters()[name].data, p.data)
    with pytest.raises(FormatError, match="captioner"):
        load_captioner(path)


def test_checkpoint_rejects_architecture_mismatch(tmp_path):
    small = tiny_captioner(seed=20, vocab=8)
    big = tiny_captioner(seed=20, vocab=9)
    path = tmp_path / "part1.ckpt"
    save_captioner(small, path)
    _, _, arrays = load_checkpoint(path)
    from cyclecap.models import load_into
    with pytest.raises(FormatError, match="shape"):
        load_into(big.named_parameters(), arrays)
    arrays.pop(sorted(arrays)[0])
    with pytest.raises(FormatError, match="missing"):
        load_into(small.named_parameters(), arrays)


def test_checkpoint_truncation_detected(tmp_path):
    model = tiny_captioner(seed=21)
    path = tmp_path / "part1.ckpt"
    save_captioner(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_save_is_deterministic(tmp_path):
    model = tiny_captioner(seed=22)
    save_captioner(model, tmp_path / "a.ckpt")
    save_captioner(model, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
