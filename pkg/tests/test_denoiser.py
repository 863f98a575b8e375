"""Denoiser network: embedding, forward contract, rounding, checkpoints."""

import numpy as np
import pytest

from moediff import tensor as T
from moediff.checkpoint import (
    load_checkpoint,
    load_into_model,
    save_checkpoint,
    save_model,
)
from moediff.data import PAD_ID
from moediff.denoiser import (
    DenoiserModel,
    ModelConfig,
    count_parameters,
    nearest_embedding_ids,
    round_to_tokens,
)
from moediff.errors import CheckpointError, ConfigError, VocabularyError

from oracles import finite_diff_grad


def small_cfg(**overrides):
    base = dict(
        vocab_size=10,
        width=8,
        num_layers=2,
        num_heads=2,
        head_dim=4,
        window=4,
        num_experts=2,
        moe_top_k=1,
        moe_hidden=8,
        T=16,
        max_seq_len=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


def test_pad_embedding_row_is_zero():
    model = DenoiserModel(small_cfg(), seed=0)
    out = model.embed(np.array([PAD_ID, PAD_ID]))
    assert np.all(out.data == 0.0)


def test_embed_matches_direct_indexing():
    model = DenoiserModel(small_cfg(), seed=1)
    ids = np.array([[4, 7], [1, 9]])
    assert np.array_equal(model.embed(ids).data, model.emb.data[ids])


def test_embed_rejects_out_of_range():
    model = DenoiserModel(small_cfg(), seed=2)
    with pytest.raises(VocabularyError):
        model.embed(np.array([10]))


def test_embedding_gradient_scatters_by_id():
    model = DenoiserModel(small_cfg(), seed=3)
    ids = np.array([4, 4, 5])

    tape = T.GradTape()
    tape.watch(model.emb)
    out = model.embed(ids)
    tape.backward(T.tsum(out))
    # row 4 was gathered twice, row 5 once, everything else untouched
    assert np.allclose(model.emb.grad[4], 2.0)
    assert np.allclose(model.emb.grad[5], 1.0)
    assert np.all(model.emb.grad[6] == 0.0)

    emb = model.emb.data

    def value():
        return float(emb[ids].sum())

    num = finite_diff_grad(value, emb[4])
    assert np.allclose(num, 2.0, atol=1e-6)


def test_forward_shape_contract():
    model = DenoiserModel(small_cfg(), seed=4)
    for seq in (1, 3, 8, 12):
        z = np.random.default_rng(seq).normal(size=(seq, 8))
        out = model.forward(T.Tensor(z), 5)
        assert out.shape == (seq, 8)


def test_forward_deterministic():
    model = DenoiserModel(small_cfg(), seed=5)
    z = np.random.default_rng(0).normal(size=(6, 8))
    a = model.forward(T.Tensor(z), 3).data
    b = model.forward(T.Tensor(z), 3).data
    assert np.array_equal(a, b)


def test_forward_batched_matches_single_rows():
    model = DenoiserModel(small_cfg(), seed=6)
    z = np.random.default_rng(1).normal(size=(3, 5, 8))
    batched = model.forward(T.Tensor(z), np.array([2, 9, 14])).data
    for b, t in enumerate((2, 9, 14)):
        single = model.forward(T.Tensor(z[b]), t).data
        assert np.max(np.abs(batched[b] - single)) < 1e-12


def test_forward_rejects_overlong_sequence():
    model = DenoiserModel(small_cfg(), seed=7)
    with pytest.raises(ConfigError):
        model.forward(T.Tensor(np.zeros((13, 8))), 1)


def test_forward_rejects_time_out_of_range():
    model = DenoiserModel(small_cfg(), seed=8)
    with pytest.raises(ConfigError):
        model.forward(T.Tensor(np.zeros((2, 8))), 17)


def test_perturbation_outside_receptive_field_has_no_effect():
    # One layer, window 2: token 0 only sees tokens 0 and 1, so changing
    # the input at position 5 cannot move the output at position 0.
    model = DenoiserModel(small_cfg(num_layers=1, window=2), seed=9)
    z = np.random.default_rng(2).normal(size=(8, 8))
    base = model.forward(T.Tensor(z), 4).data[0]
    z2 = z.copy()
    z2[5] += 10.0
    moved = model.forward(T.Tensor(z2), 4).data[0]
    assert np.array_equal(base, moved)


def test_gradient_respects_receptive_field():
    model = DenoiserModel(small_cfg(num_layers=1, window=2), seed=10)
    z = np.random.default_rng(3).normal(size=(8, 8))
    mask = model.mask_for(8, 0)

    tape = T.GradTape()
    tz = T.Tensor(z, tape=tape)
    out = model.forward(tz, 4)
    pick = np.zeros((8, 8))
    pick[0] = 1.0
    tape.backward(T.tsum(T.mul(out, T.Tensor(pick))))
    for j in range(8):
        if not mask.allowed[0, j]:
            assert np.all(tz.grad[j] == 0.0), j


def test_round_to_tokens_recovers_orthogonal_rows():
    model = DenoiserModel(small_cfg(vocab_size=8, width=8), seed=11)
    model.emb.data[:] = np.eye(8)
    ids, _ = round_to_tokens(T.Tensor(np.eye(8)[5][None, :]), model)
    assert ids.tolist() == [5]


def test_round_to_tokens_tie_breaks_to_lowest_id():
    model = DenoiserModel(small_cfg(), seed=12)
    ids, _ = round_to_tokens(T.Tensor(np.zeros((3, 8))), model)
    assert ids.tolist() == [0, 0, 0]


def test_round_to_tokens_matches_brute_force_dot_scan():
    model = DenoiserModel(small_cfg(), seed=13)
    z = np.random.default_rng(4).normal(size=(9, 8))
    ids, _ = round_to_tokens(T.Tensor(z), model)
    for i in range(9):
        dots = [float(z[i] @ model.emb.data[v]) for v in range(10)]
        assert ids[i] == int(np.argmax(dots))


def test_tied_head_logits_equal_embedding_dots():
    model = DenoiserModel(small_cfg(), seed=14)
    z = np.random.default_rng(5).normal(size=(4, 8))
    logits = model.logits(T.Tensor(z)).data
    assert np.max(np.abs(logits - z @ model.emb.data.T)) < 1e-12


def test_nearest_embedding_ids_euclidean():
    emb = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 1.0]])
    z = np.array([[0.1, 0.8], [9.0, 0.5]])
    assert nearest_embedding_ids(z, emb).tolist() == [2, 1]


def test_parameter_count_matches_closed_form():
    for cfg in (
        small_cfg(),
        small_cfg(moe_every_layer=False, num_layers=3),
        small_cfg(tie_output_head=False),
        small_cfg(num_experts=3, moe_top_k=2, moe_hidden=0),
    ):
        model = DenoiserModel(cfg, seed=15)
        assert model.num_parameters() == count_parameters(cfg)


def test_forward_finite_across_random_configs():
    rng = np.random.default_rng(16)
    for trial in range(200):
        heads = int(rng.integers(1, 3))
        head_dim = int(rng.integers(2, 5))
        cfg = ModelConfig(
            vocab_size=int(rng.integers(5, 12)),
            width=heads * head_dim,
            num_layers=int(rng.integers(1, 3)),
            num_heads=heads,
            head_dim=head_dim,
            window=2 * int(rng.integers(1, 4)),
            dilation=int(rng.integers(1, 3)),
            num_experts=int(rng.integers(1, 4)),
            moe_top_k=1,
            moe_hidden=int(rng.integers(4, 9)),
            T=8,
            max_seq_len=8,
        )
        model = DenoiserModel(cfg, seed=trial)
        z = rng.normal(size=(int(rng.integers(1, 8)), cfg.width)) * rng.uniform(0.1, 10)
        out = model.forward(T.Tensor(z), int(rng.integers(0, 9)))
        assert np.isfinite(out.data).all()


def test_config_validation_lists_all_violations():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(vocab_size=2, width=7, num_heads=2, head_dim=4, window=3)
    message = str(exc.value)
    assert "vocab_size" in message
    assert "width" in message
    assert "window" in message


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = DenoiserModel(small_cfg(), seed=17)
    path = tmp_path / "model.mdsq"
    save_model(path, "width=8\n", model)
    first = path.read_bytes()

    config_text, tensors = load_checkpoint(path)
    assert config_text == "width=8\n"
    path2 = tmp_path / "again.mdsq"
    save_checkpoint(path2, config_text, tensors)
    assert path2.read_bytes() == first


def test_checkpoint_restores_parameters_exactly(tmp_path):
    model = DenoiserModel(small_cfg(), seed=18)
    path = tmp_path / "model.mdsq"
    save_model(path, "", model)
    other = DenoiserModel(small_cfg(), seed=99)
    assert not np.array_equal(other.emb.data, model.emb.data)
    load_into_model(path, other)
    for name, p in model.parameters().items():
        assert np.array_equal(p.data, other.parameters()[name].data), name


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.mdsq"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model = DenoiserModel(small_cfg(), seed=19)
    path = tmp_path / "model.mdsq"
    save_model(path, "", model)
    clipped = tmp_path / "clipped.mdsq"
    clipped.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(clipped)


def test_checkpoint_shape_mismatch(tmp_path):
    model = DenoiserModel(small_cfg(), seed=20)
    path = tmp_path / "model.mdsq"
    save_model(path, "", model)
    other = DenoiserModel(small_cfg(max_seq_len=10), seed=20)
    with pytest.raises(CheckpointError):
        load_into_model(path, other)
