import numpy as np
import pytest

from crfdistill.encoder import (
    ModelParams,
    TokenBatch,
    Vocab,
    backprop,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
    zero_grads,
)
from crfdistill.lattice import Lattice, nll_and_grad, posteriors
from crfdistill.losses import KDLossKind, kd_loss_and_grad


def tiny_params(seed=0, vocab=5, d_emb=3, hidden=2, labels=2):
    return init_params(vocab, d_emb, hidden, labels, seed)


def tiny_batch(rng, vocab=5, n=3, sentences=1):
    return TokenBatch(
        sentences=[rng.integers(0, vocab, size=n) for _ in range(sentences)],
        languages=["xx"] * sentences,
    )


def end_to_end_loss(params, batch, gold):
    """NLL of one sentence through encoder + lattice."""
    emissions = encode(params, batch)
    lat = Lattice(emissions[0], params.transitions)
    loss, grad = nll_and_grad(lat, gold)
    return loss, grad


def fd_param_grads(loss_fn, params, h=1e-5):
    fd = zero_grads(params)
    for name, arr in params.arrays().items():
        for idx in np.ndindex(*arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(params)
            arr[idx] = orig - h
            dn = loss_fn(params)
            arr[idx] = orig
            fd[name][idx] = (up - dn) / (2 * h)
    return fd


class TestVocab:
    def test_build_sorted_with_unk(self):
        v = Vocab.build([["The", "cat"], ["cat", "sat"]])
        assert v.tokens[0] == "<unk>"
        assert set(v.tokens[1:]) == {"the", "cat", "sat"}
        assert list(v.tokens[1:]) == sorted(v.tokens[1:])

    def test_unknown_maps_to_zero(self):
        v = Vocab.build([["a", "b"]])
        ids = v.encode(["A", "zzz", "b"])
        assert ids[1] == 0
        assert ids[0] == v.encode(["a"])[0]


class TestEncode:
    def test_zero_projection_gives_zero_emissions(self):
        p = tiny_params()
        p.projection[:] = 0.0
        rng = np.random.default_rng(0)
        out = encode(p, tiny_batch(rng))
        np.testing.assert_array_equal(out[0], 0.0)

    def test_single_token_shape(self):
        p = tiny_params()
        out = encode(p, TokenBatch([np.array([2])], ["xx"]))
        assert out[0].shape == (1, 2)

    def test_deterministic(self):
        p = tiny_params(seed=7)
        batch = tiny_batch(np.random.default_rng(1), sentences=3)
        a = encode(p, batch)
        b = encode(p, batch)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_out_of_range_ids_hit_unk(self):
        p = tiny_params()
        a = encode(p, TokenBatch([np.array([0, 1])], ["xx"]))
        b = encode(p, TokenBatch([np.array([99, 1])], ["xx"]))
        np.testing.assert_array_equal(a[0], b[0])

    def test_batch_permutation_equivariance(self):
        p = tiny_params()
        rng = np.random.default_rng(2)
        sents = [rng.integers(0, 5, size=k) for k in (3, 5, 2)]
        fwd = encode(p, TokenBatch(sents, ["a", "b", "c"]))
        rev = encode(p, TokenBatch(sents[::-1], ["c", "b", "a"]))
        for x, y in zip(fwd, rev[::-1]):
            np.testing.assert_array_equal(x, y)

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            encode(tiny_params(), TokenBatch([], []))


class TestBackprop:
    def test_zero_upstream_gives_zero_grads(self):
        p = tiny_params()
        batch = tiny_batch(np.random.default_rng(3))
        grads = backprop(p, batch, [np.zeros((3, 2))])
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_nll_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        p = tiny_params(seed=11)
        assert p.num_parameters() <= 200
        batch = tiny_batch(rng)
        gold = [1, 0, 1]

        loss, lat_grad = end_to_end_loss(p, batch, gold)
        grads = backprop(p, batch, [lat_grad.emissions], lat_grad.transitions)
        fd = fd_param_grads(lambda q: end_to_end_loss(q, batch, gold)[0], p)
        for name in grads:
            np.testing.assert_allclose(grads[name], fd[name], rtol=1e-4, atol=1e-6,
                                       err_msg=name)

    def test_posterior_kd_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        p = tiny_params(seed=12)
        batch = tiny_batch(rng)
        teacher = tiny_params(seed=99)
        t_lat = Lattice(encode(teacher, batch)[0], teacher.transitions)
        t_post = posteriors(t_lat)
        kind = KDLossKind("posterior")

        def loss_fn(q):
            lat = Lattice(encode(q, batch)[0], q.transitions)
            val, _ = kd_loss_and_grad(kind, lat, teacher_posteriors=t_post)
            return val

        lat = Lattice(encode(p, batch)[0], p.transitions)
        _, lat_grad = kd_loss_and_grad(kind, lat, teacher_posteriors=t_post)
        grads = backprop(p, batch, [lat_grad.emissions], lat_grad.transitions)
        fd = fd_param_grads(loss_fn, p)
        for name in grads:
            np.testing.assert_allclose(grads[name], fd[name], rtol=1e-4, atol=1e-6,
                                       err_msg=name)

    def test_dropout_gradient_consistent_with_mask(self):
        p = tiny_params(seed=13)
        batch = tiny_batch(np.random.default_rng(6))
        gold = [0, 1, 0]
        kw = dict(dropout_rate=0.5, dropout_seed=42)

        def loss_fn(q):
            lat = Lattice(encode(q, batch, **kw)[0], q.transitions)
            return nll_and_grad(lat, gold)[0]

        lat = Lattice(encode(p, batch, **kw)[0], p.transitions)
        _, lat_grad = nll_and_grad(lat, gold)
        grads = backprop(p, batch, [lat_grad.emissions], lat_grad.transitions, **kw)
        fd = fd_param_grads(loss_fn, p)
        for name in grads:
            np.testing.assert_allclose(grads[name], fd[name], rtol=1e-4, atol=1e-6,
                                       err_msg=name)

    def test_shape_mismatch_rejected(self):
        p = tiny_params()
        batch = tiny_batch(np.random.default_rng(7))
        with pytest.raises(ValueError):
            backprop(p, batch, [np.zeros((2, 2))])
        with pytest.raises(ValueError):
            backprop(p, batch, [np.zeros((3, 2))], np.zeros((9, 9)))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        p = tiny_params(seed=21)
        meta = {"language": "en", "vocab": ["<unk>", "a"], "labels": ["O", "B-X"]}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, p, meta)
        q, meta2 = load_checkpoint(path)
        assert meta2 == meta
        assert q.rng_seed == p.rng_seed
        for name in ModelParams.ARRAY_FIELDS:
            a, b = getattr(p, name), getattr(q, name)
            assert a.dtype == b.dtype and np.array_equal(a, b)

    def test_save_is_deterministic(self, tmp_path):
        p = tiny_params(seed=22)
        f1, f2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(f1, p, {"x": 1})
        save_checkpoint(f2, p, {"x": 1})
        assert f1.read_bytes() == f2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_checkpoint(path)


def test_init_params_seeded_and_forget_bias():
    a = init_params(10, 4, 3, 2, seed=5)
    b = init_params(10, 4, 3, 2, seed=5)
    for name in ModelParams.ARRAY_FIELDS:
        assert np.array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.fwd_b[3:6], 1.0)
    np.testing.assert_array_equal(a.bwd_b[3:6], 1.0)
    c = init_params(10, 4, 3, 2, seed=6)
    assert not np.array_equal(a.embedding, c.embedding)
