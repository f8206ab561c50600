
import numpy as np
import pytest

from caspnet import tensor as T
from caspnet.loss import total_loss
from caspnet.network import (CaspNet, CaspNetConfig, attention_block, cnn_block, conv_lstm_sequence, gabor_bank,
                             gabor_conv, inception_residual, parse_kv, residual_upsample)
from caspnet.tensor import Parameter, Tape, Tensor
from caspnet.tensor.gradcheck import check_gradients, relative_error

SMALL = dict(channels=(4, 8, 8))


def direct_conv(x, w, b, dil=1):
    """'same' cross-correlation by shifting the padded input, one kernel tap at a time."""
    c_out, _, kh, kw = w.shape
    ph, pw = dil * (kh // 2), dil * (kw // 2)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    h, wd = x.shape[1:]
    out = np.zeros((c_out, h, wd)) + (0 if b is None else b[:, None, None])
    for a in range(kh):
        for e in range(kw):
            patch = xp[:, a * dil:a * dil + h, e * dil:e * dil + wd]
            out += np.einsum("oc,chw->ohw", w[:, :, a, e], patch)
    return out


def P(rng, *shape, s=0.3):
    return Parameter("p", rng.normal(scale=s, size=shape))


# ---------------------------------------------------------------- config

def test_config_invariants():
    with pytest.raises(ValueError):
        CaspNetConfig(channels=(16, 32))
    with pytest.raises(ValueError):
        CaspNetConfig(dilations=())
    with pytest.raises(ValueError):
        CaspNetConfig(U=150)           # not divisible by 4
    with pytest.raises(ValueError):
        CaspNetConfig(classes=("bicycle",))
    assert CaspNetConfig().attention_kernel == 5
    assert CaspNetConfig(dilations=(1, 2, 4)).attention_kernel == 9


def test_config_text_round_trip():
    cfg = CaspNetConfig(channels=(8, 16, 32), dilations=(1, 3), classes=("target",), gabor_enabled=False, seed=7)
    back = CaspNetConfig.from_mapping(parse_kv(cfg.to_text()))
    assert back == cfg


def test_registry_names_unique_and_complete():
    net = CaspNet(CaspNetConfig(**SMALL))
    ids = [id(p) for p in net.params.values()]
    assert len(ids) == len(set(ids))
    assert all(p.name == n for n, p in net.params.items())
    assert not any(p.trainable for n, p in net.params.items() if "running" in n)


# ---------------------------------------------------------------- blocks

def test_cnn_block_shapes_and_zero_case(rng):
    c = 4
    p = {"w": P(rng, c, 7, 3, 3), "b": P(rng, c), "gamma": Parameter("g", np.ones(c)),
         "beta": Parameter("be", np.zeros(c)), "mean": None, "var": None}
    x = Tensor(rng.normal(size=(7, 152, 80)))
    assert cnn_block(x, p, pool=False, training=True).shape == (4, 152, 80)
    assert cnn_block(x, p, pool=True, training=True).shape == (4, 76, 40)
    zero = {**p, "w": Parameter("w", np.zeros((c, 7, 3, 3))), "b": None}
    assert not cnn_block(x, zero, pool=True, training=True).data.any()
    with pytest.raises(ValueError):
        cnn_block(Tensor(rng.normal(size=(7, 15, 8))), p, pool=True, training=True)


def test_gabor_bank_orientations():
    bank = gabor_bank(5, 4)
    assert bank.shape == (4, 5, 5)
    assert np.allclose(np.abs(bank).max(axis=(1, 2)), 1.0)
    # the pi/2 filter is the 0 filter rotated by a quarter turn
    assert np.allclose(np.rot90(bank[0]), bank[2], atol=1e-12)


def test_gabor_degenerate_bank_is_plain_conv(rng):
    x = Tensor(rng.normal(size=(3, 9, 7)))
    w, b = P(rng, 4, 3, 5, 5), P(rng, 4)
    a = gabor_conv(x, w, b, np.ones((1, 5, 5)))
    ref = T.conv2d(x, w, b, padding=2)
    assert np.array_equal(a.data, ref.data)
    assert np.array_equal(gabor_conv(x, w, b, None).data, ref.data)


def test_gabor_zero_kernels(rng):
    x = Tensor(rng.normal(size=(3, 9, 7)))
    out = gabor_conv(x, Parameter("w", np.zeros((2, 3, 5, 5))), Parameter("b", np.zeros(2)), gabor_bank())
    assert not out.data.any()


def test_gabor_max_over_orientations(rng):
    bank = gabor_bank()
    x = rng.normal(size=(2, 8, 8))
    w = rng.normal(size=(3, 2, 5, 5))
    got = gabor_conv(Tensor(x), Tensor(w), None, bank).data
    exp = np.max([direct_conv(x, w * g, None) for g in bank], axis=0)
    np.testing.assert_allclose(got, exp, atol=1e-4)


def test_gabor_rotation_permutes_winning_orientation():
    bank = gabor_bank()
    img = np.zeros((1, 11, 11))
    img[0, :, 5] = 1.0                                    # vertical bar through the centre
    ones = np.ones((1, 1, 5, 5))

    def winner(im):
        resp = [direct_conv(im, ones * g, None)[0, 5, 5] for g in bank]
        return int(np.argmax(resp))

    w0 = winner(img)
    w90 = winner(np.rot90(img, axes=(1, 2)).copy())
    assert w0 != w90
    assert w90 == (w0 + 2) % 4


def test_attention_single_branch(rng):
    x = Tensor(rng.normal(size=(3, 6, 5)))
    p = {"w": [P(rng, 4, 3, 3, 3)], "b": [P(rng, 4)], "wa": P(rng, 1, 3, 3, 3), "ba": P(rng, 1)}
    out = attention_block(x, p, (1,))
    ref = T.conv2d(x, p["w"][0], p["b"][0], padding=1)
    assert np.array_equal(out.data, ref.data)


def test_attention_equal_logits_average(rng):
    x = Tensor(rng.normal(size=(3, 6, 5)))
    wa = np.zeros((2, 3, 5, 5))
    p = {"w": [P(rng, 4, 3, 3, 3), P(rng, 4, 3, 3, 3)], "b": [P(rng, 4), P(rng, 4)],
         "wa": Parameter("wa", wa), "ba": Parameter("ba", np.full(2, 0.7))}
    out = attention_block(x, p, (1, 2))
    b1 = T.conv2d(x, p["w"][0], p["b"][0], padding=1).data
    b2 = T.conv2d(x, p["w"][1], p["b"][1], padding=2, dilation=2).data
    np.testing.assert_allclose(out.data, (b1 + b2) / 2, atol=1e-6)


def test_attention_matches_direct_formula(rng, f64):
    x = rng.normal(size=(3, 7, 6))
    ws = [rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(4, 3, 3, 3))]
    bs = [rng.normal(size=4), rng.normal(size=4)]
    wa, ba = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=2)
    p = {"w": [Tensor(w) for w in ws], "b": [Tensor(b) for b in bs], "wa": Tensor(wa), "ba": Tensor(ba)}
    keep = []
    got = attention_block(Tensor(x), p, (1, 2), keep=keep).data
    logits = direct_conv(x, wa, ba)
    e = np.exp(logits - logits.max(axis=0))
    W = e / e.sum(axis=0)
    exp = sum(direct_conv(x, ws[i], bs[i], dil=d) * W[i] for i, d in enumerate((1, 2)))
    np.testing.assert_allclose(got, exp, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(keep[0].sum(axis=0), 1.0, atol=1e-12)


def test_attention_gradients(rng, f64):
    x = Tensor(rng.normal(size=(2, 6, 5)))
    p = {"w": [P(rng, 3, 2, 3, 3), P(rng, 3, 2, 3, 3)], "b": [P(rng, 3), P(rng, 3)],
         "wa": P(rng, 2, 2, 5, 5), "ba": P(rng, 2)}
    errs = check_gradients(lambda: attention_block(x, p, (1, 2)), [x, p["wa"], *p["w"], p["ba"]])
    assert max(errs) < 1e-4


def test_conv_lstm_sequence_matches_step(rng):
    xs = [Tensor(rng.normal(size=(3, 5, 4))) for _ in range(3)]
    w, b = P(rng, 8, 5, 3, 3), P(rng, 8)
    h = c = None
    for x in xs:
        h, c = T.conv_lstm_step(x, h, c, w, b)
    h2, c2 = conv_lstm_sequence(xs, w, b)
    np.testing.assert_allclose(h2.data, h.data, atol=1e-6)
    np.testing.assert_allclose(c2.data, c.data, atol=1e-6)


def test_residual_upsample(rng, f64):
    x = Tensor(rng.normal(size=(6, 5, 4)))
    p = {"w_proj": P(rng, 3, 6, 1, 1), "b_proj": P(rng, 3), "w_t": P(rng, 6, 3, 4, 4), "b_t": P(rng, 3)}
    out = residual_upsample(x, p)
    assert out.shape == (3, 10, 8)
    pure = {**p, "w_t": Parameter("z", np.zeros((6, 3, 4, 4))), "b_t": Parameter("zb", np.zeros(3))}
    bil = T.conv2d(T.bilinear_upsample2x(x), p["w_proj"], p["b_proj"]).data
    np.testing.assert_array_equal(residual_upsample(x, pure).data, bil)
    assert max(check_gradients(lambda: residual_upsample(x, p), [x, *p.values()])) < 1e-4


def test_residual_upsample_default_shape():
    net = CaspNet(CaspNetConfig())
    x = Tensor(np.zeros((128, 38, 20), dtype=np.float32))
    assert residual_upsample(x, net.up[1]).shape == (32, 76, 40)


def _inception_params(rng, c, nb=2, zero=False):
    f = (lambda *s: Parameter("z", np.zeros(s))) if zero else (lambda *s: P(rng, *s))
    return {"w1": f(nb, c, 1, 1), "b1": f(nb), "w71": f(nb, c, 7, 1), "b71": f(nb), "w17": f(nb, c, 1, 7),
            "b17": f(nb), "w33": f(nb, c, 3, 3), "b33": f(nb), "w_proj": f(c, 4 * nb, 1, 1), "b_proj": f(c)}


def test_inception_residual(rng, f64):
    x = Tensor(rng.normal(size=(4, 9, 8)))
    p = _inception_params(rng, 4)
    assert inception_residual(x, p).shape == x.shape
    np.testing.assert_array_equal(inception_residual(x, _inception_params(rng, 4, zero=True)).data,
                                  np.maximum(x.data, 0))
    assert max(check_gradients(lambda: inception_residual(x, p), [x, *p.values()])) < 1e-4


# ---------------------------------------------------------------- full model

def test_default_pyramid_shapes():
    net = CaspNet(CaspNetConfig())
    grids = np.zeros((3, 7, 152, 80), dtype=np.float32)
    traj = net.trajectory_encoder(grids)
    assert len(traj) == 3
    for levels in traj:
        assert [t.shape for t in levels] == [(16, 152, 80), (32, 76, 40), (64, 38, 20)]
    maps = net.map_encoder(np.zeros((3, 152, 80), dtype=np.float32))
    assert [t.shape for t in maps] == [(16, 152, 80), (32, 76, 40), (64, 38, 20)]
    # zero input: every channel is spatially constant at each level
    for t in traj[0]:
        assert np.all(t.data == t.data[:, :1, :1])


def test_forward_shapes_and_ranges(rng):
    scene = CaspNet(CaspNetConfig(**SMALL))
    grids = rng.normal(size=(3, 7, 152, 80)).astype(np.float32)
    image = rng.uniform(size=(3, 152, 80)).astype(np.float32)
    out = scene(grids, image)
    assert out.as_array().shape == (12, 5, 152, 80)
    assert out.classes.data.min() > 0 and out.classes.data.max() < 1
    assert np.abs(out.offsets.data).max() <= 0.5
    again = scene(grids, image)
    assert np.array_equal(out.as_array(), again.as_array())
    single = CaspNet(CaspNetConfig(classes=("target",), **SMALL))
    assert single(grids, image).as_array().shape == (12, 3, 152, 80)


def test_forward_rejects_bad_extents():
    net = CaspNet(CaspNetConfig(**SMALL))
    with pytest.raises(ValueError):
        net(np.zeros((3, 7, 150, 80)), np.zeros((3, 152, 80)))
    with pytest.raises(ValueError):
        net(np.zeros((3, 7, 152, 80)), np.zeros((3, 76, 80)))


def test_weight_sharing_and_permutation(rng):
    net = CaspNet(CaspNetConfig(U=16, V=16, **SMALL))
    a, b = rng.normal(size=(2, 7, 16, 16))
    feats = net.trajectory_encoder(np.stack([a, a, b]))
    for la, lb in zip(feats[0], feats[1]):
        assert np.array_equal(la.data, lb.data)
    swapped = net.trajectory_encoder(np.stack([a, b, a]))
    for x, y in zip(feats[2], swapped[1]):
        assert np.array_equal(x.data, y.data)


def test_gabor_disabled_equals_plain_conv_path(rng):
    cfg_on = CaspNetConfig(U=16, V=16, **SMALL)
    on = CaspNet(cfg_on)
    off = CaspNet(CaspNetConfig(U=16, V=16, gabor_enabled=False, **SMALL))
    off.load_state_dict(on.state_dict())
    on.bank = np.ones((1, 5, 5))
    img = rng.uniform(size=(3, 16, 16))
    for x, y in zip(on.map_encoder(img), off.map_encoder(img)):
        assert np.array_equal(x.data, y.data)


def test_black_map_constant_features():
    net = CaspNet(CaspNetConfig(U=16, V=16, **SMALL))
    a = net.map_encoder(np.zeros((3, 16, 16)))
    b = net.map_encoder(np.zeros((3, 16, 16)))
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)
    assert np.all(a[0].data == a[0].data[:, :1, :1])


def test_skip_connection_order_and_channels(rng):
    net = CaspNet(CaspNetConfig(U=16, V=16, M=3, **SMALL))
    steps = [Tensor(rng.normal(size=(4, 16, 16))) for _ in range(3)]
    m = Tensor(rng.normal(size=(4, 16, 16)))
    fwd = net.skip_connection(0, steps, m)
    rev = net.skip_connection(0, steps[::-1], m)
    assert fwd.shape == (8, 16, 16)
    assert not np.allclose(fwd.data[:4], rev.data[:4])
    np.testing.assert_array_equal(fwd.data[4:], m.data)
    one = net.skip_connection(0, steps[:1], m)
    w, b = net.skip_lstm[0]
    h, _ = T.conv_lstm_step(steps[0], None, None, w, b)
    ref = attention_block(h, net.attention[0], net.cfg.dilations)
    np.testing.assert_allclose(one.data[:4], ref.data, atol=1e-6)


def test_attention_weights_normalized_every_level(rng):
    net = CaspNet(CaspNetConfig(U=16, V=16, **SMALL))
    net(rng.normal(size=(3, 7, 16, 16)), rng.uniform(size=(3, 16, 16)))
    assert len(net.last_attention) == 3
    for w in net.last_attention:
        np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-6)


def test_decoder_recurrence(rng):
    net = CaspNet(CaspNetConfig(U=16, V=16, N=3, **SMALL))
    out = net(rng.normal(size=(3, 7, 16, 16)), rng.uniform(size=(3, 16, 16)))
    lg = out.logits.data
    assert not np.allclose(lg[0], lg[1])
    assert not np.allclose(lg[1], lg[2])
    one = CaspNet(CaspNetConfig(U=16, V=16, N=1, **SMALL))
    lg1 = one(rng.normal(size=(3, 7, 16, 16)), rng.uniform(size=(3, 16, 16))).logits
    assert lg1.shape == (1, 5, 16, 16)


def test_permutation_consistency_through_raster():
    from caspnet.raster import RasterConfig, rasterize_trajectories, scene_frame
    from caspnet.scene import Scene, VectorMap
    from conftest import straight_agent

    tgt = straight_agent("t", "target", 0, 0, 5, 0)
    v1 = straight_agent("a", "vehicle", 10, 3, 4, 0)
    v2 = straight_agent("b", "vehicle", 30, -3, 6, 0)
    rc = RasterConfig()
    s1, s2 = Scene([tgt, v1, v2], VectorMap()), Scene([tgt, v2, v1], VectorMap())
    g1 = rasterize_trajectories(s1, rc, 2, scene_frame(s1, 2, rc))
    g2 = rasterize_trajectories(s2, rc, 2, scene_frame(s2, 2, rc))
    assert np.array_equal(g1, g2)
    net = CaspNet(CaspNetConfig(N=2, **SMALL))
    img = np.zeros((3, 152, 80), dtype=np.float32)
    assert np.array_equal(net(g1, img).as_array(), net(g2, img).as_array())


def test_end_to_end_gradients_toy(f64):
    """Every parameter tensor, sampled entries, against central differences of the full loss."""
    cfg = CaspNetConfig(pyramid_levels=1, channels=(3,), U=16, V=16, M=2, N=2, seed=3)
    net = CaspNet(cfg)
    rng = np.random.default_rng(5)
    grids = rng.normal(size=(2, 7, 16, 16))
    image = rng.uniform(size=(3, 16, 16))
    y = np.zeros((2, 5, 16, 16))
    y[:, :3] = rng.uniform(0, 0.8, size=(2, 3, 16, 16))
    y[0, 0, 5, 7] = y[1, 1, 9, 3] = 1.0
    y[0, 3:, 5, 7] = (0.2, -0.3)
    counts = np.ones((2, 3))

    def loss():
        out = net(grids, image, training=True)
        return total_loss(out.classes, out.offsets, y, counts, cfg.classes)[0]

    with Tape() as tape:
        L = loss()
    tape.backward(L)
    h = 1e-6
    worst = 0.0
    sel = np.random.default_rng(11)
    for name, p in net.params.items():
        if not p.trainable:
            continue
        g = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        idx = sel.choice(flat.size, size=min(3, flat.size), replace=False)
        num, ana = [], []
        for i in idx:
            old = flat[i]
            with T.no_tape():
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                dn = loss().item()
            flat[i] = old
            num.append((up - dn) / (2 * h))
            ana.append(g[i])
        err = relative_error(np.array(ana), np.array(num))
        assert err < 1e-3, (name, err)
        worst = max(worst, err)
    assert worst < 1e-3
