import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgan import grad as G
from edgan.grad import Tape, Tensor
from edgan.networks import (ROLES, ConfigError, NetConfig, build_network, compose_output, decode, discriminate,
                            encode, generate_residual, layer_shapes)

DESK = NetConfig.desk()
PAPER = NetConfig.paper()


def images(n, cfg=DESK, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, (n, cfg.image_size, cfg.image_size, cfg.in_channels)).astype(cfg.dtype))


def latents(n, cfg=DESK, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, (n, cfg.z_dim)).astype(cfg.dtype))


# ------------------------------------------------------------------- shapes


def test_full_encoder_ladder():
    assert layer_shapes("enc", PAPER) == [(64, 64, 64), (32, 32, 128), (16, 16, 256), (8, 8, 512),
                                          (4, 4, 1024), (50,)]


def test_full_discriminator_ladder():
    assert layer_shapes("disc", PAPER) == [(64, 64, 64), (32, 32, 128), (16, 16, 256), (8, 8, 512),
                                           (4, 4, 1024), (1,)]


@pytest.mark.parametrize("role", ["dec", "gen"])
def test_full_decoder_ladder(role):
    assert layer_shapes(role, PAPER) == [(4, 4, 1024), (8, 8, 512), (16, 16, 256), (32, 32, 128),
                                         (64, 64, 64), (128, 128, 3)]


def test_desk_ladder():
    assert layer_shapes("enc", DESK) == [(16, 16, 16), (8, 8, 32), (4, 4, 64), (16,)]
    assert layer_shapes("dec", DESK) == [(4, 4, 64), (8, 8, 32), (16, 16, 16), (32, 32, 3)]


def test_gen_is_copy_of_dec():
    assert build_network("gen", DESK, 0).shapes() == build_network("dec", DESK, 0).shapes()


@pytest.mark.parametrize("kw", [dict(image_size=48), dict(image_size=4), dict(image_size=16, n_down_layers=3),
                                dict(kernel_size=4), dict(z_dim=0), dict(dtype="float16")])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        NetConfig(**kw)


def test_unknown_role():
    with pytest.raises(ConfigError):
        build_network("critic", DESK, 0)


# --------------------------------------------------------------- init


def test_init_statistics():
    net = build_network("enc", PAPER, 0)
    w = net.params["conv2.w"].data
    assert abs(w.mean()) < 1e-3 and w.std() == pytest.approx(0.02, rel=0.02)
    assert not net.params["conv2.b"].data.any()
    assert np.all(net.params["bn2.gamma"].data == 1) and not net.params["bn2.beta"].data.any()


def test_init_per_role_streams():
    a = build_network("enc", DESK, 3)
    b = build_network("enc", DESK, 3)
    c = build_network("dec", DESK, 3)
    assert a.digest() == b.digest()
    assert a.params["conv0.w"].data.ravel()[:5].tolist() != c.params["deconv0.w"].data.ravel()[:5].tolist()
    assert build_network("enc", DESK, 4).digest() != a.digest()


# ------------------------------------------------------------- forward


def test_encode_bounded_and_batched():
    z = encode(build_network("enc", DESK, 0), images(5))
    assert z.shape == (5, DESK.z_dim)
    assert np.all(np.abs(z.data) <= 1)


def test_encode_identical_images_eval():
    enc = build_network("enc", DESK, 0)
    x = images(1)
    both = Tensor(np.concatenate([x.data, x.data]))
    z = encode(enc, both, training=False).data
    np.testing.assert_array_equal(z[0], z[1])


def test_decode_output_shape_and_range():
    out = decode(build_network("dec", DESK, 0), latents(3))
    assert out.shape == (3, 32, 32, 3)
    assert np.all(np.abs(out.data) <= 1)


def test_decode_full_scale_shape():
    out = decode(build_network("dec", PAPER, 0), latents(2, PAPER), training=False)
    assert out.shape == (2, 128, 128, 3)


def test_fresh_residual_is_small():
    # measured at init: eval max |I_G| ~ 0.004, train-mode mean |I_G| ~ 0.1
    gen = build_network("gen", DESK, 0)
    for seed in range(3):
        z = latents(8, seed=seed)
        assert np.abs(generate_residual(gen, z, training=False).data).max() < 0.01
        assert np.abs(generate_residual(gen, z).data).mean() < 0.15


def test_residual_gradient_never_reaches_encoder():
    enc, gen = build_network("enc", DESK, 0), build_network("gen", DESK, 0)
    with Tape() as tape:
        z = encode(enc, images(4))
        loss = G.mean_all(generate_residual(gen, z))
    G.backward(loss, tape)
    assert all(t.grad is None for t in enc.tensors())
    assert all(t.grad is not None for t in gen.tensors())


def test_compose():
    a = Tensor(np.ones((2, 2, 1), dtype=np.float32))
    assert np.all(compose_output(a, Tensor(np.zeros_like(a.data))).data == 1)
    assert np.all(compose_output(a, Tensor(-a.data)).data == 0)
    assert np.all(compose_output(a, a).data == 2.0)


def test_compose_shape_mismatch():
    with pytest.raises(G.ShapeError):
        compose_output(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((2, 2, 3))))


def test_fresh_discriminator_near_half():
    disc = build_network("disc", DESK, 0)
    p = discriminate(disc, images(8), training=False).data
    assert p.shape == (8,)
    assert np.all(np.abs(p - 0.5) < 0.2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**16), st.floats(-50, 50))
def test_discriminator_output_in_open_interval(seed, scale):
    disc = build_network("disc", DESK, seed % 7)
    p = discriminate(disc, Tensor(images(3, seed=seed).data * np.float32(scale))).data
    assert np.all((p > 0) & (p < 1))


def test_wrong_image_size():
    with pytest.raises(G.ShapeError):
        encode(build_network("enc", DESK, 0), images(2, NetConfig(image_size=64)))


def test_wrong_role_for_discriminate():
    with pytest.raises(ConfigError):
        discriminate(build_network("enc", DESK, 0), images(2))


# ----------------------------------------------------------- options


def test_label_is_optional_without_label_dim():
    decode(build_network("dec", DESK, 0), latents(2), label=None)


def test_label_required_when_configured():
    cfg = NetConfig(image_size=8, n_down_layers=1, base_filters=4, z_dim=4, label_dim=3)
    dec = build_network("dec", cfg, 0)
    with pytest.raises(ConfigError):
        decode(dec, latents(2, cfg))


def test_label_rejected_when_unconditional():
    with pytest.raises(ConfigError):
        decode(build_network("dec", DESK, 0), latents(2), label=Tensor(np.ones((2, 1), dtype=np.float32)))


def test_conditional_outputs_depend_on_label_after_training():
    cfg = NetConfig(image_size=8, n_down_layers=1, base_filters=4, z_dim=4, label_dim=2, dtype="float64")
    dec = build_network("dec", cfg, 0)
    opt = G.OptimizerState(lr=1e-2)
    rng = np.random.default_rng(0)
    z = Tensor(rng.uniform(-1, 1, (8, 4)))
    lab = Tensor(np.eye(2)[np.arange(8) % 2])
    target = Tensor(np.where((np.arange(8) % 2)[:, None, None, None] == 0, -0.5, 0.5) * np.ones((8, 8, 8, 3)))
    for _ in range(30):
        with Tape() as tape:
            loss = G.l1_loss(decode(dec, z, lab), target)
        G.zero_grads(dec.tensors())
        G.backward(loss, tape)
        G.optimizer_step(dec.params, opt)
    z0 = Tensor(np.repeat(z.data[:1], 2, axis=0))
    out = decode(dec, z0, Tensor(np.eye(2)), training=False).data
    assert np.abs(out[0] - out[1]).mean() > 0.1


def test_skips_change_decoder_input_width():
    cfg = NetConfig.desk(use_skips=True)
    enc, dec = build_network("enc", cfg, 0), build_network("dec", cfg, 0)
    z, skips = encode(enc, images(2, cfg), return_skips=True)
    assert decode(dec, z, skips=skips).shape == (2, 32, 32, 3)
    assert dec.params["deconv0.w"].shape[3] == 64 + 64  # bottleneck map + its 4x4 skip


def test_no_batchnorm_has_no_bn_params():
    net = build_network("enc", NetConfig.desk(use_batchnorm=False), 0)
    assert not net.bn and not any(k.startswith("bn") for k in net.params)


def test_frozen_view_shares_weights_not_state():
    dec = build_network("dec", DESK, 0)
    view = dec.frozen()
    before = dec.digest()
    decode(view, latents(4), training=True)
    assert dec.digest() == before
    assert view.params["fc.w"].data is dec.params["fc.w"].data
    assert all(not t.requires_grad for t in view.tensors())


def test_all_roles_build():
    for role in ROLES:
        assert build_network(role, DESK, 0).params
