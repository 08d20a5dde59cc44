import numpy as np
import pytest

from oracles import numeric_grad, rel_err
from varshap import tensor as T
from varshap.errors import ConfigurationError, NumericError, ParseError
from varshap.vrnn import VRNN, GaussianParams, VrnnConfig, load_checkpoint, save_checkpoint


def small(seed=0, **kw):
    cfg = dict(input_dim=3, hidden_dim=4, latent_dim=2, mlp_dim=5, clf_layers=(3,), seed=seed)
    cfg.update(kw)
    return VRNN(VrnnConfig(**cfg))


def test_zero_init_gives_standard_normal_and_neutral_outputs():
    m = small(init="zeros")
    h = T.Tensor(np.random.default_rng(0).standard_normal(4))
    x = T.Tensor(np.ones(3))
    for p in (m.prior_net(h), m.encode(h, x)):
        np.testing.assert_array_equal(p.mu.data, 0.0)
        np.testing.assert_array_equal(p.log_var.data, 0.0)
    logit, y = m.classify(T.Tensor([0.3, -0.1]))
    assert logit.item() == 0.0 and y.item() == 0.5
    np.testing.assert_array_equal(m.recur(m.initial_state(), x, T.Tensor([1.0, 1.0])).data, 0.0)
    np.testing.assert_array_equal(m.decode(h, T.Tensor([1.0, 1.0])).data, 0.0)


def test_affine_classifier_logit():
    m = small(clf_layers=())
    params = m.parameters()
    params["classifier.0.weight"].data = np.array([[1.0], [2.0]])
    params["classifier.0.bias"].data = np.zeros(1)
    logit, y = m.classify(T.Tensor([1.0, 1.0]))
    assert logit.item() == 3.0
    assert y.item() == pytest.approx(1 / (1 + np.exp(-3)))
    _, y2 = m.classify(T.Tensor([1.5, 1.0]))
    assert y2.item() > y.item()


def test_reparameterization():
    mu, lv = T.Tensor([0.5, -1.0]), T.Tensor([0.3, -40.0])
    s = VRNN.reparameterize(GaussianParams(mu, lv), epsilon=np.array([1.2, 0.7]))
    np.testing.assert_array_equal(s.z.data, mu.data + np.exp(0.5 * lv.data) * s.epsilon)
    assert s.z.data[1] == pytest.approx(-1.0, abs=1e-8)
    s0 = VRNN.reparameterize(GaussianParams(mu, lv), epsilon=np.zeros(2))
    np.testing.assert_array_equal(s0.z.data, mu.data)
    draws = VRNN.reparameterize(GaussianParams(T.Tensor(np.ones(100_000)), T.Tensor(np.full(100_000, np.log(4.0)))),
                                rng=np.random.default_rng(0)).z.data
    assert abs(draws.mean() - 1) < 0.05 and abs(draws.var() - 4) < 0.15


def test_log_var_is_clamped():
    m = small()
    for p in m.encoder.parameters("e").values():
        p.data = p.data * 500
    post = m.encode(T.Tensor(np.ones(4)), T.Tensor(np.ones(3) * 3))
    assert np.all(np.abs(post.log_var.data) <= 10.0)


def test_gru_state_bounded_and_deterministic():
    m = small()
    x = np.random.default_rng(1).standard_normal((20, 3)) * 5
    a = m.forward_sequence(x)
    b = m.forward_sequence(x)
    for ha, hb in zip(a.h, b.h):
        assert np.all(np.abs(ha.data) < 1)
        assert np.array_equal(ha.data, hb.data)


def test_sample_mode_is_seeded():
    m = small()
    x = np.random.default_rng(2).standard_normal((2, 6, 3))
    a = m.forward_sequence(x, "sample", rng=np.random.default_rng(7))
    b = m.forward_sequence(x, "sample", rng=np.random.default_rng(7))
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.z.data, sb.z.data)
        post_z = sa.z.data
        assert np.isfinite(post_z).all()
    for post, s in zip(a.posterior, a.samples):
        np.testing.assert_array_equal(s.z.data, post.mu.data + np.exp(0.5 * post.log_var.data) * s.epsilon)


def test_length_one_sequence_is_the_composition():
    m = small()
    x = np.array([[0.2, -0.4, 1.1]])
    tr = m.forward_sequence(x)
    h0 = m.initial_state()
    post = m.encode(h0, T.Tensor(x[0]))
    logit, y = m.classify(post.mu)
    h1 = m.recur(h0, T.Tensor(x[0]), post.mu)
    np.testing.assert_array_equal(tr.h[0].data, h1.data)
    np.testing.assert_array_equal(tr.logit[0].data, logit.data)
    np.testing.assert_array_equal(tr.x_hat[0].data, m.decode(h1, post.mu).data)
    np.testing.assert_array_equal(tr.prior[0].mu.data, m.prior_net(h0).mu.data)
    assert tr.y_hat[0].item() == pytest.approx(1 / (1 + np.exp(-logit.item())))


def test_prior_ignores_current_input():
    m = small()
    h = T.Tensor(np.random.default_rng(3).standard_normal(4) * 0.5)
    x1, x2 = T.Tensor(np.zeros(3)), T.Tensor(np.ones(3))
    assert not np.allclose(m.encode(h, x1).mu.data, m.encode(h, x2).mu.data)
    tr1 = m.forward_sequence(np.stack([np.zeros(3), np.zeros(3)]))
    tr2 = m.forward_sequence(np.stack([np.zeros(3), np.ones(3)]))
    np.testing.assert_array_equal(tr1.prior[1].mu.data, tr2.prior[1].mu.data)


def test_subnet_jacobians_match_finite_differences():
    m = small(seed=5)
    rng = np.random.default_rng(5)
    h, x, z = rng.standard_normal(4) * 0.5, rng.standard_normal(3), rng.standard_normal(2)
    checks = {
        "prior": (lambda a: T.sum_(m.prior_net(T.as_tensor(a)).mu), h),
        "encoder": (lambda a: T.sum_(m.encode(T.Tensor(h), T.as_tensor(a)).log_var), x),
        "classifier": (lambda a: m.classify(T.as_tensor(a))[0], z),
        "gru": (lambda a: T.sum_(m.recur(T.Tensor(h), T.Tensor(x), T.as_tensor(a))), z),
        "decoder": (lambda a: T.sum_(m.decode(T.as_tensor(a), T.Tensor(z))), h),
    }
    for name, (f, at) in checks.items():
        g = T.gradient_of(f, T.Tensor(at)).data
        assert rel_err(g, numeric_grad(lambda a: f(a).item(), at)) <= 1e-4, name


def test_final_posterior_matches_trace():
    m = small()
    x = np.random.default_rng(4).standard_normal((3, 7, 3))
    tr = m.forward_sequence(x)
    fp = m.final_posterior(x)
    np.testing.assert_allclose(fp.mu.data, tr.posterior[-1].mu.data, rtol=0, atol=1e-14)
    h_mid = m.run_state(x[:, :4])
    fp2 = m.final_posterior(x[:, 4:], h0=h_mid)
    np.testing.assert_allclose(fp2.mu.data, fp.mu.data, atol=1e-14)


def test_predict_proba_shapes():
    x = np.zeros((2, 5, 3))
    assert small().predict_proba(x).shape == (2, 5)
    assert small(n_classes=4).predict_proba(x).shape == (2, 5, 4)


def test_bad_inputs():
    m = small()
    with pytest.raises(ConfigurationError):
        m.forward_sequence(np.zeros((4, 5)))
    with pytest.raises(ConfigurationError):
        m.forward_sequence(np.zeros((0, 3)))
    with pytest.raises(ConfigurationError):
        m.forward_sequence(np.zeros((2, 3)), mode="sample")
    with pytest.raises(ConfigurationError):
        VrnnConfig(input_dim=0)


def test_numeric_error_names_timestep():
    m = small()
    m.parameters()["gru.input.weight"].data[:] = np.inf
    with pytest.raises(NumericError, match="timestep 0"):
        m.forward_sequence(np.ones((3, 3)))


def test_checkpoint_round_trip(tmp_path):
    m = small(seed=9, clf_layers=(4, 2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, meta={"note": "x"})
    m2, meta = load_checkpoint(path)
    assert meta["note"] == "x"
    assert m2.config == m.config
    for k, v in m.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])
    raw = path.read_bytes()
    assert raw[:8] == b"VRNNCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "short.ckpt")
