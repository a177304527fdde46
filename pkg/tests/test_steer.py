import numpy as np
import pytest

from lacework.critic import CriticConfig, DistributionalCritic, atom_grid
from lacework.env import ACTION_DIM, OBS_DIM, PROPRIO_DIM
from lacework.errors import ContractViolation
from lacework.flowpolicy import FlowPolicy, PolicyConfig, build_features
from lacework.harness import kendall
from lacework.numcore import SeededRng
from lacework.steer import (
    NoiseCritic,
    NoisePredictor,
    SteerConfig,
    actor_update,
    distill_noise_critic,
    mixture_noise,
    noise_penalty,
)


def tiny_setup(seed=0, chunk=2, n_atoms=11):
    rng = SeededRng(seed)
    cfg = SteerConfig(hidden=(16, 16), batch_size=8)
    policy = FlowPolicy(PolicyConfig(chunk=chunk, hidden=(16, 16)), rng.split("pol"))
    predictor = NoisePredictor(policy.chunk_dim, cfg, rng.split("pred"))
    noise_critic = NoiseCritic(policy.chunk_dim, n_atoms, cfg, rng.split("nc"))
    return cfg, policy, predictor, noise_critic, rng


def rand_feats(rng, n):
    return build_features(rng.random_f32_grid((n, OBS_DIM)),
                          rng.random_f32_grid((n, PROPRIO_DIM)))


# -- penalty -------------------------------------------------------------------


def test_penalty_zero_below_budget():
    assert noise_penalty(np.zeros(48), beta=36.0, c=1.0) == 0.0


def test_penalty_plugin_value():
    eps = np.zeros(48)
    eps[0] = np.sqrt(2 * 37.0)  # half squared norm = beta + 1
    assert noise_penalty(eps, beta=36.0, c=1.0) == pytest.approx(1.0, rel=1e-6)


def test_penalty_validation():
    with pytest.raises(ContractViolation):
        noise_penalty(np.zeros(4), beta=0.0, c=1.0)


def test_penalty_mostly_inactive_for_unit_gaussian():
    rng = SeededRng(0)
    eps = rng.normal((4000, 48))
    pen = noise_penalty(eps, beta=36.0, c=1.0)
    assert (pen == 0.0).mean() >= 0.85


# -- predictor -------------------------------------------------------------------


def test_predictor_identity_initialization():
    cfg, policy, predictor, _, rng = tiny_setup()
    feats = rand_feats(rng, 5)
    mu, log_sigma = predictor.mean_logsigma(feats)
    assert np.array_equal(mu, np.zeros_like(mu))
    assert np.array_equal(log_sigma, np.zeros_like(log_sigma))
    # with matching draws the proposal equals the unit Gaussian stream
    z_rng_a, z_rng_b = SeededRng(9), SeededRng(9)
    eps_pred = predictor.sample(feats, z_rng_a)
    eps_unit = z_rng_b.normal(mu.shape)
    np.testing.assert_allclose(eps_pred, eps_unit, atol=1e-7)


def test_identity_predictor_reproduces_offline_chunks():
    cfg, policy, predictor, _, rng = tiny_setup(seed=1)
    obs = rng.random_f32_grid((OBS_DIM,))
    prop = rng.random_f32_grid((PROPRIO_DIM,))
    eps = rng.normal((policy.chunk_dim,))
    np.testing.assert_array_equal(policy.sample_chunk(obs, prop, eps=eps),
                                  policy.sample_chunk(obs, prop, eps=eps))


def test_log_sigma_clamped():
    cfg, policy, predictor, _, rng = tiny_setup(seed=2)
    predictor.net.params[:] = 50.0
    _, log_sigma = predictor.mean_logsigma(rand_feats(rng, 3))
    assert np.all(log_sigma <= 2.0) and np.all(log_sigma >= -5.0)


# -- actor update -----------------------------------------------------------------


def test_actor_gradient_matches_finite_differences():
    cfg, policy, predictor, noise_critic, rng = tiny_setup(seed=3)
    feats = rand_feats(rng, 4)
    dim = predictor.chunk_dim
    z = SeededRng(4).normal((4, dim))
    beta = 0.5  # small budget so the hinge is active and differentiable a.e.
    from lacework.numcore import autodiff as ad

    def build(params):
        out = predictor.net.forward_graph(ad.leaf(feats.astype(params.dtype)), params)
        mu = ad.slice_last(out, 0, dim)
        log_sigma = ad.clip(ad.slice_last(out, dim, 2 * dim), -5.0, 2.0)
        eps = ad.add(mu, ad.mul(ad.exp(log_sigma), ad.leaf(z.astype(params.dtype))))
        critic_in = ad.concat([ad.leaf(feats.astype(params.dtype)), eps], axis=-1)
        values = []
        for net in noise_critic.nets:
            logits = net.forward_graph(critic_in,
                                       ad.leaf(net.params.astype(params.dtype)))
            probs = ad.softmax(logits)
            atoms = noise_critic.atoms.astype(params.dtype)[:, None]
            values.append(ad.matmul(probs, ad.leaf(atoms)))
        value = ad.mean_all(ad.scale(ad.add(values[0], values[1]), 0.5))
        half_sq = ad.scale(ad.sum_last(ad.square(eps)), 0.5)
        penalty = ad.scale(ad.mean_all(ad.relu(ad.shift(half_sq, -beta))), 1.0)
        return ad.add(ad.neg(value), penalty)

    assert ad.gradient_check(build, predictor.net.params) <= 1e-3


def test_actor_identity_init_constant_critic_zero_gradient():
    cfg, policy, predictor, noise_critic, rng = tiny_setup(seed=5)
    for net in noise_critic.nets:
        net.params[:] = 0.0  # uniform distribution everywhere: constant value
    feats = rand_feats(rng, 8)
    stats = actor_update(predictor, noise_critic, feats, cfg, SeededRng(6),
                         apply_step=False)
    # value is constant and the penalty is inactive at the unit Gaussian
    assert stats["penalty_mean"] == 0.0
    np.testing.assert_allclose(stats["grad"], 0.0, atol=1e-6)


def test_actor_climbs_increasing_stub_critic():
    cfg, policy, predictor, noise_critic, rng = tiny_setup(seed=7)
    cfg = SteerConfig(hidden=(16, 16), batch_size=8, penalty_weight=0.0)
    # hand-built critic: logits put mass on the top atom proportionally to
    # the first noise coordinate
    for net in noise_critic.nets:
        net.params[:] = 0.0
    feats = rand_feats(rng, 8)
    dim = predictor.chunk_dim
    for net in noise_critic.nets:
        w_sl, _ = net.layer_slices()[0]
        w = np.zeros((net.widths[0], net.widths[1]), dtype=np.float32)
        w[feats.shape[1], 0] = 1.0  # first eps coordinate feeds hidden unit 0
        net.params[w_sl] = w.ravel()
        w2_sl, _ = net.layer_slices()[1]
        w2 = np.zeros((net.widths[1], net.widths[2]), dtype=np.float32)
        w2[0, 0] = 1.0
        net.params[w2_sl] = w2.ravel()
        w3_sl, _ = net.layer_slices()[2]
        w3 = np.zeros((net.widths[2], net.widths[3]), dtype=np.float32)
        w3[0, -1] = 4.0  # top-atom logit increases with eps[0]
        net.params[w3_sl] = w3.ravel()
    mu_before = predictor.mean_logsigma(feats)[0][:, 0].mean()
    arng = SeededRng(8)
    history = []
    for _ in range(40):
        stats = actor_update(predictor, noise_critic, feats, cfg, arng)
        history.append(predictor.mean_logsigma(feats)[0][:, 0].mean())
    assert history[-1] > mu_before
    assert history[-1] > history[0]


# -- distillation -------------------------------------------------------------------


def make_batch(rng, n, chunk):
    return {
        "obs": rng.random_f32_grid((n, OBS_DIM)),
        "proprio": rng.random_f32_grid((n, PROPRIO_DIM)),
    }


def test_mixture_fraction_balanced():
    cfg, policy, predictor, _, rng = tiny_setup(seed=9)
    # skew the predictor so its draws differ from unit Gaussian draws
    predictor.net.params[-predictor.chunk_dim:] = 3.0
    feats = rand_feats(rng, 10_000)
    _, from_normal = mixture_noise(predictor, feats, cfg, SeededRng(10))
    frac = float(from_normal.mean())
    assert 0.48 <= frac <= 0.52


def test_distill_constant_target_converges_high():
    cfg, policy, predictor, noise_critic, rng = tiny_setup(seed=11)
    cfg = SteerConfig(hidden=(16, 16), batch_size=8, lr=3e-3)
    ccfg = CriticConfig(n_atoms=11, chunk=2, hidden=(8,), batch_size=8)
    action_critic = DistributionalCritic(ccfg, rng.split("ac"))
    # action critic emits a point mass at the top atom regardless of input
    for net in action_critic.nets:
        net.params[:] = 0.0
        _, b_sl = net.layer_slices()[-1]
        bias = np.zeros(ccfg.chunk * ccfg.n_atoms, dtype=np.float32)
        bias.reshape(ccfg.chunk, ccfg.n_atoms)[:, -1] = 12.0
        net.params[b_sl] = bias
    batch = make_batch(rng, 32, 2)
    drng = SeededRng(12)
    for _ in range(400):
        distill_noise_critic(noise_critic, action_critic, policy, predictor,
                             batch, cfg, drng)
    feats = build_features(batch["obs"], batch["proprio"])
    eps = SeededRng(13).normal((32, policy.chunk_dim))
    values = noise_critic.mean_value(feats, eps)
    assert values.mean() >= 0.95


def test_distill_loss_bounded_by_target_entropy():
    cfg, policy, predictor, noise_critic, rng = tiny_setup(seed=14)
    ccfg = CriticConfig(n_atoms=11, chunk=2, hidden=(8,), batch_size=8)
    action_critic = DistributionalCritic(ccfg, rng.split("ac"))
    batch = make_batch(rng, 16, 2)
    # entropy of the twin-averaged target distribution at chunk position 0
    feats = build_features(batch["obs"], batch["proprio"])
    eps, _ = mixture_noise(predictor, feats, cfg, SeededRng(15))
    chunks = policy.sample_chunk_batch(batch["obs"], batch["proprio"], eps=eps)
    inputs = action_critic._inputs(batch["obs"], batch["proprio"], chunks)
    pa = action_critic._probs(action_critic.nets[0], inputs)[:, 0, :]
    pb = action_critic._probs(action_critic.nets[1], inputs)[:, 0, :]
    target = 0.5 * (pa + pb)
    entropy = float(-(target * np.log(target + 1e-12)).sum(-1).mean())
    loss = distill_noise_critic(noise_critic, action_critic, policy, predictor,
                                batch, cfg, SeededRng(15))
    assert loss >= entropy - 1e-3


def test_kendall_helper():
    assert kendall([1, 2, 3, 4], [2, 4, 6, 8]) == 1.0
    assert kendall([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
