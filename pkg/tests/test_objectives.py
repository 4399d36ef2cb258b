"""Loss oracles: hand values, scalar-loop references, Monte-Carlo KL, GP forms."""

import math

import numpy as np
import pytest
import torch

from cdvae.errors import AlignmentError, IncompleteBreakdownError, ShapeError
from cdvae.modes import Mode
from cdvae.networks import ArchConfig, build_bundle
from cdvae.objectives import (
    LossBreakdown,
    LossWeights,
    breakdown_total,
    cdvae_terms,
    cls_loss,
    kl_loss,
    latent_sim_loss,
    recon_loss,
    total_objective,
    wgan_critic_objective,
)
from cdvae.rng import SeedTree

F64 = torch.float64


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=F64)


# ---------------------------------------------------------------------------
# scalar-loop reference implementations
# ---------------------------------------------------------------------------

def ref_frame_then_batch_mean(per_frame, mask):
    per_utt = []
    for b in range(per_frame.shape[0]):
        vals = [per_frame[b, t] for t in range(per_frame.shape[1]) if mask[b, t] > 0]
        per_utt.append(sum(vals) / len(vals))
    return sum(per_utt) / len(per_utt)


def ref_recon(x_hat, x, mask):
    b_, d_, t_ = x.shape
    per_frame = np.zeros((b_, t_))
    for b in range(b_):
        for t in range(t_):
            per_frame[b, t] = 0.5 * sum((x_hat[b, d, t] - x[b, d, t]) ** 2 for d in range(d_))
    return ref_frame_then_batch_mean(per_frame, mask)


def ref_kl(mu, log_var, mask):
    b_, d_, t_ = mu.shape
    per_frame = np.zeros((b_, t_))
    for b in range(b_):
        for t in range(t_):
            per_frame[b, t] = 0.5 * sum(
                mu[b, d, t] ** 2 + math.exp(log_var[b, d, t]) - 1.0 - log_var[b, d, t]
                for d in range(d_))
    return ref_frame_then_batch_mean(per_frame, mask)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def test_recon_loss_hand_case():
    x = t64([[0.0, 0.0]])          # one frame, two dims, [T, D] layout
    x_hat = t64([[1.0, 1.0]])
    assert recon_loss(x_hat, x).item() == pytest.approx(1.0, abs=1e-15)
    assert recon_loss(x, x).item() == 0.0


def test_recon_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4, 6))
    x_hat = rng.normal(size=(3, 4, 6))
    mask = (rng.uniform(size=(3, 6)) > 0.3).astype(float)
    mask[:, 0] = 1.0  # every utterance keeps at least one frame
    got = recon_loss(t64(x_hat), t64(x), t64(mask)).item()
    assert got == pytest.approx(ref_recon(x_hat, x, mask), rel=1e-12)


def test_recon_loss_shape_guards():
    with pytest.raises(AlignmentError):
        recon_loss(t64(np.ones((2, 3))), t64(np.ones((2, 4))))
    with pytest.raises(ShapeError):
        recon_loss(t64(np.ones((2, 3, 4))), t64(np.ones((2, 3, 4))), t64(np.zeros((2, 4))))


# ---------------------------------------------------------------------------
# KL
# ---------------------------------------------------------------------------

def test_kl_loss_hand_cases():
    mu = t64([[1.0]])
    zeros = t64([[0.0]])
    assert kl_loss(mu, zeros).item() == pytest.approx(0.5, abs=1e-15)
    assert kl_loss(zeros, zeros).item() == 0.0
    # log_var = ln 2: 0.5 * (0 + 2 - 1 - ln 2)
    lv = t64([[math.log(2.0)]])
    assert kl_loss(zeros, lv).item() == pytest.approx(0.5 * (1.0 - math.log(2.0)), abs=1e-15)


def test_kl_loss_matches_scalar_loop():
    rng = np.random.default_rng(1)
    mu = rng.normal(size=(2, 3, 5))
    lv = rng.uniform(-1, 1, size=(2, 3, 5))
    mask = np.ones((2, 5))
    mask[0, 4] = 0.0
    got = kl_loss(t64(mu), t64(lv), t64(mask)).item()
    assert got == pytest.approx(ref_kl(mu, lv, mask), rel=1e-12)


def test_kl_loss_matches_monte_carlo():
    """Closed form agrees with E_q[log q - log p] to better than 1%."""
    rng = np.random.default_rng(2)
    t, d = 12, 4
    mu = rng.normal(size=(t, d))
    lv = rng.uniform(-1.0, 1.0, size=(t, d))
    closed = kl_loss(t64(mu), t64(lv)).item()

    sigma = np.exp(0.5 * lv)
    total = 0.0
    n_chunks, chunk = 20, 10_000
    for _ in range(n_chunks):
        eps = rng.standard_normal(size=(chunk, t, d))
        z = mu[None] + sigma[None] * eps
        # log q(z) - log p(z) summed over dims
        item = 0.5 * (z ** 2 - eps ** 2 - lv[None]).sum(axis=2)  # [chunk, t]
        total += item.mean(axis=0).mean()
    mc = total / n_chunks
    assert abs(mc - closed) / closed < 0.01, f"MC {mc} vs closed {closed}"


# ---------------------------------------------------------------------------
# latent similarity and classification
# ---------------------------------------------------------------------------

def test_latent_sim_hand_cases():
    a = t64([[1.0, -2.0]])
    b = t64([[0.0, 0.0]])
    assert latent_sim_loss(a, b).item() == pytest.approx(3.0, abs=1e-15)
    assert latent_sim_loss(a, a).item() == 0.0


def test_cls_loss_uniform_is_log_n():
    probs = t64(np.full((5, 4), 0.25))  # [T, S]
    assert cls_loss(probs, 2).item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_cls_loss_picks_true_speaker_column():
    probs = t64([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
    got = cls_loss(probs, t64([0]).long() * 0)  # speaker 0 both frames
    want = -(math.log(0.7) + math.log(0.1)) / 2.0
    assert got.item() == pytest.approx(want, rel=1e-12)


def test_cls_loss_floors_zero_probability():
    probs = t64([[0.0, 1.0]])
    got = cls_loss(probs, 0).item()
    assert got == pytest.approx(-math.log(1e-12), rel=1e-9)


def test_cls_loss_guards():
    probs = t64(np.full((2, 3, 4), 1.0 / 3.0))
    with pytest.raises(ShapeError):
        cls_loss(probs, t64([0, 1, 2]).long())  # 3 labels, batch of 2
    with pytest.raises(ShapeError):
        cls_loss(probs, t64([5, 0]).long())  # out of range


def test_mask_with_empty_utterance_is_an_error():
    x = t64(np.ones((2, 3, 4)))
    mask = t64(np.array([[1, 1, 1, 1], [0, 0, 0, 0]], dtype=float))
    with pytest.raises(ShapeError):
        recon_loss(x, x * 0, mask)


# ---------------------------------------------------------------------------
# WGAN-GP critic objective
# ---------------------------------------------------------------------------

def test_wgan_constant_critic_pays_full_penalty():
    """Zero gradients mean GP = 1 and the objective is exactly -gp_coeff."""
    def critic(x, mask):
        return x.sum(dim=(1, 2)) * 0.0 + 3.0

    real = t64(np.random.default_rng(3).normal(size=(4, 5, 6)))
    fake = real + 1.0
    u = t64(np.full(4, 0.5))
    obj, parts = wgan_critic_objective(critic, real, fake, u, gp_coeff=10.0)
    assert parts["w"].item() == 0.0
    assert parts["gp"].item() == pytest.approx(1.0, abs=1e-15)
    assert parts["grad_norm"].item() == 0.0
    assert obj.item() == pytest.approx(-10.0, abs=1e-12)


def test_wgan_linear_critic_unit_norm_escapes_penalty():
    rng = np.random.default_rng(4)
    d, t = 6, 9
    a = np.full(d, math.sqrt(t) / math.sqrt(d))  # ||a|| = sqrt(t)

    def critic(x, mask):
        return torch.einsum("bdt,d->bt", x, t64(a)).mean(dim=1)

    real = t64(rng.normal(size=(3, d, t)))
    fake = t64(rng.normal(size=(3, d, t)))
    u = t64(rng.uniform(size=3))
    obj, parts = wgan_critic_objective(critic, real, fake, u, gp_coeff=10.0)
    w_manual = (np.einsum("bdt,d->bt", real.numpy(), a).mean(axis=1).mean()
                - np.einsum("bdt,d->bt", fake.numpy(), a).mean(axis=1).mean())
    assert parts["gp"].item() == pytest.approx(0.0, abs=1e-24)
    assert parts["grad_norm"].item() == pytest.approx(1.0, abs=1e-12)
    assert obj.item() == pytest.approx(w_manual, rel=1e-12)


def test_wgan_linear_critic_general_penalty_formula():
    rng = np.random.default_rng(5)
    d, t = 4, 7
    a = rng.normal(size=d)

    def critic(x, mask):
        return torch.einsum("bdt,d->bt", x, t64(a)).mean(dim=1)

    real = t64(rng.normal(size=(2, d, t)))
    fake = t64(rng.normal(size=(2, d, t)))
    u = t64(rng.uniform(size=2))
    _, parts = wgan_critic_objective(critic, real, fake, u, gp_coeff=10.0)
    norm = np.linalg.norm(a) / math.sqrt(t)
    assert parts["grad_norm"].item() == pytest.approx(norm, rel=1e-12)
    assert parts["gp"].item() == pytest.approx((norm - 1.0) ** 2, rel=1e-12)


def test_wgan_interpolate_uses_per_utterance_u():
    rng = np.random.default_rng(6)
    real = t64(rng.normal(size=(2, 3, 4)))
    fake = t64(rng.normal(size=(2, 3, 4)))
    u = t64([0.25, 0.75])
    seen = []

    def critic(x, mask):
        seen.append(x.detach().clone())
        return x.sum(dim=(1, 2))

    wgan_critic_objective(critic, real, fake, u, gp_coeff=10.0)
    mix = seen[2]  # calls: real, fake, interpolate
    want = u[:, None, None] * real + (1 - u[:, None, None]) * fake
    assert torch.allclose(mix, want, atol=1e-15)


def test_wgan_shape_guards():
    real = t64(np.ones((2, 3, 4)))
    with pytest.raises(AlignmentError):
        wgan_critic_objective(lambda x, m: x.sum(dim=(1, 2)), real, t64(np.ones((2, 3, 5))),
                              t64([0.5, 0.5]), 10.0)
    with pytest.raises(ShapeError):
        wgan_critic_objective(lambda x, m: x.sum(dim=(1, 2)), real, real, t64([0.5]), 10.0)


# ---------------------------------------------------------------------------
# CDVAE term assembly
# ---------------------------------------------------------------------------

def cdvae_test_bundle(mode=Mode.CDVAE):
    arch = ArchConfig(
        d_latent=5, d_speaker=3,
        input_dims={"SP": 8, "MCC": 4},
        enc_channels={"SP": (6,), "MCC": (5,)},
        dec_channels={"SP": (6,), "MCC": (5,)},
        disc_channels={"SP": (6,), "MCC": (5,)},
        cls_channels=(5,),
    )
    return build_bundle(arch, mode, ["a", "b"], ("MCC",), SeedTree(0))


def test_cdvae_terms_match_manual_composition():
    bundle = cdvae_test_bundle()
    rng = np.random.default_rng(7)
    x = {"SP": t64(rng.uniform(size=(2, 8, 5))), "MCC": t64(rng.uniform(size=(2, 4, 5)))}
    spk = torch.tensor([0, 1])
    terms, aux = cdvae_terms(bundle, x, spk)

    lat_sp = bundle.encode(x["SP"], "SP")
    lat_mcc = bundle.encode(x["MCC"], "MCC")
    want_recon_in = (recon_loss(bundle.decode(lat_sp.mu, spk, "SP"), x["SP"])
                     + recon_loss(bundle.decode(lat_mcc.mu, spk, "MCC"), x["MCC"]))
    want_kld = (kl_loss(lat_sp.mu, lat_sp.log_var) + kl_loss(lat_mcc.mu, lat_mcc.log_var))
    want_cross = (recon_loss(bundle.decode(lat_sp.mu, spk, "MCC"), x["MCC"])
                  + recon_loss(bundle.decode(lat_mcc.mu, spk, "SP"), x["SP"]))
    want_sim = latent_sim_loss(lat_sp.mu, lat_mcc.mu)

    assert torch.equal(terms["recon_in"], want_recon_in)
    assert torch.equal(terms["kld"], want_kld)
    assert torch.equal(terms["recon_cross"], want_cross)
    assert torch.equal(terms["lat_sim"], want_sim)
    assert terms["cdvae_total"].item() == pytest.approx(
        (want_recon_in + want_kld + want_cross + want_sim).item(), rel=1e-15)
    assert set(aux["recon"]) == {("SP", "SP"), ("SP", "MCC"), ("MCC", "SP"), ("MCC", "MCC")}


def test_cdvae_terms_with_noise_reparameterizes():
    bundle = cdvae_test_bundle()
    rng = np.random.default_rng(8)
    x = {"SP": t64(rng.uniform(size=(1, 8, 4))), "MCC": t64(rng.uniform(size=(1, 4, 4)))}
    noise = {"SP": t64(rng.normal(size=(1, 5, 4))), "MCC": t64(rng.normal(size=(1, 5, 4)))}
    spk = torch.tensor([1])
    terms, aux = cdvae_terms(bundle, x, spk, noise=noise)
    lat = bundle.encode(x["SP"], "SP")
    want_z = lat.mu + torch.exp(0.5 * lat.log_var) * noise["SP"]
    assert torch.equal(aux["z"]["SP"], want_z)
    # KL is computed from the distribution, not the draw
    manual_kld = (kl_loss(lat.mu, lat.log_var)
                  + kl_loss(bundle.encode(x["MCC"], "MCC").mu,
                            bundle.encode(x["MCC"], "MCC").log_var))
    assert torch.allclose(terms["kld"], manual_kld, atol=1e-14)


def test_cdvae_terms_vae_mode_has_no_cross_terms():
    bundle = cdvae_test_bundle(Mode.VAE)
    rng = np.random.default_rng(9)
    x = {"SP": t64(rng.uniform(size=(2, 8, 3)))}
    terms, aux = cdvae_terms(bundle, x, torch.tensor([0, 1]))
    assert "recon_cross" not in terms and "lat_sim" not in terms
    assert set(aux["recon"]) == {("SP", "SP")}
    assert terms["cdvae_total"].item() == pytest.approx(
        (terms["recon_in"] + terms["kld"]).item(), rel=1e-15)


def test_cdvae_terms_term_weights_rescale_total():
    bundle = cdvae_test_bundle()
    rng = np.random.default_rng(10)
    x = {"SP": t64(rng.uniform(size=(1, 8, 4))), "MCC": t64(rng.uniform(size=(1, 4, 4)))}
    spk = torch.tensor([0])
    tw = {"recon_in": 2.0, "kld": 0.0, "recon_cross": 0.0, "lat_sim": 3.0}
    terms, _ = cdvae_terms(bundle, x, spk, term_weights=tw)
    want = 2.0 * terms["recon_in"] + 3.0 * terms["lat_sim"]
    assert terms["cdvae_total"].item() == pytest.approx(want.item(), rel=1e-15)


def test_cdvae_terms_per_domain_weights_override_summed_key():
    bundle = cdvae_test_bundle()
    rng = np.random.default_rng(11)
    x = {"SP": t64(rng.uniform(size=(1, 8, 4))), "MCC": t64(rng.uniform(size=(1, 4, 4)))}
    spk = torch.tensor([1])
    tw = {"recon_in_MCC": 0.0, "kld_MCC": 0.0, "recon_cross": 0.0, "lat_sim": 0.0}
    terms, _ = cdvae_terms(bundle, x, spk, term_weights=tw)

    lat_sp = bundle.encode(x["SP"], "SP")
    want = (recon_loss(bundle.decode(lat_sp.mu, spk, "SP"), x["SP"])
            + kl_loss(lat_sp.mu, lat_sp.log_var))
    # the zero-weighted MCC parts drop out of the total but stay in the report
    assert terms["cdvae_total"].item() == pytest.approx(want.item(), rel=1e-12)
    unweighted, _ = cdvae_terms(bundle, x, spk)
    assert terms["cdvae_total"].item() < unweighted["cdvae_total"].item()
    assert torch.equal(terms["recon_in"], unweighted["recon_in"])


def test_cdvae_terms_missing_domain_is_an_error():
    bundle = cdvae_test_bundle()
    x = {"SP": t64(np.ones((1, 8, 3)))}
    with pytest.raises(IncompleteBreakdownError):
        cdvae_terms(bundle, x, torch.tensor([0]))


# ---------------------------------------------------------------------------
# role objectives
# ---------------------------------------------------------------------------

FULL = LossBreakdown(recon_in=1.0, kld=2.0, recon_cross=3.0, lat_sim=4.0, wgan=5.0, cls=6.0)
W = LossWeights(alpha=50.0, lam=1000.0, gp_coeff=10.0)


def test_role_objectives_per_mode():
    vae = total_objective(LossBreakdown(recon_in=1.0, kld=2.0), W, Mode.VAE)
    assert vae == {"encoder": 3.0, "decoder": 3.0}

    cdvae = total_objective(FULL, W, Mode.CDVAE)
    assert cdvae == {"encoder": 10.0, "decoder": 10.0}

    gan = total_objective(FULL, W, Mode.CDVAE_GAN)
    assert gan["encoder"] == gan["decoder"] == pytest.approx(10.0 + 50.0 * 5.0)
    assert gan["critic"] == -5.0
    assert "classifier" not in gan

    full = total_objective(FULL, W, Mode.CDVAE_CLS_GAN)
    assert full["encoder"] == pytest.approx(10.0 + 250.0 - 1000.0 * 6.0)
    assert full["decoder"] == pytest.approx(260.0)
    assert full["critic"] == -5.0
    assert full["classifier"] == 6.0


def test_role_objectives_reject_missing_terms():
    with pytest.raises(IncompleteBreakdownError):
        total_objective(LossBreakdown(recon_in=1.0, kld=2.0), W, Mode.CDVAE)
    with pytest.raises(IncompleteBreakdownError):
        total_objective(LossBreakdown(recon_in=1.0, kld=2.0, recon_cross=3.0, lat_sim=4.0),
                        W, Mode.CDVAE_GAN)
    with pytest.raises(IncompleteBreakdownError):
        total_objective(
            LossBreakdown(recon_in=1.0, kld=2.0, recon_cross=3.0, lat_sim=4.0, wgan=5.0),
            W, Mode.CDVAE_CLS_GAN)


def test_breakdown_total_composition():
    vals = FULL.to_dict()
    assert breakdown_total(vals, W, Mode.VAE) == 3.0
    assert breakdown_total(vals, W, Mode.CDVAE) == 10.0
    assert breakdown_total(vals, W, Mode.CDVAE_GAN) == 10.0 + 250.0
    assert breakdown_total(vals, W, Mode.CDVAE_CLS_GAN) == 10.0 + 250.0 + 6000.0
