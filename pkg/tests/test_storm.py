import json

import numpy as np
import pytest
import torch

from stormse.checkpoint import save_checkpoint
from stormse.data import DatasetManifest
from stormse.nets import flat_parameters
from stormse.predictor import IdentityPredictor, OraclePredictor, SpectralGatePredictor, ToyPredictorNet
from stormse.sampler import SamplerConfig
from stormse.score_model import ToyScoreNet, dsm_loss, sample_tau
from stormse.sde import SdeConfig
from stormse.storm import (Mode, ResidualPair, RoleMismatchError, SpectrogramPairs, StormConfig, Strategy,
                           TrainSchedule, Trainer, TrainingError, build_models, load_model, refine_infer,
                           storm_infer, storm_losses, storm_train_step)

WIDTHS = (4, 8)


def spec_batch(gen, b=2, f=256, t=16):
    x0 = torch.randn(b, f, t, dtype=torch.complex64, generator=gen) * 0.3
    y = x0 + torch.randn(b, f, t, dtype=torch.complex64, generator=gen) * 0.2
    return x0, y


def models(mode="regen", **kw):
    return build_models(StormConfig(mode=mode, **kw), WIDTHS, WIDTHS, emb_dim=8)


def fixed_noise(x0, gen):
    tau = sample_tau(x0.shape[0], SdeConfig(), gen)
    z = torch.randn(x0.shape, dtype=x0.dtype, generator=gen)
    return tau, z


def test_defaults():
    cfg = StormConfig()
    assert cfg.alpha == 1.0 and cfg.strategy is Strategy.PRETRAIN_JOINT and cfg.mode is Mode.REGEN
    with pytest.raises(ValueError):
        StormConfig(alpha=-1)


@pytest.mark.parametrize("mode,conditioning,index", [
    ("regen", "both", 1), ("regen", "postdenoiser", 0), ("regen", "noisy", None),
    ("generative", "both", 0), ("refine", "both", 0), ("refine", "noisy", 0), ("refine", "postdenoiser", None),
])
def test_prior_skip_follows_the_anchor(mode, conditioning, index, tmp_path):
    cfg = StormConfig(mode=mode, conditioning=conditioning)
    assert cfg.anchor_index == index
    score, _ = build_models(cfg, WIDTHS, WIDTHS, emb_dim=8)
    assert score.prior_ref == index
    save_checkpoint(tmp_path / "s.ckpt", role=score.role, arch=score.arch(),
                    params=flat_parameters(score).numpy())
    loaded, _ = load_model(tmp_path / "s.ckpt")
    assert loaded.arch() == score.arch()


def test_sum_identity(gen):
    score, pred = models()
    x0, y = spec_batch(gen)
    out = storm_losses(score, pred, x0, y, StormConfig(), generator=gen)
    assert out["storm"].item() == (out["dsm"] + out["sup"]).item()


def test_alpha_zero_excludes_supervised_term(gen):
    score, pred = models()
    x0, y = spec_batch(gen)
    out = storm_losses(score, pred, x0, y, StormConfig(alpha=0.0), generator=gen)
    assert out["sup"].item() > 0 and out["storm"].item() == out["dsm"].item()


def test_perfect_predictor_anchor(gen):
    score, _ = models()
    x0, y = spec_batch(gen)
    tau, z = fixed_noise(x0, gen)
    out = storm_losses(score, OraclePredictor(x0), x0, y, StormConfig(), tau=tau, z=z)
    assert out["sup"].item() == 0.0
    ref = dsm_loss(score, x0, y, [y, x0], anchor=x0, tau=tau, z=z)
    assert out["dsm"].item() == ref.item()


def test_joint_gradients_reach_predictor_through_anchor(gen):
    score, pred = models()
    with torch.no_grad():  # the zero-initialised head would hide the path
        for p in score.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen))
    x0, y = spec_batch(gen)
    storm_train_step(score, pred, x0, y, StormConfig(alpha=0.0, strategy="joint"), generator=gen)
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in pred.parameters())


def test_freeze_blocks_predictor_gradients(gen):
    score, pred = models(strategy="pretrain-freeze")
    x0, y = spec_batch(gen)
    storm_train_step(score, pred, x0, y, StormConfig(strategy="pretrain-freeze"), generator=gen)
    assert all(p.grad is None for p in pred.parameters())
    assert all(p.grad is not None for p in score.parameters())


def test_residual_identity(gen):
    x0, y = spec_batch(gen)
    pred = ToyPredictorNet(WIDTHS)
    with torch.no_grad():
        res = ResidualPair.from_prediction(x0, y, pred(y))
    assert res.r_x.shape == res.r_y.shape
    assert torch.allclose(res.r_y - res.r_x, y - x0, atol=1e-6)


def test_mode_algebra_generative_equals_identity_regen(gen):
    torch.manual_seed(0)
    score = ToyScoreNet(2, WIDTHS, 8)
    score.role = "score-regen"
    _, y = spec_batch(gen)
    sc = SamplerConfig(n_steps=5)
    a, ca, anchor_a = storm_infer(score, None, y, StormConfig(mode="generative"), SdeConfig(), sc,
                                  torch.Generator().manual_seed(9))
    b, cb, anchor_b = storm_infer(score, IdentityPredictor(), y, StormConfig(mode="regen"), SdeConfig(), sc,
                                  torch.Generator().manual_seed(9))
    assert torch.equal(a, b) and torch.equal(anchor_a, y) and torch.equal(anchor_b, y)
    assert ca.score_calls == cb.score_calls == 10
    assert ca.predictor_calls == 0 and cb.predictor_calls == 1


def test_mode_algebra_losses(gen):
    torch.manual_seed(0)
    score = ToyScoreNet(2, WIDTHS, 8)
    x0, y = spec_batch(gen)
    tau, z = fixed_noise(x0, gen)
    g = storm_losses(score, None, x0, y, StormConfig(mode="generative"), tau=tau, z=z)
    r = storm_losses(score, IdentityPredictor(), x0, y, StormConfig(mode="regen"), tau=tau, z=z)
    assert g["dsm"].item() == r["dsm"].item()


def test_infer_call_counts(gen):
    score, pred = models()
    _, y = spec_batch(gen, b=1)
    _, counter, _ = storm_infer(score, pred, y, StormConfig(), sampler_cfg=SamplerConfig(n_steps=10, use_corrector=False),
                                generator=gen)
    assert (counter.predictor_calls, counter.score_calls) == (1, 10)
    _, counter, _ = storm_infer(score, pred, y, StormConfig(), sampler_cfg=SamplerConfig(n_steps=50), generator=gen)
    assert (counter.predictor_calls, counter.score_calls) == (1, 100)
    est, counter, anchor = storm_infer(None, pred, y, StormConfig(mode="predictive"), generator=gen)
    assert counter.score_calls == 0 and counter.predictor_calls == 1 and torch.equal(est, anchor)


def test_predictor_swap(gen):
    score, _ = models()
    _, y = spec_batch(gen, b=1)
    est, counter, anchor = storm_infer(score, SpectralGatePredictor(), y, StormConfig(),
                                       sampler_cfg=SamplerConfig(n_steps=4), generator=gen)
    assert est.shape == y.shape and counter.predictor_calls == 1
    assert torch.isfinite(torch.view_as_real(est)).all()


def test_refine_role_mismatch(gen):
    score, pred = models("regen")
    _, y = spec_batch(gen, b=1)
    with pytest.raises(RoleMismatchError):
        refine_infer(score, pred, y, generator=gen)
    refine_score, _ = models("refine")
    with pytest.raises(RoleMismatchError):
        storm_infer(refine_score, pred, y, StormConfig(mode="regen"), generator=gen)
    est, counter, denoised = storm_infer(refine_score, pred, y, StormConfig(mode="refine"),
                                         sampler_cfg=SamplerConfig(n_steps=3), generator=gen)
    assert est.shape == y.shape and counter.score_calls == 6


def test_refine_perfect_predictor_residue_ratio(gen):
    # with D = x0 the noisy residue is pure noise; the generated residue stays comparable to it
    refine_score, _ = models("refine")
    x0, y = spec_batch(gen, b=1)
    est, _, denoised = refine_infer(refine_score, OraclePredictor(x0), y,
                                    sampler_cfg=SamplerConfig(n_steps=5), generator=gen)
    residue = est - denoised
    ratio = (residue.abs().norm() / (y - x0).abs().norm()).item()
    print(f"generated residue / noisy residue norm ratio: {ratio:.3f}")
    assert np.isfinite(ratio)


# --- training loop ----------------------------------------------------------


def tiny_pairs(root, split, limit=None):
    return SpectrogramPairs.from_manifest(DatasetManifest.read(root / "manifest.jsonl"), split, limit)


def schedule(**kw):
    base = dict(steps=4, pretrain_steps=2, batch_size=2, accumulate=1, lr=1e-3, crop_frames=16, valid_every=2,
                patience=10, valid_crop_frames=16, log_every=1)
    base.update(kw)
    return TrainSchedule(**base)


@pytest.mark.parametrize("strategy,phases,main_nets", [
    ("joint", ["main"], ["score", "predictor"]),
    ("pretrain-freeze", ["pretrain", "main"], ["score"]),
    ("pretrain-joint", ["pretrain", "main"], ["score", "predictor"]),
])
def test_strategy_phases(strategy, phases, main_nets):
    cfg = StormConfig(strategy=strategy)
    score, pred = build_models(cfg, WIDTHS, WIDTHS, emb_dim=8)
    t = Trainer(score, pred, cfg, schedule())
    assert t.phases() == phases and t.trainable("main") == main_nets


def test_resume_is_bitwise(tiny_dataset, tmp_path):
    train, valid = tiny_pairs(tiny_dataset, "train"), tiny_pairs(tiny_dataset, "valid", 2)
    cfg = StormConfig()

    def run(out, steps, resume=False):
        score, pred = build_models(cfg, WIDTHS, WIDTHS, emb_dim=8)
        t = Trainer(score, pred, cfg, schedule(steps=steps), out_dir=out, log_wall_time=False)
        if resume:
            t.load("last")
        t.fit(train, valid)
        return t

    full = run(tmp_path / "full", 4)
    run(tmp_path / "part", 2)
    resumed = run(tmp_path / "part", 4, resume=True)
    for name in full.nets:
        a = torch.cat([p.detach().reshape(-1) for p in full.nets[name].parameters()])
        b = torch.cat([p.detach().reshape(-1) for p in resumed.nets[name].parameters()])
        assert torch.equal(a, b)
    assert (tmp_path / "full" / "train_log.jsonl").read_bytes() == (tmp_path / "part" / "train_log.jsonl").read_bytes()
    for tag in ("best", "last"):
        header, _ = __import__("stormse.checkpoint", fromlist=["x"]).read_checkpoint(tmp_path / "full" / tag / "score.ckpt")
        assert header["role"] == "score-regen"
    module, header = load_model(tmp_path / "full" / "last" / "predictor.ckpt")
    assert header["role"] == "predictor" and module.role == "predictor"


def test_validation_loss_decreases(tiny_dataset):
    train, valid = tiny_pairs(tiny_dataset, "train"), tiny_pairs(tiny_dataset, "valid")
    cfg = StormConfig(mode="predictive")
    score, pred = build_models(cfg, WIDTHS, WIDTHS, emb_dim=8)
    t = Trainer(score, pred, cfg, schedule(steps=60, valid_every=20, batch_size=4, crop_frames=32, valid_crop_frames=64),
                log_wall_time=False)
    result = t.fit(train, valid)
    valid_losses = [r["valid_loss"] for r in result.history if "valid_loss" in r]
    assert min(valid_losses) < valid_losses[0]
    assert all("J_DSMS" in r and "lr" in r for r in result.history if "valid_loss" not in r)


def test_non_finite_loss_halts_and_dumps(tiny_dataset, tmp_path):
    train = tiny_pairs(tiny_dataset, "train", 4)
    cfg = StormConfig(strategy="joint")
    score, pred = build_models(cfg, WIDTHS, WIDTHS, emb_dim=8)
    with torch.no_grad():
        next(pred.parameters()).fill_(float("nan"))
    t = Trainer(score, pred, cfg, schedule(), out_dir=tmp_path)
    with pytest.raises(TrainingError, match="non-finite"):
        t.fit(train)
    assert (tmp_path / "crash" / "score.ckpt").exists()


def test_log_records_are_json_lines(tiny_dataset, tmp_path):
    train = tiny_pairs(tiny_dataset, "train", 4)
    cfg = StormConfig(strategy="joint")
    score, pred = build_models(cfg, WIDTHS, WIDTHS, emb_dim=8)
    Trainer(score, pred, cfg, schedule(steps=2), out_dir=tmp_path).fit(train)
    recs = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]
    assert {"J_DSMS", "J_Sup", "J_StoRM", "lr", "wall_time", "phase"} <= set(recs[0])


def test_grad_clip_caps_each_network(tiny_dataset):
    train = tiny_pairs(tiny_dataset, "train", 4)
    cfg = StormConfig(strategy="joint")
    score, pred = build_models(cfg, WIDTHS, WIDTHS, emb_dim=8)
    t = Trainer(score, pred, cfg, schedule(grad_clip=1e-3), log_wall_time=False)
    t.train_step(train)
    for net in (score, pred):
        norm = torch.cat([p.grad.reshape(-1) for p in net.parameters() if p.grad is not None]).norm()
        assert norm <= 1e-3 * (1 + 1e-5)
