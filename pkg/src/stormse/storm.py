"""Stochastic regeneration: joint predictive + diffusion training and two-stage inference."""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .nets import flat_parameters, set_flat_parameters
from .predictor import IdentityPredictor, ToyPredictorNet, predict, supervised_loss
from .sampler import CallCounter, SamplerConfig, init_reverse_state, pc_sample
from .score_model import EMA, ConditioningMode, ToyScoreNet, dsm_loss
from .sde import SdeConfig
from .spectral import (StftConfig, Waveform, normalize, random_crop, to_warped_spectrogram,
                       to_waveform)

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    JOINT = "joint"
    PRETRAIN_FREEZE = "pretrain-freeze"
    PRETRAIN_JOINT = "pretrain-joint"


class Mode(str, enum.Enum):
    REGEN = "regen"
    REFINE = "refine"
    GENERATIVE = "generative"
    PREDICTIVE = "predictive"

    @property
    def uses_score(self) -> bool:
        return self is not Mode.PREDICTIVE

    @property
    def uses_predictor(self) -> bool:
        return self is not Mode.GENERATIVE

    @property
    def score_role(self) -> str | None:
        if self is Mode.REFINE:
            return "score-refine"
        return "score-regen" if self.uses_score else None


@dataclass(frozen=True)
class StormConfig:
    alpha: float = 1.0
    conditioning: ConditioningMode = ConditioningMode.BOTH
    strategy: Strategy = Strategy.PRETRAIN_JOINT
    mode: Mode = Mode.REGEN
    # stop gradients through the predictor output where it anchors the kernel
    detach_anchor: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        object.__setattr__(self, "conditioning", ConditioningMode(self.conditioning))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def anchor_index(self) -> int | None:
        """Position of the diffusion anchor among the conditioning inputs, if present."""
        if self.mode is Mode.GENERATIVE:
            return 0
        if self.mode is Mode.REFINE:
            return None if self.conditioning is ConditioningMode.POST_DENOISER else 0
        if self.mode is Mode.REGEN:
            return {ConditioningMode.NOISY: None, ConditioningMode.POST_DENOISER: 0,
                    ConditioningMode.BOTH: 1}[self.conditioning]
        return None

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "conditioning": self.conditioning.value, "strategy": self.strategy.value,
                "mode": self.mode.value, "detach_anchor": self.detach_anchor}


class TrainingError(RuntimeError):
    pass


class RoleMismatchError(ValueError):
    pass


@dataclass
class ResidualPair:
    r_x: torch.Tensor
    r_y: torch.Tensor

    @classmethod
    def from_prediction(cls, x0, y, denoised) -> "ResidualPair":
        return cls(x0 - denoised, y - denoised)


def build_models(cfg: StormConfig, score_widths=(8, 16, 32, 64), predictor_widths=(8, 16, 32, 64),
                 emb_dim: int = 32, seed: int = 0, sde_cfg: SdeConfig = SdeConfig()):
    """Fresh (score_model, predictor) for a mode; absent networks are ``None``/identity."""
    torch.manual_seed(seed)
    score = None
    if cfg.mode.uses_score:
        score = ToyScoreNet(cfg.conditioning.n_inputs, score_widths, emb_dim, prior_ref=cfg.anchor_index,
                            gamma=sde_cfg.gamma)
        score.role = cfg.mode.score_role
    predictor = ToyPredictorNet(predictor_widths) if cfg.mode.uses_predictor else IdentityPredictor()
    return score, predictor


# --- losses -----------------------------------------------------------------


def storm_losses(score_model, predictor, x0, y, cfg: StormConfig, sde_cfg: SdeConfig = SdeConfig(),
                 generator=None, *, train_predictor: bool = True, tau=None, z=None) -> dict:
    """J_DSMS, J_Sup and J_StoRM = J_DSMS + alpha J_Sup for one batch (tensors, graph attached)."""
    zero = x0.real.new_zeros(())
    if cfg.mode is Mode.PREDICTIVE:
        sup = supervised_loss(predictor, x0, y)
        return {"dsm": zero, "sup": sup, "storm": sup}
    if cfg.mode is Mode.GENERATIVE:
        dsm = dsm_loss(score_model, x0, y, cfg.conditioning.stack(y, y), sde_cfg, generator, tau=tau, z=z)
        return {"dsm": dsm, "sup": zero, "storm": dsm}

    if train_predictor:
        denoised = predictor(y)
    else:
        with torch.no_grad():
            denoised = predictor(y)
    sup = supervised_loss(predictor, x0, y, prediction=denoised)
    anchor = denoised.detach() if cfg.detach_anchor else denoised
    if cfg.mode is Mode.REGEN:
        cond = cfg.conditioning.stack(y, anchor)
        dsm = dsm_loss(score_model, x0, y, cond, sde_cfg, generator, anchor=anchor, tau=tau, z=z)
    else:
        res = ResidualPair.from_prediction(x0, y, anchor)
        cond = cfg.conditioning.stack(res.r_y, anchor)
        dsm = dsm_loss(score_model, res.r_x, res.r_y, cond, sde_cfg, generator, tau=tau, z=z)
    alpha = cfg.alpha if train_predictor else 0.0
    total = dsm + alpha * sup if alpha else dsm
    return {"dsm": dsm, "sup": sup, "storm": total}


def storm_train_step(score_model, predictor, x0, y, cfg: StormConfig, sde_cfg: SdeConfig = SdeConfig(),
                     generator=None, *, train_predictor: bool | None = None, tau=None, z=None) -> dict:
    """Compute the StoRM losses and backpropagate J_StoRM into the parameter gradients."""
    if train_predictor is None:
        train_predictor = cfg.strategy is not Strategy.PRETRAIN_FREEZE
    losses = storm_losses(score_model, predictor, x0, y, cfg, sde_cfg, generator,
                          train_predictor=train_predictor, tau=tau, z=z)
    losses["storm"].backward()
    if not train_predictor and isinstance(predictor, torch.nn.Module):
        assert all(p.grad is None or not p.grad.any() for p in predictor.parameters()), \
            "frozen predictor received a gradient"
    return {k: float(v.detach()) for k, v in losses.items()}


# --- inference --------------------------------------------------------------


def storm_infer(score_model, predictor, y: torch.Tensor, cfg: StormConfig = StormConfig(),
                sde_cfg: SdeConfig = SdeConfig(), sampler_cfg: SamplerConfig = SamplerConfig(),
                generator=None, *, trace=None):
    """Two-stage inference on a warped, normalized spectrogram.

    Returns ``(estimate, counter, anchor)``; ``anchor`` is the predictor output
    (or ``y`` for pure generation).
    """
    counter = CallCounter()
    if cfg.mode is Mode.REFINE:
        return refine_infer(score_model, predictor, y, cfg, sde_cfg, sampler_cfg, generator, trace=trace)
    if cfg.mode is Mode.GENERATIVE:
        anchor = y
    else:
        with torch.no_grad():
            anchor = predict(predictor, y)
        counter.predictor_calls += 1
        if cfg.mode is Mode.PREDICTIVE:
            return anchor, counter, anchor
    _check_role(score_model, "score-regen")
    x_init = init_reverse_state(anchor, sde_cfg, generator).x
    cond = cfg.conditioning.stack(y, anchor)
    x0, counter = pc_sample(score_model, anchor, cond, sde_cfg, sampler_cfg, generator,
                            x_init=x_init, counter=counter, trace=trace)
    return x0, counter, anchor


def refine_infer(score_model, predictor, y, cfg: StormConfig = StormConfig(mode=Mode.REFINE),
                 sde_cfg: SdeConfig = SdeConfig(), sampler_cfg: SamplerConfig = SamplerConfig(),
                 generator=None, *, trace=None):
    """D(y) plus a residue generated by diffusion anchored at y - D(y)."""
    _check_role(score_model, "score-refine")
    counter = CallCounter()
    with torch.no_grad():
        denoised = predict(predictor, y)
    counter.predictor_calls += 1
    r_y = y - denoised
    cond = cfg.conditioning.stack(r_y, denoised)
    residue, counter = pc_sample(score_model, r_y, cond, sde_cfg, sampler_cfg, generator,
                                 counter=counter, trace=trace)
    return denoised + residue, counter, denoised


def _check_role(score_model, expected: str):
    role = getattr(score_model, "role", None)
    if role is not None and role != expected:
        raise RoleMismatchError(f"score model was trained as {role!r}, this inference path needs {expected!r}")


def enhance_waveform(score_model, predictor, noisy: Waveform, cfg: StormConfig = StormConfig(),
                     sde_cfg: SdeConfig = SdeConfig(), sampler_cfg: SamplerConfig = SamplerConfig(),
                     generator=None, stft_cfg: StftConfig = StftConfig()):
    """Normalize, transform, run inference and return ``(waveform, counter, spectrograms)``."""
    _, noisy_n, factor = normalize(noisy, noisy)
    y = to_warped_spectrogram(noisy_n, factor, stft_cfg)
    est, counter, anchor = storm_infer(score_model, predictor, y.bins, cfg, sde_cfg, sampler_cfg, generator)
    out = to_waveform(y.replace(bins=est), len(noisy), stft_cfg)
    return out, counter, {"noisy": y.bins, "anchor": anchor, "output": est}


# --- data -------------------------------------------------------------------


class SpectrogramPairs:
    """In-memory (clean, corrupt) warped spectrogram pairs, normalized per utterance."""

    def __init__(self, clean: list, corrupt: list, ids: list | None = None):
        if len(clean) != len(corrupt):
            raise ValueError("clean/corrupt lists differ in length")
        self.clean = clean
        self.corrupt = corrupt
        self.ids = ids or [str(i) for i in range(len(clean))]

    def __len__(self):
        return len(self.clean)

    @classmethod
    def from_waveforms(cls, pairs, ids=None, stft_cfg: StftConfig = StftConfig()) -> "SpectrogramPairs":
        clean_specs, corrupt_specs = [], []
        for clean, corrupt in pairs:
            c, n, factor = normalize(clean, corrupt)
            clean_specs.append(to_warped_spectrogram(c, factor, stft_cfg).bins)
            corrupt_specs.append(to_warped_spectrogram(n, factor, stft_cfg).bins)
        return cls(clean_specs, corrupt_specs, ids)

    @classmethod
    def from_manifest(cls, manifest, split: str, limit: int | None = None) -> "SpectrogramPairs":
        rows = manifest.split(split)[:limit]
        pairs = []
        for row in rows:
            clean, corrupt, _ = manifest.load(row)
            pairs.append((clean, corrupt))
        return cls.from_waveforms(pairs, [r.id for r in rows])

    def batch(self, indices, crop_frames: int, rng: np.random.Generator | None = None, offset: int | None = None):
        xs, ys = [], []
        for i in indices:
            x, offset_i = random_crop(self.clean[i], crop_frames, rng, offset=offset)
            y, _ = random_crop(self.corrupt[i], crop_frames, offset=offset_i)
            xs.append(x)
            ys.append(y)
        return torch.stack(xs), torch.stack(ys)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


# --- training loop ----------------------------------------------------------


@dataclass
class TrainSchedule:
    steps: int = 2000
    pretrain_steps: int = 1000
    batch_size: int = 8
    accumulate: int = 2
    lr: float = 1e-4
    crop_frames: int = 256
    valid_every: int = 100
    patience: int = 10
    ema_decay: float = 0.999
    seed: int = 0
    valid_crop_frames: int = 256
    log_every: int = 10
    # per-network gradient norm cap; None leaves gradients untouched
    grad_clip: float | None = None


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_valid: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    stopped_early: dict = field(default_factory=dict)


class Trainer:
    """Runs the pre-training and main phases with EMA, validation and early stopping.

    Randomness for step ``k`` (batch order, crop offsets, diffusion times and
    noise) is derived from ``(seed, phase, k)`` alone, so a run resumed from a
    checkpoint continues bit-identically.
    """

    PHASES = ("pretrain", "main")

    def __init__(self, score_model, predictor, cfg: StormConfig, schedule: TrainSchedule,
                 sde_cfg: SdeConfig = SdeConfig(), out_dir=None, log_path=None, log_wall_time: bool = True):
        self.score = score_model
        self.predictor = predictor
        self.cfg = cfg
        self.schedule = schedule
        self.sde_cfg = sde_cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.log_path = Path(log_path) if log_path else (self.out_dir / "train_log.jsonl" if self.out_dir else None)
        self.log_wall_time = log_wall_time
        self.t0 = time.time()
        self.nets = {}
        if score_model is not None:
            self.nets["score"] = score_model
        if isinstance(predictor, torch.nn.Module) and any(True for _ in predictor.parameters()):
            self.nets["predictor"] = predictor
        self.opt = {k: torch.optim.Adam(m.parameters(), lr=schedule.lr) for k, m in self.nets.items()}
        self.ema = {k: EMA(m, schedule.ema_decay) for k, m in self.nets.items()}
        self.phase = self.phases()[0] if self.phases() else "main"
        self.step = 0
        self.best = math.inf
        self.bad = 0
        self.best_snapshot = None
        self.result = TrainResult()

    # phases and trainable sets
    def phases(self) -> list:
        out = []
        if (self.cfg.mode in (Mode.REGEN, Mode.REFINE) and self.cfg.strategy is not Strategy.JOINT
                and "predictor" in self.nets and self.schedule.pretrain_steps > 0):
            out.append("pretrain")
        out.append("main")
        return out

    def trainable(self, phase: str) -> list:
        if phase == "pretrain":
            return ["predictor"]
        names = []
        if "score" in self.nets:
            names.append("score")
        if "predictor" in self.nets and self.train_predictor_in_main:
            names.append("predictor")
        return names

    @property
    def train_predictor_in_main(self) -> bool:
        return self.cfg.mode is Mode.PREDICTIVE or self.cfg.strategy is not Strategy.PRETRAIN_FREEZE

    def phase_steps(self, phase: str) -> int:
        return self.schedule.pretrain_steps if phase == "pretrain" else self.schedule.steps

    # losses
    def _losses(self, phase, x0, y, generator, train: bool):
        if phase == "pretrain":
            sup = supervised_loss(self.predictor, x0, y)
            return {"dsm": sup.new_zeros(()), "sup": sup, "storm": sup}
        return storm_losses(self.score, self.predictor, x0, y, self.cfg, self.sde_cfg, generator,
                            train_predictor=train and self.train_predictor_in_main)

    def _batch_indices(self, n_items: int, phase_id: int, step: int, micro: int):
        s = self.schedule
        out = []
        start = (step * s.accumulate + micro) * s.batch_size
        for pos in range(start, start + s.batch_size):
            epoch, k = divmod(pos, n_items)
            perm = np.random.default_rng(_seed(s.seed, phase_id, epoch, 7)).permutation(n_items)
            out.append(int(perm[k]))
        return out

    def train_step(self, data: SpectrogramPairs) -> dict:
        s = self.schedule
        phase_id = self.PHASES.index(self.phase)
        names = self.trainable(self.phase)
        for name in self.nets:
            self.nets[name].train(name in names)
            for p in self.nets[name].parameters():
                p.grad = None
        totals = {"dsm": 0.0, "sup": 0.0, "storm": 0.0}
        for micro in range(s.accumulate):
            idx = self._batch_indices(len(data), phase_id, self.step, micro)
            rng = np.random.default_rng(_seed(s.seed, phase_id, self.step, micro, 1))
            x0, y = data.batch(idx, s.crop_frames, rng)
            gen = torch.Generator().manual_seed(_seed(s.seed, phase_id, self.step, micro, 2))
            losses = self._losses(self.phase, x0, y, gen, train=True)
            (losses["storm"] / s.accumulate).backward()
            for k in totals:
                totals[k] += float(losses[k].detach()) / s.accumulate
        if not math.isfinite(totals["storm"]):
            self.save("crash")
            raise TrainingError(f"non-finite loss at {self.phase} step {self.step}; state dumped")
        for name in names:
            if s.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(self.nets[name].parameters(), s.grad_clip)
            self.opt[name].step()
            self.ema[name].update(self.nets[name])
        self.step += 1
        return totals

    @torch.no_grad()
    def validate(self, data: SpectrogramPairs) -> float:
        """Mean J_StoRM of the EMA weights on fixed leading crops with fixed noise draws."""
        s = self.schedule
        backups = {k: flat_parameters(m) for k, m in self.nets.items()}
        for k, m in self.nets.items():
            self.ema[k].copy_to(m)
            m.eval()
        total = 0.0
        for i in range(len(data)):
            x0, y = data.batch([i], s.valid_crop_frames, offset=0)
            gen = torch.Generator().manual_seed(_seed(s.seed, 99, i))
            total += float(self._losses(self.phase, x0, y, gen, train=False)["storm"])
        for k, m in self.nets.items():
            set_flat_parameters(m, backups[k])
        return total / max(len(data), 1)

    def _snapshot(self) -> dict:
        return {k: (self.ema[k].flat().clone(), self.ema[k].n_updates) for k in self.nets}

    def _log(self, record: dict):
        if self.log_wall_time:
            record["wall_time"] = round(time.time() - self.t0, 3)
        self.result.history.append(record)
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def fit(self, train: SpectrogramPairs, valid: SpectrogramPairs | None = None) -> TrainResult:
        s = self.schedule
        phases = self.phases()
        has_valid = valid is not None and len(valid) > 0
        for phase in phases[phases.index(self.phase):]:
            if phase != self.phase:
                self.phase, self.step, self.best, self.bad = phase, 0, math.inf, 0
            n_steps = self.phase_steps(phase)
            stopped = False
            while self.step < n_steps:
                losses = self.train_step(train)
                if self.step % s.log_every == 0 or self.step == n_steps:
                    self._log({"phase": phase, "step": self.step, "J_DSMS": losses["dsm"], "J_Sup": losses["sup"],
                               "J_StoRM": losses["storm"], "lr": s.lr})
                if has_valid and (self.step % s.valid_every == 0 or self.step == n_steps):
                    v = self.validate(valid)
                    self._log({"phase": phase, "step": self.step, "valid_loss": v})
                    if v < self.best:
                        self.best, self.bad = v, 0
                        self.result.best_valid[phase] = v
                        self.best_snapshot = self._snapshot()
                        self.save("best")
                    else:
                        self.bad += 1
                    self.save("last")
                    if self.bad >= s.patience:
                        stopped = True
                        break
            self.result.steps[phase] = self.step
            self.result.stopped_early[phase] = stopped
            self.save("last")
            if has_valid and self.best_snapshot is not None and phase != phases[-1]:
                # the next phase starts from the best pre-trained predictor
                flat, n = self.best_snapshot["predictor"]
                self.ema["predictor"].load_flat(flat, n)
                self.ema["predictor"].copy_to(self.predictor)
        return self.result

    def finalize(self) -> None:
        """Load the EMA weights (of the best validation point, if any) into the networks."""
        if self.best_snapshot is not None and self.phase == self.phases()[-1]:
            for k, (flat, n) in self.best_snapshot.items():
                self.ema[k].load_flat(flat, n)
        for name, module in self.nets.items():
            self.ema[name].copy_to(module)
            module.eval()

    # checkpoints
    def meta(self, name: str) -> dict:
        return {"phase": self.phase, "step": self.step, "best_valid": self.best if math.isfinite(self.best) else None,
                "bad_validations": self.bad, "ema_updates": self.ema[name].n_updates,
                "sde": asdict(self.sde_cfg), "storm": self.cfg.as_dict(), "schedule": asdict(self.schedule)}

    def save(self, tag: str) -> None:
        if self.out_dir is None:
            return
        for name, module in self.nets.items():
            role = "predictor" if name == "predictor" else self.cfg.mode.score_role
            params = list(module.parameters())
            ckpt.save_checkpoint(self.out_dir / tag / f"{name}.ckpt", role=role, arch=module.arch(),
                                 params=flat_parameters(module).numpy(), ema=self.ema[name].flat().numpy(),
                                 adam=ckpt.adam_state_vectors(self.opt[name], params), meta=self.meta(name))

    def load(self, tag: str = "last") -> None:
        for name, module in self.nets.items():
            header, sec = ckpt.read_checkpoint(self.out_dir / tag / f"{name}.ckpt")
            set_flat_parameters(module, torch.as_tensor(sec["params"].copy()))
            meta = header["meta"]
            self.ema[name].load_flat(torch.as_tensor(sec["ema"].copy()), meta["ema_updates"])
            params = list(module.parameters())
            self.opt[name] = torch.optim.Adam(params, lr=self.schedule.lr)
            ckpt.load_adam_state(self.opt[name], params, sec.get("adam_exp_avg"), sec.get("adam_exp_avg_sq"),
                                 header["adam_step"])
            self.phase, self.step, self.bad = meta["phase"], meta["step"], meta["bad_validations"]
            self.best = meta["best_valid"] if meta["best_valid"] is not None else math.inf
        if math.isfinite(self.best):
            self.result.best_valid[self.phase] = self.best
        best_dir = self.out_dir / "best"
        if tag != "best" and all((best_dir / f"{k}.ckpt").exists() for k in self.nets):
            snap = {}
            for name in self.nets:
                header, sec = ckpt.read_checkpoint(best_dir / f"{name}.ckpt")
                snap[name] = (torch.as_tensor(sec["ema"].copy()), header["meta"]["ema_updates"])
            self.best_snapshot = snap
        self._truncate_log()

    def _truncate_log(self) -> None:
        # drop records written after the checkpoint we resumed from
        if not (self.log_path and self.log_path.exists()):
            return
        here = (self.PHASES.index(self.phase), self.step)
        keep = []
        for line in self.log_path.read_text().splitlines():
            rec = json.loads(line)
            if (self.PHASES.index(rec["phase"]), rec["step"]) <= here:
                keep.append(line)
        self.log_path.write_text("".join(k + "\n" for k in keep))
        self.result.history = [json.loads(k) for k in keep]


def train_loop(score_model, predictor, train: SpectrogramPairs, valid: SpectrogramPairs | None,
               schedule: TrainSchedule, cfg: StormConfig = StormConfig(), sde_cfg: SdeConfig = SdeConfig(),
               out_dir=None, resume: bool = False, log_wall_time: bool = True):
    trainer = Trainer(score_model, predictor, cfg, schedule, sde_cfg, out_dir, log_wall_time=log_wall_time)
    if resume:
        trainer.load("last")
    result = trainer.fit(train, valid)
    trainer.finalize()
    return result


def load_model(path, *, use_ema: bool = True):
    """Rebuild a network from a checkpoint; returns ``(module, header)``."""
    header, sec = ckpt.read_checkpoint(path)
    arch = dict(header["arch"])
    kind = arch.pop("kind")
    if kind == "ToyScoreNet":
        module = ToyScoreNet(arch["n_conditioning"], tuple(arch["widths"]), arch["emb_dim"],
                             prior_ref=arch.get("prior_ref"), prior_std=arch.get("prior_std", 0.4),
                             gamma=arch.get("gamma", SdeConfig.gamma))
    elif kind == "ToyPredictorNet":
        module = ToyPredictorNet(tuple(arch["widths"]), arch["residual"])
    else:
        raise ckpt.CheckpointError(f"unknown architecture {kind!r}")
    flat = sec["ema"] if use_ema and "ema" in sec else sec["params"]
    set_flat_parameters(module, torch.as_tensor(flat.copy()))
    module.role = header["role"]
    module.eval()
    return module, header
