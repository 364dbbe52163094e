"""scikit-learn style wrappers around the training and inference pipeline."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import si_sdr
from .sampler import SamplerConfig
from .sde import SdeConfig
from .spectral import StftConfig, Waveform, normalize, to_warped_spectrogram, to_waveform
from .storm import SpectrogramPairs, StormConfig, TrainSchedule, Trainer, _seed, build_models, enhance_waveform
from .validation import check_paired, check_waveforms


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Waveforms to peak-normalized, magnitude-warped complex spectrograms.

    ``transform`` returns a list of complex tensors (F, T); ``inverse_transform``
    needs the lengths and normalization factors recorded by the last
    ``transform`` call unless they are passed explicitly.
    """

    def __init__(self, window_len: int = 510, hop: int = 128, warp: bool = True):
        self.window_len = window_len
        self.hop = hop
        self.warp = warp

    def fit(self, X, y=None):
        check_waveforms(X)
        self.stft_config_ = StftConfig(window_len=self.window_len, hop=self.hop)
        return self

    def transform(self, X):
        check_is_fitted(self, "stft_config_")
        out, self.lengths_, self.factors_ = [], [], []
        for x in check_waveforms(X):
            w = Waveform(x)
            _, noisy, factor = normalize(w, w)
            spec = to_warped_spectrogram(noisy, factor, self.stft_config_)
            if not self.warp:
                from .spectral import remove_warping

                spec = remove_warping(spec)
            out.append(spec.bins)
            self.lengths_.append(len(x))
            self.factors_.append(factor)
        return out

    def inverse_transform(self, S, lengths=None, factors=None):
        check_is_fitted(self, "stft_config_")
        from .spectral import ComplexSpectrogram

        lengths = self.lengths_ if lengths is None else lengths
        factors = self.factors_ if factors is None else factors
        if len(lengths) != len(S) or len(factors) != len(S):
            raise ValueError("need one length and one normalization factor per spectrogram")
        out = []
        for bins, n, f in zip(S, lengths, factors):
            spec = ComplexSpectrogram(bins, warped=self.warp, norm_factor=f)
            out.append(to_waveform(spec, n, self.stft_config_).samples)
        return out


class StormEnhancer(BaseEstimator):
    """Speech restoration estimator: ``fit(noisy, clean)`` then ``predict(noisy)``.

    ``mode`` selects regen (predictor + diffusion), refine, generative (diffusion
    only) or predictive (predictor only).  Waveforms are 16 kHz mono arrays.
    A held-out fraction of the training pairs drives validation and early
    stopping.
    """

    def __init__(self, mode="regen", alpha=1.0, conditioning="both", strategy="pretrain-joint",
                 gamma=1.5, sigma_min=0.05, sigma_max=0.5, t_eps=0.03,
                 n_steps=50, corrector="on", corrector_steps=1, r=0.5,
                 train_steps=2000, pretrain_steps=1000, batch_size=8, accumulate=2, lr=1e-4,
                 crop_frames=256, valid_fraction=0.1, valid_every=100, patience=10, ema_decay=0.999,
                 grad_clip=None, score_widths=(8, 16, 32, 64), predictor_widths=(8, 16, 32, 64), out_dir=None,
                 random_state=0):
        self.mode = mode
        self.alpha = alpha
        self.conditioning = conditioning
        self.strategy = strategy
        self.gamma = gamma
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.t_eps = t_eps
        self.n_steps = n_steps
        self.corrector = corrector
        self.corrector_steps = corrector_steps
        self.r = r
        self.train_steps = train_steps
        self.pretrain_steps = pretrain_steps
        self.batch_size = batch_size
        self.accumulate = accumulate
        self.lr = lr
        self.crop_frames = crop_frames
        self.valid_fraction = valid_fraction
        self.valid_every = valid_every
        self.patience = patience
        self.ema_decay = ema_decay
        self.grad_clip = grad_clip
        self.score_widths = score_widths
        self.predictor_widths = predictor_widths
        self.out_dir = out_dir
        self.random_state = random_state

    # configs derived from the hyper-parameters
    def sde_config(self) -> SdeConfig:
        return SdeConfig(gamma=self.gamma, sigma_min=self.sigma_min, sigma_max=self.sigma_max, t_eps=self.t_eps)

    def sampler_config(self) -> SamplerConfig:
        if self.corrector not in ("on", "off"):
            raise ValueError("corrector must be 'on' or 'off'")
        return SamplerConfig(n_steps=self.n_steps, use_corrector=self.corrector == "on",
                             corrector_steps=self.corrector_steps, r=self.r)

    def storm_config(self) -> StormConfig:
        return StormConfig(alpha=self.alpha, conditioning=self.conditioning, strategy=self.strategy, mode=self.mode)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(steps=self.train_steps, pretrain_steps=self.pretrain_steps, batch_size=self.batch_size,
                             accumulate=self.accumulate, lr=self.lr, crop_frames=self.crop_frames,
                             valid_every=self.valid_every, patience=self.patience, ema_decay=self.ema_decay,
                             grad_clip=self.grad_clip, seed=self.random_state)

    def fit(self, X, y):
        X, y = check_paired(X, y)
        if not 0 <= self.valid_fraction < 1:
            raise ValueError("valid_fraction must be in [0, 1)")
        cfg, sde_cfg, schedule = self.storm_config(), self.sde_config(), self.schedule()
        self.sampler_config()
        pairs = [(Waveform(c), Waveform(n)) for n, c in zip(X, y)]
        order = np.random.default_rng(_seed(self.random_state, 5)).permutation(len(pairs))
        n_valid = int(round(self.valid_fraction * len(pairs))) if len(pairs) > 1 else 0
        valid_idx, train_idx = sorted(order[:n_valid]), sorted(order[n_valid:])
        train = SpectrogramPairs.from_waveforms([pairs[i] for i in train_idx])
        valid = SpectrogramPairs.from_waveforms([pairs[i] for i in valid_idx]) if n_valid else None
        score, predictor = build_models(cfg, tuple(self.score_widths), tuple(self.predictor_widths),
                                        seed=self.random_state, sde_cfg=sde_cfg)
        trainer = Trainer(score, predictor, cfg, schedule, sde_cfg, self.out_dir, log_wall_time=False)
        self.train_result_ = trainer.fit(train, valid)
        trainer.finalize()
        self.score_model_, self.predictor_ = score, predictor
        self.n_train_, self.n_valid_ = len(train), n_valid
        return self

    def predict(self, X, return_counts: bool = False):
        check_is_fitted(self, "predictor_")
        waves = check_waveforms(X)
        cfg, sde_cfg, sampler_cfg = self.storm_config(), self.sde_config(), self.sampler_config()
        out, counts = [], []
        for i, x in enumerate(waves):
            gen = torch.Generator().manual_seed(_seed(self.random_state, 11, i))
            est, counter, _ = enhance_waveform(self.score_model_, self.predictor_, Waveform(x), cfg, sde_cfg,
                                               sampler_cfg, gen)
            out.append(est.samples)
            counts.append(counter.as_dict())
        return (out, counts) if return_counts else out

    def score(self, X, y):
        """Median SI-SDR (dB) of the predictions against the clean references."""
        X, y = check_paired(X, y)
        est = self.predict(X)
        return float(np.median([si_sdr(e, c) for e, c in zip(est, y)]))
