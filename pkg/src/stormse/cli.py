"""``stormse`` command-line interface.

Subcommands: synth-data, train, enhance, evaluate, simulate-sde.  Every run
directory receives a ``run_config.txt`` holding the merged configuration.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, make_dataset
from .metrics import EvalReport, compare_reports, evaluate_pair
from .sampler import SamplerConfig
from .sde import SdeConfig
from .spectral import read_wav, write_wav
from .storm import (Mode, RoleMismatchError, SpectrogramPairs, StormConfig, TrainSchedule, Trainer, build_models,
                    enhance_waveform, load_model, _seed)
from .predictor import IdentityPredictor

log = logging.getLogger("stormse")

RUN_CONFIG_NAME = "run_config.txt"


class UsageError(Exception):
    pass


# --- RunConfig --------------------------------------------------------------


@dataclass
class RunConfig:
    """Merged view of every setting a command depends on."""

    command: str = ""
    seed: int = 0
    sde: SdeConfig = field(default_factory=SdeConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    storm: StormConfig = field(default_factory=StormConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    SECTIONS = ("sde", "sampler", "storm", "train")

    def items(self):
        yield "run.command", self.command
        yield "run.seed", self.seed
        for name in self.SECTIONS:
            obj = getattr(self, name)
            values = obj.as_dict() if isinstance(obj, StormConfig) else asdict(obj)
            for k, v in values.items():
                yield f"{name}.{k}", v
        for k, v in sorted(self.paths.items()):
            yield f"paths.{k}", v
        for k, v in sorted(self.options.items()):
            yield f"options.{k}", v

    def to_text(self) -> str:
        lines = ["# stormse run configuration (key = JSON value)"]
        lines += [f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}" for k, v in self.items()]
        return "\n".join(lines) + "\n"

    def save(self, directory) -> Path:
        path = Path(directory) / RUN_CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def update(self, overrides: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides, validating keys and types."""
        grouped: dict = {}
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            grouped.setdefault(section, {})[name] = value
        for section, values in grouped.items():
            if section == "run":
                for k, v in values.items():
                    if k not in ("command", "seed"):
                        raise UsageError(f"unknown config key run.{k}")
                    setattr(self, k, int(v) if k == "seed" else v)
            elif section in ("paths", "options"):
                getattr(self, section).update(values)
            elif section in self.SECTIONS:
                obj = getattr(self, section)
                known = {f.name: f for f in fields(obj)}
                for k in values:
                    if k not in known:
                        raise UsageError(f"unknown config key {section}.{k}")
                values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
                try:
                    setattr(self, section, replace(obj, **values))
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"invalid {section} setting: {exc}") from exc
            else:
                raise UsageError(f"unknown config section {section!r}")
        return self

    @classmethod
    def parse_text(cls, text: str) -> dict:
        out = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"config line {lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
        return out

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().update(cls.parse_text(text))


# flag dest -> config key; flags default to None so only explicit ones override
FLAG_KEYS = {
    "seed": "run.seed",
    "gamma": "sde.gamma", "sigma_min": "sde.sigma_min", "sigma_max": "sde.sigma_max",
    "t_eps": "sde.t_eps",
    "steps": "sampler.n_steps", "corrector_steps": "sampler.corrector_steps", "r": "sampler.r",
    "alpha": "storm.alpha", "conditioning": "storm.conditioning", "strategy": "storm.strategy",
    "mode": "storm.mode",
    "train_steps": "train.steps", "pretrain_steps": "train.pretrain_steps", "batch_size": "train.batch_size",
    "accumulate": "train.accumulate", "lr": "train.lr", "crop_frames": "train.crop_frames",
    "valid_every": "train.valid_every", "patience": "train.patience", "ema_decay": "train.ema_decay",
    "grad_clip": "train.grad_clip",
}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        cfg.update(RunConfig.parse_text(path.read_text()))
        cfg.command = args.command
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "corrector", None) is not None:
        overrides["sampler.use_corrector"] = args.corrector == "on"
    cfg.update(overrides)
    cfg.train = replace(cfg.train, seed=cfg.seed)
    return cfg


# --- helpers ----------------------------------------------------------------


def _jobs(args) -> int:
    n = getattr(args, "jobs", None)
    return max(1, n if n else (os.cpu_count() or 1))


def _check_device(args) -> None:
    device = getattr(args, "device", None) or "cpu"
    if device != "cpu":
        log.warning("device hint %r ignored: this build computes on the CPU", device)


def _utterance_generator(seed: int, uid: str) -> torch.Generator:
    return torch.Generator().manual_seed(_seed(seed, *uid.encode("utf-8")))


def _run_parallel(fn, items, jobs: int):
    """Map ``fn`` over items; results keep the input order regardless of ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(fn)(item) for item in items)


def _load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = DatasetManifest.read(path)
    manifest.validate()
    return manifest


# --- synth-data -------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = resolve_config(args)
    cfg.paths["out"] = str(args.out)
    cfg.options.update({"task": args.task, "n_train": args.n_train, "n_valid": args.n_valid,
                        "n_test": args.n_test, "min_duration": args.min_duration,
                        "max_duration": args.max_duration})
    manifest = make_dataset(args.task, args.out, args.n_train, args.n_valid, args.n_test, cfg.seed,
                            (args.min_duration, args.max_duration))
    cfg.save(args.out)
    print(f"wrote {len(manifest.rows)} utterances to {Path(args.out) / 'manifest.jsonl'}")
    return 0


# --- train ------------------------------------------------------------------


def _widths(text) -> tuple:
    return tuple(int(w) for w in str(text).split(","))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _check_device(args)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    cfg.paths.update({"manifest": str(args.manifest), "out": str(out)})
    cfg.options.update({"score_widths": list(_widths(args.score_widths)),
                        "predictor_widths": list(_widths(args.predictor_widths)),
                        "limit_train": args.limit_train, "limit_valid": args.limit_valid})
    train = SpectrogramPairs.from_manifest(manifest, "train", args.limit_train)
    valid = SpectrogramPairs.from_manifest(manifest, "valid", args.limit_valid)
    if len(train) == 0:
        raise ValueError("manifest has no training rows")
    score, predictor = build_models(cfg.storm, _widths(args.score_widths), _widths(args.predictor_widths),
                                    seed=cfg.seed, sde_cfg=cfg.sde)
    trainer = Trainer(score, predictor, cfg.storm, cfg.train, cfg.sde, out, log_wall_time=args.log_wall_time)
    if args.resume:
        if not (out / "last").exists():
            raise FileNotFoundError(f"nothing to resume in {out / 'last'}")
        trainer.load("last")
    elif (out / "train_log.jsonl").exists():
        (out / "train_log.jsonl").unlink()
    cfg.save(out)
    result = trainer.fit(train, valid if len(valid) else None)
    trainer.finalize()
    for name, module in trainer.nets.items():
        module.train(False)
    summary = {"steps": result.steps, "best_valid": result.best_valid, "stopped_early": result.stopped_early}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


# --- enhance ----------------------------------------------------------------


def _ckpt_dir(path) -> Path:
    path = Path(path)
    if (path / "best").is_dir():
        return path / "best"
    return path


def load_pipeline(ckpt, mode: str | None):
    """Load networks from a checkpoint directory; returns (score, predictor, StormConfig)."""
    directory = _ckpt_dir(ckpt)
    score_path, pred_path = directory / "score.ckpt", directory / "predictor.ckpt"
    if not score_path.exists() and not pred_path.exists():
        raise FileNotFoundError(f"no score.ckpt or predictor.ckpt in {directory}")
    score = predictor = None
    meta = {}
    if score_path.exists():
        score, header = load_model(score_path)
        meta = header["meta"]
    if pred_path.exists():
        predictor, header = load_model(pred_path)
        meta = meta or header["meta"]
    stored = meta.get("storm", {})
    trained_mode = stored.get("mode")
    mode = Mode(mode or trained_mode or "regen")
    if mode.uses_score:
        if score is None:
            raise RoleMismatchError(f"--mode {mode.value} needs a score model, {directory} has none")
        if score.role != mode.score_role or (trained_mode == "generative") != (mode is Mode.GENERATIVE):
            raise RoleMismatchError(f"checkpoint role {score.role!r} (trained as {trained_mode}) "
                                    f"does not match --mode {mode.value}")
    if mode.uses_predictor and predictor is None:
        raise RoleMismatchError(f"--mode {mode.value} needs a predictor, {directory} has none")
    if not mode.uses_predictor:
        predictor = IdentityPredictor()
    conditioning = stored.get("conditioning", "both")
    storm_cfg = StormConfig(alpha=stored.get("alpha", 1.0), conditioning=conditioning,
                            strategy=stored.get("strategy", "pretrain-joint"), mode=mode)
    sde_cfg = SdeConfig(**meta["sde"]) if "sde" in meta else SdeConfig()
    return score, predictor, storm_cfg, sde_cfg


def _dump_spectrograms(directory: Path, uid: str, specs: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory.mkdir(parents=True, exist_ok=True)
    for kind, bins in specs.items():
        mag = 20 * np.log10(np.abs(bins.detach().cpu().numpy()) + 1e-6)
        fig, ax = plt.subplots(figsize=(6, 3), dpi=100)
        ax.imshow(mag, origin="lower", aspect="auto", cmap="magma", vmin=-60, vmax=max(float(mag.max()), -59))
        ax.set_title(f"{uid} {kind}")
        ax.set_xlabel("frame")
        ax.set_ylabel("bin")
        fig.tight_layout()
        fig.savefig(directory / f"{uid}_{kind}.png", metadata={"Software": None})
        plt.close(fig)


@dataclass
class _EnhanceJob:
    uid: str
    noisy_path: str
    out_path: str
    clean_path: str | None
    ckpt: str
    mode: str
    run: dict
    dump_dir: str | None


def _enhance_one(job: _EnhanceJob):
    if job.run.get("single_thread"):
        torch.set_num_threads(1)
    score, predictor, storm_cfg, sde_cfg = load_pipeline(job.ckpt, job.mode)
    sde_cfg = SdeConfig(**job.run["sde"]) if job.run.get("sde") else sde_cfg
    sampler_cfg = SamplerConfig(**job.run["sampler"])
    noisy = read_wav(job.noisy_path)
    gen = _utterance_generator(job.run["seed"], job.uid)
    out, counter, specs = enhance_waveform(score, predictor, noisy, storm_cfg, sde_cfg, sampler_cfg, gen)
    write_wav(job.out_path, out)
    sidecar = {"id": job.uid, **counter.as_dict(), "n_steps": sampler_cfg.n_steps,
               "corrector": sampler_cfg.corrector_active, "corrector_steps": sampler_cfg.corrector_steps,
               "mode": storm_cfg.mode.value, "n_samples": len(out)}
    Path(job.out_path).with_suffix(".calls.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    if job.dump_dir:
        if job.clean_path:
            from .spectral import normalize, to_warped_spectrogram

            clean, noisy_n, factor = normalize(read_wav(job.clean_path), noisy)
            specs = {"clean": to_warped_spectrogram(clean, factor).bins, **specs}
        _dump_spectrograms(Path(job.dump_dir), job.uid, specs)
    return sidecar


def _sde_overrides(args, cfg: RunConfig) -> dict | None:
    keys = ("gamma", "sigma_min", "sigma_max", "t_eps")
    if getattr(args, "config", None) or any(getattr(args, k, None) is not None for k in keys):
        return asdict(cfg.sde)
    return None


def cmd_enhance(args) -> int:
    cfg = resolve_config(args)
    _check_device(args)
    mode = args.mode
    # fail early (before any worker starts) on a role mismatch
    _, _, storm_cfg, _ = load_pipeline(args.ckpt, mode)
    cfg.storm = storm_cfg
    run = {"seed": cfg.seed, "sampler": asdict(cfg.sampler), "sde": _sde_overrides(args, cfg),
           "single_thread": _jobs(args) > 1}
    dump = None
    if args.input:
        if not args.output:
            raise UsageError("--input requires --output")
        out_path = Path(args.output)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if args.dump_spectrograms:
            dump = str(out_path.parent / "spectrograms")
        uid = Path(args.input).stem
        jobs = [_EnhanceJob(uid, str(args.input), str(out_path), None, str(args.ckpt), storm_cfg.mode.value,
                            run, dump)]
        run_dir = out_path.parent
        cfg.paths.update({"input": str(args.input), "output": str(out_path), "ckpt": str(args.ckpt)})
    else:
        if not (args.manifest and args.out):
            raise UsageError("give either --input/--output or --manifest/--out")
        manifest = _load_manifest(args.manifest)
        rows = sorted(manifest.split(args.split), key=lambda r: r.id)[: args.limit]
        run_dir = Path(args.out)
        run_dir.mkdir(parents=True, exist_ok=True)
        if args.dump_spectrograms:
            dump = str(run_dir / "spectrograms")
        jobs = [_EnhanceJob(r.id, str(manifest.resolve(r.corrupt_path)), str(run_dir / f"{r.id}.wav"),
                            str(manifest.resolve(r.clean_path)), str(args.ckpt), storm_cfg.mode.value, run, dump)
                for r in rows]
        cfg.paths.update({"manifest": str(args.manifest), "out": str(run_dir), "ckpt": str(args.ckpt)})
        cfg.options["split"] = args.split
    cfg.save(run_dir)
    sidecars = _run_parallel(_enhance_one, jobs, _jobs(args))
    total = {"score_calls": sum(s["score_calls"] for s in sidecars),
             "predictor_calls": sum(s["predictor_calls"] for s in sidecars), "n_files": len(sidecars)}
    print(json.dumps(total, sort_keys=True))
    return 0


# --- evaluate ---------------------------------------------------------------


def _evaluate_dir(manifest: DatasetManifest, rows, enhanced: str | None, label: str) -> EvalReport:
    records = []
    for row in rows:
        clean, corrupt, noise = manifest.load(row)
        counts = None
        if enhanced is None:
            estimate = corrupt
        else:
            path = Path(enhanced) / f"{row.id}.wav"
            if not path.exists():
                from .metrics import EvalRecord

                records.append(EvalRecord(row.id, float("nan"), error=f"missing {path}"))
                continue
            estimate = read_wav(path)
            side = path.with_suffix(".calls.json")
            counts = json.loads(side.read_text()) if side.exists() else None
        records.append(evaluate_pair(row.id, estimate, clean, noise, counts))
    return EvalReport(records, label)


def _sweep_report(manifest, rows, ckpt, n_steps: int, cfg: RunConfig, jobs: int) -> EvalReport:
    def run(row):
        score, predictor, storm_cfg, sde_cfg = load_pipeline(ckpt, cfg.storm.mode.value if cfg.options.get(
            "explicit_mode") else None)
        sampler_cfg = replace(cfg.sampler, n_steps=n_steps)
        clean, corrupt, noise = manifest.load(row)
        out, counter, _ = enhance_waveform(score, predictor, corrupt, storm_cfg, sde_cfg, sampler_cfg,
                                           _utterance_generator(cfg.seed, row.id))
        return evaluate_pair(row.id, out, clean, noise, counter.as_dict())

    records = _run_parallel(run, rows, jobs)
    return EvalReport(records, f"N={n_steps}")


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    manifest = _load_manifest(args.manifest)
    rows = sorted(manifest.split(args.split), key=lambda r: r.id)[: args.limit]
    cfg.paths.update({"manifest": str(args.manifest), "enhanced": args.enhanced, "compare": args.compare,
                      "report_path": args.report_path, "ckpt": args.ckpt})
    cfg.options.update({"split": args.split, "steps_sweep": args.steps_sweep,
                        "explicit_mode": args.mode is not None})
    reports = []
    if args.steps_sweep:
        if not args.ckpt:
            raise UsageError("--steps-sweep needs --ckpt")
        try:
            sweep = [int(n) for n in args.steps_sweep.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad --steps-sweep {args.steps_sweep!r}") from exc
        reports = [_sweep_report(manifest, rows, args.ckpt, n, cfg, _jobs(args)) for n in sweep]
        lines = [f"{'N':>4} {'si_sdr_med':>10} {'si_sdr_mean':>11} {'score_calls':>11}"]
        for n, rep in zip(sweep, reports):
            agg = rep.aggregate().get("si_sdr", {"median": math.nan, "mean": math.nan})
            calls = rep.records[0].score_calls if rep.records else 0
            lines.append(f"{n:>4} {agg['median']:10.3f} {agg['mean']:11.3f} {calls:>11}")
        print("\n".join(lines))
    else:
        label = args.enhanced or "noisy"
        reports = [_evaluate_dir(manifest, rows, args.enhanced, label)]
        print(reports[0].to_table(), end="")
        if args.compare:
            other_dir = None if args.compare == "noisy" else args.compare
            other = _evaluate_dir(manifest, rows, other_dir, args.compare)
            reports.append(other)
            print(other.to_table(), end="")
            deltas = compare_reports(reports[0], other)
            print(f"# delta ({args.compare} - {label})")
            for m, d in deltas.items():
                print(f"{m:<8} mean {d['mean']:+9.3f} median {d['median']:+9.3f}")
    if args.report_path:
        path = Path(args.report_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(r.to_jsonl() for r in reports))
        cfg.save(path.parent)
    n_errors = sum(len(r.errors) for r in reports)
    if n_errors:
        for r in reports:
            for rec in r.errors:
                print(f"error {rec.id}: {rec.error}", file=sys.stderr)
        return 1
    return 0


# --- simulate-sde -----------------------------------------------------------


def cmd_simulate_sde(args) -> int:
    from .oracles import OracleReport, gaussian_reverse_recovery, kernel_reports
    from .sde import forward_simulate, kernel_mean, kernel_std

    cfg = resolve_config(args)
    sde_cfg = cfg.sde
    taus = [float(t) for t in args.taus.split(",")]
    n_grid = int(round(sde_cfg.t_max / args.dt))
    gen = torch.Generator().manual_seed(cfg.seed)
    x0 = torch.full((args.n_paths,), args.x0, dtype=torch.float64)
    y = torch.full((args.n_paths,), args.y, dtype=torch.float64)
    path = forward_simulate(x0, y, n_grid, gen, sde_cfg)
    reports = []
    trace_rows = []
    for state in path:
        tau = state.tau
        trace_rows.append(("forward", tau, float(state.x.mean()), float(state.x.std()),
                           float(kernel_mean(x0[:1], y[:1], tau, sde_cfg)[0]), float(kernel_std(tau, sde_cfg))))
    for tau in taus:
        state = path[int(round(tau / args.dt))]
        scale = abs(args.y - args.x0)
        mean_cf = float(kernel_mean(x0[:1], y[:1], tau, sde_cfg)[0])
        reports.append(OracleReport(f"forward_mean(tau={tau:g})", float(state.x.mean()) / scale, mean_cf / scale,
                                    0.01, relative=False))
        reports.append(OracleReport(f"forward_std(tau={tau:g})", float(state.x.std()), float(kernel_std(tau, sde_cfg)),
                                    0.02))
    sampler_cfg = cfg.sampler
    mean, std, _ = gaussian_reverse_recovery(sde_cfg, args.prior_mean, args.prior_std, args.y, sampler_cfg,
                                             args.n_chains, cfg.seed)
    reports.append(OracleReport("reverse_mean", mean, args.prior_mean, 0.02))
    reports.append(OracleReport("reverse_std", std, args.prior_std, 0.05))
    if args.trace:
        import stormse.score_model as sm
        from .sampler import pc_sample

        model = sm.AnalyticGaussianScore(sm.GaussianPrior(args.prior_mean, args.prior_std), args.y, sde_cfg)
        trace = []
        anchor = torch.full((min(args.n_chains, 10_000),), args.y, dtype=torch.float64)
        pc_sample(model, anchor, None, sde_cfg, sampler_cfg, torch.Generator().manual_seed(cfg.seed), trace=trace)
        for tau, x in trace:
            trace_rows.append(("reverse", tau, float(x.mean()), float(x.std()), math.nan, math.nan))
        path_out = Path(args.trace)
        path_out.parent.mkdir(parents=True, exist_ok=True)
        with open(path_out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["process", "tau", "mean", "std", "closed_mean", "closed_std"])
            for row in trace_rows:
                w.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])
        cfg.paths["trace"] = str(path_out)
    if args.emit_oracle_report:
        oracle = kernel_reports(sde_cfg, tuple(taus), args.n_paths, args.dt, cfg.seed, args.x0, args.y)
        reports.extend(oracle)
        out = Path(args.emit_oracle_report)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(json.dumps({**asdict(r), "error": r.error, "passed": r.passed}, sort_keys=True) + "\n"
                               for r in reports))
        cfg.paths["oracle_report"] = str(out)
    for r in reports:
        print(r.line())
    if args.out:
        cfg.options.update({k: getattr(args, k) for k in ("taus", "n_paths", "dt", "x0", "y", "prior_mean",
                                                            "prior_std", "n_chains")})
        cfg.save(args.out)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


# --- parser -----------------------------------------------------------------


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--config", help="key = value configuration file; explicit flags override it")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available CPUs)")
    p.add_argument("--device", default=None, help="device hint; only 'cpu' is supported")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_sde(p):
    g = p.add_argument_group("SDE")
    g.add_argument("--gamma", type=float, default=None, help="stiffness gamma (default 1.5)")
    g.add_argument("--sigma-min", type=float, default=None, help="sigma_min (default 0.05)")
    g.add_argument("--sigma-max", type=float, default=None, help="sigma_max (default 0.5)")
    g.add_argument("--t-eps", type=float, default=None, help="minimal training diffusion time (default 0.03)")


def _add_sampler(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--steps", type=int, default=None, help="reverse steps N (default 50)")
    g.add_argument("--corrector", choices=("on", "off"), default=None, help="Langevin corrector (default on)")
    g.add_argument("--corrector-steps", type=int, default=None, help="corrector steps per level (default 1)")
    g.add_argument("--r", type=float, default=None, help="corrector step size r (default 0.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stormse", description="Stochastic regeneration speech restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic paired corpus and manifest")
    p.add_argument("--task", choices=("denoise", "dereverb"), default="denoise")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-valid", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--min-duration", type=float, default=2.0, help="seconds")
    p.add_argument("--max-duration", type=float, default=4.0, help="seconds")
    _add_common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train predictor and/or score model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=None, help="default regen")
    p.add_argument("--strategy", choices=("joint", "pretrain-freeze", "pretrain-joint"), default=None,
                   help="default pretrain-joint")
    p.add_argument("--alpha", type=float, default=None, help="supervised loss weight (default 1)")
    p.add_argument("--conditioning", choices=("noisy", "postdenoiser", "both"), default=None, help="default both")
    p.add_argument("--train-steps", type=int, default=None, help="main-phase optimizer steps (default 2000)")
    p.add_argument("--pretrain-steps", type=int, default=None, help="predictor pre-training steps (default 1000)")
    p.add_argument("--batch-size", type=int, default=None, help="default 8")
    p.add_argument("--accumulate", type=int, default=None, help="gradient accumulation (default 2)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-4)")
    p.add_argument("--crop-frames", type=int, default=None, help="training crop length in frames (default 256)")
    p.add_argument("--valid-every", type=int, default=None, help="default 100")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience in validations (default 10)")
    p.add_argument("--ema-decay", type=float, default=None, help="default 0.999")
    p.add_argument("--grad-clip", type=float, default=None, help="per-network gradient norm cap (default off)")
    p.add_argument("--score-widths", default="8,16,32,64")
    p.add_argument("--predictor-widths", default="8,16,32,64")
    p.add_argument("--limit-train", type=int, default=None, help="use only the first N training rows")
    p.add_argument("--limit-valid", type=int, default=None, help="use only the first N validation rows")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last")
    p.add_argument("--log-wall-time", action="store_true", help="add wall-clock times to the training log")
    _add_sde(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="restore a file or a manifest split")
    p.add_argument("--ckpt", required=True, help="run directory (uses best/) or checkpoint directory")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=None,
                   help="inference mode (default: the mode the checkpoint was trained for)")
    p.add_argument("--input", help="single noisy WAV")
    p.add_argument("--output", help="output WAV for --input")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None, help="first N rows of the split")
    p.add_argument("--out", help="output directory for manifest mode")
    p.add_argument("--dump-spectrograms", action="store_true", help="write magnitude images per utterance")
    _add_sampler(p)
    _add_sde(p)
    _add_common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score enhanced outputs (or the noisy inputs) against references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--enhanced", default=None, help="directory of enhanced WAVs (default: evaluate noisy inputs)")
    p.add_argument("--compare", default=None, help="second enhanced directory (or 'noisy') to diff against")
    p.add_argument("--report-path", default=None, help="write line-delimited JSON records here")
    p.add_argument("--steps-sweep", default=None, help="comma list of N; enhances in memory with --ckpt")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    _add_sampler(p)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate-sde", help="forward/reverse SDE diagnostics against closed forms")
    p.add_argument("--taus", default="0.25,0.5,1.0")
    p.add_argument("--n-paths", type=int, default=10_000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--y", type=float, default=0.0)
    p.add_argument("--prior-mean", type=float, default=1.0)
    p.add_argument("--prior-std", type=float, default=0.5)
    p.add_argument("--n-chains", type=int, default=100_000)
    p.add_argument("--trace", default=None, help="CSV of per-tau forward and reverse statistics")
    p.add_argument("--emit-oracle-report", default=None, help="JSONL of independent-oracle checks")
    p.add_argument("--out", default=None, help="directory for run_config.txt")
    _add_sde(p)
    _add_sampler(p)
    _add_common(p)
    p.set_defaults(func=cmd_simulate_sde)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as exc:
        print(f"stormse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
