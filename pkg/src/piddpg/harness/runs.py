"""Training, evaluation and sweep runs that persist their artifacts to disk."""
from __future__ import annotations

from pathlib import Path

from ..errors import ConfigError
from ..market import ScenarioProfile
from ..trainer import TrainConfig, TrainResult, sweep_jobs, sweep_rows, train
from .io import (
    METRICS_COLUMNS,
    QGAIN_COLUMNS,
    REFINER_COLUMNS,
    SWEEP_COLUMNS,
    TIMING_COLUMNS,
    CsvSink,
    RunManifest,
    now_iso,
    write_csv,
)
from .profiles import load_profile, profile_digest, save_profile


def run_training(config: TrainConfig, profile: ScenarioProfile, out_dir, extra: dict | None = None) -> TrainResult:
    """Train and write ``metrics.csv``, ``timing.csv``, ``refiner.csv``, the profile,
    the manifest and ``checkpoint.npz`` into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_profile(profile, out / "profile.json")
    manifest = RunManifest(config=config.to_dict(), profile_digest=profile_digest(profile), seed=config.seed, extra=extra or {})
    manifest.save(out / "manifest.json")
    metrics = CsvSink(out / "metrics.csv", METRICS_COLUMNS)
    timing = CsvSink(out / "timing.csv", TIMING_COLUMNS)
    refiner = CsvSink(out / "refiner.csv", REFINER_COLUMNS)

    def on_episode(m, learner):
        metrics.write(m.row())
        timing.write({"episode": m.episode, "wall_ms": m.wall_ms})
        for ep, t, k, qb, qa in m.refine_records:
            refiner.write({"episode": ep, "step": t, "k_refine": k, "q_before": qb, "q_after": qa,
                           "q_gain": (qa - qb) / max(abs(qb), 1e-12)})
        every = config.checkpoint_every
        if learner is not None and every and m.episode % every == 0:
            learner.agent.save(out / f"checkpoint_ep{m.episode:04d}.npz", {"episode": m.episode, "seed": config.seed})

    try:
        result = train(config, profile, on_episode)
    finally:
        metrics.close()
        timing.close()
        refiner.close()
    if result.learner is not None:
        result.learner.agent.save(
            out / "checkpoint.npz",
            {"episode": config.episodes, "seed": config.seed, "profile_digest": manifest.profile_digest},
        )
    manifest.finished_at = now_iso()
    manifest.save(out / "manifest.json")
    return result


def config_from_manifest(path) -> tuple[TrainConfig, ScenarioProfile]:
    """Resolve the exact config and profile a run directory was produced with."""
    path = Path(path)
    manifest = RunManifest.load(path)
    profile = load_profile(path.parent / manifest.profile_file)
    digest = profile_digest(profile)
    if digest != manifest.profile_digest:
        raise ConfigError(f"profile digest mismatch: manifest {manifest.profile_digest[:12]}, file {digest[:12]}")
    return TrainConfig.from_dict(manifest.config), profile


def _sweep_job(args):
    parameter, job, profile, job_dir = args
    result = run_training(job, profile, job_dir, extra={"sweep": parameter})
    return sweep_rows(parameter, job, result)


def run_sweep(config: TrainConfig, profile: ScenarioProfile, parameter: str, values, runs: int, out_dir, workers: int = 1):
    """Every value x seed gets its own run directory; the long tables go to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = sweep_jobs(config, parameter, values, runs)
    args = [(parameter, j, profile, out / f"{parameter}={getattr(j, parameter)}" / f"seed{j.seed}") for j in jobs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, args))
    else:
        results = [_sweep_job(a) for a in args]
    rows = [r for rs, _ in results for r in rs]
    gains = [g for _, gs in results for g in gs]
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    if parameter == "k_max":
        write_csv(out / "q_gains.csv", QGAIN_COLUMNS, gains)
    save_profile(profile, out / "profile.json")
    RunManifest(
        config=config.to_dict(),
        profile_digest=profile_digest(profile),
        seed=config.seed,
        command="sweep",
        finished_at=now_iso(),
        extra={"parameter": parameter, "values": list(values), "runs": runs},
    ).save(out / "manifest.json")
    return rows, gains
