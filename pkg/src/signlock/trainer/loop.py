"""Instrumented training loop and the artifacts it produces."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DivergenceError
from ..interventions import (
    BarrierConfig,
    GapInitConfig,
    TemplateConfig,
    barrier_penalty,
    floating_penalty,
    gap_init,
    hard_project,
    lambda_at,
    make_template,
    template_gap_init,
    template_seed,
)
from ..matio import WeightMatrix, save_manifest
from ..numerics import RandomSource
from ..signdyn import (
    ExcursionTracker,
    FlipStats,
    StoppingConfig,
    ZigFit,
    fit_zig,
    sample_coordinates,
    save_traces,
    write_keff_csv,
)
from .config import TrainConfig
from .data import Dataset, make_dataset
from .model import Params, forward_backward, init_params, loss, weight_names
from .optim import clip_global_norm, make_optimizer
from .schedules import Schedule, lr_at


@dataclass
class RunArtifacts:
    config: TrainConfig
    sizes: list[int]
    params: Params = field(repr=False)
    init_signs: dict[str, np.ndarray] = field(repr=False)
    templates: dict[str, np.ndarray] = field(repr=False)
    coord_layers: list[str] = field(repr=False)
    coord_index: np.ndarray = field(repr=False)
    traces: np.ndarray | None = field(repr=False)
    max_update: np.ndarray = field(repr=False)
    flips: FlipStats = field(repr=False)
    zig: ZigFit
    train_loss: np.ndarray = field(repr=False)
    val_points: list[tuple[int, float]]
    metrics: list[tuple] = field(repr=False)
    val_loss: float
    steps_done: int
    seconds: float = 0.0

    def weights(self, names=None) -> list[WeightMatrix]:
        keys = weight_names(self.params) if names is None else names
        return [WeightMatrix(k, self.params[k]) for k in keys]

    def summary(self) -> dict:
        return {
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "steps": self.steps_done,
            "final_train_loss": float(self.train_loss[-1]) if self.train_loss.size else None,
            "val_loss": self.val_loss,
            "val_loss_batches": self.val_points[-1][1] if self.val_points else None,
            "flip_mean": self.flips.flip_mean,
            "init_mismatch": self.flips.init_mismatch,
            "max_flip_t": float(self.flips.flip_curve.max()) if self.flips.flip_curve.size else 0.0,
            "h_hat": self.zig.h_hat,
            "g_hat": self.zig.g_hat,
            "tracked_coordinates": int(self.coord_index.size),
            "delta_hat": float(self.max_update.max()) if self.max_update.size else 0.0,
            "seconds": self.seconds,
        }

    def save(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_manifest(self.weights(), out / "weights")
        save_manifest([WeightMatrix(k, s) for k, s in self.init_signs.items()], out / "init_signs")
        if self.templates:
            save_manifest([WeightMatrix(k, t) for k, t in self.templates.items()], out / "templates")
        if self.traces is not None:
            save_traces(self.traces, out / "traces.strc")
        with open(out / "coords.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coord_id", "layer", "flat_index"])
            w.writerows(zip(range(len(self.coord_layers)), self.coord_layers, self.coord_index.tolist()))
        write_keff_csv(out / "keff.csv", self.flips.k_eff)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "val_loss", "flip_t", "flip_mean_running"])
            for row in self.metrics:
                w.writerow(["" if (isinstance(v, float) and math.isnan(v)) else v for v in row])
        (out / "config.json").write_text(self.config.to_json())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2))
        return out


def schedule_for(cfg: TrainConfig) -> Schedule:
    o = cfg.optim
    return Schedule(o.schedule, o.lr, cfg.steps, o.warmup, o.gamma, o.power)


def _targets(cfg: TrainConfig, keys: list[str]) -> list[str]:
    t = cfg.interventions.targets
    if t is None:
        return list(keys)
    return [k for k in keys if k in t or k.split(".")[0] in t]


def _val_estimate(params, data: Dataset, batch: int, n_batches: int, rng: RandomSource) -> float:
    vals = []
    for _ in range(n_batches):
        idx = rng.integers(0, len(data.y_val), size=batch)
        vals.append(loss(params, data.X_val[idx], data.y_val[idx]))
    return float(np.mean(vals))


def train(cfg: TrainConfig, data: Dataset | None = None) -> RunArtifacts:
    """Run ``cfg.steps`` optimizer steps with sign instrumentation.

    Per step: task gradient, penalty gradients, optional clipping, optimizer
    update, optional hard projection onto the sign template.
    """
    t0 = time.perf_counter()
    iv = cfg.interventions
    rng = RandomSource(cfg.seed)
    data = data or make_dataset(cfg.data, cfg.seed)
    sizes = cfg.model.sizes(data.n_in, data.n_out)
    sigma = cfg.model.init_sigma

    # Layer keys are known before init from the naming scheme.
    wkeys = [f"fc{i + 1}.weight" for i in range(len(sizes) - 1)]
    targets = set(_targets(cfg, wkeys))
    templates: dict[str, np.ndarray] = {}
    if iv.template:
        base_seed = cfg.seed if iv.template_seed is None else iv.template_seed
        for i, key in enumerate(wkeys):
            if key in targets:
                tc = TemplateConfig(iv.template_rank, template_seed(base_seed, key), iv.template_dist)
                templates[key] = make_template(sizes[i + 1], sizes[i], tc)

    def weight_init(key, m, n):
        r = rng.fork(key)
        a = iv.a_init if key in targets else 0.0
        if key in templates:
            return template_gap_init(templates[key], GapInitConfig(sigma, a), r)
        if a > 0:
            return gap_init(m, n, GapInitConfig(sigma, a), r)
        return r.normal((m, n), sigma=sigma)

    params = init_params(sizes, sigma, rng, weight_init)
    opt = make_optimizer(cfg.optim)
    sched = schedule_for(cfg)
    barrier = None
    if iv.barrier_lambda > 0:
        barrier = BarrierConfig(iv.barrier_threshold, iv.eps_lb, iv.barrier_lambda, cfg.steps)

    # Tracking setup
    track = cfg.track
    stop = StoppingConfig(track.rho, track.epsilon0)
    coord_layers, coord_index, slices = [], [], []
    for key in wkeys:
        idx = sample_coordinates(params[key].size, track.coord_cap, rng.fork(f"coords/{key}"))
        slices.append((key, idx))
        coord_layers.extend([key] * idx.size)
        coord_index.append(idx)
    coord_index = np.concatenate(coord_index)

    def gather():
        return np.concatenate([params[k].ravel()[idx] for k, idx in slices])

    tracker = ExcursionTracker(coord_index.size, stop)
    traces = None
    if track.record_traces:
        traces = np.empty((coord_index.size, cfg.steps + 1), dtype=np.float32)
        traces[:, 0] = gather()
    tracker.update(gather())

    init_signs = {k: np.where(params[k] >= 0, 1, -1).astype(np.int8) for k in wkeys}
    prev_pos = {k: params[k] >= 0 for k in wkeys}
    total = sum(params[k].size for k in wkeys)
    step_rates = np.zeros(cfg.steps)
    flip_steps, flip_curve, metrics, val_points = [0], [0.0], [], []
    train_loss = np.zeros(cfg.steps)
    brng = rng.fork("batches")
    vrng = rng.fork("val")

    def artifacts(done: int, val_full: float) -> RunArtifacts:
        rates = step_rates[:done]
        flips = FlipStats(
            k_eff=tracker.k_eff.copy(),
            n_T=tracker.n_T.copy(),
            flip_steps=np.array(flip_steps),
            flip_curve=np.array(flip_curve),
            flip_mean=float(rates.mean()) if done else 0.0,
            init_mismatch=flip_curve[-1],
        )
        return RunArtifacts(
            config=cfg, sizes=sizes, params=params, init_signs=init_signs, templates=templates,
            coord_layers=coord_layers, coord_index=coord_index,
            traces=None if traces is None else traces[:, : done + 1],
            max_update=tracker.max_update.copy(), flips=flips, zig=fit_zig(tracker.k_eff),
            train_loss=train_loss[:done].copy(), val_points=val_points, metrics=metrics,
            val_loss=val_full, steps_done=done, seconds=time.perf_counter() - t0,
        )

    # overflow is detected explicitly below; keep numpy quiet about it
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(cfg.steps):
            idx = brng.integers(0, len(data.y_train), size=cfg.batch)
            value, grads = forward_backward(params, data.X_train[idx], data.y_train[idx])
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at step {t}", t, artifacts(t, math.nan))
            train_loss[t] = value
            for key in targets:
                if barrier is not None:
                    lam = lambda_at(t, barrier)
                    if lam > 0:
                        grads[key] += lam * barrier_penalty(params[key], barrier.a_init, barrier.eps_lb)[1]
                if iv.float_lambda > 0:
                    grads[key] += iv.float_lambda * floating_penalty(params[key], iv.rho_f)[1]
            if cfg.optim.clip is not None:
                clip_global_norm(grads, cfg.optim.clip)
            opt.step(params, grads, lr_at(sched, t))
            for key, T in templates.items():
                if iv.hard_project:
                    params[key] = hard_project(params[key], T)
            if not all(np.all(np.isfinite(params[k])) for k in wkeys):
                raise DivergenceError(f"non-finite weights after step {t}", t, artifacts(t, math.nan))

            changed = 0
            for key in wkeys:
                pos = params[key] >= 0
                changed += int(np.count_nonzero(pos != prev_pos[key]))
                prev_pos[key] = pos
            step_rates[t] = changed / total
            vals = gather()
            tracker.update(vals)
            if traces is not None:
                traces[:, t + 1] = vals

            s = t + 1
            val = math.nan
            if s % track.eval_every == 0 or s == cfg.steps:
                val = _val_estimate(params, data, cfg.batch, track.val_batches, vrng)
                val_points.append((s, val))
            if s % track.snapshot_stride == 0 or s == cfg.steps:
                mism = sum(int(np.count_nonzero(prev_pos[k] != (init_signs[k] > 0))) for k in wkeys) / total
                flip_steps.append(s)
                flip_curve.append(mism)
                metrics.append((s, value, val, mism, float(step_rates[:s].mean())))

    val_full = loss(params, data.X_val, data.y_val)
    return artifacts(cfg.steps, val_full)
