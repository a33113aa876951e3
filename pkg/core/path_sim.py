"""
Path simulation on the observation grid t_j = j·h_n.

Jumps are placed exactly: the Poisson count over [0, T_n] is drawn first, jump
times are uniform order statistics, and the Euler step containing a jump is split
with a Brownian bridge at the jump time. Every replication owns a counter-based
Philox stream keyed by (master_seed, stream_index, context).
"""
import math
import struct
import logging
import concurrent.futures
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .errors import ModelValidationError, SimulationError
from .model_core import RateSchedule

logger = logging.getLogger(__name__)

BATCH_SIZE = 32
BINARY_MAGIC = b"JDLP"
BINARY_VERSION = 1
BINARY_HEADER = struct.Struct("<4sIII")
BURN_IN_MEAN_REVERSION_TIMES = 10.0
BURN_IN_STEP = 0.01


@dataclass(frozen=True)
class SimConfig:
    """Observation design and stream identity of one simulated path."""
    n: int
    h_n: float
    substeps: int = 16
    x0: Optional[tuple] = None
    master_seed: int = 0
    stream_index: int = 0
    burn_in: bool = False
    stream_context: tuple = ()

    def __post_init__(self):
        if int(self.n) < 1:
            raise ModelValidationError(f"n must be >= 1, got {self.n}")
        if not self.h_n > 0:
            raise ModelValidationError(f"h_n must be positive, got {self.h_n}")
        if int(self.substeps) < 1:
            raise ModelValidationError(f"substeps must be >= 1, got {self.substeps}")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ModelValidationError("master_seed must be an unsigned 64-bit integer")
        if int(self.stream_index) < 0:
            raise ModelValidationError("stream_index must be non-negative")

    @property
    def horizon(self):
        return self.n * self.h_n

    @property
    def euler_step(self):
        return self.h_n / self.substeps

    @property
    def schedule(self):
        return RateSchedule(n=int(self.n), h_n=float(self.h_n))

    def with_stream(self, stream_index):
        return SimConfig(n=self.n, h_n=self.h_n, substeps=self.substeps, x0=self.x0,
                         master_seed=self.master_seed, stream_index=stream_index,
                         burn_in=self.burn_in, stream_context=self.stream_context)


@dataclass(frozen=True, eq=False)
class LatentJumps:
    """Jump times in (0, T_n], sizes (K, m) and 1-based per-interval counts Δ_jN."""
    times: np.ndarray
    sizes: np.ndarray
    interval_counts: np.ndarray

    @property
    def total(self):
        return int(self.times.size)

    @property
    def intervals(self):
        """1-based interval index j of every jump, t_{j-1} < τ ≤ t_j."""
        return np.repeat(np.arange(1, self.interval_counts.size + 1), self.interval_counts)


@dataclass(frozen=True, eq=False)
class Path:
    observations: np.ndarray
    h_n: float
    latent: Optional[LatentJumps] = None
    master_seed: Optional[int] = None
    stream_index: Optional[int] = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.shape[0] < 2:
            raise ModelValidationError("A path needs at least one increment")
        if not np.all(np.isfinite(obs)):
            raise ModelValidationError("Path observations must be finite")
        object.__setattr__(self, "observations", obs)

    @property
    def n(self):
        return self.observations.shape[0] - 1

    @property
    def m(self):
        return self.observations.shape[1]

    @property
    def times(self):
        return np.arange(self.n + 1) * self.h_n

    @property
    def increments(self):
        return np.diff(self.observations, axis=0)

    @property
    def schedule(self):
        return RateSchedule(n=self.n, h_n=self.h_n)

    def without_latent(self):
        return Path(self.observations, self.h_n, None, self.master_seed, self.stream_index)

    def to_frame(self):
        frame = pd.DataFrame({"t": self.times})
        for i in range(self.m):
            frame[f"x_{i + 1}"] = self.observations[:, i]
        return frame

    def to_csv(self, file_path):
        self.to_frame().to_csv(file_path, index=False)

    @classmethod
    def from_csv(cls, file_path):
        frame = pd.read_csv(file_path, float_precision="round_trip")
        columns = [c for c in frame.columns if c.startswith("x_")]
        if "t" not in frame.columns or not columns:
            raise ModelValidationError(f"{file_path}: expected columns t, x_1..x_m")
        t = frame["t"].to_numpy(dtype=float)
        if t.size < 2:
            raise ModelValidationError(f"{file_path}: a path needs at least two rows")
        return cls(frame[columns].to_numpy(dtype=float), h_n=float(t[1]))

    def to_binary(self, file_path):
        """Header (magic, version, n, m) followed by the t column and x columns, float64 little-endian."""
        columns = np.column_stack([self.times, self.observations])
        with open(file_path, "wb") as f:
            f.write(BINARY_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, self.n, self.m))
            f.write(np.ascontiguousarray(columns.T, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, file_path):
        with open(file_path, "rb") as f:
            header = f.read(BINARY_HEADER.size)
            if len(header) != BINARY_HEADER.size:
                raise ModelValidationError(f"{file_path}: truncated header")
            magic, version, n, m = BINARY_HEADER.unpack(header)
            if magic != BINARY_MAGIC:
                raise ModelValidationError(f"{file_path}: bad magic {magic!r}")
            if version != BINARY_VERSION:
                raise ModelValidationError(f"{file_path}: unsupported version {version}")
            data = np.frombuffer(f.read(), dtype="<f8")
        if data.size != (m + 1) * (n + 1):
            raise ModelValidationError(f"{file_path}: expected {(m + 1) * (n + 1)} values, found {data.size}")
        columns = data.reshape(m + 1, n + 1)
        return cls(columns[1:].T.copy(), h_n=float(columns[0, 1]))


def latent_to_frame(path):
    """Latent jump record as a table with columns time, interval, size_1..size_m."""
    if path.latent is None:
        raise ModelValidationError("Path carries no latent jump record")
    frame = pd.DataFrame({"time": path.latent.times, "interval": path.latent.intervals})
    for i in range(path.m):
        frame[f"size_{i + 1}"] = path.latent.sizes[:, i]
    return frame


def stream_generators(master_seed, stream_index, context=()):
    """Philox generators (jumps, diffusion) plus the seed sequence reserved for burn-in."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(stream_index),) + tuple(int(c) for c in context))
    jump_seq, diffusion_seq, burn_seq = seq.spawn(3)
    return (np.random.Generator(np.random.Philox(jump_seq)),
            np.random.Generator(np.random.Philox(diffusion_seq)),
            burn_seq)


@dataclass
class _StreamDraws:
    stream_index: int
    times: np.ndarray
    sizes: np.ndarray
    bridge: np.ndarray
    normals: np.ndarray


def _draw_stream(model, theta, horizon, n_fine, m, jump_rng, diffusion_rng, stream_index):
    lam = float(model.intensity(theta))
    count = int(jump_rng.poisson(lam * horizon)) if lam > 0 else 0
    times = np.sort(horizon * (1.0 - jump_rng.random(count)))
    if count:
        sizes = np.asarray(model.jump_sampler(jump_rng, count, theta), dtype=float).reshape(count, m)
    else:
        sizes = np.zeros((0, m))
    bridge = jump_rng.standard_normal((count, m))
    normals = diffusion_rng.standard_normal((n_fine, m))
    return _StreamDraws(stream_index, times, sizes, bridge, normals)


def _euler_step(model, x, sigma, theta, dt, dw):
    return x + model.drift(x, theta) * dt + np.einsum("nij,nj->ni", model.diffusion(x, sigma), dw)


def _locate(times, n, h, substeps):
    """Observation interval, fine step and offset inside the fine step for each jump time."""
    n_interval = np.clip(np.ceil(times / h).astype(int) - 1, 0, n - 1)
    residual = times - n_interval * h
    dt = h / substeps
    fine_local = np.clip(np.ceil(residual / dt).astype(int) - 1, 0, substeps - 1)
    offset = np.clip(residual - fine_local * dt, 0.0, dt)
    return n_interval, n_interval * substeps + fine_local, offset


def _integrate(model, sigma, theta, x0, draws, n, h, substeps, increments):
    """
    Euler scheme for a batch of streams sharing (n, h, substeps).

    `increments` holds Brownian increments of shape (B, n·substeps, m).
    Returns observations (B, n+1, m) and per-stream jump intervals.
    """
    batch, m = len(draws), x0.shape[1]
    dt = h / substeps
    events = {}
    intervals = []
    for p, d in enumerate(draws):
        interval, fine, offset = _locate(d.times, n, h, substeps)
        intervals.append(interval)
        for i in range(d.times.size):
            events.setdefault(int(fine[i]), []).append((p, float(offset[i]), d.sizes[i], d.bridge[i]))

    obs = np.empty((batch, n + 1, m))
    obs[:, 0] = x0
    x = x0.copy()
    for k in range(n * substeps):
        dw = increments[:, k]
        stepped = _euler_step(model, x, sigma, theta, dt, dw)
        for p, jumps in _group_by_stream(events.get(k, ())):
            stepped[p] = _split_step(model, x[p:p + 1], sigma, theta, dt, dw[p], jumps)[0]
        x = stepped
        if (k + 1) % substeps == 0:
            j = (k + 1) // substeps
            bad = ~np.all(np.isfinite(x), axis=1)
            if np.any(bad):
                p = int(np.argmax(bad))
                raise SimulationError(f"Non-finite state in interval {j} of stream {draws[p].stream_index}",
                                      interval_index=j, stream_index=draws[p].stream_index)
            obs[:, j] = x
    return obs, intervals


def _group_by_stream(events):
    grouped = {}
    for p, offset, size, bridge in events:
        grouped.setdefault(p, []).append((offset, size, bridge))
    return grouped.items()


def _split_step(model, x, sigma, theta, dt, dw, jumps):
    """Advance one fine step that contains jumps, bridging W at each jump time."""
    remaining_time, remaining_dw, elapsed = dt, dw.copy(), 0.0
    for offset, size, bridge in sorted(jumps, key=lambda e: e[0]):
        span = max(offset - elapsed, 0.0)
        if remaining_time > 0:
            mean = span / remaining_time * remaining_dw
            sd = math.sqrt(max(span * (remaining_time - span) / remaining_time, 0.0))
            piece = mean + sd * bridge
        else:
            piece = np.zeros_like(remaining_dw)
        x = _euler_step(model, x, sigma, theta, span, piece[None, :])
        x = x + size
        remaining_dw = remaining_dw - piece
        remaining_time -= span
        elapsed = offset
    return _euler_step(model, x, sigma, theta, remaining_time, remaining_dw[None, :])


def _initial_states(model, alpha, cfgs):
    states = []
    for cfg in cfgs:
        if cfg.x0 is None:
            x0 = model.default_x0(alpha)
        else:
            x0 = np.atleast_1d(np.asarray(cfg.x0, dtype=float))
        if x0.shape != (model.m,):
            raise ModelValidationError(f"x0 must have length {model.m}")
        states.append(x0)
    return np.array(states)


def _burn_in(model, sigma, theta, x0, cfgs, burn_seqs):
    """Run each stream for ten mean-reversion times on a grid no finer than BURN_IN_STEP."""
    length = BURN_IN_MEAN_REVERSION_TIMES / theta[0]
    first = cfgs[0]
    step = max(float(first.h_n), BURN_IN_STEP)
    n_burn = max(1, int(math.ceil(length / step)))
    draws = []
    for cfg, seq in zip(cfgs, burn_seqs):
        jump_seq, diffusion_seq = seq.spawn(2)
        draws.append(_draw_stream(model, theta, n_burn * step, n_burn * cfg.substeps, model.m,
                                  np.random.Generator(np.random.Philox(jump_seq)),
                                  np.random.Generator(np.random.Philox(diffusion_seq)),
                                  cfg.stream_index))
    dw = math.sqrt(step / first.substeps) * np.stack([d.normals for d in draws])
    obs, _ = _integrate(model, sigma, theta, x0, draws, n_burn, step, first.substeps, dw)
    return obs[:, -1]


def _check_alpha(model, alpha):
    vec = np.asarray(alpha.alpha if hasattr(alpha, "alpha") else alpha, dtype=float)
    if vec.size != model.d:
        raise ModelValidationError(f"Expected {model.d} parameters, got {vec.size}")
    if not model.space.contains(vec):
        raise ModelValidationError(f"Parameter {vec.tolist()} lies outside the parameter space")
    return vec


def _simulate_batch(model, alpha, cfgs, refine=1):
    """Simulate streams sharing one design; with refine > 1 also returns the coarse-resolution run."""
    vec = _check_alpha(model, alpha)
    sigma, theta = model.split(vec)
    first = cfgs[0]
    n, h, substeps, m = int(first.n), float(first.h_n), int(first.substeps), model.m
    x0 = _initial_states(model, vec, cfgs)
    draws, burn_seqs = [], []
    for cfg in cfgs:
        jump_rng, diffusion_rng, burn_seq = stream_generators(cfg.master_seed, cfg.stream_index, cfg.stream_context)
        draws.append(_draw_stream(model, theta, n * h, n * substeps * refine, m,
                                  jump_rng, diffusion_rng, cfg.stream_index))
        burn_seqs.append(burn_seq)
    if first.burn_in and model.ergodic:
        x0 = _burn_in(model, sigma, theta, x0, cfgs, burn_seqs)

    fine_dw = math.sqrt(h / (substeps * refine)) * np.stack([d.normals for d in draws])
    results = [_integrate(model, sigma, theta, x0, draws, n, h, substeps * refine, fine_dw)]
    if refine > 1:
        coarse_dw = fine_dw.reshape(len(cfgs), n * substeps, refine, m).sum(axis=2)
        results.append(_integrate(model, sigma, theta, x0, draws, n, h, substeps, coarse_dw))

    paths = []
    for obs, intervals in results:
        batch_paths = []
        for p, (cfg, d) in enumerate(zip(cfgs, draws)):
            counts = np.bincount(intervals[p], minlength=n)[:n].astype(int)
            latent = LatentJumps(times=d.times, sizes=d.sizes, interval_counts=counts)
            batch_paths.append(Path(obs[p], h, latent, int(cfg.master_seed), int(cfg.stream_index)))
        paths.append(batch_paths)
    return paths


def simulate_path(model, alpha, cfg):
    """
    Simulate one path under α. Deterministic given (master_seed, stream_index, stream_context).

    Raises SimulationError carrying the 1-based interval and stream index on a
    non-finite state.
    """
    return _simulate_batch(model, alpha, [cfg])[0][0]


def simulate_ensemble(model, alpha, cfg, R, threads=1, progress_callback=None):
    """
    Simulate R paths with stream_index = 0..R-1.

    Streams are grouped into fixed batches of BATCH_SIZE by index, so the
    ensemble is identical for any thread count and to R simulate_path calls.
    """
    if int(R) < 1:
        raise ModelValidationError(f"R must be >= 1, got {R}")
    streams = list(range(int(R)))
    batches = [streams[i:i + BATCH_SIZE] for i in range(0, len(streams), BATCH_SIZE)]
    is_cli_mode = progress_callback is None
    if is_cli_mode:
        progress_bar = tqdm(total=len(streams), desc="Simulating paths", unit="path", leave=False)

    batch_results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        future_to_batch = {
            executor.submit(_simulate_batch, model, alpha, [cfg.with_stream(s) for s in batch]): idx
            for idx, batch in enumerate(batches)
        }
        completed = 0
        for future in concurrent.futures.as_completed(future_to_batch):
            batch_idx = future_to_batch[future]
            try:
                batch_results[batch_idx] = future.result()[0]
            except SimulationError as e:
                logger.error(f"Replication {e.stream_index} failed in interval {e.interval_index}: {e}")
                if is_cli_mode:
                    progress_bar.close()
                raise
            completed += 1
            if is_cli_mode:
                progress_bar.update(len(batches[batch_idx]))
            elif progress_callback:
                progress_callback(int(completed / len(batches) * 100))

    if is_cli_mode:
        progress_bar.close()
    return [path for idx in sorted(batch_results) for path in batch_results[idx]]


def strong_error_proxy(model, alpha, cfg, R):
    """
    E|X^{(M)}_T - X^{(2M)}_T| over R replications, where both schemes share
    jump events and Brownian increments (the coarse increments are pair sums).
    """
    if int(R) < 2:
        raise ModelValidationError("strong_error_proxy needs R >= 2")
    gaps = []
    streams = list(range(int(R)))
    for i in range(0, len(streams), BATCH_SIZE):
        fine, coarse = _simulate_batch(model, alpha, [cfg.with_stream(s) for s in streams[i:i + BATCH_SIZE]],
                                       refine=2)
        gaps.extend(float(np.linalg.norm(f.observations[-1] - c.observations[-1])) for f, c in zip(fine, coarse))
    gaps = np.asarray(gaps)
    return {
        "substeps": int(cfg.substeps),
        "mean": float(gaps.mean()),
        "se": float(gaps.std(ddof=1) / math.sqrt(gaps.size)),
        "replications": int(gaps.size),
    }
