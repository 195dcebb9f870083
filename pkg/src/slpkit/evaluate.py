"""Monte-Carlo evaluation: symbol error rate, power-versus-threshold sweeps,
analytic robust MSE, and wall-clock benchmarking.

All schemes within a trial share the same channel, symbols, and noise draws
(paired evaluation), and trials use per-index seed substreams so results are
reproducible for any execution order.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .channel import effective_gram_stack, make_aging_model, sample_aged_channel, sample_rayleigh
from .modulation import demodulate, symbols_from_indices
from . import precoding as pc
from . import robust as rb
from .network import learned_block_precode


@dataclass
class CurvePoint:
    scheme: str
    x_db: float
    metric: float
    n_trials: int
    ci_half: float


def wilson_interval(errors, total, z=1.96):
    """95% Wilson score interval for a binomial rate; returns (center, half)."""
    if total == 0:
        return 0.0, 0.0
    p = errors / total
    denom = 1.0 + z**2 / total
    center = (p + z**2 / (2 * total)) / denom
    half = z * np.sqrt(p * (1 - p) / total + z**2 / (4 * total**2)) / denom
    return center, half


def write_curves(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scheme", "x_db", "metric", "n_trials", "ci_half"])
        for r in rows:
            writer.writerow([r.scheme, r.x_db, f"{r.metric:.10g}", r.n_trials, f"{r.ci_half:.10g}"])


def _trial_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index, 0xE7A1)))


# ---------------------------------------------------------------------------
# Scheme registries. Static schemes map (h, s_idx, sigma2) -> (x, gamma_bar);
# robust schemes map (aging, s_idx, sigma2) -> x.


def make_static_scheme(name, constellation, p_t, net=None, refine=True):
    if name == "zf":
        return lambda h, s, sigma2: _as_pair(pc.lp_zf(h, s, constellation, p_t))
    if name == "mmse":
        return lambda h, s, sigma2: _as_pair(pc.lp_mmse(h, s, constellation, p_t, sigma2))
    if name == "cizf":
        return lambda h, s, sigma2: _as_pair(pc.cizf_optimal(h, s, constellation, p_t)[0])
    if name == "cimmse":
        return lambda h, s, sigma2: _as_pair(
            pc.cimmse_optimal(h, s, constellation, p_t, sigma2)[0]
        )
    if name == "cizf-dl":
        return lambda h, s, sigma2: _as_pair(
            learned_block_precode(h, s, constellation, p_t, net, "zf", refine=refine)[0]
        )
    if name == "cimmse-dl":
        return lambda h, s, sigma2: _as_pair(
            learned_block_precode(
                h, s, constellation, p_t, net, "mmse", sigma2=sigma2, refine=refine
            )[0]
        )
    raise ValueError(f"unknown scheme {name!r}")


def _as_pair(block):
    return block.x, block.gamma_bar


def eval_ser(schemes, k, n_tx, n_sym, constellation, p_t, snr_grid_db, n_channels, seed):
    """Paired-noise SER curves for perfect-CSI schemes.

    Returns CurvePoint rows, one per (scheme, SNR), with Wilson 95% halves.
    """
    errors = {name: np.zeros(len(snr_grid_db), dtype=np.int64) for name in schemes}
    total = 0
    for trial in range(n_channels):
        rng = _trial_rng(seed, trial)
        h = sample_rayleigh(k, n_tx, rng)
        s_idx = rng.integers(0, constellation.size, size=(k, n_sym))
        noise = (
            rng.standard_normal((k, n_sym)) + 1j * rng.standard_normal((k, n_sym))
        ) / np.sqrt(2.0)
        total += k * n_sym
        for g, snr_db in enumerate(snr_grid_db):
            sigma2 = p_t / 10.0 ** (snr_db / 10.0)
            for name, fn in schemes.items():
                x, gamma_bar = fn(h, s_idx, sigma2)
                y = h @ x + np.sqrt(sigma2) * noise
                decided = demodulate(y, gamma_bar, constellation)
                errors[name][g] += int(np.sum(decided != s_idx))
    rows = []
    for name in schemes:
        for g, snr_db in enumerate(snr_grid_db):
            _, half = wilson_interval(errors[name][g], total)
            rows.append(
                CurvePoint(name, float(snr_db), errors[name][g] / total, total, half)
            )
    return rows


def eval_ser_aging(schemes, k, n_tx, n_sym, constellation, p_t, snr_grid_db,
                   n_channels, seed, alpha, fine_factor=1, density=0.25):
    """Paired SER under channel aging; PSK decisions need no scaling factor."""
    errors = {name: np.zeros(len(snr_grid_db), dtype=np.int64) for name in schemes}
    total = 0
    for trial in range(n_channels):
        rng = _trial_rng(seed, trial)
        h0 = sample_rayleigh(k, n_tx, rng)
        aging = make_aging_model(
            h0, np.float64(alpha), rng, fine_factor=fine_factor,
            density=density, n_symbols=n_sym,
        )
        s_idx = rng.integers(0, constellation.size, size=(k, n_sym))
        h_true = np.stack(
            [sample_aged_channel(aging, l + 1, rng) for l in range(n_sym)]
        )
        noise = (
            rng.standard_normal((k, n_sym)) + 1j * rng.standard_normal((k, n_sym))
        ) / np.sqrt(2.0)
        total += k * n_sym
        for g, snr_db in enumerate(snr_grid_db):
            sigma2 = p_t / 10.0 ** (snr_db / 10.0)
            for name, fn in schemes.items():
                x = fn(aging, s_idx, sigma2)
                y = np.einsum("lkt,tl->kl", h_true, x) + np.sqrt(sigma2) * noise
                decided = demodulate(y, 1.0, constellation)
                errors[name][g] += int(np.sum(decided != s_idx))
    rows = []
    for name in schemes:
        for g, snr_db in enumerate(snr_grid_db):
            _, half = wilson_interval(errors[name][g], total)
            rows.append(
                CurvePoint(name, float(snr_db), errors[name][g] / total, total, half)
            )
    return rows


def make_robust_scheme(name, constellation, p_t, scaling_net=None, perturbation_net=None):
    """Robust-scenario schemes; the non-robust baselines precode on the pilot
    channel as if it were exact."""
    if name == "mmse":
        return lambda aging, s, sigma2: pc.lp_mmse(
            aging.h0, s, constellation, p_t, sigma2
        ).x
    if name == "cimmse":
        return lambda aging, s, sigma2: pc.cimmse_optimal(
            aging.h0, s, constellation, p_t, sigma2
        )[0].x
    if name == "rcimmse":
        def oracle(aging, s, sigma2):
            hbar = aging.alpha.T[:, :, None] * aging.h0[None]
            res = rb.rcimmse_oracle(
                hbar, effective_gram_stack(aging), aging.beta, s,
                constellation, p_t, sigma2,
            )
            return res.x
        return oracle
    if name == "rcimmse-dl":
        return lambda aging, s, sigma2: rb.rcimmse_dl(
            aging, s, constellation, p_t, sigma2, scaling_net, perturbation_net
        )[0]
    raise ValueError(f"unknown robust scheme {name!r}")


def eval_mse_aging(schemes_full, k, n_tx, n_sym, constellation, p_t, snr_grid_db,
                   n_channels, seed, alpha, fine_factor=1, density=0.25):
    """Analytic robust MSE curves.

    schemes_full maps name -> fn(aging, s_idx, sigma2) returning
    (x, gamma, s_tilde) with gamma per-user (K, L) or scalar/per-symbol.
    """
    sums = {name: np.zeros(len(snr_grid_db)) for name in schemes_full}
    for trial in range(n_channels):
        rng = _trial_rng(seed, trial)
        h0 = sample_rayleigh(k, n_tx, rng)
        aging = make_aging_model(
            h0, np.float64(alpha), rng, fine_factor=fine_factor,
            density=density, n_symbols=n_sym,
        )
        s_idx = rng.integers(0, constellation.size, size=(k, n_sym))
        hbar = aging.alpha.T[:, :, None] * h0[None]
        e_stack = effective_gram_stack(aging)
        for g, snr_db in enumerate(snr_grid_db):
            sigma2 = p_t / 10.0 ** (snr_db / 10.0)
            for name, fn in schemes_full.items():
                x, gamma, s_tilde = fn(aging, s_idx, sigma2)
                sums[name][g] += rb.robust_mse(
                    x, gamma, s_tilde, hbar, e_stack, aging.beta, sigma2
                )
    rows = []
    for name in schemes_full:
        for g, snr_db in enumerate(snr_grid_db):
            rows.append(
                CurvePoint(name, float(snr_db), sums[name][g] / n_channels, n_channels, 0.0)
            )
    return rows


def eval_power_vs_sinr(shapers, k, n_tx, n_sym, constellation, p_t, thresholds_db,
                       n_channels, seed, sigma2=1.0):
    """Transmit power required to hit a scaling-factor threshold.

    shapers maps name -> fn(h, s_idx) returning shaped symbols s_tilde; the
    required per-symbol power for threshold t is t * sigma2 * ||H^+ s_tilde||^2.
    Confidence halves are normal-approximation 95% intervals over channels.
    """
    factors = {name: np.zeros(n_channels) for name in shapers}
    for trial in range(n_channels):
        rng = _trial_rng(seed, trial)
        h = sample_rayleigh(k, n_tx, rng)
        s_idx = rng.integers(0, constellation.size, size=(k, n_sym))
        h_dag = None
        for name, fn in shapers.items():
            s_tilde = fn(h, s_idx)
            if h_dag is None:
                from .linalg import pseudo_inverse_fat

                h_dag = pseudo_inverse_fat(h)
            factors[name][trial] = float(
                np.mean(np.linalg.norm(h_dag @ s_tilde, axis=0) ** 2)
            )
    rows = []
    for name, vals in factors.items():
        mean = float(np.mean(vals))
        half = 1.96 * float(np.std(vals, ddof=1)) / np.sqrt(n_channels)
        for thr_db in thresholds_db:
            scale = 10.0 ** (thr_db / 10.0) * sigma2
            rows.append(
                CurvePoint(name, float(thr_db), scale * mean, n_channels, scale * half)
            )
    return rows


def bench_runtime(callables, n_symbols, reps=20, warmup=2):
    """Median wall-clock per symbol for each callable over >= `reps` runs."""
    out = {}
    for name, fn in callables.items():
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        out[name] = float(np.median(times)) / n_symbols
    return out
