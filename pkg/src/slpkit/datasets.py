"""Dataset generation with exact-solver labels, plus the on-disk format.

A dataset is a JSON manifest next to one binary file holding named arrays
(magic "SLPD", version, then per array: name, dtype code, rank, dims,
row-major little-endian payload). Every stored label is certified against
the optimality conditions at generation time; failed samples are skipped
with an enforced ceiling on the skip rate.
"""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nnls
from .channel import effective_gram_stack, make_aging_model, sample_rayleigh
from .errors import SlpkitError
from .linalg import (
    cholesky_upper,
    frobenius_normalize,
    hermitian_inverse,
    pseudo_inverse_fat,
    real_composite,
)
from .modulation import build_constellation, cir_coefficients, symbols_from_indices
from .precoding import kkt_features, upsilon_mmse, upsilon_zf
from .robust import rcimmse_oracle

_MAGIC = b"SLPD"
_VERSION = 1
_DTYPES = {0: "<f8", 1: "<c16", 2: "<i8"}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.complex128): 1, np.dtype(np.int64): 2}

MAX_SKIP_RATE = 1e-3


def write_arrays(path, arrays):
    """Write named arrays in the SLPD container format."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            code = _CODES[arr.dtype]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(_DTYPES[code]).tobytes())


def read_arrays(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise SlpkitError(f"{path}: not a dataset file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise SlpkitError(f"{path}: unsupported version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            dtype = np.dtype(_DTYPES[code])
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = (
                np.frombuffer(fh.read(dtype.itemsize * n), dtype=dtype)
                .reshape(shape)
                .copy()
            )
        return arrays


@dataclass
class GenConfig:
    scenario: str = "cizf"  # cizf | cimmse | robust
    k: int = 4
    n_tx: int = 4
    n_sym: int = 16
    mod_kind: str = "psk"
    mod_order: int = 4
    p_t: float = 1.0
    snr_grid_db: list = field(default_factory=lambda: [0, 5, 10, 15, 20, 25, 30])
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    alpha: float = 0.98
    fine_factor: int = 1
    m_density: float = 0.25


def _sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _certify(a_stack, b_stack, deltas, tol=nnls.DEFAULT_TOL):
    for a, b, d in zip(a_stack, b_stack, deltas):
        stat, _ = nnls.kkt_residuals(a, b, d)
        scale = max(float(np.max(np.abs(a.T @ b))), 1e-30)
        if stat > 10.0 * tol * scale + 1e-12:
            raise SlpkitError("label failed KKT certification")


def _solve_labelled(a_base, lam, s_r):
    a_stack = np.einsum("mk,lkn->lmn", a_base, lam)
    b_stack = (a_base @ s_r).T
    deltas, _, optimal = nnls.solve_block(a_stack, b_stack)
    if not np.all(optimal):
        raise SlpkitError("solver hit its iteration limit")
    _certify(a_stack, b_stack, deltas)
    return deltas


def _gen_perfect_channel(cfg, const, index):
    """One channel's samples for the cizf/cimmse scenarios."""
    rng = _sample_rng(cfg.seed, index)
    h = sample_rayleigh(cfg.k, cfg.n_tx, rng)
    s_idx = rng.integers(0, const.size, size=(cfg.k, cfg.n_sym))
    s_c = symbols_from_indices(const, s_idx)
    cir = cir_coefficients(const, s_idx)
    lam = cir.lambda_real()
    s_r = np.concatenate([s_c.real, s_c.imag], axis=0)
    rows = []
    if cfg.scenario == "cizf":
        ups = upsilon_zf(h)
        a_base = real_composite(pseudo_inverse_fat(h)) / np.sqrt(np.linalg.norm(ups))
        deltas = _solve_labelled(a_base, lam, s_r)
        d = np.stack([deltas[:, : cfg.k].T, deltas[:, cfg.k :].T], axis=-1)
        feats = kkt_features(frobenius_normalize(ups), cir, s_c)
        rows.append((h, s_idx, feats.bias, feats.coef, d, np.nan))
    else:
        h_r = real_composite(h)
        for snr_db in cfg.snr_grid_db:
            sigma2 = cfg.p_t / 10.0 ** (snr_db / 10.0)
            ups = upsilon_mmse(h, sigma2, cfg.p_t)
            gram = h_r @ h_r.T + (sigma2 * cfg.k / cfg.p_t) * np.eye(2 * cfg.k)
            c_u = cholesky_upper(hermitian_inverse(gram))
            a_base = c_u / np.sqrt(np.linalg.norm(ups))
            deltas = _solve_labelled(a_base, lam, s_r)
            d = np.stack([deltas[:, : cfg.k].T, deltas[:, cfg.k :].T], axis=-1)
            feats = kkt_features(frobenius_normalize(ups), cir, s_c)
            rows.append((h, s_idx, feats.bias, feats.coef, d, float(snr_db)))
    return rows


def _gen_robust_channel(cfg, const, index):
    rng = _sample_rng(cfg.seed, index)
    h0 = sample_rayleigh(cfg.k, cfg.n_tx, rng)
    aging = make_aging_model(
        h0, np.float64(cfg.alpha), rng, fine_factor=cfg.fine_factor,
        density=cfg.m_density, n_symbols=cfg.n_sym,
    )
    s_idx = rng.integers(0, const.size, size=(cfg.k, cfg.n_sym))
    s_c = symbols_from_indices(const, s_idx)
    cir = cir_coefficients(const, s_idx)
    hbar = aging.alpha.T[:, :, None] * h0[None]
    e_stack = effective_gram_stack(aging)
    rows = []
    for snr_db in cfg.snr_grid_db:
        sigma2 = cfg.p_t / 10.0 ** (snr_db / 10.0)
        res = rcimmse_oracle(hbar, e_stack, aging.beta, s_idx, const, cfg.p_t, sigma2)
        # certify the stored factors against the residual kernel at psi*
        lam = cir.lambda_real()
        for l in range(cfg.n_sym):
            c_u = cholesky_upper(real_composite(np.asarray(
                _robust_upsilon_at(hbar, e_stack, aging.beta, res.psi, sigma2, cfg.p_t, l)
            )))
            a = c_u @ lam[l]
            b = c_u @ np.concatenate([s_c[:, l].real, s_c[:, l].imag])
            delta = np.concatenate([res.d[:, l, 0], res.d[:, l, 1]])
            stat, _ = nnls.kkt_residuals(a, b, delta)
            scale = max(float(np.max(np.abs(a.T @ b))), 1e-30)
            if stat > 1e-6 * scale + 1e-9:
                raise SlpkitError("robust label failed KKT certification")
        rows.append((h0, aging.m, aging.alpha, s_idx, res.psi, res.d, float(snr_db)))
    return rows, aging.v_t


def _robust_upsilon_at(hbar, e_stack, beta, psi, sigma2, p_t, l):
    from .robust import precoder_matrix, upsilon_robust

    p_mat = precoder_matrix(hbar[l], psi[:, l], beta[:, l], e_stack, sigma2, p_t)
    return upsilon_robust(psi[:, l], hbar[l], p_mat)


def gen_dataset(cfg, out_dir, workers=1):
    """Generate a labelled dataset; returns the manifest dict.

    Channels are generated from per-index seed substreams and assembled in
    index order, so outputs are byte-identical for any worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    const = build_constellation(cfg.mod_kind, cfg.mod_order)
    n_channels = cfg.n_train + cfg.n_test
    gen_one = _gen_robust_channel if cfg.scenario == "robust" else _gen_perfect_channel

    results = [None] * n_channels
    skipped = []

    def run(i):
        try:
            return gen_one(cfg, const, i)
        except SlpkitError:
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, res in enumerate(pool.map(run, range(n_channels))):
                results[i] = res
    else:
        for i in range(n_channels):
            results[i] = run(i)
    for i, res in enumerate(results):
        if res is None:
            skipped.append(i)
    if len(skipped) > MAX_SKIP_RATE * n_channels:
        raise SlpkitError(
            f"skip rate {len(skipped)}/{n_channels} exceeds {MAX_SKIP_RATE:.1%}"
        )

    v_t = None
    if cfg.scenario == "robust":
        flat_rows, counts = [], []
        for res in results:
            if res is None:
                counts.append(0)
                continue
            rows, v_t = res
            counts.append(len(rows))
            flat_rows.extend(rows)
        h, m, alpha, s_idx, psi, d, snr = map(np.stack, zip(*[
            (r[0], r[1], r[2], r[3], r[4], r[5], r[6]) for r in flat_rows
        ]))
        arrays = {
            "h": h.astype(np.complex128),
            "m": m.astype(np.float64),
            "alpha": alpha.astype(np.float64),
            "s_idx": s_idx.astype(np.int64),
            "psi": psi.astype(np.float64),
            "delta": d.astype(np.float64),
            "snr_db": snr.astype(np.float64),
            "v_t": v_t.astype(np.complex128),
        }
    else:
        flat_rows, counts = [], []
        for res in results:
            if res is None:
                counts.append(0)
                continue
            counts.append(len(res))
            flat_rows.extend(res)
        h, s_idx, bias, coef, d, snr = map(np.stack, zip(*flat_rows))
        arrays = {
            "h": h.astype(np.complex128),
            "s_idx": s_idx.astype(np.int64),
            "bias": bias.astype(np.float64),
            "coef": coef.astype(np.float64),
            "delta": d.astype(np.float64),
            "snr_db": snr.astype(np.float64),
        }

    n_train_samples = sum(counts[: cfg.n_train])
    manifest = dict(asdict(cfg))
    manifest.update(
        format="SLPD",
        version=_VERSION,
        n_samples=len(flat_rows),
        n_train_samples=n_train_samples,
        skipped=skipped,
        arrays=sorted(arrays),
    )
    write_arrays(out_dir / "arrays.slpd", arrays)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(path):
    """Read (manifest, arrays) from a dataset directory."""
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    return manifest, read_arrays(path / "arrays.slpd")


def train_test_split(manifest, arrays):
    """Split sample-indexed arrays into train/test views by the manifest."""
    n_train = manifest["n_train_samples"]
    per_sample = {k: v for k, v in arrays.items() if k != "v_t"}
    train = {k: v[:n_train] for k, v in per_sample.items()}
    test = {k: v[n_train:] for k, v in per_sample.items()}
    return train, test
