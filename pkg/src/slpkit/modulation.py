"""Constellations, constructive-interference boundary directions, demodulation.

Each constellation point carries a pair (mu, nu) of complex boundary
directions: any perturbation s + a*mu + b*nu with a, b >= 0 stays inside the
point's decision region (deeper for PSK sectors and QAM edge/corner points).
Inner QAM points have both directions locked at exactly zero.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, UnsupportedOrder


@dataclass(frozen=True)
class Constellation:
    """Unit-average-energy constellation plus per-point boundary directions."""

    kind: str  # "psk" | "qam"
    order: int
    points: np.ndarray = field(repr=False)  # (M,) complex
    mu: np.ndarray = field(repr=False)  # (M,) complex boundary direction
    nu: np.ndarray = field(repr=False)  # (M,) complex boundary direction

    @property
    def size(self):
        return self.points.shape[0]


def _psk_constellation(m):
    # phases (2i+1)*pi/M so the QPSK decision boundaries sit on the axes
    phases = (2 * np.arange(m) + 1) * np.pi / m
    points = np.exp(1j * phases)
    mu = np.exp(1j * (phases + np.pi / m))
    nu = np.exp(1j * (phases - np.pi / m))
    return points, mu, nu


def _qam_constellation(m):
    side = int(round(np.sqrt(m)))
    levels = np.arange(-side + 1, side, 2, dtype=np.float64)  # odd grid
    re, im = np.meshgrid(levels, levels, indexing="ij")
    raw = (re + 1j * im).ravel()
    scale = np.sqrt(np.mean(np.abs(raw) ** 2))
    points = raw / scale
    # outward axis direction for coordinates on the grid extreme, else locked
    mu = np.where(re.ravel() == levels[-1], 1.0 + 0j, 0.0)
    mu = np.where(re.ravel() == levels[0], -1.0 + 0j, mu)
    nu = np.where(im.ravel() == levels[-1], 1j, 0.0)
    nu = np.where(im.ravel() == levels[0], -1j, nu)
    return points, mu, nu


def build_constellation(kind, order):
    """Build a PSK or QAM constellation with CIR boundary directions."""
    kind = kind.lower()
    if kind == "psk":
        if order < 2 or order & (order - 1):
            raise UnsupportedOrder(f"PSK order must be a power of two, got {order}")
        points, mu, nu = _psk_constellation(order)
    elif kind == "qam":
        if order not in (4, 16, 64):
            raise UnsupportedOrder(f"QAM order must be one of 4/16/64, got {order}")
        points, mu, nu = _qam_constellation(order)
    else:
        raise UnsupportedOrder(f"unknown modulation kind {kind!r}")
    return Constellation(kind=kind, order=order, points=points, mu=mu, nu=nu)


@dataclass(frozen=True)
class CirCoefficients:
    """Per-user, per-symbol boundary directions for a symbol block."""

    mu: np.ndarray  # (K, L) complex
    nu: np.ndarray  # (K, L) complex

    def lambda_real(self):
        """Real 2K x 2K coupling matrices, one per symbol: (L, 2K, 2K).

        Layout [[diag Re(mu), diag Re(nu)], [diag Im(mu), diag Im(nu)]] so
        that s_real + Lambda @ [d_mu; d_nu] represents the perturbed symbols.
        """
        k, n_sym = self.mu.shape
        lam = np.zeros((n_sym, 2 * k, 2 * k), dtype=np.float64)
        idx = np.arange(k)
        for l in range(n_sym):
            lam[l, idx, idx] = self.mu[:, l].real
            lam[l, idx, k + idx] = self.nu[:, l].real
            lam[l, k + idx, idx] = self.mu[:, l].imag
            lam[l, k + idx, k + idx] = self.nu[:, l].imag
        return lam


def cir_coefficients(constellation, symbol_idx):
    """Look up (mu, nu) for a K x L array of constellation point indices."""
    symbol_idx = np.asarray(symbol_idx)
    return CirCoefficients(
        mu=constellation.mu[symbol_idx], nu=constellation.nu[symbol_idx]
    )


def symbols_from_indices(constellation, symbol_idx):
    return constellation.points[np.asarray(symbol_idx)]


def demodulate(y, gamma_bar, constellation):
    """Nearest-point decisions for scaled observations.

    y may be any shape; returns integer indices of the same shape. Distance
    ties resolve to the lowest point index (np.argmin convention).
    """
    y = np.asarray(y) / float(gamma_bar)
    d2 = np.abs(y[..., None] - constellation.points) ** 2
    return np.argmin(d2, axis=-1)


def symbol_error_rate(sent, decided):
    """Fraction of mismatched entries between two index arrays."""
    sent = np.asarray(sent)
    decided = np.asarray(decided)
    if sent.shape != decided.shape:
        raise ShapeMismatch(f"{sent.shape} vs {decided.shape}")
    return float(np.mean(sent != decided))
