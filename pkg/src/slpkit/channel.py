"""Channel generation: i.i.d. Rayleigh draws and a first-order Markov aging model.

The aged channel at symbol l is
    h_k[l] = alpha_k[l] * h_k[0] + sqrt(1 - alpha_k[l]^2) * conj(V_T) (m_k o w_k[l])
with V_T a partial oversampled-DFT matrix, m_k a sparse nonnegative spectral
profile held fixed over a block, and w_k[l] i.i.d. CN(0, 1).
"""

from dataclasses import dataclass, field

import numpy as np


def sample_rayleigh(n_users, n_tx, rng):
    """i.i.d. circularly-symmetric complex Gaussian channel, unit entry variance."""
    re = rng.standard_normal((n_users, n_tx))
    im = rng.standard_normal((n_users, n_tx))
    return (re + 1j * im) / np.sqrt(2.0)


def build_partial_dft(n_tx, fine_factor):
    """Partial DFT matrix, n_tx rows of the (fine_factor * n_tx)-point DFT.

    Entry (i, m) = exp(-2j*pi*i*m / (fine_factor*n_tx)) / sqrt(fine_factor*n_tx);
    every row has unit norm, and for fine_factor == 1 the rows are orthonormal.
    """
    n = fine_factor * n_tx
    i = np.arange(n_tx)[:, None]
    m = np.arange(n)[None, :]
    return np.exp(-2j * np.pi * i * m / n) / np.sqrt(n)


def sample_spectral_profile(n_tx, fine_factor, rng, density=0.25):
    """Sparse nonnegative profile m with sum(m^2) = fine_factor * n_tx.

    The normalization makes the alpha=0 branch of the aging model preserve
    E||h_k||^2 = n_tx (each DFT column carries norm^2 = 1/fine_factor).
    """
    n = fine_factor * n_tx
    n_active = max(1, int(round(density * n)))
    m = np.zeros(n)
    support = rng.choice(n, size=n_active, replace=False)
    m[support] = np.abs(rng.standard_normal(n_active))
    if not m.any():
        m[support[0]] = 1.0
    return m * np.sqrt(n / np.sum(m**2))


@dataclass
class AgingModel:
    """Pilot-phase channel plus the parameters of its temporal evolution."""

    h0: np.ndarray  # (K, N_T) complex
    alpha: np.ndarray  # (K, L) in (0, 1]
    m: np.ndarray  # (K, N_F*N_T) nonnegative
    v_t: np.ndarray = field(repr=False)  # (N_T, N_F*N_T) partial DFT
    fine_factor: int = 1

    @property
    def beta(self):
        return np.sqrt(1.0 - self.alpha**2)

    @property
    def n_users(self):
        return self.h0.shape[0]

    @property
    def n_tx(self):
        return self.h0.shape[1]

    @property
    def n_symbols(self):
        return self.alpha.shape[1]


def make_aging_model(h0, alpha, rng, fine_factor=1, density=0.25, n_symbols=None):
    """Assemble an AgingModel; scalar alpha is shared by all users and symbols."""
    h0 = np.asarray(h0)
    n_users, n_tx = h0.shape
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 0:
        if n_symbols is None:
            raise ValueError("n_symbols required with scalar alpha")
        alpha = np.full((n_users, n_symbols), float(alpha))
    v_t = build_partial_dft(n_tx, fine_factor)
    m = np.stack(
        [sample_spectral_profile(n_tx, fine_factor, rng, density) for _ in range(n_users)]
    )
    return AgingModel(h0=h0, alpha=alpha, m=m, v_t=v_t, fine_factor=fine_factor)


def sample_aged_channel(model, l, rng):
    """Draw the true channel at symbol slot l (1-based) from the aging model."""
    alpha = model.alpha[:, l - 1][:, None]
    beta = np.sqrt(1.0 - alpha**2)
    n = model.m.shape[1]
    w = (rng.standard_normal((model.n_users, n)) + 1j * rng.standard_normal((model.n_users, n))) / np.sqrt(2.0)
    innovation = (model.m * w) @ model.v_t.conj().T  # row k: conj(V_T) (m_k o w_k)
    return alpha * model.h0 + beta * innovation


def effective_matrices(m_k, v_t):
    """Innovation shaping matrix V_k and its Gram matrix E_k for one user.

    V_k has i-th column m_k o conj(v_i) (v_i the i-th row of v_t), so that
    beta^2 ||V_k x||^2 is exactly the received innovation-noise variance under
    the conj(V_T)-shaped aging model; E_k = V_k^H V_k is Hermitian PSD with
    ||V_k x||^2 = x^H E_k x.
    """
    v_k = m_k[:, None] * v_t.conj().T  # (N_F*N_T, N_T)
    return v_k, v_k.conj().T @ v_k


def effective_gram_stack(model):
    """E_k for every user, stacked (K, N_T, N_T)."""
    return np.stack(
        [effective_matrices(model.m[k], model.v_t)[1] for k in range(model.n_users)]
    )


def jakes_autocorrelation(fd_ts, lags):
    """J0(2*pi*fd_ts*lag) via the Abramowitz-Stegun polynomial approximation."""
    x = 2.0 * np.pi * fd_ts * np.asarray(lags, dtype=np.float64)
    ax = np.abs(x)
    small = ax <= 3.0
    t = (x / 3.0) ** 2
    j0_small = (
        1.0
        + t * (-2.2499997 + t * (1.2656208 + t * (-0.3163866
        + t * (0.0444479 + t * (-0.0039444 + t * 0.0002100)))))
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        u = 3.0 / np.where(small, 3.0, ax)
        f0 = (
            0.79788456
            + u * (-0.00000077 + u * (-0.00552740 + u * (-0.00009512
            + u * (0.00137237 + u * (-0.00072805 + u * 0.00014476)))))
        )
        th0 = (
            ax - 0.78539816
            + u * (-0.04166397 + u * (-0.00003954 + u * (0.00262573
            + u * (-0.00054125 + u * (-0.00029333 + u * 0.00013558)))))
        )
        j0_large = f0 * np.cos(th0) / np.sqrt(np.where(small, 1.0, ax))
    return np.where(small, j0_small, j0_large)
