"""Test functions phi(x, w) that are trigonometric polynomials in x on each disorder atom."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qkuramoto.model import TWO_PI, DisorderLaw, InitialLaw, mode_index


def _pad(coeffs: np.ndarray, M: int) -> np.ndarray:
    cur = (coeffs.shape[-1] - 1) // 2
    if M == cur:
        return coeffs
    if M < cur:
        return coeffs[..., cur - M : cur + M + 1]
    out = np.zeros(coeffs.shape[:-1] + (2 * M + 1,), dtype=complex)
    out[..., M - cur : M + cur + 1] = coeffs
    return out


def eval_atom_modes(coeffs: np.ndarray, atom_idx, x) -> np.ndarray:
    """Re sum_k coeffs[atom_idx, k] exp(i k x) for Hermitian per-atom tables."""
    x = np.asarray(x, dtype=float)
    idx = np.broadcast_to(np.asarray(atom_idx), x.shape)
    M = (coeffs.shape[-1] - 1) // 2
    out = np.real(coeffs[idx, M]).astype(float)
    for k in range(1, M + 1):
        f = coeffs[idx, M + k]
        if not np.any(f):
            continue
        # f e^{ikx} + conj(f) e^{-ikx} = 2 Re(f) cos kx - 2 Im(f) sin kx
        out = out + 2.0 * (np.real(f) * np.cos(k * x) - np.imag(f) * np.sin(k * x))
    return out


@dataclass(frozen=True, eq=False)
class TestFunction:
    """phi(x, w_a) = sum_k coeffs[a, k] exp(i k x), k = -M..M, real-valued."""

    __test__ = False  # not a pytest class

    coeffs: np.ndarray
    label: str = ""

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 2 or c.shape[1] % 2 != 1:
            raise ValueError("coefficients must have shape (n_atoms, 2M+1)")
        c = 0.5 * (c + np.conj(c[:, ::-1]))
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def M(self) -> int:
        return (self.coeffs.shape[1] - 1) // 2

    @property
    def n_atoms(self) -> int:
        return self.coeffs.shape[0]

    @classmethod
    def trig(cls, kind: str, k: int, n_atoms: int, atom: int | None = None, M: int | None = None) -> "TestFunction":
        """``kind`` in {"one", "cos", "sin"}; ``atom=None`` means the same on every atom."""
        M = max(k, 1) if M is None else M
        c = np.zeros((n_atoms, 2 * M + 1), dtype=complex)
        rows = slice(None) if atom is None else atom
        if kind == "one":
            c[rows, M] = 1.0
        elif kind == "cos":
            c[rows, M + k] += 0.5
            c[rows, M - k] += 0.5
        elif kind == "sin":
            c[rows, M + k] += -0.5j
            c[rows, M - k] += 0.5j
        else:
            raise ValueError(f"unknown trig kind {kind!r}")
        where = "all" if atom is None else f"a{atom}"
        label = "one" if kind == "one" else f"{kind}{k}"
        return cls(c, f"{label}@{where}")

    def padded(self, M: int) -> "TestFunction":
        return TestFunction(_pad(self.coeffs, M), self.label)

    def __add__(self, other: "TestFunction") -> "TestFunction":
        M = max(self.M, other.M)
        return TestFunction(_pad(self.coeffs, M) + _pad(other.coeffs, M), f"({self.label}+{other.label})")

    def __mul__(self, s: float) -> "TestFunction":
        return TestFunction(self.coeffs * float(s), f"{s}*{self.label}")

    __rmul__ = __mul__

    def derivative(self) -> "TestFunction":
        return TestFunction(self.coeffs * (1j * mode_index(self.M)), f"d({self.label})")

    def product(self, other: "TestFunction") -> "TestFunction":
        out = np.stack([np.convolve(a, b) for a, b in zip(self.coeffs, other.coeffs)])
        return TestFunction(out, f"{self.label}*{other.label}")

    def is_constant_in_x(self, tol: float = 0.0) -> bool:
        c = self.coeffs.copy()
        c[:, self.M] = 0
        return bool(np.max(np.abs(c)) <= tol)

    def evaluate(self, x, atom_idx) -> np.ndarray:
        """phi(x_j, w_{atom_idx_j}) for broadcastable arrays."""
        return eval_atom_modes(self.coeffs, atom_idx, x)

    def expect(self, density_coeffs: np.ndarray, weights) -> float:
        """<P, phi> for P = sum_a w_a q^a(x) dx delta_a, q^a given by coefficients (n_atoms, 2Mq+1)."""
        Mq = (density_coeffs.shape[-1] - 1) // 2
        M = self.M
        ks = mode_index(M)
        ok = np.abs(ks) <= Mq
        # integral exp(ikx) q dx = 2 pi c_{-k}
        mom = np.zeros((density_coeffs.shape[0], 2 * M + 1), dtype=complex)
        mom[:, ok] = TWO_PI * density_coeffs[:, Mq - ks[ok]]
        return float(np.real(np.sum(np.asarray(weights)[:, None] * self.coeffs * mom)))

    def lambda_means(self, init: InitialLaw) -> np.ndarray:
        """Per-atom integral of phi(., w_a) against the initial law."""
        return np.real(self.coeffs @ init.moment(mode_index(self.M)))

    def expect_initial(self, init: InitialLaw, law: DisorderLaw) -> float:
        """<lambda x mu, phi>."""
        return float(np.dot(law.weight_array, self.lambda_means(init)))
