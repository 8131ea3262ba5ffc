"""Circle geometry, disorder laws, interaction models and initial laws.

Fourier convention used throughout the package: a function or density on the
circle is written ``f(x) = sum_k f_k exp(i k x)`` and coefficient arrays are
stored for ``k = -L..L`` with index ``k + L``.  Trigonometric moments of a
measure ``m`` are ``<m, exp(i l y)>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

TWO_PI = 2.0 * np.pi
DEFAULT_TABLE_MODES = 16


def wrap(x):
    """Project a real (or array of reals) onto [0, 2*pi)."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap: non-finite angle")
    out = np.mod(arr, TWO_PI)
    # fmod rounding can land exactly on 2*pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    if out.ndim == 0:
        return float(out)
    return out


def circle_distance(x, y):
    """Geodesic distance on the circle, ``min(|x-y|, 2*pi - |x-y|)``."""
    d = np.mod(np.asarray(x, dtype=float) - np.asarray(y, dtype=float), TWO_PI)
    out = np.minimum(d, TWO_PI - d)
    if out.ndim == 0:
        return float(out)
    return out


def mode_index(L: int) -> np.ndarray:
    return np.arange(-L, L + 1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# Disorder
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DisorderLaw:
    """Finite-atom law of the local frequencies."""

    atoms: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        atoms = tuple(float(a) for a in self.atoms)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        if len(atoms) == 0 or len(atoms) != len(weights):
            raise ValueError("DisorderLaw needs one weight per atom and at least one atom")
        if not all(np.isfinite(atoms)):
            raise ValueError("DisorderLaw atoms must be finite")
        if any(w <= 0 for w in weights):
            raise ValueError("DisorderLaw weights must be strictly positive")
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ValueError(f"DisorderLaw weights sum to {sum(weights)!r}, not 1")
        if len(set(atoms)) != len(atoms):
            raise ValueError("DisorderLaw atoms must be pairwise distinct")

    @classmethod
    def dirac(cls, omega: float = 0.0) -> "DisorderLaw":
        return cls((omega,), (1.0,))

    @classmethod
    def symmetric_pair(cls, omega0: float) -> "DisorderLaw":
        """The law (delta_{-omega0} + delta_{omega0}) / 2."""
        return cls((-abs(omega0), abs(omega0)), (0.5, 0.5))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def atom_array(self) -> np.ndarray:
        return np.array(self.atoms)

    @property
    def weight_array(self) -> np.ndarray:
        return np.array(self.weights)

    def mean(self) -> float:
        return float(np.dot(self.atoms, self.weights))

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        """True when the law is invariant under omega -> -omega."""
        for a, w in zip(self.atoms, self.weights):
            match = [w2 for a2, w2 in zip(self.atoms, self.weights) if abs(a2 + a) <= tol]
            if len(match) != 1 or abs(match[0] - w) > tol:
                return False
        return True

    def index_of(self, values) -> np.ndarray:
        """Atom index of each value; raises ``KeyError`` on an unknown frequency."""
        v = np.asarray(values, dtype=float)
        atoms = self.atom_array
        tol = 1e-12 * np.maximum(1.0, np.abs(atoms))
        hit = np.abs(v[..., None] - atoms) <= tol
        if not np.all(hit.any(axis=-1)):
            bad = v[~hit.any(axis=-1)]
            raise KeyError(f"frequency {float(np.ravel(bad)[0])!r} is not an atom of the disorder law")
        return np.argmax(hit, axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.n_atoms, size=n, p=self.weight_array)
        return self.atom_array[idx]

    def to_dict(self) -> dict:
        return {"atoms": list(self.atoms), "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "DisorderLaw":
        return cls(tuple(d["atoms"]), tuple(d["weights"]))


# --------------------------------------------------------------------------
# Interaction models
# --------------------------------------------------------------------------


def _eval_modes(coeffs: np.ndarray, x) -> np.ndarray:
    """Real part of sum_k coeffs[..., k] exp(i k x), broadcasting x against coeffs[..., 0]."""
    L = (coeffs.shape[-1] - 1) // 2
    ks = mode_index(L)
    phase = np.exp(1j * np.multiply.outer(np.asarray(x, dtype=float), ks))
    return np.real(np.sum(coeffs * phase, axis=-1))


@dataclass(frozen=True)
class SineModel:
    """Kuramoto sine interaction: b(x, y, w) = K sin(y - x), c(x, w) = w."""

    K: float
    kind: str = field(default="sine", init=False)

    def __post_init__(self):
        if not np.isfinite(self.K) or self.K < 0:
            raise ValueError("coupling K must be finite and >= 0")

    @property
    def n_modes(self) -> int:
        return 1

    def check_law(self, law: DisorderLaw) -> None:
        return None

    def b(self, x, y, omega=None):
        return self.K * np.sin(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))

    def c(self, x, omega):
        return np.asarray(omega, dtype=float) + 0.0 * np.asarray(x, dtype=float)

    def field_modes(self, moments: np.ndarray) -> np.ndarray:
        """Fourier modes (k=-1..1) of x -> b[x, m] given per-atom moments for l=-1..1."""
        Z = np.sum(moments[..., 2], axis=-1)
        out = np.zeros(moments.shape[:-2] + (3,), dtype=complex)
        out[..., 0] = self.K * Z / 2j
        out[..., 2] = np.conj(out[..., 0])
        return out

    def c_modes(self, law: DisorderLaw) -> np.ndarray:
        out = np.zeros((law.n_atoms, 3), dtype=complex)
        out[:, 1] = law.atom_array
        return out

    def b_modes(self, law: DisorderLaw) -> np.ndarray:
        """Double Fourier table B[a, k, l] of b(x, y, w_a) = sum B exp(ikx + ily)."""
        out = np.zeros((law.n_atoms, 3, 3), dtype=complex)
        out[:, 0, 2] = self.K / 2j
        out[:, 2, 0] = -self.K / 2j
        return out

    def to_dict(self) -> dict:
        return {"kind": "sine", "K": self.K}


@dataclass(frozen=True, eq=False)
class FourierModel:
    """General smooth periodic b, c given by truncated Fourier tables per disorder atom.

    ``b_coeffs[a, k, l]`` is the coefficient of ``exp(i k x + i l y)`` in
    ``b(x, y, atoms[a])`` and ``c_coeffs[a, k]`` that of ``exp(i k x)`` in
    ``c(x, atoms[a])``, for ``k, l = -L..L``.
    """

    atoms: tuple[float, ...]
    b_coeffs: np.ndarray
    c_coeffs: np.ndarray
    kind: str = field(default="fourier", init=False)

    def __post_init__(self):
        atoms = tuple(float(a) for a in self.atoms)
        b = np.asarray(self.b_coeffs, dtype=complex)
        c = np.asarray(self.c_coeffs, dtype=complex)
        n = len(atoms)
        if b.ndim != 3 or b.shape[0] != n or b.shape[1] != b.shape[2] or b.shape[1] % 2 != 1:
            raise ValueError("b_coeffs must have shape (n_atoms, 2L+1, 2L+1)")
        if c.shape != (n, b.shape[1]):
            raise ValueError("c_coeffs must have shape (n_atoms, 2L+1)")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ValueError("Fourier tables must be finite")
        scale = max(1.0, float(np.max(np.abs(b), initial=0.0)), float(np.max(np.abs(c), initial=0.0)))
        if np.max(np.abs(b - np.conj(b[:, ::-1, ::-1]))) > 1e-9 * scale:
            raise ValueError("b table does not represent a real function")
        if np.max(np.abs(c - np.conj(c[:, ::-1]))) > 1e-9 * scale:
            raise ValueError("c table does not represent a real function")
        # symmetrise away rounding so evaluations are exactly real
        b = 0.5 * (b + np.conj(b[:, ::-1, ::-1]))
        c = 0.5 * (c + np.conj(c[:, ::-1]))
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "b_coeffs", _readonly(b))
        object.__setattr__(self, "c_coeffs", _readonly(c))

    @property
    def n_modes(self) -> int:
        return (self.b_coeffs.shape[1] - 1) // 2

    @classmethod
    def from_functions(
        cls,
        law: DisorderLaw,
        b: Callable[[np.ndarray, np.ndarray, float], np.ndarray],
        c: Callable[[np.ndarray, float], np.ndarray],
        n_modes: int = DEFAULT_TABLE_MODES,
        n_grid: int | None = None,
    ) -> "FourierModel":
        """Tabulate vectorised callables ``b(x, y, w)`` and ``c(x, w)`` by FFT."""
        L = n_modes
        n = n_grid or max(64, 4 * L + 4)
        grid = TWO_PI * np.arange(n) / n
        X, Y = np.meshgrid(grid, grid, indexing="ij")
        ks = mode_index(L)
        B = np.empty((law.n_atoms, 2 * L + 1, 2 * L + 1), dtype=complex)
        C = np.empty((law.n_atoms, 2 * L + 1), dtype=complex)
        for a, w in enumerate(law.atoms):
            fb = np.fft.fft2(np.broadcast_to(b(X, Y, w), X.shape)) / n**2
            fc = np.fft.fft(np.broadcast_to(c(grid, w), grid.shape)) / n
            B[a] = fb[np.ix_(ks % n, ks % n)]
            C[a] = fc[ks % n]
        return cls(law.atoms, B, C)

    @classmethod
    def from_sine(cls, law: DisorderLaw, K: float, n_modes: int = DEFAULT_TABLE_MODES) -> "FourierModel":
        """Exact table for the sine model K sin(y - x), c = w."""
        L = n_modes
        B = np.zeros((law.n_atoms, 2 * L + 1, 2 * L + 1), dtype=complex)
        C = np.zeros((law.n_atoms, 2 * L + 1), dtype=complex)
        B[:, L - 1, L + 1] = K / 2j
        B[:, L + 1, L - 1] = -K / 2j
        C[:, L] = law.atom_array
        return cls(law.atoms, B, C)

    def check_law(self, law: DisorderLaw) -> None:
        if len(law.atoms) != len(self.atoms) or not np.allclose(law.atoms, self.atoms, rtol=0, atol=1e-12):
            raise ValueError("FourierModel atoms do not match the disorder law")

    def _atom(self, omega) -> np.ndarray:
        return DisorderLaw(self.atoms, (1.0 / len(self.atoms),) * len(self.atoms)).index_of(omega)

    def b(self, x, y, omega):
        a = self._atom(omega)
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        a = np.broadcast_to(a, x.shape)
        L = self.n_modes
        ks = mode_index(L)
        ex = np.exp(1j * np.multiply.outer(x, ks))
        ey = np.exp(1j * np.multiply.outer(y, ks))
        val = np.einsum("...k,...kl,...l->...", ex, self.b_coeffs[a], ey)
        return np.real(val)

    def c(self, x, omega):
        a = self._atom(omega)
        x = np.asarray(x, dtype=float)
        a = np.broadcast_to(a, x.shape)
        return _eval_modes(self.c_coeffs[a], x)

    def field_modes(self, moments: np.ndarray) -> np.ndarray:
        return np.einsum("akl,...al->...k", self.b_coeffs, moments)

    def c_modes(self, law: DisorderLaw) -> np.ndarray:
        self.check_law(law)
        return np.array(self.c_coeffs)

    def b_modes(self, law: DisorderLaw) -> np.ndarray:
        self.check_law(law)
        return np.array(self.b_coeffs)

    def to_dict(self) -> dict:
        return {
            "kind": "fourier",
            "atoms": list(self.atoms),
            "b_coeffs": _complex_to_lists(self.b_coeffs),
            "c_coeffs": _complex_to_lists(self.c_coeffs),
        }


InteractionModel = SineModel | FourierModel


def _complex_to_lists(a: np.ndarray) -> dict:
    return {"re": np.real(a).tolist(), "im": np.imag(a).tolist()}


def model_from_dict(d: dict) -> InteractionModel:
    if d.get("kind", "sine") == "sine":
        return SineModel(float(d["K"]))
    if d["kind"] == "fourier":
        b = np.array(d["b_coeffs"]["re"]) + 1j * np.array(d["b_coeffs"]["im"])
        c = np.array(d["c_coeffs"]["re"]) + 1j * np.array(d["c_coeffs"]["im"])
        return FourierModel(tuple(d["atoms"]), b, c)
    raise ValueError(f"unknown interaction kind {d['kind']!r}")


def eval_b(model: InteractionModel, x, y, omega):
    """b(x, y, omega); for GeneralFourier omega must be an atom."""
    return model.b(x, y, omega)


def eval_c(model: InteractionModel, x, omega):
    return model.c(x, omega)


# --------------------------------------------------------------------------
# Measures and the mean-field bracket b[x, m]
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PointMeasure:
    """Weighted point set on circle x frequencies; uniform weights by default."""

    x: np.ndarray
    omega: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        om = np.broadcast_to(np.asarray(self.omega, dtype=float), x.shape)
        if x.size == 0:
            raise ValueError("empty measure")
        w = np.full(x.shape, 1.0 / x.size) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != x.shape or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("measure weights must be >= 0 and sum to 1")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "omega", _readonly(om))
        object.__setattr__(self, "weights", _readonly(w))

    def trig_moments(self, L: int, atoms: Sequence[float] | None = None) -> np.ndarray:
        """Per-atom moments sum_{j in atom a} w_j exp(i l x_j), shape (n_atoms, 2L+1).

        With ``atoms=None`` everything is lumped into a single group.
        """
        e = np.exp(1j * np.multiply.outer(self.x, mode_index(L))) * self.weights[:, None]
        if atoms is None:
            return e.sum(axis=0)[None, :]
        law = DisorderLaw(tuple(atoms), (1.0 / len(atoms),) * len(atoms))
        idx = law.index_of(self.omega)
        out = np.zeros((len(atoms), 2 * L + 1), dtype=complex)
        np.add.at(out, idx, e)
        return out


def _moments_for(model: InteractionModel, m) -> np.ndarray:
    L = model.n_modes
    atoms = None if isinstance(model, SineModel) else model.atoms
    return m.trig_moments(L, atoms)


def b_bracket(model: InteractionModel, x, m):
    """b[x, m] = integral of b(x, y, w) m(dy, dw).

    ``m`` is a :class:`PointMeasure` or anything exposing ``trig_moments(L, atoms)``
    (e.g. a mean-field snapshot).  For the sine model this is the order-parameter
    formula ``K * Im(exp(-ix) <m, exp(iy)>)``.
    """
    if isinstance(m, PointMeasure) and m.x.size == 0:
        raise ValueError("empty measure")
    if isinstance(model, SineModel):
        Z = np.sum(_moments_for(model, m)[:, 2])
        out = model.K * np.imag(np.exp(-1j * np.asarray(x, dtype=float)) * Z)
        return float(out) if np.ndim(out) == 0 else out
    F = model.field_modes(_moments_for(model, m))
    out = _eval_modes(F, x)
    return float(out) if np.ndim(out) == 0 else out


def b_bracket_direct(model: InteractionModel, x, m: PointMeasure):
    """O(|support|) reference sum of b(x, y_j, w_j) weights_j."""
    x = np.asarray(x, dtype=float)
    vals = model.b(x[..., None], m.x, m.omega)
    out = np.sum(vals * m.weights, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Initial law
# --------------------------------------------------------------------------

_INITIAL_KINDS = ("uniform", "vonmises", "atom")


@dataclass(frozen=True)
class InitialLaw:
    """Law of the initial angles.

    ``vonmises`` has density proportional to exp(concentration * cos(x - center));
    ``atom`` is the point mass at ``center``.
    """

    kind: str = "uniform"
    concentration: float = 0.0
    center: float = 0.0

    def __post_init__(self):
        if self.kind not in _INITIAL_KINDS:
            raise ValueError(f"unknown initial law {self.kind!r}")
        if not np.isfinite(self.concentration) or self.concentration < 0:
            raise ValueError("concentration must be finite and >= 0")
        object.__setattr__(self, "center", wrap(self.center))
        if self.kind != "atom":
            grid = TWO_PI * np.arange(1024) / 1024
            dens = self.density(grid)
            if np.min(dens) < 0 or abs(dens.mean() * TWO_PI - 1.0) > 1e-10:
                raise ValueError("initial density is not a probability density")

    @classmethod
    def uniform(cls) -> "InitialLaw":
        return cls("uniform")

    @classmethod
    def von_mises(cls, concentration: float, center: float = 0.0) -> "InitialLaw":
        return cls("vonmises", concentration, center)

    @classmethod
    def atom_at(cls, angle: float) -> "InitialLaw":
        return cls("atom", 0.0, angle)

    def moment(self, k) -> np.ndarray:
        """<lambda, exp(i k x)> for integer k (array-valued)."""
        k = np.asarray(k)
        if self.kind == "uniform":
            return (k == 0).astype(complex)
        if self.kind == "atom":
            return np.exp(1j * k * self.center)
        ratio = special.ive(np.abs(k), self.concentration) / special.ive(0, self.concentration)
        return ratio * np.exp(1j * k * self.center)

    def density_coeffs(self, M: int) -> np.ndarray:
        """Coefficients c_k, k=-M..M, of the density: c_k = <lambda, exp(-ikx)> / (2 pi)."""
        return self.moment(-mode_index(M)) / TWO_PI

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "uniform":
            return np.full(x.shape, 1.0 / TWO_PI)
        if self.kind == "vonmises":
            kap = self.concentration
            return np.exp(kap * (np.cos(x - self.center) - 1.0)) / (TWO_PI * special.ive(0, kap))
        raise ValueError("a point mass has no density")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return wrap(rng.uniform(0.0, TWO_PI, size=n))
        if self.kind == "atom":
            return np.full(n, self.center)
        return wrap(rng.vonmises(self.center, self.concentration, size=n))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "concentration": self.concentration, "center": self.center}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialLaw":
        return cls(d.get("kind", "uniform"), float(d.get("concentration", 0.0)), float(d.get("center", 0.0)))
