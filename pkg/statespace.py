"""
Pure states over a tensor product of party spaces

Amplitudes are stored as a flat complex vector indexed row-major over the
multi-index, party 0 slowest. Every value here is immutable after
construction.
"""

import json
import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

INGEST_NORM_TOLERANCE = 1e-8
ORTHONORMAL_TOLERANCE = 1e-10
ISOMETRY_TOLERANCE = 1e-12
ZERO_WEIGHT = 1e-24


class ShapeError(ValueError):
    """Dimensions of states, parties or operators do not line up"""


class NormalizationError(ValueError):
    """A state vector is not normalized (or collapsed to zero norm)"""


class BasisError(ValueError):
    """A supplied basis is not orthonormal"""


class IsometryError(ValueError):
    """An operator asserted to be isometric is not"""


class StateFileError(ValueError):
    """A state-pair file cannot be parsed"""


@dataclass(frozen=True)
class PartySpace:
    """Local dimensions of the parties sharing a state"""
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ShapeError("PartySpace needs at least one party")
        if any(d < 1 for d in dims):
            raise ShapeError(f"Party dimensions must be >= 1, got {dims}")
        object.__setattr__(self, 'dims', dims)

    @property
    def n_parties(self) -> int:
        return len(self.dims)

    @property
    def total(self) -> int:
        return int(np.prod(self.dims))

    def check_party(self, party: int) -> None:
        if not 0 <= party < self.n_parties:
            raise ShapeError(f"Party index {party} out of range for dims {self.dims}")

    def complement(self, party: int) -> 'PartySpace':
        """Space of every party except `party` (a trivial party if none are left)"""
        self.check_party(party)
        rest = self.dims[:party] + self.dims[party + 1:]
        return PartySpace(rest or (1,))

    def tail(self) -> 'PartySpace':
        return self.complement(0)


def party_matrix(amplitudes: np.ndarray, dims: Sequence[int], party: int) -> np.ndarray:
    """Reshape amplitudes to a (dims[party], rest) matrix, rest in original order"""
    tensor = np.asarray(amplitudes).reshape(tuple(dims))
    return np.moveaxis(tensor, party, 0).reshape(dims[party], -1)


def from_party_matrix(matrix: np.ndarray, dims: Sequence[int], party: int) -> np.ndarray:
    """Inverse of party_matrix; `dims[party]` may differ from the original"""
    dims = tuple(dims)
    moved = (dims[party],) + dims[:party] + dims[party + 1:]
    tensor = np.asarray(matrix).reshape(moved)
    return np.moveaxis(tensor, 0, party).reshape(-1)


@dataclass(frozen=True, eq=False)
class PureState:
    """Unit vector over a PartySpace"""
    space: PartySpace
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex).reshape(-1)
        if amps.size != self.space.total:
            raise ShapeError(f"Expected {self.space.total} amplitudes for dims "
                             f"{self.space.dims}, got {amps.size}")
        norm = float(np.linalg.norm(amps))
        if abs(norm - 1.0) > INGEST_NORM_TOLERANCE:
            raise NormalizationError(f"State norm {norm!r} deviates from 1 by more "
                                     f"than {INGEST_NORM_TOLERANCE}")
        amps = amps / norm
        amps.setflags(write=False)
        object.__setattr__(self, 'amplitudes', amps)

    @classmethod
    def from_vector(cls, vector: Any, dims: Sequence[int] | None = None) -> 'PureState':
        vec = np.asarray(vector, dtype=complex).reshape(-1)
        return cls(PartySpace(tuple(dims) if dims is not None else (vec.size,)), vec)

    @classmethod
    def normalized(cls, vector: Any, dims: Sequence[int]) -> 'PureState':
        """Build a state from an unnormalized nonzero vector"""
        vec = np.asarray(vector, dtype=complex).reshape(-1)
        norm = float(np.linalg.norm(vec))
        if norm <= 0.0:
            raise NormalizationError("Cannot normalize a zero vector")
        return cls(PartySpace(tuple(dims)), vec / norm)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.space.dims

    def matrix(self, party: int) -> np.ndarray:
        self.space.check_party(party)
        return party_matrix(self.amplitudes, self.dims, party)

    def phase_shifted(self, phase: float) -> 'PureState':
        return PureState(self.space, np.exp(1j * phase) * self.amplitudes)

    def __repr__(self):
        return f'<PureState dims={self.dims}>'


def product_state(*vectors: Any) -> PureState:
    """Tensor product of local unit vectors, party 0 first"""
    amps = np.array([1.0 + 0j])
    dims = []
    for vec in vectors:
        vec = np.asarray(vec, dtype=complex).reshape(-1)
        amps = np.kron(amps, vec)
        dims.append(vec.size)
    return PureState(PartySpace(tuple(dims)), amps)


def basis_state(dims: Sequence[int], *digits: int) -> PureState:
    """Computational basis state |digits> over `dims`"""
    space = PartySpace(tuple(dims))
    if len(digits) != space.n_parties:
        raise ShapeError(f"Need {space.n_parties} digits, got {len(digits)}")
    amps = np.zeros(space.total, dtype=complex)
    amps[np.ravel_multi_index(digits, space.dims)] = 1.0
    return PureState(space, amps)


def _check_same_space(a: PureState, b: PureState) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"States live on different spaces: {a.dims} vs {b.dims}")


def inner_product(a: PureState, b: PureState) -> complex:
    """<a|b>, conjugating the first argument"""
    _check_same_space(a, b)
    return complex(np.vdot(a.amplitudes, b.amplitudes))


@dataclass(frozen=True, eq=False)
class OverlapMatrix:
    """C = Tr_complement(|psi><phi|) on one party, written in a declared basis

    `basis` holds the basis vectors as columns; entries are E^dagger C E.
    """
    entries: np.ndarray
    party: int
    basis: np.ndarray

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def trace(self) -> complex:
        return complex(np.trace(self.entries))

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.entries).copy()

    def conjugated(self, unitary: np.ndarray) -> 'OverlapMatrix':
        """Rewrite in the basis obtained by applying `unitary` to the coefficient rows"""
        w = np.asarray(unitary, dtype=complex)
        return OverlapMatrix(w @ self.entries @ w.conj().T, self.party,
                             self.basis @ w.conj().T)


def overlap_operator(psi: PureState, phi: PureState, party: int,
                     basis: np.ndarray | None = None) -> OverlapMatrix:
    """Partial trace over the complement of |psi><phi|, trace = <phi|psi>"""
    _check_same_space(psi, phi)
    psi.space.check_party(party)
    entries = psi.matrix(party) @ phi.matrix(party).conj().T
    d = psi.dims[party]
    if basis is None:
        return OverlapMatrix(entries, party, np.eye(d, dtype=complex))
    e = _basis_matrix(basis, d)
    return OverlapMatrix(e.conj().T @ entries @ e, party, e)


def _basis_matrix(basis: Any, d: int) -> np.ndarray:
    if isinstance(basis, np.ndarray) and basis.ndim == 2:
        e = basis.astype(complex)
    else:
        e = np.column_stack([np.asarray(v, dtype=complex).reshape(-1) for v in basis])
    if e.shape != (d, d):
        raise BasisError(f"Basis must hold {d} vectors of length {d}, got shape {e.shape}")
    residual = float(np.max(np.abs(e.conj().T @ e - np.eye(d))))
    if residual > ORTHONORMAL_TOLERANCE:
        raise BasisError(f"Basis is not orthonormal (residual {residual:.3e})")
    return e


@dataclass(frozen=True, eq=False)
class StatePairDecomposition:
    """phi = sum_i sqrt(r_i)|e_i>|eta_i>, psi = sum_i sqrt(s_i)|e_i>|gamma_i>

    eta_i / gamma_i are None where the matching weight vanishes.
    """
    space: PartySpace
    party: int
    alice_basis: tuple[np.ndarray, ...]
    r: np.ndarray
    s: np.ndarray
    eta: tuple[Optional[np.ndarray], ...]
    gamma: tuple[Optional[np.ndarray], ...]

    def _reassemble(self, weights, vectors) -> np.ndarray:
        rest = self.space.total // self.space.dims[self.party]
        mat = np.zeros((self.space.dims[self.party], rest), dtype=complex)
        for e, w, v in zip(self.alice_basis, weights, vectors):
            if v is not None:
                mat += np.sqrt(w) * np.outer(e, v)
        return from_party_matrix(mat, self.space.dims, self.party)

    def reconstruct_phi(self) -> np.ndarray:
        return self._reassemble(self.r, self.eta)

    def reconstruct_psi(self) -> np.ndarray:
        return self._reassemble(self.s, self.gamma)


def _split_rows(rows: np.ndarray) -> tuple[np.ndarray, tuple[Optional[np.ndarray], ...]]:
    weights = np.sum(np.abs(rows) ** 2, axis=1)
    vectors = tuple(row / np.sqrt(w) if w > ZERO_WEIGHT else None
                    for row, w in zip(rows, weights))
    return weights, vectors


def decompose_pair(phi: PureState, psi: PureState, party: int,
                   basis: Any) -> StatePairDecomposition:
    """Write both states term by term along an orthonormal basis of `party`

    `basis` is a sequence of vectors, or a square matrix holding them as columns.
    """
    _check_same_space(phi, psi)
    phi.space.check_party(party)
    e = _basis_matrix(basis, phi.dims[party])
    r, eta = _split_rows(e.conj().T @ phi.matrix(party))
    s, gamma = _split_rows(e.conj().T @ psi.matrix(party))
    return StatePairDecomposition(phi.space, party, tuple(e.T.copy()), r, s, eta, gamma)


def apply_operator(op: np.ndarray, party: int, dims: Sequence[int],
                   amplitudes: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
    """Apply `op` to one tensor factor of a raw (possibly unnormalized) vector"""
    dims = tuple(dims)
    op = np.asarray(op, dtype=complex)
    if op.ndim != 2 or op.shape[1] != dims[party]:
        raise ShapeError(f"Operator shape {op.shape} does not act on party {party} "
                         f"of dimension {dims[party]}")
    out = op @ party_matrix(amplitudes, dims, party)
    new_dims = dims[:party] + (op.shape[0],) + dims[party + 1:]
    return new_dims, from_party_matrix(out, new_dims, party)


def isometry_residual(op: np.ndarray) -> float:
    op = np.asarray(op, dtype=complex)
    return float(np.max(np.abs(op.conj().T @ op - np.eye(op.shape[1]))))


def apply_local(op: np.ndarray, party: int, state: PureState, *,
                isometric: bool = True) -> PureState:
    """Apply a local operator to one party

    With isometric=True the operator must satisfy op^dagger op = I and the
    norm is preserved; otherwise the result is renormalized (collapse).
    """
    state.space.check_party(party)
    op = np.asarray(op, dtype=complex)
    if isometric:
        if op.ndim != 2 or op.shape[0] < op.shape[1]:
            raise IsometryError(f"Operator of shape {op.shape} cannot be an isometry")
        residual = isometry_residual(op)
        if residual > ISOMETRY_TOLERANCE:
            raise IsometryError(f"Operator is not isometric (residual {residual:.3e})")
    new_dims, amps = apply_operator(op, party, state.dims, state.amplitudes)
    if not isometric:
        norm = float(np.linalg.norm(amps))
        if norm <= 0.0:
            raise NormalizationError("Operator annihilates the state")
        amps = amps / norm
    return PureState(PartySpace(new_dims), amps)


@dataclass(frozen=True, eq=False)
class SchmidtDecomposition:
    coefficients: np.ndarray
    left_basis: tuple[np.ndarray, ...]
    right_basis: tuple[np.ndarray, ...]
    space: PartySpace
    cut: int

    def reconstruct(self) -> np.ndarray:
        mat = sum(c * np.outer(u, v) for c, u, v in
                  zip(self.coefficients, self.left_basis, self.right_basis))
        return from_party_matrix(mat, self.space.dims, self.cut)


def schmidt(state: PureState, cut: int) -> SchmidtDecomposition:
    """Schmidt decomposition across (cut party | everyone else)"""
    state.space.check_party(cut)
    u, s, vh = linalg.svd(state.matrix(cut), full_matrices=False)
    return SchmidtDecomposition(s, tuple(u.T.copy()), tuple(vh.copy()), state.space, cut)


def random_unitary(dim: int, seed: Any = None) -> np.ndarray:
    """Haar-random unitary: QR of a complex Gaussian matrix with phase-fixed R"""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def _gaussian_vector(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def random_state(space: PartySpace, seed: Any = None) -> PureState:
    """Haar-random pure state on `space`"""
    rng = np.random.default_rng(seed)
    vec = _gaussian_vector(rng, space.total)
    return PureState(space, vec / np.linalg.norm(vec))


def random_pair(space: PartySpace, target_overlap_magnitude: float,
                seed: Any = None) -> tuple[PureState, PureState]:
    """Haar-random phi and a psi with |<phi|psi>| = target and a random phase"""
    c = float(target_overlap_magnitude)
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"Target overlap must lie in [0, 1], got {c}")
    if c < 1.0 and space.total < 2:
        raise ShapeError("A non-identical pair needs total dimension >= 2")
    rng = np.random.default_rng(seed)
    phi = _gaussian_vector(rng, space.total)
    phi /= np.linalg.norm(phi)
    chi = rng.uniform(0.0, 2.0 * np.pi)
    psi = c * phi
    if c < 1.0:
        perp = _gaussian_vector(rng, space.total)
        for _ in range(2):
            perp -= np.vdot(phi, perp) * phi
        perp /= np.linalg.norm(perp)
        psi = psi + np.sqrt(1.0 - c * c) * perp
    return PureState(space, phi), PureState(space, np.exp(1j * chi) * psi)


def encode_complex_array(values: Any) -> list:
    """Nested [re, im] lists for JSON"""
    arr = np.asarray(values, dtype=complex)
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def decode_complex_array(data: Any) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim < 1 or arr.shape[-1] != 2:
        raise ValueError("Complex values must be encoded as [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def to_json_text(payload: Any) -> str:
    """Sorted keys, shortest round-trip floats, trailing newline"""
    return json.dumps(payload, sort_keys=True, indent=2) + '\n'


def state_pair_to_dict(phi: PureState, psi: PureState) -> dict:
    _check_same_space(phi, psi)
    return {
        'dims': list(phi.dims),
        'phi': encode_complex_array(phi.amplitudes),
        'psi': encode_complex_array(psi.amplitudes),
    }


def state_pair_from_dict(data: Any) -> tuple[PureState, PureState]:
    try:
        dims = tuple(int(d) for d in data['dims'])
        space = PartySpace(dims)
        phi = PureState(space, decode_complex_array(data['phi']))
        psi = PureState(space, decode_complex_array(data['psi']))
    except (KeyError, TypeError) as e:
        raise StateFileError(f"Malformed state-pair data: {e}") from e
    return phi, psi


def write_state_pair(path: str, phi: PureState, psi: PureState) -> None:
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(to_json_text(state_pair_to_dict(phi, psi)))
    logger.info(f"Wrote state pair with dims {phi.dims} to {path}")


def read_state_pair(path: str) -> tuple[PureState, PureState]:
    try:
        with open(path, encoding='utf-8') as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        logger.error(f"State-pair file {path} is not valid JSON: {e}")
        raise StateFileError(f"{path}: {e}") from e
    return state_pair_from_dict(data)
