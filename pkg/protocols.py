"""
Compiler from a state pair to an explicit LOCC discrimination protocol

The optimal strategy canonicalizes the pair on the first party, pairs off
negative-sign terms against positive ones so that every branch is either
perfectly distinguishable or has a non-negative aligned overlap, and
realizes all branches with one ancilla isometry on the first party followed
by a projective ancilla readout. Orthogonal branches continue with the
Walgate construction; the others recurse over the remaining parties and end
in an unambiguous measurement on the last party.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np
from scipy import linalg

from canonical import CanonicalForm, PreconditionError, canonicalize, constant_diagonal_unitary
from models import AncillaIsometry, LeafVerdict, MeasureNode, Outcome, ProtocolTree, Verdict, iter_nodes
from statespace import (
    PureState,
    apply_operator,
    inner_product,
)

logger = logging.getLogger(__name__)

ORTHOGONALITY_GATE = 1e-10
DEGENERATE_OVERLAP = 1e-12
PRUNE_WEIGHT = 1e-14
BRANCH_WEIGHT_FLOOR = 1e-13
RECONSTRUCTION_TOLERANCE = 1e-9
COMPLETENESS_TOLERANCE = 1e-10
ISOMETRY_TOLERANCE = 1e-12
POSITIVITY_TOLERANCE = 1e-10
HERMITICITY_TOLERANCE = 1e-12
WALGATE_DIAGONAL_TOLERANCE = 1e-10


class DegenerateStatesError(ValueError):
    """The two states are identical up to phase"""


class SignError(ValueError):
    """Term signs do not match the pairing request"""


class ProtocolValidationError(RuntimeError):
    """A compiled tree failed its structural checks"""

    def __init__(self, message: str, report: Optional['ValidationReport'] = None):
        super().__init__(message)
        self.report = report


def _as_vector(v: Any) -> np.ndarray:
    if isinstance(v, PureState):
        return v.amplitudes.reshape(-1)
    return np.asarray(v, dtype=complex).reshape(-1)


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Square root of a positive semidefinite matrix via eigh, clipping round-off negatives"""
    hermitian = 0.5 * (matrix + matrix.conj().T)
    values, vectors = linalg.eigh(hermitian)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.conj().T


def idp_bound(phi: PureState, psi: PureState) -> float:
    """Optimal conclusive probability 1 - |<phi|psi>| for equal priors"""
    return 1.0 - abs(inner_product(phi, psi))


@dataclass(frozen=True, eq=False)
class PovmElementSet:
    elements: tuple[tuple[str, np.ndarray], ...]

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.elements]

    @property
    def dim(self) -> int:
        return self.elements[0][1].shape[0]

    def element(self, label: str) -> np.ndarray:
        return dict(self.elements)[label]

    def probability(self, label: str, vector: Any) -> float:
        v = _as_vector(vector)
        return float(np.vdot(v, self.element(label) @ v).real)

    def kraus(self) -> list[tuple[str, np.ndarray]]:
        return [(label, psd_sqrt(e)) for label, e in self.elements]


def idp_povm(mu: Any, nu: Any) -> PovmElementSet:
    """Unambiguous three-outcome measurement for |mu> vs |nu> with equal priors"""
    mu, nu = _as_vector(mu), _as_vector(nu)
    if mu.shape != nu.shape:
        raise ValueError(f"Vectors live on different spaces: {mu.shape} vs {nu.shape}")
    c = complex(np.vdot(mu, nu))
    if abs(c) >= 1.0 - DEGENERATE_OVERLAP:
        raise DegenerateStatesError(f"|<mu|nu>| = {abs(c):.15f}; the states are identical")

    scale = 1.0 / (1.0 + abs(c))
    nu_perp = mu - np.conj(c) * nu
    nu_perp /= np.linalg.norm(nu_perp)
    mu_perp = nu - c * mu
    mu_perp /= np.linalg.norm(mu_perp)
    e_phi = scale * np.outer(nu_perp, nu_perp.conj())
    e_psi = scale * np.outer(mu_perp, mu_perp.conj())
    e_inc = np.eye(len(mu)) - e_phi - e_psi
    e_inc = 0.5 * (e_inc + e_inc.conj().T)
    return PovmElementSet(((Verdict.PHI.value, e_phi),
                           (Verdict.PSI.value, e_psi),
                           (Verdict.INCONCLUSIVE.value, e_inc)))


# ---------------------------------------------------------------------------
# Sign resolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Term:
    """sqrt(weight) |alice_vector> (x) |mu>, paired with the same weight on |nu>"""
    index: int
    weight: float
    alice_vector: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    rho: float
    sign: int


@dataclass(frozen=True, eq=False)
class BranchRecord:
    """Orthogonal branch: weight taken from each contributing term

    phi_part / psi_part are the unnormalized branch components as
    (alice dim x rest) matrices.
    """
    parts: tuple[tuple[int, float], ...]
    alpha: float
    role_exchanged: bool
    phi_part: np.ndarray
    psi_part: np.ndarray

    @property
    def weight(self) -> float:
        return float(sum(w for _, w in self.parts))

    def overlap(self) -> complex:
        return complex(np.vdot(self.phi_part, self.psi_part))


@dataclass(frozen=True, eq=False)
class TermLedger:
    terms: tuple[Term, ...]
    history: tuple[BranchRecord, ...] = ()

    @classmethod
    def from_form(cls, form: CanonicalForm) -> 'TermLedger':
        terms = tuple(Term(i, float(form.t[i]), form.alice_vector(i), form.mu[i].copy(),
                           form.nu[i].copy(), float(form.rho[i]), int(form.sign[i]))
                      for i in range(form.n) if form.present[i])
        return cls(terms)

    def term(self, index: int) -> Term:
        for term in self.terms:
            if term.index == index:
                return term
        raise KeyError(index)

    def negatives(self) -> list[Term]:
        return [t for t in self.terms if t.sign < 0]

    def positives(self) -> list[Term]:
        return [t for t in self.terms if t.sign > 0]

    def total_weight(self) -> float:
        return float(sum(t.weight for t in self.terms) + sum(b.weight for b in self.history))

    def aligned_overlap(self) -> float:
        """sum t*rho over live terms; orthogonal branches contribute zero"""
        return float(sum(t.weight * t.rho for t in self.terms))


def _component(parts: Sequence[tuple[Term, float]], use_nu: bool) -> np.ndarray:
    return sum(np.sqrt(w) * np.outer(term.alice_vector, term.nu if use_nu else term.mu)
               for term, w in parts)


def pair_terms(ledger: TermLedger, pos: int, neg: int) -> tuple[TermLedger, BranchRecord]:
    """Cancel the aligned overlap of term `neg` against term `pos`

    The larger of t_p rho_p and t_n |rho_n| keeps its term with reduced
    weight; the other term is used up. The emitted branch has zero overlap.
    """
    p, n = ledger.term(pos), ledger.term(neg)
    if p.sign != 1 or n.sign != -1:
        logger.error(f"Cannot pair terms {pos} (sign {p.sign}) and {neg} (sign {n.sign})")
        raise SignError(f"pair_terms needs sign(pos)=+1 and sign(neg)=-1, "
                        f"got {p.sign} and {n.sign}")

    gain, loss = p.weight * p.rho, n.weight * abs(n.rho)
    role_exchanged = gain < loss
    if not role_exchanged:
        alpha = float(np.arccos(np.sqrt(min(1.0, loss / gain))))
        used = p.weight * np.cos(alpha) ** 2
        parts = [(p, used), (n, n.weight)]
        survivor = replace(p, weight=p.weight - used)
    else:
        alpha = float(np.arccos(np.sqrt(min(1.0, gain / loss))))
        used = n.weight * np.cos(alpha) ** 2
        parts = [(p, p.weight), (n, used)]
        survivor = replace(n, weight=n.weight - used)

    branch = BranchRecord(tuple((term.index, float(w)) for term, w in parts), alpha,
                          role_exchanged, _component(parts, False), _component(parts, True))
    terms = []
    for term in ledger.terms:
        if term.index == survivor.index and survivor.weight > PRUNE_WEIGHT:
            terms.append(survivor)
        elif term.index not in (pos, neg):
            terms.append(term)
    logger.debug(f"Paired +{pos} with -{neg}: alpha={alpha:.6f} branch weight={branch.weight:.6e} "
                 f"{'role exchange ' if role_exchanged else ''}survivor weight={survivor.weight:.3e}")
    return TermLedger(tuple(terms), ledger.history + (branch,)), branch


@dataclass(frozen=True, eq=False)
class BranchPlan:
    orthogonal: tuple[BranchRecord, ...]
    residual: tuple[Term, ...]
    pair_calls: int

    def total_weight(self) -> float:
        return float(sum(b.weight for b in self.orthogonal) + sum(t.weight for t in self.residual))

    def residual_overlap(self) -> float:
        return float(sum(t.weight * t.rho for t in self.residual))


def resolve_signs(form: CanonicalForm) -> BranchPlan:
    """Pair the largest negative term with the largest positive one until no negatives remain"""
    aligned = float(np.sum(form.t * form.rho))
    if aligned <= DEGENERATE_OVERLAP:
        logger.error(f"Aligned overlap {aligned:.3e} is not positive; cannot resolve signs")
        raise PreconditionError(f"resolve_signs needs a positive aligned overlap, got {aligned:.3e}")

    ledger = TermLedger.from_form(form)
    calls = 0
    while ledger.negatives():
        neg = max(ledger.negatives(), key=lambda t: t.weight * abs(t.rho))
        positives = ledger.positives()
        if not positives:
            raise SignError("Negative terms remain with no positive term to pair against")
        pos = max(positives, key=lambda t: t.weight * t.rho)
        ledger, _ = pair_terms(ledger, pos.index, neg.index)
        calls += 1

    plan = BranchPlan(ledger.history, ledger.terms, calls)
    logger.debug(f"Sign resolution: {len(plan.orthogonal)} orthogonal branches, "
                 f"{len(plan.residual)} residual terms after {calls} pairings")
    return plan


# ---------------------------------------------------------------------------
# Tree construction
# ---------------------------------------------------------------------------

def _leaf(verdict: Verdict) -> LeafVerdict:
    return LeafVerdict(verdict)


def _povm_node(povm: PovmElementSet, party: int) -> MeasureNode:
    outcomes = tuple(Outcome(label, k, _leaf(Verdict(label))) for label, k in povm.kraus()
                     if np.max(np.abs(k)) > PRUNE_WEIGHT)
    return MeasureNode(party, outcomes)


def _single_party_orthogonal(phi: np.ndarray, psi: np.ndarray, party: int) -> MeasureNode:
    psi_perp = psi - np.vdot(phi, psi) * phi
    psi_perp /= np.linalg.norm(psi_perp)
    proj = np.outer(psi_perp, psi_perp.conj())
    return MeasureNode(party, (
        Outcome(Verdict.PHI.value, np.eye(len(phi)) - proj, _leaf(Verdict.PHI)),
        Outcome(Verdict.PSI.value, proj, _leaf(Verdict.PSI)),
    ))


def _orthogonal(phi: PureState, psi: PureState, offset: int) -> MeasureNode:
    if phi.space.n_parties == 1:
        return _single_party_orthogonal(phi.amplitudes.reshape(-1), psi.amplitudes.reshape(-1), offset)

    phi_rows, psi_rows = phi.matrix(0), psi.matrix(0)
    w = constant_diagonal_unitary(psi_rows @ phi_rows.conj().T)
    phi_rows, psi_rows = w @ phi_rows, w @ psi_rows
    diagonal = np.einsum('ij,ij->i', phi_rows.conj(), psi_rows)
    residual = float(np.max(np.abs(diagonal - np.mean(diagonal))))
    if residual > WALGATE_DIAGONAL_TOLERANCE:
        logger.error(f"Local basis on party {offset} leaves branch overlaps {residual:.3e} apart")
        raise ProtocolValidationError(f"Party {offset}: branch overlaps differ by {residual:.3e}, "
                                      f"above {WALGATE_DIAGONAL_TOLERANCE}")
    rest = phi.space.tail()
    r = np.sum(np.abs(phi_rows) ** 2, axis=1)
    s = np.sum(np.abs(psi_rows) ** 2, axis=1)

    projectors: list[np.ndarray] = []
    children: list[ProtocolTree] = []
    idle: list[np.ndarray] = []
    for i in range(len(r)):
        proj = np.outer(w[i].conj(), w[i])
        if r[i] <= BRANCH_WEIGHT_FLOOR and s[i] <= BRANCH_WEIGHT_FLOOR:
            idle.append(proj)
            continue
        if r[i] <= BRANCH_WEIGHT_FLOOR:
            child = _leaf(Verdict.PSI)
        elif s[i] <= BRANCH_WEIGHT_FLOOR:
            child = _leaf(Verdict.PHI)
        else:
            child = _orthogonal(PureState.normalized(phi_rows[i], rest.dims),
                                PureState.normalized(psi_rows[i], rest.dims), offset + 1)
        projectors.append(proj)
        children.append(child)
    projectors[0] = projectors[0] + sum(idle, np.zeros_like(projectors[0]))
    outcomes = tuple(Outcome(str(k), p, c) for k, (p, c) in enumerate(zip(projectors, children)))
    return MeasureNode(offset, outcomes)


def compile_orthogonal(phi: PureState, psi: PureState) -> MeasureNode:
    """Perfect LOCC discrimination of an orthogonal pair"""
    overlap = abs(inner_product(phi, psi))
    if overlap > ORTHOGONALITY_GATE:
        logger.error(f"compile_orthogonal called on non-orthogonal pair (|<phi|psi>| = {overlap:.3e})")
        raise PreconditionError(f"States are not orthogonal: |<phi|psi>| = {overlap:.3e}")
    return _orthogonal(phi, psi, 0)


def _readout(m: int, d: int, k: int) -> np.ndarray:
    op = np.zeros((d, m * d), dtype=complex)
    op[:, k * d:(k + 1) * d] = np.eye(d)
    return op


def _branch_isometry(form: CanonicalForm, plan: BranchPlan) -> tuple[np.ndarray, list[list[tuple[int, float]]]]:
    """Stacked blocks V_k = sum_i c_ki |a_i><a_i| with sum_k c_ki^2 = 1 for each i"""
    branch_parts = [list(b.parts) for b in plan.orthogonal] + [[(t.index, t.weight)] for t in plan.residual]
    totals = np.zeros(form.n)
    for parts in branch_parts:
        for i, w in parts:
            totals[i] += w
    d = form.n
    blocks = []
    for k, parts in enumerate(branch_parts):
        block = np.zeros((d, d), dtype=complex)
        for i, w in parts:
            a = form.alice_vector(i)
            block += np.sqrt(w / totals[i]) * np.outer(a, a.conj())
        if k == 0:
            for i in np.flatnonzero(totals <= 0.0):
                a = form.alice_vector(i)
                block += np.outer(a, a.conj())
        blocks.append(block)
    return np.vstack(blocks), branch_parts


def _optimal(phi: PureState, psi: PureState, offset: int) -> ProtocolTree:
    overlap = inner_product(phi, psi)
    if abs(overlap) <= ORTHOGONALITY_GATE:
        return _orthogonal(phi, psi, offset)
    if phi.space.n_parties == 1:
        if abs(overlap) >= 1.0 - DEGENERATE_OVERLAP:
            return _leaf(Verdict.INCONCLUSIVE)
        return _povm_node(idp_povm(phi, psi), offset)

    form = canonicalize(phi, psi, 0)
    plan = resolve_signs(form)
    matrix, branch_parts = _branch_isometry(form, plan)
    d, m = form.n, len(branch_parts)
    rest = form.complement_space

    expected = [branch.phi_part for branch in plan.orthogonal]
    expected += [np.sqrt(term.weight) * np.outer(term.alice_vector, term.mu) for term in plan.residual]
    _, embedded = apply_operator(matrix, 0, phi.dims, phi.amplitudes)
    gap = float(np.max(np.abs(embedded.reshape(m * d, -1) - np.vstack(expected))))
    if gap > RECONSTRUCTION_TOLERANCE:
        logger.error(f"Branch isometry misses the planned components by {gap:.3e} at party {offset}")
        raise ProtocolValidationError(f"Branch reconstruction residual {gap:.3e} exceeds "
                                      f"{RECONSTRUCTION_TOLERANCE}")

    labels = tuple(f's{k}' for k in range(m))
    outcomes = []
    for k in range(m):
        block = matrix[k * d:(k + 1) * d]
        if k < len(plan.orthogonal):
            child = _orthogonal(_collapse(block, phi), _collapse(block, psi), offset)
        else:
            term = plan.residual[k - len(plan.orthogonal)]
            child = _optimal(PureState.normalized(term.mu, rest.dims),
                             PureState.normalized(term.nu, rest.dims), offset + 1)
        outcomes.append(Outcome(labels[k], _readout(m, d, k), child))
    isometry = AncillaIsometry(offset, matrix, m, labels)
    return MeasureNode(offset, tuple(outcomes), isometry)


def _collapse(op: np.ndarray, state: PureState) -> PureState:
    _, amps = apply_operator(op, 0, state.dims, state.amplitudes)
    return PureState.normalized(amps, state.dims)


def _projective(phi: PureState, psi: PureState, offset: int) -> ProtocolTree:
    overlap = inner_product(phi, psi)
    if abs(overlap) <= ORTHOGONALITY_GATE:
        return _orthogonal(phi, psi, offset)
    if phi.space.n_parties == 1:
        if abs(overlap) >= 1.0 - DEGENERATE_OVERLAP:
            return _leaf(Verdict.INCONCLUSIVE)
        return _povm_node(idp_povm(phi, psi), offset)

    form = canonicalize(phi, psi, 0)
    rest = form.complement_space
    present = np.flatnonzero(form.present)
    projectors = {i: np.outer(form.alice_vector(i), form.alice_vector(i).conj()) for i in range(form.n)}
    idle = sum((projectors[i] for i in range(form.n) if not form.present[i]),
               np.zeros((form.n, form.n), dtype=complex))
    outcomes = []
    for k, i in enumerate(present):
        child = _projective(PureState.normalized(form.mu[i], rest.dims),
                            PureState.normalized(form.nu[i], rest.dims), offset + 1)
        op = projectors[i] + idle if k == 0 else projectors[i]
        outcomes.append(Outcome(str(i), op, child))
    return MeasureNode(offset, tuple(outcomes))


def local_projection_probability(form: CanonicalForm) -> float:
    """Conclusive probability when the cut party just measures the canonical basis"""
    return float(1.0 - np.sum(form.t * np.abs(form.term_overlaps())))


STRATEGIES = ('optimal', 'projective')


def compile(phi: PureState, psi: PureState, strategy: str = 'optimal') -> ProtocolTree:
    """Compile an LOCC protocol that discriminates phi from psi without error"""
    if phi.dims != psi.dims:
        raise PreconditionError(f"States live on different spaces: {phi.dims} vs {psi.dims}")
    if strategy not in STRATEGIES:
        raise ValueError(f"Unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    build = _optimal if strategy == 'optimal' else _projective
    tree = build(phi, psi, 0)

    report = validate_protocol(tree, phi.dims)
    if not report.passed:
        for failure in report.failures():
            logger.error(f"Protocol check failed: {failure}")
        raise ProtocolValidationError("Compiled protocol failed validation", report)
    logger.info(f"Compiled {strategy} protocol for dims {phi.dims}: "
                f"{len(report.nodes)} measurement nodes")
    return tree


def compile_projective(phi: PureState, psi: PureState) -> ProtocolTree:
    return compile(phi, psi, strategy='projective')


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class NodeCheck:
    path: tuple[str, ...]
    party: int
    completeness: float
    isometry: float = 0.0
    min_eigenvalue: float = 0.0
    hermiticity: float = 0.0
    problems: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.problems


@dataclass
class ValidationReport:
    nodes: list[NodeCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(node.passed for node in self.nodes)

    def failures(self) -> list[str]:
        return [f"{'/'.join(n.path) or 'root'} (party {n.party}): {p}"
                for n in self.nodes for p in n.problems]

    def worst(self) -> dict[str, float]:
        return {
            'completeness': max((n.completeness for n in self.nodes), default=0.0),
            'isometry': max((n.isometry for n in self.nodes), default=0.0),
            'min_eigenvalue': min((n.min_eigenvalue for n in self.nodes), default=0.0),
        }

    def to_dict(self) -> dict:
        return {'passed': self.passed, 'worst': self.worst(), 'failures': self.failures()}


def _check_elements(check: NodeCheck, elements: Sequence[np.ndarray]) -> None:
    dim = elements[0].shape[0]
    check.completeness = float(np.max(np.abs(sum(elements) - np.eye(dim))))
    check.hermiticity = float(max(np.max(np.abs(e - e.conj().T)) for e in elements))
    check.min_eigenvalue = float(min(np.min(linalg.eigvalsh(0.5 * (e + e.conj().T))) for e in elements))
    if check.completeness > COMPLETENESS_TOLERANCE:
        check.problems.append(f"completeness residual {check.completeness:.3e}")
    if not all(linalg.ishermitian(e, atol=HERMITICITY_TOLERANCE) for e in elements):
        check.problems.append(f"non-Hermitian element (residual {check.hermiticity:.3e})")
    if check.min_eigenvalue < -POSITIVITY_TOLERANCE:
        check.problems.append(f"negative eigenvalue {check.min_eigenvalue:.3e}")


def validate_povm(povm: PovmElementSet) -> ValidationReport:
    """Hermiticity, positivity and completeness of a bare element set"""
    check = NodeCheck((), -1, 0.0)
    _check_elements(check, [e for _, e in povm.elements])
    return ValidationReport([check])


def validate_protocol(tree: ProtocolTree, dims: Optional[Sequence[int]] = None) -> ValidationReport:
    """Completeness, isometry and positivity at every measurement node

    With `dims`, operator shapes are also checked against the party
    dimensions along each path.
    """
    report = ValidationReport()
    _validate(tree, (), tuple(dims) if dims is not None else None, report)
    return report


def _validate(node: ProtocolTree, path: tuple[str, ...], dims: Optional[tuple[int, ...]],
              report: ValidationReport) -> None:
    if isinstance(node, LeafVerdict):
        return
    check = NodeCheck(path, node.party, 0.0)
    report.nodes.append(check)
    if not node.outcomes:
        check.problems.append("measurement without outcomes")
        return

    width = node.input_dim
    if node.isometry is not None:
        check.isometry = node.isometry.residual()
        if check.isometry > ISOMETRY_TOLERANCE:
            check.problems.append(f"isometry residual {check.isometry:.3e}")
        if node.isometry.matrix.shape[0] != width:
            check.problems.append(f"isometry output {node.isometry.matrix.shape[0]} does not feed "
                                  f"operators of width {width}")
    if dims is not None:
        incoming = node.isometry.party_dim if node.isometry is not None else width
        if not 0 <= node.party < len(dims):
            check.problems.append(f"party {node.party} outside dims {dims}")
            dims = None
        elif dims[node.party] != incoming:
            check.problems.append(f"party {node.party} has dimension {dims[node.party]}, "
                                  f"node expects {incoming}")

    if any(op.ndim != 2 or op.shape[1] != width for op in node.operators):
        check.problems.append("measurement operators have mismatched widths")
        return
    _check_elements(check, [op.conj().T @ op for op in node.operators])

    for outcome in node.outcomes:
        child_dims = None
        if dims is not None:
            child_dims = dims[:node.party] + (outcome.operator.shape[0],) + dims[node.party + 1:]
        _validate(outcome.child, path + (outcome.label,), child_dims, report)


def check_locc_structure(tree: ProtocolTree, n_parties: int) -> bool:
    """Every node names one of the n_parties parties and carries only local operators"""
    for path, node in iter_nodes(tree):
        if isinstance(node, LeafVerdict):
            continue
        if not 0 <= node.party < n_parties:
            logger.debug(f"Node at {'/'.join(path) or 'root'} acts on party {node.party} of {n_parties}")
            return False
        if any(op.ndim != 2 for op in node.operators):
            return False
    return True
