"""
Test cases for the protocol compiler, sign resolution and tree validation
"""

import json

import numpy as np
import pytest
from unittest.mock import patch

from canonical import PreconditionError, canonicalize
from models import LeafVerdict, MeasureNode, Outcome, ProtocolFileError, Verdict, read_protocol, write_protocol
from protocols import (
    DegenerateStatesError,
    PovmElementSet,
    ProtocolValidationError,
    SignError,
    Term,
    TermLedger,
    check_locc_structure,
    compile,
    compile_orthogonal,
    compile_projective,
    idp_bound,
    idp_povm,
    local_projection_probability,
    pair_terms,
    resolve_signs,
    validate_povm,
    validate_protocol,
)
from simulate import evaluate_exact
from statespace import PartySpace, PureState, apply_operator, basis_state, random_pair, random_unitary

BETA = np.pi / 8
ENSEMBLE_DIMS = [(2, 2), (2, 3), (3, 3), (4, 4)]
ENSEMBLE_OVERLAPS = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


@pytest.fixture
def beta_pair():
    """cos(b)|00> +/- sin(b)|11> with b = pi/8"""
    c, s = np.cos(BETA), np.sin(BETA)
    return (PureState.from_vector([c, 0, 0, s], (2, 2)),
            PureState.from_vector([c, 0, 0, -s], (2, 2)))


@pytest.fixture
def bell_pair():
    """(|00> +/- |11>)/sqrt(2)"""
    return (PureState.from_vector(np.array([1, 0, 0, 1]) / np.sqrt(2), (2, 2)),
            PureState.from_vector(np.array([1, 0, 0, -1]) / np.sqrt(2), (2, 2)))


def _ledger(t_pos, rho_pos, t_neg, rho_neg):
    """Two terms on orthogonal alice vectors with the given weights and aligned overlaps"""
    def nu(rho):
        return np.array([rho, np.sqrt(1.0 - rho ** 2)], dtype=complex)
    e0, e1 = np.eye(2, dtype=complex)
    return TermLedger((
        Term(0, t_pos, e0, e0.copy(), nu(rho_pos), rho_pos, 1),
        Term(1, t_neg, e1, e0.copy(), nu(rho_neg), rho_neg, -1),
    ))


def test_idp_povm_orthogonal_vectors():
    """Test orthogonal inputs give projectors and no inconclusive weight"""
    povm = idp_povm([1, 0], [0, 1])
    assert povm.labels == ['phi', 'psi', 'inconclusive']
    assert povm.probability('phi', [1, 0]) == pytest.approx(1.0, abs=1e-15)
    assert povm.probability('psi', [1, 0]) == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(povm.element('inconclusive'), np.zeros((2, 2)), atol=1e-15)


def test_idp_povm_zero_and_plus():
    """Test |0> vs |+> reaches 1 - 1/sqrt(2) with no errors"""
    zero = np.array([1, 0])
    plus = np.array([1, 1]) / np.sqrt(2)
    povm = idp_povm(zero, plus)
    assert povm.probability('phi', zero) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)
    assert povm.probability('psi', plus) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)
    assert povm.probability('psi', zero) < 1e-15
    assert povm.probability('phi', plus) < 1e-15
    assert validate_povm(povm).passed


def test_idp_povm_dimension_five():
    """Test a pair in dimension 5 with |c| = 0.3 reaches 0.7"""
    phi, psi = random_pair(PartySpace((5,)), 0.3, seed=7)
    povm = idp_povm(phi, psi)
    assert povm.probability('phi', phi) == pytest.approx(0.7, abs=1e-12)
    assert povm.probability('psi', psi) == pytest.approx(0.7, abs=1e-12)
    assert povm.dim == 5
    for label, k in povm.kraus():
        np.testing.assert_allclose(k @ k, povm.element(label), atol=1e-12)


def test_idp_povm_degenerate():
    """Test identical vectors up to phase raise"""
    v = np.array([0.6, 0.8])
    with pytest.raises(DegenerateStatesError):
        idp_povm(v, 1j * v)
    with pytest.raises(ValueError):
        idp_povm([1, 0], [1, 0, 0])


def test_idp_bound(beta_pair):
    """Test the bound of the pi/8 pair"""
    assert idp_bound(*beta_pair) == pytest.approx(1 - np.cos(np.pi / 4), abs=1e-14)


def test_pair_terms_example():
    """Test t = (0.6, 0.4), rho = (0.5, -0.5) leaves 0.2 on the positive term"""
    ledger, branch = pair_terms(_ledger(0.6, 0.5, 0.4, -0.5), 0, 1)
    assert branch.weight == pytest.approx(0.8, abs=1e-14)
    assert not branch.role_exchanged
    assert branch.alpha == pytest.approx(np.arccos(np.sqrt(2 / 3)), abs=1e-14)
    assert abs(branch.overlap()) < 1e-14
    assert [t.index for t in ledger.terms] == [0]
    assert ledger.term(0).weight == pytest.approx(0.2, abs=1e-14)
    assert ledger.total_weight() == pytest.approx(1.0, abs=1e-14)
    assert ledger.aligned_overlap() == pytest.approx(0.1, abs=1e-14)


def test_pair_terms_equal_contributions():
    """Test t_p rho_p = t_n |rho_n| uses up both terms"""
    ledger, branch = pair_terms(_ledger(0.5, 0.5, 0.5, -0.5), 0, 1)
    assert ledger.terms == ()
    assert branch.alpha == pytest.approx(0.0, abs=1e-7)
    assert branch.weight == pytest.approx(1.0, abs=1e-14)
    assert abs(branch.overlap()) < 1e-14


def test_pair_terms_beta_angle():
    """Test the pi/8 terms pair with cos(alpha) = tan(beta)"""
    c2, s2 = np.cos(BETA) ** 2, np.sin(BETA) ** 2
    ledger, branch = pair_terms(_ledger(c2, 1.0, s2, -1.0), 0, 1)
    assert branch.alpha == pytest.approx(np.arccos(np.sqrt(2) - 1), abs=1e-12)
    assert branch.alpha == pytest.approx(1.1437, abs=1e-4)
    assert branch.weight == pytest.approx(2 * s2, abs=1e-14)
    assert ledger.term(0).weight == pytest.approx(np.cos(2 * BETA), abs=1e-14)


def test_pair_terms_role_exchange():
    """Test a dominant negative term keeps its remainder"""
    ledger, branch = pair_terms(_ledger(0.4, 0.5, 0.6, -0.5), 0, 1)
    assert branch.role_exchanged
    assert branch.weight == pytest.approx(0.8, abs=1e-14)
    survivor = ledger.term(1)
    assert survivor.sign == -1
    assert survivor.weight == pytest.approx(0.2, abs=1e-14)
    assert abs(branch.overlap()) < 1e-14


def test_pair_terms_sign_error():
    """Test pairing with the signs swapped raises"""
    with pytest.raises(SignError):
        pair_terms(_ledger(0.6, 0.5, 0.4, -0.5), 1, 0)


def test_resolve_signs_all_positive():
    """Test identical states need no pairing"""
    phi, _ = random_pair(PartySpace((3, 3)), 1.0, seed=2)
    plan = resolve_signs(canonicalize(phi, phi))
    assert plan.pair_calls == 0
    assert plan.orthogonal == ()
    assert len(plan.residual) == 3
    assert plan.residual_overlap() == pytest.approx(1.0, abs=1e-12)


def test_resolve_signs_beta(beta_pair):
    """Test the pi/8 pair yields one orthogonal branch and one residual term"""
    plan = resolve_signs(canonicalize(*beta_pair))
    assert plan.pair_calls == 1
    assert len(plan.orthogonal) == 1
    assert plan.orthogonal[0].weight == pytest.approx(1 - np.sqrt(2) / 2, abs=1e-12)
    assert [t.index for t in plan.residual] == [0]
    assert plan.residual[0].weight == pytest.approx(np.sqrt(2) / 2, abs=1e-12)


def test_resolve_signs_random_invariants():
    """Test call count, residual signs, weights and overlap on random pairs"""
    seed = 100
    for dims in [(2, 2), (3, 3), (4, 4), (3, 2)]:
        for overlap in (0.1, 0.4, 0.7):
            seed += 1
            phi, psi = random_pair(PartySpace(dims), overlap, seed=seed)
            form = canonicalize(phi, psi)
            plan = resolve_signs(form)
            assert plan.pair_calls <= form.n - 1
            assert all(t.rho >= -1e-12 for t in plan.residual)
            assert plan.total_weight() == pytest.approx(1.0, abs=1e-10)
            assert plan.residual_overlap() == pytest.approx(overlap, abs=1e-9)
            for branch in plan.orthogonal:
                assert abs(branch.overlap()) < 1e-10


def test_compile_orthogonal_product_states():
    """Test |00> vs |11> is told apart with certainty"""
    phi, psi = basis_state((2, 2), 0, 0), basis_state((2, 2), 1, 1)
    tree = compile_orthogonal(phi, psi)
    report = evaluate_exact(tree, phi, psi)
    assert report.p_conclusive_phi == pytest.approx(1.0, abs=1e-14)
    assert report.p_conclusive_psi == pytest.approx(1.0, abs=1e-14)
    assert report.max_error < 1e-14


def test_compile_orthogonal_bell_pair(bell_pair):
    """Test the two Bell states are told apart with one round per party"""
    tree = compile_orthogonal(*bell_pair)
    assert validate_protocol(tree, (2, 2)).passed
    assert check_locc_structure(tree, 2)
    report = evaluate_exact(tree, *bell_pair)
    assert report.mean_conclusive == pytest.approx(1.0, abs=1e-12)
    assert report.max_error < 1e-12


def test_compile_orthogonal_tripartite():
    """Test GHZ states and random orthogonal pairs on three qubits"""
    ghz = np.zeros(8)
    ghz[[0, 7]] = 1 / np.sqrt(2)
    minus = ghz.copy()
    minus[7] = -minus[7]
    pairs = [(PureState.from_vector(ghz, (2, 2, 2)), PureState.from_vector(minus, (2, 2, 2)))]
    pairs += [random_pair(PartySpace((2, 2, 2)), 0.0, seed=s) for s in range(5)]
    for phi, psi in pairs:
        tree = compile_orthogonal(phi, psi)
        assert validate_protocol(tree, (2, 2, 2)).passed
        report = evaluate_exact(tree, phi, psi)
        assert report.mean_conclusive == pytest.approx(1.0, abs=1e-10)
        assert report.max_error < 1e-11


def _embedded_orthogonal_pair(seed: int, width: int) -> tuple[PureState, PureState]:
    """Orthogonal two-qubit pair with the first qubit carried into a 2-dimensional subspace of C^width"""
    phi, psi = random_pair(PartySpace((2, 2)), 0.0, seed=seed)
    embed = random_unitary(width, seed=5000 + seed)[:, :2]
    dims, phi_amps = apply_operator(embed, 0, phi.dims, phi.amplitudes)
    _, psi_amps = apply_operator(embed, 0, psi.dims, psi.amplitudes)
    return PureState.from_vector(phi_amps, dims), PureState.from_vector(psi_amps, dims)


def test_compile_orthogonal_on_partial_support():
    """Test orthogonal pairs whose first party uses only part of its space"""
    for seed in range(60):
        phi, psi = _embedded_orthogonal_pair(seed, 5 + seed % 2)
        tree = compile_orthogonal(phi, psi)
        assert validate_protocol(tree, phi.dims).passed
        report = evaluate_exact(tree, phi, psi)
        assert report.mean_conclusive == pytest.approx(1.0, abs=1e-10), seed
        assert report.max_error < 1e-12, seed


def test_compile_orthogonal_random_local_dims_up_to_three():
    """Test random orthogonal pairs on two and three parties with local dimension up to 3"""
    seed = 700
    for dims in [(2, 2), (2, 3), (3, 2), (3, 3), (2, 2, 2), (3, 2, 2), (2, 3, 3), (3, 3, 3)]:
        for _ in range(7):
            seed += 1
            phi, psi = random_pair(PartySpace(dims), 0.0, seed=seed)
            tree = compile_orthogonal(phi, psi)
            assert check_locc_structure(tree, len(dims))
            report = evaluate_exact(tree, phi, psi)
            assert report.p_conclusive_phi == pytest.approx(1.0, abs=1e-10), (dims, seed)
            assert report.p_conclusive_psi == pytest.approx(1.0, abs=1e-10), (dims, seed)
            assert report.max_error < 1e-12, (dims, seed)


@patch('protocols.constant_diagonal_unitary', return_value=np.eye(2))
def test_compile_orthogonal_rejects_unequal_branch_overlaps(mock_unitary):
    """Test a local basis that leaves branch overlaps unequal is refused"""
    plus = np.array([1, 0, 1, 0]) / np.sqrt(2)
    minus = np.array([1, 0, -1, 0]) / np.sqrt(2)
    with pytest.raises(ProtocolValidationError, match='Party 0'):
        compile_orthogonal(PureState.from_vector(plus, (2, 2)), PureState.from_vector(minus, (2, 2)))
    mock_unitary.assert_called_once()


def test_compile_first_party_wider_than_rest():
    """Test dims (5, 2) and (6, 2), where every branch pairing lands on a rank-2 support"""
    paired = 0
    phi, psi = random_pair(PartySpace((5, 2)), 0.05, seed=50)
    report = evaluate_exact(compile(phi, psi), phi, psi)
    assert report.optimality_residual < 1e-9
    assert report.max_error < 1e-10

    seed = 900
    for dims in [(5, 2), (6, 2)]:
        for overlap in (0.05, 0.2, 0.5, 0.8):
            for _ in range(3):
                seed += 1
                phi, psi = random_pair(PartySpace(dims), overlap, seed=seed)
                paired += len(resolve_signs(canonicalize(phi, psi)).orthogonal)
                tree = compile(phi, psi)
                report = evaluate_exact(tree, phi, psi)
                assert report.optimality_residual < 1e-9, (dims, overlap, seed)
                assert report.max_error < 1e-10, (dims, overlap, seed)
    assert paired > 0


def test_compile_orthogonal_rejects_overlap(beta_pair):
    """Test a non-orthogonal pair is refused"""
    with pytest.raises(PreconditionError):
        compile_orthogonal(*beta_pair)


def test_compile_identical_states():
    """Test phi = psi compiles to a protocol that never decides"""
    phi, psi = random_pair(PartySpace((2, 3)), 1.0, seed=3)
    tree = compile(phi, psi)
    report = evaluate_exact(tree, phi, psi)
    assert report.mean_conclusive == pytest.approx(0.0, abs=1e-12)
    assert report.p_inconclusive_phi == pytest.approx(1.0, abs=1e-12)


def test_compile_single_party():
    """Test a one-party pair compiles to a single unambiguous measurement"""
    phi, psi = random_pair(PartySpace((3,)), 0.3, seed=5)
    tree = compile(phi, psi)
    assert isinstance(tree, MeasureNode)
    assert tree.isometry is None
    assert evaluate_exact(tree, phi, psi).mean_conclusive == pytest.approx(0.7, abs=1e-12)


def test_compile_beta_tree(beta_pair):
    """Test the pi/8 protocol: two ancilla branches with equal odds under both states"""
    tree = compile(*beta_pair)
    assert tree.party == 0
    assert tree.isometry.ancilla_dim == 2
    assert tree.labels == ['s0', 's1']
    assert tree.branch('s1') == LeafVerdict(Verdict.INCONCLUSIVE)

    report = evaluate_exact(tree, *beta_pair)
    branches = report.root_branches()
    assert branches['s0'][0] == pytest.approx(1 - np.sqrt(2) / 2, abs=1e-12)
    assert branches['s0'][1] == pytest.approx(1 - np.sqrt(2) / 2, abs=1e-12)
    assert branches['s1'][0] == pytest.approx(np.sqrt(2) / 2, abs=1e-12)
    assert branches['s1'][1] == pytest.approx(np.sqrt(2) / 2, abs=1e-12)
    assert report.mean_conclusive == pytest.approx(0.2928932, abs=1e-7)
    assert report.max_error < 1e-12


def test_compile_reaches_bound_on_ensemble():
    """Test 200 random pairs reach 1 - |<phi|psi>| with no misidentification"""
    seed = 0
    for dims in ENSEMBLE_DIMS:
        for overlap in ENSEMBLE_OVERLAPS:
            for _ in range(5):
                seed += 1
                phi, psi = random_pair(PartySpace(dims), overlap, seed=seed)
                tree = compile(phi, psi)
                report = evaluate_exact(tree, phi, psi)
                assert report.optimality_residual < 1e-9, (dims, overlap, seed)
                assert report.max_error < 1e-10, (dims, overlap, seed)
                assert abs(report.p_conclusive_phi - report.p_conclusive_psi) < 1e-9
                assert report.conservation_residual() < 1e-10
                if overlap > 0.0:
                    assert tree.isometry is not None
                    for p_phi, p_psi in report.root_branches().values():
                        assert abs(p_phi - p_psi) < 1e-10, (dims, overlap, seed)


def test_root_branches_carry_no_information():
    """Test each ancilla outcome is equally likely under phi and psi"""
    seed = 500
    for dims in [(2, 2), (3, 3), (4, 4)]:
        for overlap in (0.2, 0.5, 0.8):
            seed += 1
            phi, psi = random_pair(PartySpace(dims), overlap, seed=seed)
            tree = compile(phi, psi)
            assert tree.isometry is not None
            for p_phi, p_psi in evaluate_exact(tree, phi, psi).root_branches().values():
                assert abs(p_phi - p_psi) < 1e-10


def test_compile_tripartite():
    """Test random three-qubit pairs reach the bound"""
    for seed in range(20):
        overlap = 0.05 + 0.045 * seed
        phi, psi = random_pair(PartySpace((2, 2, 2)), overlap, seed=1000 + seed)
        tree = compile(phi, psi)
        assert check_locc_structure(tree, 3)
        report = evaluate_exact(tree, phi, psi)
        assert report.optimality_residual < 1e-9
        assert report.max_error < 1e-10


def test_compile_rejects_bad_input(beta_pair):
    """Test mismatched spaces and unknown strategies raise"""
    with pytest.raises(PreconditionError):
        compile(beta_pair[0], basis_state((4,), 0))
    with pytest.raises(ValueError):
        compile(*beta_pair, strategy='greedy')


def test_projective_strategy_matches_local_projection():
    """Test the basis-measurement baseline equals its closed form and stays below the bound"""
    for seed in range(5):
        phi, psi = random_pair(PartySpace((3, 3)), 0.4, seed=40 + seed)
        tree = compile_projective(phi, psi)
        report = evaluate_exact(tree, phi, psi)
        expected = local_projection_probability(canonicalize(phi, psi))
        assert report.mean_conclusive == pytest.approx(expected, abs=1e-10)
        assert report.mean_conclusive <= report.bound + 1e-10
        assert report.max_error < 1e-10


def test_projective_strategy_fails_beta(beta_pair):
    """Test measuring the computational basis never decides on the pi/8 pair"""
    report = evaluate_exact(compile_projective(*beta_pair), *beta_pair)
    assert report.mean_conclusive == pytest.approx(0.0, abs=1e-12)


def test_validate_protocol_incomplete_node():
    """Test a node whose elements sum to 0.9 I fails with residual 0.1"""
    tree = MeasureNode(0, (Outcome('phi', np.sqrt(0.9) * np.eye(2), LeafVerdict(Verdict.PHI)),))
    assert tree.completeness_residual() == pytest.approx(0.1, abs=1e-12)
    report = validate_protocol(tree)
    assert not report.passed
    assert report.worst()['completeness'] == pytest.approx(0.1, abs=1e-12)
    assert 'completeness residual' in report.failures()[0]


def test_validate_protocol_dimension_mismatch(beta_pair):
    """Test a tree checked against the wrong dims fails"""
    tree = compile(*beta_pair)
    assert validate_protocol(tree, (2, 2)).passed
    assert not validate_protocol(tree, (3, 2)).passed


def test_validate_povm_negative_eigenvalue():
    """Test an element with eigenvalue -0.01 fails positivity"""
    povm = PovmElementSet((('phi', np.diag([1.01, 0.0])), ('psi', np.diag([-0.01, 1.0]))))
    report = validate_povm(povm)
    assert not report.passed
    assert report.worst()['min_eigenvalue'] == pytest.approx(-0.01, abs=1e-12)
    assert report.worst()['completeness'] < 1e-15


def test_protocol_file_roundtrip(tmp_path, beta_pair):
    """Test a written protocol reads back to the same probabilities"""
    tree = compile(*beta_pair)
    path = tmp_path / 'protocol.json'
    write_protocol(str(path), tree)
    again = read_protocol(str(path))
    assert again.isometry.ancilla_dim == 2
    first, second = evaluate_exact(tree, *beta_pair), evaluate_exact(again, *beta_pair)
    assert second.p_conclusive_phi == pytest.approx(first.p_conclusive_phi, abs=1e-15)
    assert second.p_inconclusive_psi == pytest.approx(first.p_inconclusive_psi, abs=1e-15)


def test_protocol_file_errors(tmp_path):
    """Test malformed protocol files raise ProtocolFileError"""
    broken = tmp_path / 'broken.json'
    broken.write_text('{"kind": ')
    with pytest.raises(ProtocolFileError):
        read_protocol(str(broken))

    unknown = tmp_path / 'unknown.json'
    unknown.write_text(json.dumps({'kind': 'teleport'}))
    with pytest.raises(ProtocolFileError):
        read_protocol(str(unknown))

    mismatched = tmp_path / 'mismatched.json'
    mismatched.write_text(json.dumps({
        'kind': 'measure', 'party': 0, 'labels': ['a', 'b'],
        'operators': [[[[1, 0], [0, 0]], [[0, 0], [1, 0]]]],
        'branches': {'a': {'kind': 'verdict', 'verdict': 'phi'}},
    }))
    with pytest.raises(ProtocolFileError):
        read_protocol(str(mismatched))


def test_compile_ignores_global_phase():
    """Test a global phase on psi leaves the success probability unchanged"""
    phi, psi = random_pair(PartySpace((2, 3)), 0.6, seed=61)
    base = evaluate_exact(compile(phi, psi), phi, psi)
    shifted = psi.phase_shifted(1.1)
    moved = evaluate_exact(compile(phi, shifted), phi, shifted)
    assert moved.mean_conclusive == pytest.approx(base.mean_conclusive, abs=1e-10)
    assert moved.optimality_residual < 1e-9
