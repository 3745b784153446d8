# bats/bounds.py
"""
Pessimistic/optimistic stitched MDPs and their certification against a
known finite ground truth.

For single-action stitches (b_j, c_j, a_j) with penalties ε_j, M⁻ rewards the
stitched action r(b_j, a_j) − γε_j and M⁺ rewards it r(b_j, a_j) + γε_j. When
every ε_j is at least the on-policy bisimulation distance between the true
successor T(b_j, a_j) and c_j under π⁻, the true value of π⁻ lies between its
M⁻ and M⁺ values on every dataset state.
"""
from __future__ import annotations
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from bats.errors import ContractError, InputError, NumericalError, UnsupportedError
from bats.mdp_core import Edge, TabularMdp, TabularPolicy, greedy_policy, value_iteration
from utils.helpers import derive_seed
from utils.log import get_logger

logger = get_logger(__name__)

PolicyLike = Union[TabularPolicy, np.ndarray, Sequence[int]]


@dataclass(frozen=True)
class StitchTuple:
    source: int              # b_j, index in M₀
    target: int              # c_j, index in M₀
    action: Tuple[float, ...]
    true_reward: float       # r(b_j, a_j)


@dataclass
class StitchTupleSet:
    tuples: List[StitchTuple] = field(default_factory=list)
    penalties: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tuples)

    def with_penalties(self, penalties: Sequence[float]) -> "StitchTupleSet":
        return StitchTupleSet(tuples=list(self.tuples), penalties=[float(p) for p in penalties])

    def validate(self, m0: TabularMdp) -> None:
        if len(self.penalties) != len(self.tuples):
            raise ContractError("one penalty per stitch tuple is required")
        seen = set()
        for j, (t, eps) in enumerate(zip(self.tuples, self.penalties)):
            for s in (t.source, t.target):
                if not 0 <= s < m0.n_states:
                    raise ContractError(f"tuple {j}: state {s} out of range")
            if eps < 0:
                raise ContractError(f"tuple {j}: negative penalty {eps}")
            if m0.terminal_flags[t.source]:
                raise ContractError(f"tuple {j}: terminal source {t.source}")
            a = np.asarray(t.action, dtype=np.float64)
            if any(np.array_equal(e.action, a) for e in m0.actions_per_state[t.source]):
                raise ContractError(f"tuple {j}: action {t.action} already logged at state {t.source}")
            if (t.source, t.action) in seen:
                raise ContractError(f"tuple {j}: duplicate (source, action)")
            seen.add((t.source, t.action))


# ───────────────────────── M⁻ / M⁺ ─────────────────────────
def build_m_minus_plus(
    m0: TabularMdp,
    tuples: StitchTupleSet,
    true_rewards: Optional[Sequence[float]] = None,
) -> Tuple[TabularMdp, TabularMdp]:
    tuples.validate(m0)
    rewards = list(true_rewards) if true_rewards is not None else [t.true_reward for t in tuples.tuples]
    if len(rewards) != len(tuples):
        raise ContractError("one true reward per stitch tuple is required")
    gamma = m0.discount
    m_minus = m0.copy()
    for j, (t, eps, r) in enumerate(zip(tuples.tuples, tuples.penalties, rewards)):
        m_minus.add_edge(t.source, Edge(
            action=np.asarray(t.action, dtype=np.float64),
            next_state=t.target,
            reward=float(r),
            is_stitch=True,
            penalty=gamma * eps,
            distance=float(eps),
            penalty_scale=gamma,
            stitch_id=j,
        ))
    return m_minus, signed_mdp(m_minus, +1)


def signed_mdp(mdp: TabularMdp, sign: int) -> TabularMdp:
    """sign=-1: the pessimistic MDP as stored; sign=+1: stitched penalties added instead of subtracted."""
    if sign not in (-1, 1):
        raise InputError("sign must be -1 or +1")
    out = mdp.copy()
    if sign > 0:
        for edges in out.actions_per_state:
            for e in edges:
                if e.is_stitch:
                    e.reward, e.penalty = e.reward + e.penalty, 0.0
        out.touch()
    return out


# ───────────────────────── exact evaluation ─────────────────────────
def _choice(policy: PolicyLike) -> np.ndarray:
    if isinstance(policy, TabularPolicy):
        if not policy.is_deterministic:
            raise UnsupportedError("exact bisimulation needs a deterministic policy")
        return np.asarray(policy.choice, dtype=np.int64)
    return np.asarray(policy, dtype=np.int64)


def _policy_edges(mdp: TabularMdp, choice: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    c = mdp.compile()
    if choice.shape != (mdp.n_states,):
        raise InputError(f"policy covers {choice.shape} states, MDP has {mdp.n_states}")
    if np.any(choice < 0) or np.any(choice >= c.counts):
        raise InputError("policy picks an action index a state does not have")
    idx = c.offsets[:-1] + choice
    return c.reward[idx], c.dst[idx]


def policy_values_exact(mdp: TabularMdp, policy: PolicyLike) -> np.ndarray:
    """V^π from the linear system (I − γP_π) V = r_π."""
    r, nxt = _policy_edges(mdp, _choice(policy))
    n = mdp.n_states
    p = sp.csr_matrix((np.ones(n), (np.arange(n), nxt)), shape=(n, n))
    return np.asarray(spsolve((sp.identity(n, format="csr") - mdp.discount * p).tocsc(), r), dtype=np.float64)


@dataclass
class BisimTable:
    distances: np.ndarray
    residual: float
    iterations: int = 0
    residual_history: List[float] = field(default_factory=list)

    def __call__(self, s: int, t: int) -> float:
        return float(self.distances[s, t])


def exact_bisim_distance(
    mdp: TabularMdp,
    policy: PolicyLike,
    method: str = "solve",
    tolerance: float = 1e-9,
    max_iters: int = 100_000,
) -> BisimTable:
    """
    On-policy bisimulation distance for deterministic transitions:
    d(s,t) = |r(s,π(s)) − r(t,π(t))| + γ·d(T(s,π(s)), T(t,π(t))).
    method="solve" solves the pair system directly; "iterate" runs the
    fixed-point sweeps from zero until the sup-norm change is below `tolerance`.
    """
    r, nxt = _policy_edges(mdp, _choice(policy))
    gamma = mdp.discount
    n = mdp.n_states
    dr = np.abs(r[:, None] - r[None, :])
    history: List[float] = []

    if method == "iterate":
        d = np.zeros((n, n))
        it = 0
        for it in range(1, max_iters + 1):
            d_new = dr + gamma * d[np.ix_(nxt, nxt)]
            res = float(np.max(np.abs(d_new - d), initial=0.0))
            history.append(res)
            d = d_new
            if res < tolerance:
                break
        else:
            raise NumericalError(f"bisimulation iteration did not reach {tolerance} in {max_iters} sweeps")
        return BisimTable(distances=d, residual=history[-1] if history else 0.0, iterations=it, residual_history=history)

    if method != "solve":
        raise InputError(f"unknown method {method!r}")
    pairs = np.arange(n * n)
    next_pairs = (nxt[:, None] * n + nxt[None, :]).ravel()
    p = sp.csr_matrix((np.ones(n * n), (pairs, next_pairs)), shape=(n * n, n * n))
    a = (sp.identity(n * n, format="csr") - gamma * p).tocsc()
    d = np.asarray(spsolve(a, dr.ravel()), dtype=np.float64).reshape(n, n)
    d = np.maximum(0.5 * (d + d.T), 0.0)
    np.fill_diagonal(d, 0.0)
    residual = float(np.max(np.abs(d - (dr + gamma * d[np.ix_(nxt, nxt)])), initial=0.0))
    return BisimTable(distances=d, residual=residual, iterations=1, residual_history=[residual])


def lipschitz_gap(values: np.ndarray, table: BisimTable) -> float:
    """max over pairs of |V(s) − V(t)| − d(s,t); ≤ 0 when V is 1-Lipschitz in d."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.max(np.abs(v[:, None] - v[None, :]) - table.distances))


def hitting_time_expansion(mdp: TabularMdp, policy: PolicyLike, sign: int) -> np.ndarray:
    """
    Per-state value of the deterministic rollout where each step earns the
    unpenalized reward, plus sign·(stored penalty) whenever a stitched edge is
    taken. Rollouts are eventually periodic, so the tail is summed in closed
    form over the detected cycle.
    """
    if sign not in (-1, 1):
        raise InputError("sign must be -1 or +1")
    choice = _choice(policy)
    gamma = mdp.discount
    step_reward = np.empty(mdp.n_states)
    nxt = np.empty(mdp.n_states, dtype=np.int64)
    for s in range(mdp.n_states):
        e = mdp.actions_per_state[s][int(choice[s])]
        step_reward[s] = e.reward + sign * e.penalty if e.is_stitch else e.effective_reward
        nxt[s] = e.next_state

    out = np.empty(mdp.n_states)
    for start in range(mdp.n_states):
        first_seen: Dict[int, int] = {}
        rewards: List[float] = []
        s, t = start, 0
        while s not in first_seen:
            first_seen[s] = t
            rewards.append(step_reward[s])
            s, t = int(nxt[s]), t + 1
        mu, lam = first_seen[s], t - first_seen[s]
        disc = gamma ** np.arange(t)
        prefix = float(np.dot(disc[:mu], rewards[:mu]))
        cycle = float(np.dot(disc[mu:], rewards[mu:]))
        out[start] = prefix + cycle / (1.0 - gamma ** lam)
    return out


# ───────────────────────── policy transfer ─────────────────────────
def _state_index(mdp: TabularMdp) -> Dict[bytes, int]:
    return {v.tobytes(): i for i, v in enumerate(mdp.states)}


def map_policy(choice: PolicyLike, source: TabularMdp, target: TabularMdp) -> np.ndarray:
    """
    Carry a deterministic policy to another MDP: states matched by vector,
    actions matched by action vector. Target states absent from `source` take
    their first action.
    """
    choice = _choice(choice)
    src_index = _state_index(source)
    out = np.zeros(target.n_states, dtype=np.int64)
    for t, vec in enumerate(target.states):
        s = src_index.get(vec.tobytes())
        if s is None:
            continue
        a = source.actions_per_state[s][int(choice[s])].action
        for i, e in enumerate(target.actions_per_state[t]):
            if np.array_equal(e.action, a):
                out[t] = i
                break
        else:
            raise ContractError(f"action {a.tolist()} of state {s} has no counterpart in the target MDP")
    return out


def _true_indices(m0: TabularMdp, m_true: TabularMdp) -> np.ndarray:
    idx = _state_index(m_true)
    try:
        return np.asarray([idx[v.tobytes()] for v in m0.states], dtype=np.int64)
    except KeyError as e:
        raise ContractError("a dataset state is missing from the ground-truth MDP") from e


def _true_successor(m_true: TabularMdp, state: int, action: Sequence[float]) -> int:
    a = np.asarray(action, dtype=np.float64)
    for e in m_true.actions_per_state[state]:
        if np.array_equal(e.action, a):
            return e.next_state
    raise ContractError(f"stitched action {list(action)} does not exist at true state {state}")


def minimum_penalties(
    m_true: TabularMdp,
    m0: TabularMdp,
    tuples: StitchTupleSet,
    true_choice: np.ndarray,
) -> np.ndarray:
    """ε_j^min = d^π(T(b_j, a_j), c_j) on the ground truth."""
    if not len(tuples):
        return np.zeros(0)
    table = exact_bisim_distance(m_true, true_choice)
    to_true = _true_indices(m0, m_true)
    return np.asarray([
        table(_true_successor(m_true, int(to_true[t.source]), t.action), int(to_true[t.target]))
        for t in tuples.tuples
    ])


def _optimal_choice(mdp: TabularMdp) -> np.ndarray:
    return greedy_policy(value_iteration(mdp, tolerance=1e-12), mdp).choice


def calibrate_penalties(
    m0: TabularMdp,
    m_true: TabularMdp,
    tuples: StitchTupleSet,
    max_rounds: int = 1000,
) -> Tuple[StitchTupleSet, np.ndarray, int]:
    """
    Raise penalties until each ε_j covers the bisimulation gap under the
    policy that is optimal for the resulting M⁻. Returns the calibrated set,
    the M⁻ policy and the number of rounds.
    """
    eps = np.zeros(len(tuples)) if not tuples.penalties else np.asarray(tuples.penalties, dtype=np.float64)
    for rounds in range(1, max_rounds + 1):
        current = tuples.with_penalties(eps)
        m_minus, _ = build_m_minus_plus(m0, current)
        choice = _optimal_choice(m_minus)
        need = minimum_penalties(m_true, m0, current, map_policy(choice, m_minus, m_true))
        if np.all(eps >= need):
            return current, choice, rounds
        eps = np.maximum(eps, need)
    raise NumericalError(f"penalty calibration did not settle in {max_rounds} rounds")


# ───────────────────────── certificates ─────────────────────────
@dataclass
class SandwichReport:
    n_states: int
    penalties: List[float]
    min_penalties: List[float]
    assumptions_satisfied: bool
    lower_margin: float          # min_s V_true − V⁻
    upper_margin: float          # min_s V⁺ − V_true
    holds: Optional[bool]        # None when the penalty assumption fails
    expansion_error: float
    v_minus: List[float] = field(default_factory=list)
    v_true: List[float] = field(default_factory=list)
    v_plus: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def certify_sandwich(
    m_true: TabularMdp,
    m0: TabularMdp,
    tuples: StitchTupleSet,
    policy_minus: Optional[PolicyLike] = None,
    tolerance: float = 1e-9,
) -> SandwichReport:
    m_minus, m_plus = build_m_minus_plus(m0, tuples)
    choice = _choice(policy_minus) if policy_minus is not None else _optimal_choice(m_minus)
    true_choice = map_policy(choice, m_minus, m_true)
    eps_min = minimum_penalties(m_true, m0, tuples, true_choice)
    eps = np.asarray(tuples.penalties, dtype=np.float64)
    satisfied = bool(np.all(eps >= eps_min - 1e-12))

    v_minus = policy_values_exact(m_minus, choice)
    v_plus = policy_values_exact(m_plus, choice)
    v_true = policy_values_exact(m_true, true_choice)[_true_indices(m0, m_true)]
    lower = float(np.min(v_true - v_minus))
    upper = float(np.min(v_plus - v_true))
    holds = (lower >= -tolerance and upper >= -tolerance) if satisfied else None

    expansion = max(
        float(np.max(np.abs(hitting_time_expansion(m_minus, choice, -1) - v_minus))),
        float(np.max(np.abs(hitting_time_expansion(m_minus, choice, +1) - v_plus))),
    )
    if satisfied and not holds:
        logger.warning("value sandwich violated: lower margin %.3e, upper margin %.3e", lower, upper)
    return SandwichReport(
        n_states=m0.n_states,
        penalties=eps.tolist(),
        min_penalties=eps_min.tolist(),
        assumptions_satisfied=satisfied,
        lower_margin=lower,
        upper_margin=upper,
        holds=holds,
        expansion_error=expansion,
        v_minus=v_minus.tolist(),
        v_true=v_true.tolist(),
        v_plus=v_plus.tolist(),
    )


@dataclass
class ImprovementReport:
    fired: List[int]             # states where V⁺(π⁻) < V'⁻(π'⁻)
    violations: List[int]        # fired states where the true value did not improve
    true_gain: List[float]       # V_true(π') − V_true(π) on fired states

    @property
    def holds(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "holds": self.holds}


def certify_improvement(
    m_plus: TabularMdp,
    policy_minus: PolicyLike,
    m_minus_prime: TabularMdp,
    policy_minus_prime: PolicyLike,
    m_true: TabularMdp,
    margin: float = 1e-9,
) -> ImprovementReport:
    """Wherever the second policy's lower bound beats the first's upper bound, its true value must be higher."""
    if m_plus.n_states != m_minus_prime.n_states:
        raise ContractError("both stitched MDPs must share the dataset states")
    choice, choice_prime = _choice(policy_minus), _choice(policy_minus_prime)
    upper = policy_values_exact(m_plus, choice)
    lower_prime = policy_values_exact(m_minus_prime, choice_prime)
    to_true = _true_indices(m_plus, m_true)
    v_true = policy_values_exact(m_true, map_policy(choice, m_plus, m_true))[to_true]
    v_true_prime = policy_values_exact(m_true, map_policy(choice_prime, m_minus_prime, m_true))[to_true]

    fired = [int(s) for s in np.flatnonzero(upper < lower_prime - margin)]
    gain = [float(v_true_prime[s] - v_true[s]) for s in fired]
    violations = [s for s, g in zip(fired, gain) if not g > 0]
    return ImprovementReport(fired=fired, violations=violations, true_gain=gain)


# ───────────────────────── synthetic ground truths ─────────────────────────
@dataclass
class SyntheticInstance:
    seed: int
    m_true: TabularMdp
    m0: TabularMdp
    stitch_sets: List[StitchTupleSet]


def generate_instance(
    seed: int,
    max_states: int = 30,
    max_actions: int = 3,
    max_stitches: int = 5,
    discount: float = 0.9,
    n_stitch_sets: int = 1,
) -> SyntheticInstance:
    """
    Random deterministic ground truth over states [i] (i < n), of which the
    first n0 are logged. M₀ logs action 0 of every logged state (kept inside
    the logged set) and each other in-set action with probability 1/2.
    Stitch sets use actions M₀ did not log, sometimes aimed at the true successor.
    """
    if max_states < 3 or max_actions < 1:
        raise InputError("need max_states >= 3 and max_actions >= 1")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, max_states + 1))
    n0 = int(rng.integers(2, n + 1))

    true_edges: List[List[Edge]] = []
    for s in range(n):
        edges = []
        for a in range(int(rng.integers(1, max_actions + 1))):
            high = n0 if (s < n0 and a == 0) else n
            edges.append(Edge(action=np.array([float(a)]), next_state=int(rng.integers(0, high)),
                              reward=float(rng.uniform(-1.0, 1.0))))
        true_edges.append(edges)

    logged: List[List[int]] = []
    missing: List[Tuple[int, int]] = []
    for s in range(n0):
        keep = [0]
        for a in range(1, len(true_edges[s])):
            if true_edges[s][a].next_state < n0 and rng.random() < 0.5:
                keep.append(a)
            else:
                missing.append((s, a))
        logged.append(keep)
    if not missing:
        if len(true_edges[0]) >= 2:
            a = logged[0].pop()
        else:
            a = 1
            true_edges[0].append(Edge(action=np.array([1.0]), next_state=int(rng.integers(0, n)),
                                      reward=float(rng.uniform(-1.0, 1.0))))
        missing.append((0, a))

    states = [np.array([float(i)]) for i in range(n)]
    m_true = TabularMdp(states=states, actions_per_state=true_edges, discount=discount, start_states=range(n0))
    m0 = TabularMdp(
        states=states[:n0],
        actions_per_state=[[Edge(**true_edges[s][a].__dict__) for a in logged[s]] for s in range(n0)],
        discount=discount,
        start_states=range(n0),
    )

    sets: List[StitchTupleSet] = []
    for _ in range(n_stitch_sets):
        ell = int(rng.integers(1, min(max_stitches, len(missing)) + 1))
        picks = rng.choice(len(missing), size=ell, replace=False)
        tuples = []
        for p in sorted(int(x) for x in picks):
            b, a = missing[p]
            e = true_edges[b][a]
            if e.next_state < n0 and rng.random() < 0.3:
                c = e.next_state
            else:
                c = int(rng.integers(0, n0))
            tuples.append(StitchTuple(source=b, target=c, action=(float(a),), true_reward=e.reward))
        sets.append(StitchTupleSet(tuples=tuples, penalties=[0.0] * ell))
    return SyntheticInstance(seed=seed, m_true=m_true, m0=m0, stitch_sets=sets)


def verify_bounds(seed: int, n_instances: int = 100, **instance_kwargs: Any) -> Dict[str, Any]:
    """Seeded batch of sandwich, expansion, Lipschitz and improvement checks; used by `verify-bounds`."""
    rows = []
    totals = {"sandwich_violations": 0, "improvement_fired": 0, "improvement_violations": 0}
    max_expansion, max_lipschitz = 0.0, -np.inf
    for i in range(n_instances):
        inst = generate_instance(derive_seed(seed, "instance", i), n_stitch_sets=2, **instance_kwargs)
        first, choice, rounds = calibrate_penalties(inst.m0, inst.m_true, inst.stitch_sets[0])
        report = certify_sandwich(inst.m_true, inst.m0, first, choice)
        second, choice2, _ = calibrate_penalties(inst.m0, inst.m_true, inst.stitch_sets[1])
        m_minus, m_plus = build_m_minus_plus(inst.m0, first)
        m_minus2, _ = build_m_minus_plus(inst.m0, second)
        improvement = certify_improvement(m_plus, choice, m_minus2, choice2, inst.m_true)

        true_choice = map_policy(choice, m_minus, inst.m_true)
        lip = lipschitz_gap(policy_values_exact(inst.m_true, true_choice),
                            exact_bisim_distance(inst.m_true, true_choice))

        totals["sandwich_violations"] += int(report.holds is False)
        totals["improvement_fired"] += len(improvement.fired)
        totals["improvement_violations"] += len(improvement.violations)
        max_expansion = max(max_expansion, report.expansion_error)
        max_lipschitz = max(max_lipschitz, lip)
        rows.append({
            "instance": i,
            "n_states": inst.m_true.n_states,
            "n_logged": inst.m0.n_states,
            "n_stitches": len(first),
            "calibration_rounds": rounds,
            "lower_margin": report.lower_margin,
            "upper_margin": report.upper_margin,
            "holds": report.holds,
            "expansion_error": report.expansion_error,
            "lipschitz_gap": lip,
            "improvement_fired": len(improvement.fired),
            "improvement_violations": len(improvement.violations),
        })
    passed = (totals["sandwich_violations"] == 0 and totals["improvement_violations"] == 0
              and max_expansion <= 1e-6 and max_lipschitz <= 1e-9)
    return {
        "seed": seed,
        "n_instances": n_instances,
        **totals,
        "max_expansion_error": max_expansion,
        "max_lipschitz_gap": float(max_lipschitz) if n_instances else 0.0,
        "passed": passed,
        "instances": rows,
    }
