"""Exact tabular machinery on the instruction-augmented product space.

States are indexed class-major: idx(s, c) = c * S + s, so V.reshape(C, S)
gives per-class value slices.  Two backup operators are provided:

* naive     -- the standard optimality backup on the augmented chain; targets
               mix successor values across incoming instruction classes.
* corrected -- every cross-class bootstrap gamma*V(s', c') is replaced by the
               continuation value gamma*V(s', c), equivalently the dynamic
               reward applied inside the expectation.

The corrected fixed point, restricted to a class, must equal value iteration
on that class's own MDP; verify_decoupling checks this against an independent
per-class oracle, and the contamination sweep measures what each greedy
policy gives up in base return or compliance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass
class TabularAugmentedMDP:
    """Joint environment/instruction chain as dense tensors.

    P[(s,c), a, (s',c')] factors as T(s,a,s') * P(c' | c, s'); R depends on
    the outgoing class only.
    """

    P: np.ndarray          # (N, A, N)
    R: np.ndarray          # (N, A, N)
    gamma: float
    n_states: int
    n_classes: int
    base_T: np.ndarray     # (S, A, S)
    R_classes: np.ndarray  # (C, S, A, S)
    start: int = 0

    def __post_init__(self):
        rows = self.P.sum(axis=2)
        if not np.allclose(rows, 1.0, atol=1e-10):
            raise ValueError("augmented transition rows must sum to 1")
        if not np.isfinite(self.R).all():
            raise ValueError("non-finite reward tensor")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def idx(self, s: int, c: int) -> int:
        return c * self.n_states + s

    def start_idx(self) -> int:
        return self.idx(self.start, 0)


@dataclass
class ValueTable:
    values: np.ndarray                 # (N,)
    policy: Optional[np.ndarray] = None  # (N,) greedy actions, once extracted

    def per_class(self, n_states: int, n_classes: int) -> np.ndarray:
        return self.values.reshape(n_classes, n_states)


def build_augmented(T: np.ndarray, R_classes: Sequence[np.ndarray], beta: float,
                    class_weights: np.ndarray, expiry: np.ndarray,
                    gamma: float, gate: Optional[np.ndarray] = None,
                    start: int = 0) -> TabularAugmentedMDP:
    """Assemble the product-space tensors from base dynamics and the arrival
    process.  `gate` optionally masks which landing states admit arrivals,
    shaped (S,) for all classes or (C-1, S) per class."""
    S, A, _ = T.shape
    C = len(R_classes)
    K = C - 1
    w = np.asarray(class_weights, dtype=float)
    q = np.asarray(expiry, dtype=float)
    if K:
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("class weights must sum to 1")
        if not ((q > 0) & (q <= 1)).all():
            raise ValueError("expiry probabilities must lie in (0, 1]")
    if gate is None:
        gmask = np.ones((K, S))
    else:
        gate = np.asarray(gate, dtype=float)
        gmask = np.tile(gate, (K, 1)) if gate.ndim == 1 else gate
    # class transition kernel conditioned on the landing state: (C, S', C)
    Pc = np.zeros((C, S, C))
    arr = beta * w[:, None] * gmask if K else np.zeros((0, S))
    Pc[0, :, 0] = 1.0 - arr.sum(axis=0)
    for k in range(K):
        Pc[0, :, k + 1] = arr[k]
        Pc[k + 1, :, 0] = q[k]
        Pc[k + 1, :, k + 1] = 1.0 - q[k]
    N = C * S
    P = np.zeros((N, A, N))
    R = np.zeros((N, A, N))
    Rc = np.stack(R_classes)  # (C, S, A, S)
    for c in range(C):
        for c2 in range(C):
            blk = T * Pc[c, :, c2][None, None, :]
            P[c * S:(c + 1) * S, :, c2 * S:(c2 + 1) * S] = blk
            R[c * S:(c + 1) * S, :, c2 * S:(c2 + 1) * S] = Rc[c]
    return TabularAugmentedMDP(P=P, R=R, gamma=gamma, n_states=S, n_classes=C,
                               base_T=T, R_classes=Rc, start=start)


def from_spec(spec: dict, beta: Optional[float] = None) -> TabularAugmentedMDP:
    return build_augmented(
        spec["T"], spec["R_classes"],
        spec["beta"] if beta is None else beta,
        spec["class_weights"], spec["expiry"], spec["gamma"],
        gate=spec.get("gate"), start=spec.get("start", 0))


# -- backup operators --------------------------------------------------------

def _q_naive(V: np.ndarray, M: TabularAugmentedMDP,
             R: Optional[np.ndarray] = None) -> np.ndarray:
    R = M.R if R is None else R
    return np.einsum("nak,nak->na", M.P, R) + M.gamma * np.einsum(
        "nak,k->na", M.P, V)


def _q_corrected(V: np.ndarray, M: TabularAugmentedMDP) -> np.ndarray:
    S, C = M.n_states, M.n_classes
    Vm = V.reshape(C, S)
    q = np.einsum("nak,nak->na", M.P, M.R)
    # marginal over incoming classes, bootstrapped under the outgoing class
    for c in range(C):
        rows = slice(c * S, (c + 1) * S)
        marg = M.P[rows].reshape(S, M.n_actions, C, S).sum(axis=2)
        q[rows] += M.gamma * marg @ Vm[c]
    return q


def dynamic_reward(V: np.ndarray, M: TabularAugmentedMDP) -> np.ndarray:
    """Table-2 style reward: at cross-class successors the incoming bootstrap
    is cancelled and the continuation value added, with V frozen."""
    S, C = M.n_states, M.n_classes
    Vm = V.reshape(C, S)
    R = M.R.copy()
    for c in range(C):
        rows = slice(c * S, (c + 1) * S)
        for c2 in range(C):
            if c2 == c:
                continue
            cols = slice(c2 * S, (c2 + 1) * S)
            R[rows, :, cols.start:cols.stop] += M.gamma * (Vm[c] - Vm[c2])[None, None, :]
    return R


def bellman_naive(V: ValueTable, M: TabularAugmentedMDP,
                  policy: Optional[np.ndarray] = None) -> ValueTable:
    """One standard backup on the augmented chain (optimality, or evaluation
    when a policy is given).  Backups flow across instruction boundaries."""
    q = _q_naive(V.values, M)
    if policy is None:
        return ValueTable(values=q.max(axis=1))
    return ValueTable(values=q[np.arange(M.n), policy])


def bellman_corrected(V: ValueTable, M: TabularAugmentedMDP,
                      policy: Optional[np.ndarray] = None) -> ValueTable:
    """One value-corrected backup: cross-class successors bootstrap under the
    outgoing class, decoupling the per-class slices."""
    q = _q_corrected(V.values, M)
    if policy is None:
        return ValueTable(values=q.max(axis=1))
    return ValueTable(values=q[np.arange(M.n), policy])


def value_iteration(operator: Callable, M: TabularAugmentedMDP,
                    tol: float = 1e-10, max_iters: int = 100000,
                    horizon: Optional[int] = None):
    """Iterate `operator` to its fixed point (or run exactly `horizon` sweeps).

    Returns (ValueTable, iterations, residual, info) where info carries the
    residual history and a converged flag; non-convergence is reported, not
    raised.
    """
    V = ValueTable(values=np.zeros(M.n))
    residuals = []
    if horizon is not None:
        for _ in range(horizon):
            V2 = operator(V, M)
            residuals.append(float(np.max(np.abs(V2.values - V.values))))
            V = V2
        return V, horizon, residuals[-1] if residuals else 0.0, {
            "converged": True, "residuals": residuals}
    it = 0
    res = np.inf
    while it < max_iters:
        V2 = operator(V, M)
        res = float(np.max(np.abs(V2.values - V.values)))
        residuals.append(res)
        V = V2
        it += 1
        if res <= tol:
            return V, it, res, {"converged": True, "residuals": residuals}
    return V, it, res, {"converged": False, "residuals": residuals}


def greedy_policy(V: ValueTable, M: TabularAugmentedMDP,
                  corrected: bool = False) -> np.ndarray:
    q = _q_corrected(V.values, M) if corrected else _q_naive(V.values, M)
    return q.argmax(axis=1)


def greedy_tie_sets(V: ValueTable, M: TabularAugmentedMDP, corrected: bool = False,
                    tie_tol: float = 1e-9) -> list[np.ndarray]:
    q = _q_corrected(V.values, M) if corrected else _q_naive(V.values, M)
    best = q.max(axis=1)
    return [np.flatnonzero(q[i] >= best[i] - tie_tol) for i in range(M.n)]


def policy_eval_augmented(M: TabularAugmentedMDP, policy: np.ndarray) -> np.ndarray:
    idx = np.arange(M.n)
    P_pi = M.P[idx, policy]
    r_pi = (M.P[idx, policy] * M.R[idx, policy]).sum(axis=1)
    return np.linalg.solve(np.eye(M.n) - M.gamma * P_pi, r_pi)


# -- independent per-class oracle ---------------------------------------------
# Deliberately separate from the augmented operators: plain value iteration on
# the (S, A, S) tensors, used to check the corrected fixed point against.

def solve_base_mdp(T: np.ndarray, R: np.ndarray, gamma: float,
                   tol: float = 1e-12, max_iters: int = 200000):
    S, A, _ = T.shape
    v = np.zeros(S)
    for _ in range(max_iters):
        q = np.zeros((S, A))
        for a in range(A):
            q[:, a] = (T[:, a, :] * (R[:, a, :] + gamma * v[None, :])).sum(axis=1)
        v2 = q.max(axis=1)
        if np.max(np.abs(v2 - v)) <= tol:
            return v2, q.argmax(axis=1)
        v = v2
    return v, q.argmax(axis=1)


def policy_eval_base(T: np.ndarray, R: np.ndarray, gamma: float,
                     policy: np.ndarray) -> np.ndarray:
    S = T.shape[0]
    idx = np.arange(S)
    P_pi = T[idx, policy]
    r_pi = (T[idx, policy] * R[idx, policy]).sum(axis=1)
    return np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi)


# -- verification --------------------------------------------------------------

def verify_decoupling(M: TabularAugmentedMDP, tol: float = 1e-6,
                      instance_seed: Optional[int] = None) -> dict:
    """Check oracle equivalence of the corrected fixed point and epsilon-
    optimality of its greedy policy in every instruction-specific MDP."""
    V, iters, res, info = value_iteration(bellman_corrected, M, tol=min(tol * 1e-3, 1e-10))
    Vm = V.values.reshape(M.n_classes, M.n_states)
    pol = greedy_policy(V, M, corrected=True)
    pol_m = pol.reshape(M.n_classes, M.n_states)
    lemma_dev = 0.0
    theorem_dev = 0.0
    per_class = []
    for c in range(M.n_classes):
        v_star, _ = solve_base_mdp(M.base_T, M.R_classes[c], M.gamma)
        dev = float(np.max(np.abs(Vm[c] - v_star)))
        v_pol = policy_eval_base(M.base_T, M.R_classes[c], M.gamma, pol_m[c])
        pol_dev = float(np.max(v_star - v_pol))
        lemma_dev = max(lemma_dev, dev)
        theorem_dev = max(theorem_dev, pol_dev)
        per_class.append({"class": c, "value_dev": dev, "policy_dev": pol_dev})
    return {
        "instance_seed": instance_seed,
        "lemma1_max_dev": lemma_dev,
        "theorem1_max_dev": theorem_dev,
        "theorem1_pass": bool(theorem_dev <= tol),
        "lemma1_pass": bool(lemma_dev <= tol),
        "iterations": iters,
        "residual": res,
        "converged": info["converged"],
        "per_class": per_class,
    }


def random_instance(seed: int) -> TabularAugmentedMDP:
    """Small random augmented MDP; rewards U[-1,1], Dirichlet(1) transitions."""
    rng = np.random.default_rng(seed)
    S = int(rng.integers(3, 9))
    A = int(rng.integers(2, 4))
    C = int(rng.integers(2, 4))
    T = rng.dirichlet(np.ones(S), size=(S, A))
    R_classes = [rng.uniform(-1.0, 1.0, size=(S, A, S)) for _ in range(C)]
    beta = float(rng.uniform(0.05, 0.5))
    w = rng.dirichlet(np.ones(C - 1))
    q = rng.uniform(0.1, 0.5, size=C - 1)
    return build_augmented(T, R_classes, beta, w, q, gamma=0.9)


def contraction_ratios(M: TabularAugmentedMDP, operator: Callable,
                       iters: int = 60) -> np.ndarray:
    _, _, _, info = value_iteration(operator, M, tol=0.0, max_iters=iters)
    res = np.array(info["residuals"])
    res = res[res > 1e-13]
    if len(res) < 2:
        return np.array([])
    return res[1:] / res[:-1]


# -- exact metrics on a chain spec ----------------------------------------------

def exact_compliance(spec: dict, policy: np.ndarray,
                     horizon: Optional[int] = None):
    """Exact probability that an issued instruction is resolved as followed
    under a stationary augmented-state policy, pending-at-horizon counting as
    not followed.  Returns (overall or None, per-class dict, issued mass)."""
    T = spec["T"]
    S, A, _ = T.shape
    C = len(spec["R_classes"])
    K = C - 1
    H = horizon if horizon is not None else spec["horizon"]
    beta, w, q = spec["beta"], spec["class_weights"], spec["expiry"]
    gate = spec.get("gate")
    gmask = np.ones((K, S)) if gate is None else (
        np.tile(np.asarray(gate, dtype=float), (K, 1))
        if np.asarray(gate).ndim == 1 else np.asarray(gate, dtype=float))
    viol = spec["violations"]
    pol = policy.reshape(C, S)
    # backward: g[k][t, s] = P(resolved followed | class k active at (s, t))
    g = np.zeros((K, H + 1, S))
    for k in range(K):
        for t in range(H - 1, 0, -1):
            for s in range(S):
                a = pol[k + 1, s]
                ok = ~viol[k][s, a]
                g[k, t, s] = (T[s, a] * ok * (q[k] + (1 - q[k]) * g[k, t + 1])).sum()
    # forward occupancy
    mu = np.zeros((C, S))
    mu[0, spec.get("start", 0)] = 1.0
    issued = np.zeros(K)
    followed = np.zeros(K)
    for t in range(H):
        nxt = np.zeros((C, S))
        for c in range(C):
            occ = mu[c]
            if not occ.any():
                continue
            for s in np.flatnonzero(occ > 0):
                a = pol[c, s]
                flow = occ[s] * T[s, a]
                if c == 0:
                    arr = beta * w[:, None] * gmask * flow[None, :]  # (K, S')
                    if t + 1 < H:
                        issued += arr.sum(axis=1)
                        followed += (arr * g[:, t + 1, :]).sum(axis=1)
                        nxt[1:] += arr
                        nxt[0] += flow - arr.sum(axis=0)
                    else:
                        nxt[0] += flow
                else:
                    k = c - 1
                    nxt[0] += q[k] * flow
                    nxt[c] += (1 - q[k]) * flow
        mu = nxt
    total_issued = issued.sum()
    per_class = {k + 1: (followed[k] / issued[k] if issued[k] > 0 else None)
                 for k in range(K)}
    overall = (followed.sum() / total_issued) if total_issued > 0 else None
    return overall, per_class, total_issued


def base_return_of(spec: dict, policy: np.ndarray) -> float:
    """Discounted base-task value from the start state when instructions are
    switched off: the null-class policy slice evaluated in the base MDP."""
    S = spec["T"].shape[0]
    pol0 = policy.reshape(-1, S)[0]
    v = policy_eval_base(spec["T"], spec["R_classes"][0], spec["gamma"], pol0)
    return float(v[spec.get("start", 0)])


def base_optimum(spec: dict) -> float:
    v, _ = solve_base_mdp(spec["T"], spec["R_classes"][0], spec["gamma"])
    return float(v[spec.get("start", 0)])


def enumerate_policies(M: TabularAugmentedMDP, limit: int = 1 << 16) -> np.ndarray:
    count = M.n_actions ** M.n
    if count > limit:
        raise ValueError(f"{count} policies exceed enumeration limit {limit}")
    grids = np.meshgrid(*[np.arange(M.n_actions)] * M.n, indexing="ij")
    return np.stack([grid.ravel() for grid in grids], axis=1)


def coupled_values_batch(M: TabularAugmentedMDP, policies: np.ndarray) -> np.ndarray:
    """Start-state coupled value for every policy (batched linear solve)."""
    idx = np.arange(M.n)
    P_pi = M.P[idx[None, :], policies]                        # (B, N, N)
    r_pi = (M.P[idx[None, :], policies] * M.R[idx[None, :], policies]).sum(axis=2)
    eye = np.eye(M.n)[None]
    V = np.linalg.solve(eye - M.gamma * P_pi, r_pi[..., None])[..., 0]
    return V[:, M.start_idx()]


def certify_tradeoff(spec: dict, compliance_floor: float = 0.95,
                     base_frac: float = 0.95, tie_tol: float = 1e-9) -> dict:
    """Exhaustively enumerate policies; every coupled-optimal one must miss the
    compliance floor or the base-return fraction for the region to certify."""
    M = from_spec(spec)
    policies = enumerate_policies(M)
    values = coupled_values_batch(M, policies)
    vmax = values.max()
    opt_idx = np.flatnonzero(values >= vmax - tie_tol)
    b_opt = base_optimum(spec)
    failures = 0
    achieved_both = []
    for i in opt_idx:
        pol = policies[i]
        base = base_return_of(spec, pol)
        compl, _, issued = exact_compliance(spec, pol)
        base_ok = base >= base_frac * b_opt
        compl_ok = compl is not None and compl >= compliance_floor
        if base_ok and compl_ok:
            achieved_both.append({"policy": pol.tolist(), "base": base,
                                  "compliance": compl})
        else:
            failures += 1
    return {
        "n_policies": int(len(policies)),
        "n_optimal": int(len(opt_idx)),
        "coupled_optimum": float(vmax),
        "base_optimum": b_opt,
        "all_optimal_fail": not achieved_both,
        "counterexamples": achieved_both,
    }


def contamination_sweep(make_spec: Callable[[float, float], dict],
                        beta_grid: Sequence[float], penalty_grid: Sequence[float],
                        out_csv=None, certify: bool = False) -> list[dict]:
    """Solve each (beta, penalty) with both operators and report exact base
    return and compliance of the greedy policies."""
    rows = []
    for beta in beta_grid:
        for penalty in penalty_grid:
            spec = make_spec(beta, penalty)
            M = from_spec(spec)
            entry = {"beta": beta, "penalty": penalty}
            for label, op, corr in (("naive", bellman_naive, False),
                                    ("corrected", bellman_corrected, True)):
                V, _, _, _ = value_iteration(op, M, tol=1e-12)
                pol = greedy_policy(V, M, corrected=corr)
                compl, _, _ = exact_compliance(spec, pol)
                entry[f"{label}_base_return"] = base_return_of(spec, pol)
                entry[f"{label}_compliance"] = compl
            entry["base_optimum"] = base_optimum(spec)
            if certify:
                entry["certificate"] = certify_tradeoff(spec)
            rows.append(entry)
    if out_csv is not None:
        write_sweep_csv(rows, out_csv)
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["beta", "penalty", "operator", "base_return", "compliance"])
        for r in rows:
            for op in ("naive", "corrected"):
                compl = r[f"{op}_compliance"]
                w.writerow([r["beta"], r["penalty"], op,
                            f"{r[f'{op}_base_return']:.6f}",
                            "na" if compl is None else f"{compl:.6f}"])


def write_verification_report(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
