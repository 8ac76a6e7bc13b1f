"""Evaluation: base task performance, live instruction compliance, multi-seed
aggregation with bootstrap confidence intervals, and CSV reporting."""

from __future__ import annotations

import csv
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import EpisodeResult, EpisodeRunner
from .envs import compliance_event
from .instructions import NULL_CLASS, ArrivalProcess, NullArrival


@dataclass
class ComplianceRecord:
    class_id: int
    issued: int = 0
    followed: int = 0
    violated: int = 0
    pending: int = 0

    def check(self) -> None:
        assert self.followed + self.violated + self.pending == self.issued


def resolve_activations(env, result: EpisodeResult) -> dict[int, ComplianceRecord]:
    """Resolve every instruction activation in an episode to a compliance
    outcome.  Pending at episode end counts as not followed."""
    records: dict[int, ComplianceRecord] = {}
    for act in result.activations:
        rec = records.setdefault(act.class_id, ComplianceRecord(act.class_id))
        rec.issued += 1
        t_end = act.t_end if act.t_end is not None else result.steps
        window = [r.events for r in result.trace if act.t_start <= r.t < t_end]
        outcome = compliance_event(env, env.instruction_registry[act.class_id],
                                   window, act.expired)
        if outcome == "followed":
            rec.followed += 1
        elif outcome == "violated":
            rec.violated += 1
        else:
            rec.pending += 1
    return records


def eval_base(env, macro_sets, policy, n_episodes: int, seed: int,
              window: int = 8) -> dict:
    """Base task performance: no instructions issued, null-instruction inputs.
    Reports undiscounted (headline) and discounted episode returns."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    arrival = NullArrival(env.instruction_registry)
    returns, disc = [], []
    for k in range(n_episodes):
        runner = EpisodeRunner(env, macro_sets, policy, arrival,
                               seed * 1_000_003 + k, window=window,
                               collect_transitions=False)
        res = runner.run()
        if any(r.active_class != NULL_CLASS for r in res.trace):
            raise RuntimeError("instruction issued during base evaluation")
        returns.append(res.undiscounted_return)
        disc.append(res.discounted_return)
    returns = np.array(returns)
    disc = np.array(disc)
    return {
        "mean": float(returns.mean()),
        "std": float(returns.std(ddof=1)) if n_episodes > 1 else 0.0,
        "mean_discounted": float(disc.mean()),
        "std_discounted": float(disc.std(ddof=1)) if n_episodes > 1 else 0.0,
        "episodes": n_episodes,
    }


def eval_compliance(env, macro_sets, policy, n_episodes: int, seed: int,
                    window: int = 8, arrival_prob: Optional[float] = None) -> dict:
    """Live run with sampled arrivals; compliance is followed / issued with
    pending-at-end counting against, per class and overall."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    kwargs = env.default_arrival_kwargs()
    if arrival_prob is not None:
        kwargs["arrival_prob"] = arrival_prob
    arrival_cfg = ArrivalProcess(env.instruction_registry, **kwargs)
    per_class: dict[int, ComplianceRecord] = {}
    live_returns = []
    for k in range(n_episodes):
        runner = EpisodeRunner(env, macro_sets, policy, arrival_cfg,
                               seed * 1_000_003 + k, window=window,
                               collect_transitions=False)
        res = runner.run()
        live_returns.append(res.undiscounted_return)
        for cid, rec in resolve_activations(env, res).items():
            tot = per_class.setdefault(cid, ComplianceRecord(cid))
            tot.issued += rec.issued
            tot.followed += rec.followed
            tot.violated += rec.violated
            tot.pending += rec.pending
    issued = sum(r.issued for r in per_class.values())
    followed = sum(r.followed for r in per_class.values())
    for r in per_class.values():
        r.check()
    return {
        "compliance": (followed / issued) if issued else None,
        "issued": issued,
        "followed": followed,
        "records": per_class,
        "live_return_mean": float(np.mean(live_returns)),
    }


def aggregate(per_seed_values: Sequence[float], n_boot: int = 10000,
              seed: int = 0) -> dict:
    """Mean, sample std and a seeded 95% percentile-bootstrap CI over seeds."""
    vals = np.asarray([v for v in per_seed_values if v is not None], dtype=float)
    if len(vals) == 0:
        return {"mean": None, "std": None, "ci95": None, "n": 0}
    out = {"mean": float(vals.mean()), "n": int(len(vals))}
    if len(vals) < 2:
        out.update({"std": 0.0, "ci95": None})
        return out
    out["std"] = float(vals.std(ddof=1))
    rng = np.random.Generator(np.random.PCG64(seed))
    boots = vals[rng.integers(0, len(vals), size=(n_boot, len(vals)))].mean(axis=1)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    out["ci95"] = [float(lo), float(hi)]
    return out


RESULTS_COLUMNS = ["env", "mode", "base_mean", "base_std", "compliance",
                   "compliance_std"]
COMPLIANCE_COLUMNS = ["env", "mode", "class_id", "class_name", "issued",
                      "followed", "violated", "pending"]
HIST_COLUMNS = ["phrase", "macro", "frequency"]


def write_results_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULTS_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_compliance_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COMPLIANCE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_action_hist_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HIST_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def action_histogram(env, macro_sets, policy_factory, phrases: Sequence[str],
                     n_episodes: int, seed: int, window: int = 8) -> list[dict]:
    """Macro-selection frequencies of a policy when a fixed phrase is held
    active for whole episodes (the out-of-distribution probe)."""
    from .instructions import ScriptedSchedule

    rows = []
    for phrase in phrases:
        counts: Counter = Counter()
        policy, class_id = policy_factory(phrase)
        for k in range(n_episodes):
            schedule = ScriptedSchedule(env.instruction_registry, {})
            runner = EpisodeRunner(env, macro_sets, policy, schedule,
                                   seed * 1_000_003 + k, window=window,
                                   collect_transitions=True,
                                   initial_instruction=(class_id, phrase))
            res = runner.run()
            for tr in res.transitions:
                if tr.agent_id is not None:
                    counts[macro_sets[tr.agent_id][tr.macro_id].name] += 1
        total = sum(counts.values())
        for name, c in sorted(counts.items()):
            rows.append({"phrase": phrase, "macro": name,
                         "frequency": round(c / total, 6)})
    return rows


def report(results_rows, compliance_rows, hist_rows, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "results": os.path.join(out_dir, "results.csv"),
        "compliance": os.path.join(out_dir, "compliance.csv"),
        "action_hist": os.path.join(out_dir, "action_hist.csv"),
    }
    write_results_csv(results_rows, paths["results"])
    write_compliance_csv(compliance_rows, paths["compliance"])
    write_action_hist_csv(hist_rows, paths["action_hist"])
    return paths
