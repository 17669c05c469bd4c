"""Wall time of the FK log density with the coupled and the full numeric ODE paths.

Usage: python scripts/fk_solver_timing.py [--reps 5]
"""
import argparse
import time

import numpy as np

from bayespk.designs import fk_rows
from bayespk.events import parse_events
from bayespk.models import FKModel

TRUTH = dict(CL=10.0, Q=15.0, V1=35.0, V2=105.0, ka=2.0, mtt=125.0, circ0=5.0, alpha=3e-4,
             gamma=0.17, sigma=0.1, sigmaNeut=0.1)


def best_of(f, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        f()
        times.append(time.perf_counter() - t0)
    return min(times)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    a = ap.parse_args()
    coupled, numeric = FKModel(solver="coupled"), FKModel(solver="numeric")
    rows = fk_rows()
    data = coupled.prepare(parse_events(rows, n_cmt=coupled.n_cmt), require_dv=False)
    dv = coupled.simulate(data, TRUTH, np.random.default_rng(0))
    obs_rows = [r.origin_row for r in data.schedule.records if r.evid == 0]
    for oid, v in zip(data.obs_id, dv):
        rows[obs_rows[oid - 1]]["DV"] = float(v)
    data = coupled.prepare(parse_events(rows, n_cmt=coupled.n_cmt))
    z = coupled.unconstrain(data, TRUTH)
    print(f"{'solver':>8} {'log_joint ms':>13} {'gradient ms':>12} {'log_joint':>12}")
    for m in (coupled, numeric):
        t_lp = best_of(lambda: m.log_joint(data, z), a.reps)
        t_g = best_of(lambda: m.log_joint_grad(data, z), max(1, a.reps // 2))
        print(f"{m.solver:>8} {t_lp * 1e3:13.1f} {t_g * 1e3:12.1f} {float(m.log_joint(data, z)):12.4f}")
