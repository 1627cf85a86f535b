"""Experiment suites.  Each runner maps a resolved config to (artifacts, checks).

Artifacts are {file name: text or bytes}; checks are {name: bool}.  Every
number in an artifact is a deterministic function of the config.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile

import numpy as np

from . import functionals as fn
from . import hjb as hj
from . import kolmogorov as ko
from . import measure as me
from . import stopping as st
from .config import field_from_modes, model_params, noise_spec
from .sde import WienerStream, exp_functional, simulate, save_checkpoint


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([ko.csv_cell(v) for v in r])
    return buf.getvalue()


def gated(cfg: dict, report: me.ConditionReport) -> dict:
    req = cfg["experiment"].get("require", [])
    return {f"cond{c}": bool(getattr(report, f"cond{c}")) for c in req}


def run_check(cfg: dict):
    p, q = model_params(cfg), noise_spec(cfg)
    rep = me.check_conditions(p, q, cfg["experiment"]["gamma1"])
    checks = gated(cfg, rep)
    rows = [("improve_bound", rep.improve_bound), ("cond419", rep.cond419), ("cond439", rep.cond439),
            ("TrQ", rep.TrQ), ("TrA2dQ", rep.TrA2dQ), ("TrAQ", rep.TrAQ),
            ("TrAQ_tail_finite", rep.TrAQ_tail_finite), ("gamma1", rep.gamma1)]
    return {"conditions.csv": _csv(["quantity", "value"], rows)}, checks, rep.table() + "\n" + rep.note


def run_simulate(cfg: dict):
    p, q = model_params(cfg), noise_spec(cfg)
    e, s = cfg["experiment"], cfg["sim"]
    x0 = field_from_modes(p.basis, e["x0"])
    stream = WienerStream(cfg["seed"], int(e["stream_id"]), s["dt"] / s["substeps"])
    tr = simulate(x0, p, q, s["T"], s["dt"], stream, substeps=s["substeps"])
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ckpt")
        save_checkpoint(path, tr, cfg["seed"])
        with open(path, "rb") as fh:
            ckpt = fh.read()
    ef = exp_functional(tr, e["sigma"])
    summary = {"n_states": len(tr.times), "final_normH": float(tr.normH[-1]),
               "exp_functional": ef.value, "exp_functional_flagged": ef.flagged}
    arts = {"trajectory.csv": tr.diagnostics_csv(), "final_state.ckpt": ckpt,
            "summary.json": json.dumps(summary, indent=1, sort_keys=True)}
    return arts, {"finite": bool(np.all(np.isfinite(tr.normH)))}, json.dumps(summary)


def _measure(cfg, x0, streams_offset=0, horizon=None, n_streams=None):
    p, q = model_params(cfg), noise_spec(cfg)
    e, s = cfg["experiment"], cfg["sim"]
    n = n_streams or e["n_streams"]
    return me.kb_estimate(x0, p, q, horizon or e["horizon"], e.get("burn_in"), e.get("stride"),
                          streams=range(streams_offset, streams_offset + n), dt=s["dt"],
                          seed=cfg["seed"], substeps=s["substeps"])


def run_invariant(cfg: dict):
    p, q = model_params(cfg), noise_spec(cfg)
    e = cfg["experiment"]
    rep = me.check_conditions(p, q)
    checks = gated(cfg, rep)
    if not all(checks.values()):
        return {}, checks, "gating condition failed; nothing run"
    sigma = e["sigma_fraction"] * rep.improve_bound
    x0s = [field_from_modes(p.basis, m) for m in e["x0s"]]
    rows, arts = [], {}
    measures = []
    for i, x0 in enumerate(x0s):
        m = _measure(cfg, x0, streams_offset=i * 10 ** 6)
        measures.append(m)
        res = [me.moment(m, "expH", q, sigma=sigma), me.moment(m, "V2_expH", q, sigma=sigma),
               me.moment(m, "Lr_expH", q, sigma=sigma), me.moment(m, "A2")]
        arts[f"moments_{i}.csv"] = me.moment_report_csv(res)
        for r in res:
            if r.bound is not None:
                checks[f"measure{i}_{r.functional}"] = bool(r.within_bound)
        et = me.energy_trace_residual(m, q)
        ok = abs(et.value) <= 3 * et.se
        rows.append((f"energy_trace_{i}", et.value, 0.0, et.se, ok))
        checks[f"energy_trace_{i}"] = ok
    h2 = [m.integrate(np.sum(m.snapshots ** 2, axis=1)) for m in measures]
    if len(h2) >= 2:
        d = abs(h2[0].value - h2[1].value)
        se = math.hypot(h2[0].se, h2[1].se)
        rows.append(("normH2_agreement", d, 0.0, se, d <= 3 * se))
        checks["normH2_agreement"] = d <= 3 * se
        rng = np.random.default_rng(cfg["seed"])
        tests = [fn.normH2()] + [fn.cylinder(fn.random_direction(p.basis, rng)) for _ in range(3)]
        gaps = []
        for t in e["gap_times"]:
            g = me.ergodicity_gap(x0s[0], x0s[1], p, q, tests, t, n_paths=e["gap_paths"],
                                  dt=cfg["sim"]["dt"], seed=cfg["seed"], stream_offset=5 * 10 ** 6)
            gaps.append(g)
            rows.append((f"gap_t{t:g}", g.gap, g.envelope, g.se, g.gap <= g.envelope + 3 * g.se))
        checks["gap_decreasing"] = all(a.gap > b.gap for a, b in zip(gaps, gaps[1:]))
    arts["invariant_checks.csv"] = ko.diagnostics_csv(rows)
    for i, m in enumerate(measures):
        arts[f"measure_{i}.json"] = json.dumps(m.meta, indent=1, sort_keys=True)
    return arts, checks, "\n".join(f"{r[0]}: {r[1]:.6g} (SE {r[3]:.3g})" for r in rows)


def cylinders(basis, n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        h = fn.random_direction(basis, rng, scale=scale)
        out.append(fn.cylinder(h, "cos" if i % 2 == 0 else "sin"))
    return out


def run_kolmogorov(cfg: dict):
    p, q = model_params(cfg), noise_spec(cfg)
    e = cfg["experiment"]
    m = _measure(cfg, field_from_modes(p.basis, []))
    fs = cylinders(p.basis, e["n_cylinders"], cfg["seed"], e["h_scale"])
    rows, checks = [], {}
    for i, r in enumerate(ko.invariance_residuals(fs, m, q)):
        ok = abs(r.value) <= 3 * r.se
        rows.append((f"invariance_{i}", r.value, 0.0, r.se, ok))
        checks[f"invariance_{i}"] = ok
    cdc = fs[:3] + [fn.coordinate(0), fn.normH2()]
    for i, f in enumerate(cdc):
        c = ko.carre_du_champ_residual(f, m, q)
        rows.append((f"carre_du_champ_{i}", c.residual, 0.0, c.se, c.passes))
        checks[f"carre_du_champ_{i}"] = c.passes
    cloud = ko.SampleCloud.from_measure(m, e["cloud_size"], seed=cfg["seed"])
    data = ko.resolvent_on_cloud(cloud, [fs[0]], e["lambdas"], p, q, n_paths=e["cloud_paths"],
                                 dt=e["resolvent_dt"], seed=cfg["seed"], stream_base=10 ** 7)
    for b in ko.resolvent_bounds(cloud, fs[0], data):
        ok_phi, ok_grad = b.passes()
        rows.append((f"resolvent_phi_lam{b.lam:g}", b.phi_norm, b.phi_bound, b.phi_se, ok_phi))
        rows.append((f"resolvent_grad_lam{b.lam:g}", b.grad_norm, b.grad_bound, b.grad_se, ok_grad))
        checks[f"resolvent_phi_lam{b.lam:g}"] = ok_phi
        checks[f"resolvent_grad_lam{b.lam:g}"] = ok_grad
    arts = {"kolmogorov_checks.csv": ko.diagnostics_csv(rows)}
    return arts, checks, arts["kolmogorov_checks.csv"]


def hjb_objective(p, a: float, c: float) -> fn.Functional:
    """f = a (x, e_1) + c |x|^2."""
    return fn.linear_combination([(a, fn.coordinate(0)), (c, fn.normH2())])


def run_hjb(cfg: dict):
    p, q = model_params(cfg), noise_spec(cfg)
    e = cfg["experiment"]
    H = hj.hamiltonian_pair("truncated", e["R"])
    lam = e["lambda_factor"] * H.lip ** 2
    m = _measure(cfg, field_from_modes(p.basis, []))
    cloud = ko.SampleCloud.from_measure(m, e["cloud_size"], seed=cfg["seed"])
    f = hjb_objective(p, e["f_linear"], e["f_quadratic"])
    try:
        sol = hj.solve_hjb(f, H, lam, cloud, p, q, tol=e["tol"], max_iter=e["max_iter"],
                           n_paths=e["cloud_paths"], dt=e["resolvent_dt"], T_max=e["T_max"],
                           seed=cfg["seed"], stream_base=10 ** 7)
    except hj.HJBConvergenceError as err:
        rows = [(f"residual_{i}", float(r), e["tol"], 0.0, False) for i, r in enumerate(err.residuals)]
        return {"hjb_checks.csv": ko.diagnostics_csv(rows)}, {"converged": False}, str(err)
    con = hj.contraction_estimate(sol, seed=cfg["seed"])
    x0 = field_from_modes(p.basis, [])
    tour = hj.tournament(x0, sol, f, p, q, n_random=e["n_random"], n_paths=e["tournament_paths"],
                         seed=cfg["seed"], stream_base=2 * 10 ** 7, policy_seed=cfg["seed"] + 1)
    ver = hj.verification_residual(x0, sol, sol.policy(), f, p, q, n_paths=e["tournament_paths"],
                                   seed=cfg["seed"], stream_base=3 * 10 ** 7)
    checks = {"converged": sol.residuals[-1] <= e["tol"], "contraction": con.passes,
              "verification": ver.passes}
    for t in tour[1:]:
        checks[f"beats_{t.name}"] = t.gap_to_feedback > 3 * t.gap_se
    arts = {"hjb_report.json": hj.report_json(sol, ver.phi_x0.value, tour),
            "tournament.csv": _csv(["policy", "cost", "SE", "gap_to_feedback", "gap_SE"],
                                   [(t.name, t.cost, t.se, t.gap_to_feedback, t.gap_se) for t in tour]),
            "hjb_checks.csv": ko.diagnostics_csv([
                ("fixed_point_residual", float(sol.residuals[-1]), e["tol"], 0.0, checks["converged"]),
                ("unprojected_misfit", float(sol.meta["final_misfit"]), e["tol"], 0.0,
                 sol.meta["final_misfit"] <= e["tol"]),
                ("contraction", con.ratio, con.bound, con.se, con.passes),
                ("verification", ver.residual, 0.0, ver.se, ver.passes)])}
    return arts, checks, arts["hjb_checks.csv"]


def stop_problem(p, e) -> st.ObstacleProblem:
    g = np.linspace(-e["half_width"], e["half_width"], e["n_nodes"])
    F = {"enstrophy": fn.normV2(p.basis), "zero": fn.constant(0.0)}[e["F"]]
    G = {"obstacle": fn.obstacle_energy(e["kappa"], e["s0"]), "normH2": fn.normH2()}[e["G"]]
    return st.ObstacleProblem(F, G, e["T"], (g,) * e["dims"], st.default_coords(p, e["dims"]))


def run_stop(cfg: dict):
    p, q = model_params(cfg), noise_spec(cfg)
    e = cfg["experiment"]
    prob = stop_problem(p, e)
    sol = st.solve_vi(prob, p, q, e["n_steps"])
    V = st.dp_oracle(prob, p, q, e["n_steps"], e["n_quad"])
    gap = st.sup_gap(sol.phi[-1], V)
    sc = st.simulate_stopped_cost(sol, e["y0"], p, q, e["n_paths"], seed=cfg["seed"])
    dp_y0 = float(st._interp(prob, V, np.asarray(e["y0"], float)[None])[0])
    comp = float(np.max(np.abs(sol.zeta * (sol.G[None] - sol.phi))))
    checks = {"phi_le_G": bool(np.all(sol.phi <= sol.G[None])), "zeta_nonneg": bool(np.all(sol.zeta >= 0)),
              "complementarity": comp == 0.0, "vi_vs_dp": gap <= 0.05,
              "stopped_cost": abs(sc.estimate.value - dp_y0) <= 3 * sc.estimate.se}
    rows = [("vi_vs_dp_sup_gap", gap, 0.05, 0.0, checks["vi_vs_dp"]),
            ("complementarity_max", comp, 0.0, 0.0, checks["complementarity"]),
            ("stopped_cost", sc.estimate.value, dp_y0, sc.estimate.se, checks["stopped_cost"])]
    arts = {"vi_solution.csv": st.solution_csv(sol), "region_boundary.csv": st.boundary_csv(sol),
            "stop_checks.csv": ko.diagnostics_csv(rows)}
    if e["supermartingale_paths"]:
        ys = np.linspace(0.0, e["half_width"], 5)[:, None] * np.ones((1, prob.dims))
        sm = st.check_supermartingale_G(prob.G, p, q, [0.1, 0.5, prob.T], prob.embed(ys, p.basis.dim),
                                        n_paths=e["supermartingale_paths"], dt=prob.T / e["n_steps"],
                                        seed=cfg["seed"])
        arts["supermartingale.csv"] = _csv(["t", "x_index", "PtG", "SE", "G", "violated"],
                                           [(r.t, r.x_index, r.PtG, r.se, r.G, int(r.violated)) for r in sm])
    return arts, checks, arts["stop_checks.csv"]


RUNNERS = {"check": run_check, "simulate": run_simulate, "invariant": run_invariant,
           "kolmogorov": run_kolmogorov, "hjb": run_hjb, "stop": run_stop}
