"""End-to-end fixed-point loop, configuration, and artifact emission.

Each global iteration: dynamic programming on the coarse lattice under the
current averaged law, chain simulation of the induced law, 1/k averaging,
least-squares fit of the network to the grid policy, stochastic-approximation
refinement, then value sweeps on the coarse and fine lattices under the
network control.  Stops on the Wasserstein gap, the value change, or both,
per the configured rule.

All randomness is derived from (seed, fixed tag) substreams that do not
depend on the iteration counter.  Near the fixed point every stage becomes
piecewise constant in the averaged law, so the loop can land exactly on a
stationary point and the value change drops to zero instead of hovering at
the Monte-Carlo noise floor.
"""

from __future__ import annotations

import configparser
import io
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, SolverError
from .lattice import (StepSizes, build_lattice, control_grid,
                      dp_backward_sweep, policy_value_sweep,
                      value_table_to_csv, control_field_to_csv)
from .measures import (EmpiricalMeasure, MeasurePath, average_update,
                       fixed_point_gap, induced_measure, measure_path_to_csv,
                       systematic_resample, w2_stop_threshold)
from .network import (NetworkArchitecture, fit_to_grid, forward,
                      load_checkpoint, random_theta, save_checkpoint)
from .problems import (LqParams, lq_analytic_equilibrium, lq_problem,
                       mfg2d_problem, riccati_closed_form)
from .sa import ProjectionRegion, SaSchedule, improvement, train
from .seeding import substream
from .simulate import PathBundle, paths_to_csv, simulate_sde


@dataclass
class RunConfig:
    """Everything one solve needs; round-trips through an INI file."""

    model: str = "lq"
    model_params: dict = field(default_factory=dict)
    # lattices
    h1_coarse: float = 0.2
    h2_coarse: float = 0.01
    h1_fine: float = 0.05
    h2_fine: float = 0.002
    control_points: int = 16
    # network
    hidden: tuple = (8,)
    # fit stage
    fit_trigger: float = 1e-3
    fit_max_steps: int = 10_000
    # SA stage
    eps0: float = 1.0
    delta0: float = 0.5
    p_eps: float = 1.0
    p_delta: float = 0.25
    sa_max_steps: int = 5000
    sa_trigger: float = 1e-5
    n_mc: int = 32
    m_bound: float = 10.0
    control_band: float = np.inf
    # global iteration
    iter_trigger: float = 1e-6
    max_iters: int = 50_000
    w2_q: float = 0.5
    stop_rule: str = "either"         # either | both | w2 | value
    n_particles: int = 2000
    initial_measure: str = "uncontrolled"  # uncontrolled | initial
    # bookkeeping
    seed: int = 0
    out_dir: str = "out"
    n_eval_paths: int = 3

    def __post_init__(self):
        if self.model not in ("lq", "mfg2d"):
            raise ConfigError(f"unknown model '{self.model}'")
        for name in ("fit_max_steps", "sa_max_steps", "max_iters",
                     "n_particles", "control_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("fit_trigger", "sa_trigger", "iter_trigger"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.w2_q < 1.0:
            raise ConfigError("w2_q must lie in (0, 1)")
        if self.stop_rule not in ("either", "both", "w2", "value"):
            raise ConfigError(f"unknown stop_rule '{self.stop_rule}'")
        if self.initial_measure not in ("uncontrolled", "initial"):
            raise ConfigError(
                f"unknown initial_measure '{self.initial_measure}'")

    # -- serialization ----------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {"name": self.model}
        for key, val in self.model_params.items():
            cp["model"][key] = repr(val)
        cp["lattice"] = {
            "h1_coarse": repr(self.h1_coarse),
            "h2_coarse": repr(self.h2_coarse),
            "h1_fine": repr(self.h1_fine),
            "h2_fine": repr(self.h2_fine),
            "control_points": str(self.control_points),
        }
        cp["network"] = {"hidden": ",".join(str(w) for w in self.hidden)}
        cp["fit"] = {"trigger": repr(self.fit_trigger),
                     "max_steps": str(self.fit_max_steps)}
        cp["sa"] = {
            "eps0": repr(self.eps0), "delta0": repr(self.delta0),
            "p_eps": repr(self.p_eps), "p_delta": repr(self.p_delta),
            "max_steps": str(self.sa_max_steps),
            "trigger": repr(self.sa_trigger),
            "n_mc": str(self.n_mc), "m_bound": repr(self.m_bound),
            "control_band": repr(self.control_band),
        }
        cp["iteration"] = {
            "trigger": repr(self.iter_trigger),
            "max_iters": str(self.max_iters),
            "w2_q": repr(self.w2_q),
            "stop_rule": self.stop_rule,
            "n_particles": str(self.n_particles),
            "initial_measure": self.initial_measure,
        }
        cp["run"] = {"seed": str(self.seed), "out_dir": self.out_dir,
                     "n_eval_paths": str(self.n_eval_paths)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparsable config: {exc}") from exc
        try:
            model = cp.get("model", "name")
        except (configparser.NoSectionError, configparser.NoOptionError):
            raise ConfigError("missing key: model/name")
        params = {k: float(v) for k, v in cp.items("model") if k != "name"}

        def get(sec, key, cast, default):
            if cp.has_option(sec, key):
                try:
                    return cast(cp.get(sec, key))
                except ValueError as exc:
                    raise ConfigError(f"bad value for {sec}/{key}") from exc
            return default

        d = cls.__dataclass_fields__
        hidden_raw = get("network", "hidden", str, None)
        hidden = tuple(int(w) for w in hidden_raw.split(",") if w.strip()) \
            if hidden_raw else d["hidden"].default_factory() \
            if callable(getattr(d["hidden"], "default_factory", None)) \
            else (8,)
        return cls(
            model=model,
            model_params=params,
            h1_coarse=get("lattice", "h1_coarse", float, 0.2),
            h2_coarse=get("lattice", "h2_coarse", float, 0.01),
            h1_fine=get("lattice", "h1_fine", float, 0.05),
            h2_fine=get("lattice", "h2_fine", float, 0.002),
            control_points=get("lattice", "control_points", int, 16),
            hidden=hidden,
            fit_trigger=get("fit", "trigger", float, 1e-3),
            fit_max_steps=get("fit", "max_steps", int, 10_000),
            eps0=get("sa", "eps0", float, 1.0),
            delta0=get("sa", "delta0", float, 0.5),
            p_eps=get("sa", "p_eps", float, 1.0),
            p_delta=get("sa", "p_delta", float, 0.25),
            sa_max_steps=get("sa", "max_steps", int, 5000),
            sa_trigger=get("sa", "trigger", float, 1e-5),
            n_mc=get("sa", "n_mc", int, 32),
            m_bound=get("sa", "m_bound", float, 10.0),
            control_band=get("sa", "control_band", float, np.inf),
            iter_trigger=get("iteration", "trigger", float, 1e-6),
            max_iters=get("iteration", "max_iters", int, 50_000),
            w2_q=get("iteration", "w2_q", float, 0.5),
            stop_rule=get("iteration", "stop_rule", str, "either"),
            n_particles=get("iteration", "n_particles", int, 2000),
            initial_measure=get("iteration", "initial_measure", str,
                                "uncontrolled"),
            seed=get("run", "seed", int, 0),
            out_dir=get("run", "out_dir", str, "out"),
            n_eval_paths=get("run", "n_eval_paths", int, 3),
        )

    def build_problem(self):
        if self.model == "lq":
            keys = {"a", "q", "c", "epsilon", "rho", "sigma", "t"}
            kw = {("T" if k == "t" else k): v
                  for k, v in self.model_params.items() if k in keys}
            return lq_problem(LqParams(**kw))
        kw = {k: v for k, v in self.model_params.items()
              if k in ("sigma", "horizon")}
        return mfg2d_problem(**kw)


@dataclass
class RunReport:
    """Final diagnostics of one solve."""

    model: str
    iterations: int
    value_change: float
    w2_gap: float
    w2_threshold: float
    stopped_by: str
    first_w2_iter: int | None
    first_value_iter: int | None
    sa_best_g: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _paths_to_array(path_obj: MeasurePath) -> np.ndarray:
    return np.stack([m.particles for m in path_obj])


def _array_to_path(arr: np.ndarray) -> MeasurePath:
    return MeasurePath([EmpiricalMeasure.from_points(sl) for sl in arr])


def _fine_measure_path(m_bar: MeasurePath, steps_c: StepSizes,
                       steps_f: StepSizes) -> MeasurePath:
    """Reindex a coarse-time measure path onto the fine time grid."""
    idx = np.minimum(
        np.rint(np.arange(steps_f.n_time + 1) * steps_f.h2 / steps_c.h2)
        .astype(int), steps_c.n_time)
    return MeasurePath([m_bar[i] for i in idx])


def _initial_measure_path(problem, lattice, steps, config) -> MeasurePath:
    base = EmpiricalMeasure.from_points(
        lattice.points[lattice.indices_of(problem.initial_sampler(
            substream(config.seed, "init"), config.n_particles))])
    if config.initial_measure == "initial":
        return MeasurePath.constant(base, steps.n_time)
    mid = problem.control_midpoint()

    def constant_control(t, points):
        return np.broadcast_to(mid, (points.shape[0], mid.shape[0]))

    return induced_measure(problem, lattice, steps, constant_control,
                           MeasurePath.constant(base, steps.n_time),
                           config.n_particles, config.seed)


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

def run_algorithm1(config: RunConfig, resume: bool = False) -> RunReport:
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    t_start = time.monotonic()

    problem = config.build_problem()
    steps_c = StepSizes.for_horizon(problem.horizon, config.h1_coarse,
                                    config.h2_coarse)
    steps_f = StepSizes.for_horizon(problem.horizon, config.h1_fine,
                                    config.h2_fine)
    lat_c = build_lattice(problem, steps_c)
    lat_f = build_lattice(problem, steps_f)
    controls = control_grid(problem, config.control_points)
    arch = NetworkArchitecture.for_problem(problem, hidden=config.hidden)
    schedule = SaSchedule(eps0=config.eps0, delta0=config.delta0,
                          p_eps=config.p_eps, p_delta=config.p_delta,
                          max_steps=config.sa_max_steps,
                          trigger=config.sa_trigger, n_mc=config.n_mc)
    threshold = w2_stop_threshold(config.w2_q, config.h1_coarse)

    with open(os.path.join(out, "config.copy"), "w") as fh:
        fh.write(config.to_ini())

    # fixed-seed substreams: identical inputs give identical iterations,
    # which lets the loop hit an exact stationary point
    theta_init = random_theta(arch, substream(config.seed, "theta0"))
    sa_seed = int(substream(config.seed, "sa").integers(2 ** 62))
    induce_seed = int(substream(config.seed, "measure").integers(2 ** 62))

    resume_file = os.path.join(out, "resume_state.npz")
    k_start = 1
    if resume and os.path.exists(resume_file):
        blob = np.load(resume_file)
        k_start = int(blob["k"]) + 1
        m_bar = _array_to_path(blob["m_bar"])
        v_prev = blob["v_fine"]
        m_induced_prev = (_array_to_path(blob["m_induced"])
                         if "m_induced" in blob else None)
        theta = blob["theta"]
        first_w2 = int(blob["first_w2"]) if blob["first_w2"] >= 0 else None
        first_value = int(blob["first_value"]) if blob["first_value"] >= 0 \
            else None
        best_g = float(blob["best_g"])
        trace_mode = "a"
    else:
        m_bar = _initial_measure_path(problem, lat_c, steps_c, config)
        # value tables start from the terminal cost under the initial law
        g0 = problem.terminal_cost(lat_f.points, m_bar[-1])
        v_prev = np.broadcast_to(g0, (steps_f.n_time + 1,
                                      lat_f.n_nodes)).copy()
        m_induced_prev = None
        theta = theta_init.copy()
        first_w2 = None
        first_value = None
        best_g = -np.inf
        trace_mode = "w"

    trace_fp = open(os.path.join(out, "trace_fixedpoint.jsonl"), trace_mode)
    trace_sa = open(os.path.join(out, "trace_sa.jsonl"), trace_mode)

    k = k_start - 1
    value_change = np.inf
    gap = np.inf
    stopped_by = "budget"
    u_net = None
    try:
        for k in range(k_start, config.max_iters + 1):
            measure_frozen = first_w2 is not None
            try:
                # Step 1: grid policy under the frozen averaged law
                u_coarse, field_k = dp_backward_sweep(
                    problem, lat_c, steps_c, m_bar, controls)
                if not measure_frozen:
                    # Step 2: induced law of the controlled chain
                    m_new = induced_measure(problem, lat_c, steps_c, field_k,
                                            m_bar, config.n_particles,
                                            induce_seed)
                    gap = (fixed_point_gap(m_new, m_induced_prev)
                           if m_induced_prev is not None else np.inf)
                    m_induced_prev = m_new
                    # Step 3: damped averaging, resampled to a fixed atom count
                    m_bar = MeasurePath([
                        systematic_resample(sl, config.n_particles)
                        for sl in average_update(m_bar, m_new, k)])
                else:
                    # measure fixed point reached: keep the law frozen so the
                    # remaining iterations refine the policy and value only
                    m_new = m_induced_prev
                # Step 4: network fit to the grid policy (fixed init)
                theta0, fit_final_loss = fit_to_grid(
                    arch, theta_init, field_k, lat_c, steps_c,
                    trigger=config.fit_trigger,
                    max_steps=config.fit_max_steps,
                    m_bound=config.m_bound)
                # Step 5: stochastic-approximation refinement
                region = ProjectionRegion.around_anchor(
                    arch, theta0, lat_c, steps_c,
                    band=config.control_band, m_bound=config.m_bound)
                sa_trace: list = []

                def evaluator(th, eval_seed, _m=m_bar):
                    return improvement(problem, lat_c, steps_c, _m, arch,
                                       th, config.n_mc, eval_seed)

                theta = train(theta0, schedule, region, evaluator, sa_seed,
                              trace=sa_trace)
                for entry in sa_trace:
                    entry["k"] = k
                    trace_sa.write(json.dumps(entry) + "\n")
                if sa_trace:
                    best_g = max(best_g, max(e["G"] for e in sa_trace))

                def net_control(t, points, _th=theta):
                    return forward(arch, _th, np.full(points.shape[0], t),
                                   points)

                # Steps 6-7: value sweeps under the network control
                u_net = policy_value_sweep(problem, lat_c, steps_c, m_bar,
                                           net_control)
                m_fine = _fine_measure_path(m_bar, steps_c, steps_f)
                v_k = policy_value_sweep(problem, lat_f, steps_f, m_fine,
                                         net_control)
                # Step 8: squared value change on the fine lattice
                value_change = float(np.sum((v_k - v_prev) ** 2))
                v_prev = v_k
            except SolverError as exc:
                raise type(exc)(f"iteration {k}: {exc}") from exc

            w2_hit = gap < threshold
            value_hit = value_change < config.iter_trigger
            if w2_hit and first_w2 is None:
                first_w2 = k
            if value_hit and first_value is None:
                first_value = k
            trace_fp.write(json.dumps({
                "k": k, "w2_gap": None if not np.isfinite(gap) else gap,
                "threshold": threshold, "value_change": value_change,
                "fit_loss": fit_final_loss,
                "w2_hit": w2_hit, "value_hit": value_hit}) + "\n")
            trace_fp.flush()

            save_checkpoint(os.path.join(out, f"theta_checkpoint_k{k}.csv"),
                            arch, theta)
            np.savez(resume_file, k=k, m_bar=_paths_to_array(m_bar),
                     m_induced=_paths_to_array(m_new), v_fine=v_prev,
                     theta=theta,
                     first_w2=-1 if first_w2 is None else first_w2,
                     first_value=-1 if first_value is None else first_value,
                     best_g=best_g)

            rule = config.stop_rule
            if rule == "either" and (w2_hit or value_hit):
                stopped_by = "w2" if w2_hit else "value"
                break
            if rule == "w2" and w2_hit:
                stopped_by = "w2"
                break
            if rule == "value" and value_hit:
                stopped_by = "value"
                break
            if rule == "both" and first_w2 is not None \
                    and first_value is not None:
                stopped_by = "both"
                break
    finally:
        trace_fp.close()
        trace_sa.close()

    def net_control_final(t, points):
        return forward(arch, theta, np.full(points.shape[0], t), points)

    if u_net is None:
        # resumed past the stopping point: rebuild the sweeps for artifacts
        u_net = policy_value_sweep(problem, lat_c, steps_c, m_bar,
                                   net_control_final)

    # final artifacts
    value_table_to_csv(os.path.join(out, "value_coarse.csv"), lat_c, steps_c,
                       u_net)
    value_table_to_csv(os.path.join(out, "value_fine.csv"), lat_f, steps_f,
                       v_prev)
    fine_field = np.stack([
        forward(arch, theta, np.full(lat_f.n_nodes, n * steps_f.h2),
                lat_f.points)
        for n in range(steps_f.n_time)])
    control_field_to_csv(os.path.join(out, "controls.csv"), lat_f, steps_f,
                         fine_field)
    measure_path_to_csv(m_bar, steps_c, os.path.join(out, "measures.csv"))
    save_checkpoint(os.path.join(out, "theta_final.csv"), arch, theta)

    def policy(t, x):
        return forward(arch, theta, np.full(x.shape[0], t), x)

    bundle = simulate_sde(problem, policy, m_bar, config.n_eval_paths,
                          steps_c, int(substream(config.seed, "paths")
                                       .integers(2 ** 62)),
                          share_common_noise=problem.has_common_noise)
    paths_to_csv(bundle, os.path.join(out, "paths.csv"))

    report = RunReport(
        model=config.model, iterations=k, value_change=value_change,
        w2_gap=float(gap) if np.isfinite(gap) else -1.0,
        w2_threshold=threshold, stopped_by=stopped_by,
        first_w2_iter=first_w2, first_value_iter=first_value,
        sa_best_g=best_g if np.isfinite(best_g) else -1.0)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    # wall time lives outside report.json so reruns stay byte-identical
    with open(os.path.join(out, "timing.txt"), "w") as fh:
        fh.write(f"wall_seconds={time.monotonic() - t_start:.3f}\n")
    return report


# ---------------------------------------------------------------------------
# Benchmark evaluation against the closed-form equilibrium
# ---------------------------------------------------------------------------

def evaluate_lq_policy(params: LqParams, arch, theta, steps: StepSizes,
                       scenario_seed: int, n_particles: int = 10_000):
    """Roll the learned policy through a common-noise scenario.

    Simulates ``n_particles`` agents sharing one common-noise path; the
    analytic benchmark trajectory is driven by the same increments.
    Returns time-averaged errors: control vs (q + eta)(u - x) along our own
    states, empirical conditional mean vs 0.5 + rho*sigma*W0, and the
    representative state vs its analytic twin.
    """
    rng = substream(scenario_seed, "lqeval")
    n_time = steps.n_time
    sq = np.sqrt(steps.h2)
    times = steps.times()
    eta = riccati_closed_form(params, times)
    rho, sig = params.rho, params.sigma
    mix = np.sqrt(1.0 - rho ** 2)

    dw0 = rng.standard_normal(n_time) * sq
    w0 = np.concatenate([[0.0], np.cumsum(dw0)])
    u_an = 0.5 + rho * sig * w0

    x0 = rng.uniform(0.0, 1.0, size=n_particles)
    x_hat = x0.copy()
    x_an = x0.copy()
    err_alpha = 0.0
    err_u = 0.0
    err_x = 0.0
    u_hat_path = np.empty(n_time + 1)
    u_hat_path[0] = x_hat.mean()
    for n in range(n_time):
        t = times[n]
        u_hat = x_hat.mean()
        al_hat = forward(arch, theta, np.full(n_particles, t),
                         x_hat[:, None])[:, 0]
        al_bench = (params.q + eta[n]) * (u_hat - x_hat)
        err_alpha += np.mean(np.abs(al_hat - al_bench))
        err_u += abs(u_hat - u_an[n])
        err_x += np.mean(np.abs(x_hat - x_an))
        dw = rng.standard_normal(n_particles) * sq
        noise = sig * (rho * dw0[n] + mix * dw)
        x_hat = x_hat + (params.a * (u_hat - x_hat) + al_hat) * steps.h2 + noise
        al_an = (params.q + eta[n]) * (u_an[n] - x_an)
        x_an = x_an + (params.a * (u_an[n] - x_an) + al_an) * steps.h2 + noise
        u_hat_path[n + 1] = x_hat.mean()
    err_u += abs(u_hat_path[-1] - u_an[-1])
    err_x += np.mean(np.abs(x_hat - x_an))
    return {
        "alpha": err_alpha / n_time,
        "mean": err_u / (n_time + 1),
        "state": err_x / (n_time + 1),
        "u_hat": u_hat_path,
        "u_analytic": u_an,
    }
