//! Closed-loop multi-agent simulation.
//!
//! Every agent carries a convex polytope body on unicycle dynamics and runs
//! the same per-tick loop: compute a go-to-goal nominal input, solve the
//! smoothed distance (and its gradient) against every other agent's body,
//! assemble the barrier constraint rows, filter the nominal input through
//! the safety QP, and integrate.  All agents update simultaneously from the
//! same tick snapshot, so no agent sees another's current-tick decision.
//!
//! The trace records one CSV row per agent per tick plus a per-pair barrier
//! sidecar, and reruns with the same configuration are byte-identical; wall
//! clock timings go only to the metadata file.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cbf::{
    assemble_rows, barrier_value, AlphaSpec, BarrierConfig, ObstacleTerm, QpStatus,
    SafetyConstraintRow,
};
use crate::distance::{solve_distance, DistanceProblem, DistanceStatus, SolveOptions};
use crate::dynamics::{integrate_step, modified_g, IntegrationMethod, UnicycleAgent};
use crate::lse::SmoothMaxParams;
use crate::sensitivity::{assemble_kkt_system, solve_sensitivity, DistanceGradient};
use crate::sets::{membership_margin, ParamVector, RigidPolytope, SetSpec};
use crate::{Error, Result};

/// Body geometry options accepted by the configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    RegularPolygon { sides: usize, circumradius: f64 },
    Box { half_widths: [f64; 2] },
    Halfspaces { normals: Vec<[f64; 2]>, offsets: Vec<f64> },
}

impl ShapeConfig {
    pub fn build(&self, smoothing: SmoothMaxParams) -> Result<RigidPolytope> {
        match self {
            ShapeConfig::RegularPolygon { sides, circumradius } => {
                RigidPolytope::regular_polygon(*sides, *circumradius, smoothing)
            }
            ShapeConfig::Box { half_widths } => {
                RigidPolytope::axis_aligned_box(*half_widths, smoothing)
            }
            ShapeConfig::Halfspaces { normals, offsets } => {
                if normals.len() != offsets.len() {
                    return Err(Error::Config(format!(
                        "shape: {} normals but {} offsets",
                        normals.len(),
                        offsets.len()
                    )));
                }
                let q = normals.len();
                let mut a = nalgebra::DMatrix::zeros(q, 2);
                for (k, n) in normals.iter().enumerate() {
                    a[(k, 0)] = n[0];
                    a[(k, 1)] = n[1];
                }
                RigidPolytope::new(a, DVector::from_row_slice(offsets), smoothing)
            }
        }
    }
}

fn default_k_u() -> f64 {
    1.0
}

fn default_b() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: u32,
    pub shape: ShapeConfig,
    /// Initial parameters `(x_c1, x_c2, θ)`.
    pub start: [f64; 3],
    /// Goal position for the go-to-goal nominal law.
    pub goal: [f64; 2],
    /// Nominal gain: `u_nom = −k_u (x_c − goal)`.
    #[serde(default = "default_k_u")]
    pub k_u: f64,
    /// Unicycle linearization offset.
    #[serde(default = "default_b")]
    pub b: f64,
}

/// Source for the obstacle parameter velocity `λ̇_j` used in the rows.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaDotMode {
    /// Ground truth from the simulation: `g̃(λ_j)` applied to the input the
    /// obstacle agent used over the previous interval (zero at the first
    /// tick, before anything has moved).
    #[default]
    Oracle,
    /// Backward finite difference over the last two sampled `λ_j`; zero at
    /// the first tick.
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub agents: Vec<AgentConfig>,
    /// Smoothing sharpness for every body.
    pub epsilon: f64,
    /// Safety margin in squared-length units (`h = d − R`).  Mutually
    /// exclusive with `margin_distance`.
    #[serde(default)]
    pub r: Option<f64>,
    /// Convenience margin in plain meters; sets `R = ½·margin_distance²`.
    #[serde(default)]
    pub margin_distance: Option<f64>,
    #[serde(default)]
    pub alpha: Option<AlphaSpec>,
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub lambda_dot_mode: LambdaDotMode,
    /// Echoed into the metadata; reserved for randomized scenario tooling.
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Config("agents: at least one agent required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.agents {
            if !seen.insert(a.id) {
                return Err(Error::Config(format!("agents: duplicate id {}", a.id)));
            }
            if !(a.k_u.is_finite() && a.k_u > 0.0) {
                return Err(Error::Config(format!(
                    "agents[id={}].k_u: must be positive, got {}",
                    a.id, a.k_u
                )));
            }
            if !(a.b.is_finite() && a.b > 0.0) {
                return Err(Error::Config(format!(
                    "agents[id={}].b: must be positive, got {}",
                    a.id, a.b
                )));
            }
            if !a.start.iter().all(|v| v.is_finite()) || !a.goal.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!(
                    "agents[id={}]: start/goal must be finite",
                    a.id
                )));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon: must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dt: must be positive, got {}",
                self.dt
            )));
        }
        if !(self.t_final.is_finite() && self.t_final >= self.dt) {
            return Err(Error::Config(format!(
                "t_final: must be at least dt, got {}",
                self.t_final
            )));
        }
        if self.r.is_some() && self.margin_distance.is_some() {
            return Err(Error::Config(
                "r / margin_distance: set one of them, not both".into(),
            ));
        }
        self.barrier_config()?;
        Ok(())
    }

    /// Effective barrier configuration (default margin: 0.2 m clearance).
    pub fn barrier_config(&self) -> Result<BarrierConfig> {
        let alpha = self.alpha.unwrap_or_default();
        match (self.r, self.margin_distance) {
            (Some(r), _) => BarrierConfig::new(r, alpha),
            (None, Some(m)) => BarrierConfig::from_margin_distance(m, alpha),
            (None, None) => BarrierConfig::from_margin_distance(0.2, alpha),
        }
        .map_err(|e| Error::Config(format!("r/margin_distance/alpha: {e}")))
    }

    /// Number of trace rows per agent: one at `t = 0` plus one per full step.
    pub fn tick_count(&self) -> usize {
        (self.t_final / self.dt).floor() as usize + 1
    }
}

/// Parses and validates a TOML configuration file.
pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: SimConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Controller outcome for one agent at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickStatus {
    /// Distance solves certified, QP solved; the filtered input was applied.
    Optimal,
    /// Some pair of bodies intersects; the guarantees are void and the
    /// nominal input was applied unchanged.
    Unsafe,
    /// The safety QP admitted no input; the agent braked (`u = 0`).
    Infeasible,
    /// A distance or sensitivity solve failed; the agent braked (`u = 0`).
    NumericalFailure,
}

impl fmt::Display for TickStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TickStatus::Optimal => "Optimal",
            TickStatus::Unsafe => "Unsafe",
            TickStatus::Infeasible => "Infeasible",
            TickStatus::NumericalFailure => "NumericalFailure",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TickStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Optimal" => TickStatus::Optimal,
            "Unsafe" => TickStatus::Unsafe,
            "Infeasible" => TickStatus::Infeasible,
            "NumericalFailure" => TickStatus::NumericalFailure,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown tick status {other:?}"
                )))
            }
        })
    }
}

/// One CSV row: agent state, applied wheel/linearized inputs, barrier
/// minimum, and controller status.
#[derive(Debug, Clone)]
pub struct TickRow {
    pub t: f64,
    pub agent_id: u32,
    pub xc1: f64,
    pub xc2: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
    pub u1: f64,
    pub u2: f64,
    pub h_min: f64,
    pub status: TickStatus,
}

/// One sidecar row: barrier value for a single ordered pair.
#[derive(Debug, Clone)]
pub struct PairRow {
    pub t: f64,
    pub agent_id: u32,
    pub obstacle_id: u32,
    pub h: f64,
}

/// Wall-clock accounting per pipeline stage (seconds); excluded from the
/// deterministic trace files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub distance_s: f64,
    pub sensitivity_s: f64,
    pub qp_s: f64,
    pub integration_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub rows: Vec<TickRow>,
    pub pair_rows: Vec<PairRow>,
    pub config: SimConfig,
    pub timings: StageTimings,
}

struct AgentState {
    id: u32,
    body: RigidPolytope,
    vehicle: UnicycleAgent,
    lambda: ParamVector,
    prev_lambda: ParamVector,
    goal: [f64; 2],
    k_u: f64,
    /// Input applied over the previous interval (zero before the run).
    u_prev: DVector<f64>,
}

/// Runs the closed loop and returns the fully populated trace.
///
/// Solver trouble never aborts the run: per-agent statuses record it and
/// the affected agent falls back to the configured safe input.  Only an
/// invalid configuration (including bodies that already intersect at
/// `t = 0`) is an error.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimTrace> {
    cfg.validate()?;
    let total_clock = Instant::now();
    let smoothing = SmoothMaxParams::new(cfg.epsilon)
        .map_err(|e| Error::Config(format!("epsilon: {e}")))?;
    let barrier = cfg.barrier_config()?;

    let mut agents: Vec<AgentState> = Vec::with_capacity(cfg.agents.len());
    for a in &cfg.agents {
        agents.push(AgentState {
            id: a.id,
            body: a
                .shape
                .build(smoothing)
                .map_err(|e| Error::Config(format!("agents[id={}].shape: {e}", a.id)))?,
            vehicle: UnicycleAgent::new(a.b)
                .map_err(|e| Error::Config(format!("agents[id={}].b: {e}", a.id)))?,
            lambda: ParamVector::rigid_pose(a.start[0], a.start[1], a.start[2])
                .map_err(|e| Error::Config(format!("agents[id={}].start: {e}", a.id)))?,
            prev_lambda: ParamVector::rigid_pose(a.start[0], a.start[1], a.start[2]).unwrap(),
            goal: a.goal,
            k_u: a.k_u,
            u_prev: DVector::zeros(2),
        });
    }

    // Initial disjointness: the safety guarantees need separated bodies at
    // t = 0, so overlapping starts are a configuration error.
    for i in 0..agents.len() {
        for j in (i + 1)..agents.len() {
            let problem = DistanceProblem::new(
                &agents[i].body,
                &agents[j].body,
                agents[i].lambda.clone(),
                agents[j].lambda.clone(),
            )?;
            let sol = solve_distance(&problem, &SolveOptions::default())
                .map_err(|e| Error::Config(format!("initial distance solve failed: {e}")))?;
            if sol.status == DistanceStatus::Intersecting {
                return Err(Error::Config(format!(
                    "agents: bodies {} and {} intersect at t = 0",
                    agents[i].id, agents[j].id
                )));
            }
        }
    }

    let ticks = cfg.tick_count();
    let n = agents.len();
    let mut timings = StageTimings::default();
    let mut rows = Vec::with_capacity(ticks * n);
    let mut pair_rows = Vec::with_capacity(ticks * n * n.saturating_sub(1));

    for tick in 0..ticks {
        let t = tick as f64 * cfg.dt;

        // Pairwise distances and gradients from the tick snapshot (solved
        // once per unordered pair; the gradient splits by parameter owner).
        let mut outcomes: Vec<Vec<Option<PairOutcome>>> = vec![vec![None; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let outcome = pair_outcome(&agents[i], &agents[j], &barrier, &mut timings);
                outcomes[i][j] = Some(outcome.clone());
                outcomes[j][i] = Some(PairOutcome {
                    grad_i: outcome.grad_j.clone(),
                    grad_j: outcome.grad_i.clone(),
                    ..outcome
                });
            }
        }

        // Controller for every agent from the same snapshot.
        let mut inputs: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let state = &agents[i];
            let lam = state.lambda.values();
            let u_nom = DVector::from_row_slice(&[
                -state.k_u * (lam[0] - state.goal[0]),
                -state.k_u * (lam[1] - state.goal[1]),
            ]);

            let mut h_min = f64::INFINITY;
            let mut any_intersecting = false;
            let mut any_failed = false;
            let mut terms: Vec<ObstacleTerm> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let o = outcomes[i][j].as_ref().expect("pair solved");
                h_min = h_min.min(o.h);
                pair_rows.push(PairRow {
                    t,
                    agent_id: state.id,
                    obstacle_id: agents[j].id,
                    h: o.h,
                });
                match (&o.grad_i, &o.grad_j, o.status, o.failed) {
                    (_, _, DistanceStatus::Intersecting, _) => any_intersecting = true,
                    (Some(gi), Some(gj), DistanceStatus::Optimal, false) => {
                        terms.push(ObstacleTerm {
                            obstacle_id: agents[j].id as usize,
                            gradient: DistanceGradient {
                                d_dlambda_e: gi.clone(),
                                d_dlambda_j: gj.clone(),
                                condition_estimate: 0.0,
                            },
                            h: o.h,
                            lambda_j_dot: obstacle_velocity(cfg, &agents[j]),
                        });
                    }
                    _ => any_failed = true,
                }
            }

            let (u, status) = if any_intersecting {
                (u_nom.clone(), TickStatus::Unsafe)
            } else if any_failed {
                (DVector::zeros(2), TickStatus::NumericalFailure)
            } else {
                let clock = Instant::now();
                let g_tilde = modified_g(&state.vehicle, lam[2]);
                let decision = assemble_rows(&terms, &DVector::zeros(3), &g_tilde, &barrier)
                    .and_then(|qp_rows: Vec<SafetyConstraintRow>| {
                        crate::cbf::solve_filter_qp(&u_nom, &qp_rows)
                    });
                timings.qp_s += clock.elapsed().as_secs_f64();
                match decision {
                    Ok(filtered) if filtered.status == QpStatus::Optimal => {
                        (filtered.u, TickStatus::Optimal)
                    }
                    Ok(_) => (DVector::zeros(2), TickStatus::Infeasible),
                    Err(_) => (DVector::zeros(2), TickStatus::NumericalFailure),
                }
            };

            let (v, omega) = state
                .vehicle
                .wheel_commands(lam[2], &u)
                .expect("length-2 input");
            rows.push(TickRow {
                t,
                agent_id: state.id,
                xc1: lam[0],
                xc2: lam[1],
                theta: lam[2],
                v,
                omega,
                u1: u[0],
                u2: u[1],
                h_min,
                status,
            });
            inputs.push(u);
        }

        // Simultaneous integration (skipped after the final recorded tick).
        if tick + 1 < ticks {
            let clock = Instant::now();
            for (state, u) in agents.iter_mut().zip(inputs.into_iter()) {
                state.prev_lambda = state.lambda.clone();
                state.lambda = integrate_step(
                    &state.vehicle,
                    &state.lambda,
                    &u,
                    cfg.dt,
                    IntegrationMethod::Rk4,
                )?;
                state.u_prev = u;
            }
            timings.integration_s += clock.elapsed().as_secs_f64();
        }
    }

    timings.total_s = total_clock.elapsed().as_secs_f64();
    Ok(SimTrace {
        rows,
        pair_rows,
        config: cfg.clone(),
        timings,
    })
}

/// Velocity of an obstacle agent's parameters for the row assembly.
fn obstacle_velocity(cfg: &SimConfig, obstacle: &AgentState) -> DVector<f64> {
    match cfg.lambda_dot_mode {
        LambdaDotMode::Oracle => {
            let theta = obstacle.lambda.values()[2];
            modified_g(&obstacle.vehicle, theta) * &obstacle.u_prev
        }
        LambdaDotMode::FiniteDifference => {
            (obstacle.lambda.values() - obstacle.prev_lambda.values()) / cfg.dt
        }
    }
}

/// Result of one unordered-pair solve, viewed from the first agent's side.
#[derive(Clone)]
struct PairOutcome {
    h: f64,
    grad_i: Option<DVector<f64>>,
    grad_j: Option<DVector<f64>>,
    status: DistanceStatus,
    failed: bool,
}

fn pair_outcome(
    a: &AgentState,
    b: &AgentState,
    barrier: &BarrierConfig,
    timings: &mut StageTimings,
) -> PairOutcome {
    let failure = |h: f64| PairOutcome {
        h,
        grad_i: None,
        grad_j: None,
        status: DistanceStatus::NumericalFailure,
        failed: true,
    };
    let problem = match DistanceProblem::new(&a.body, &b.body, a.lambda.clone(), b.lambda.clone())
    {
        Ok(p) => p,
        Err(_) => return failure(f64::NAN),
    };
    let clock = Instant::now();
    let solved = solve_distance(&problem, &SolveOptions::default());
    timings.distance_s += clock.elapsed().as_secs_f64();
    let sol = match solved {
        Ok(s) => s,
        Err(_) => return failure(f64::NAN),
    };
    let h = barrier_value(&sol, barrier);
    match sol.status {
        DistanceStatus::Optimal => {
            let clock = Instant::now();
            let grads = assemble_kkt_system(&problem, &sol)
                .and_then(|k| solve_sensitivity(&k))
                .map(|(_, g)| g);
            timings.sensitivity_s += clock.elapsed().as_secs_f64();
            match grads {
                Ok(g) => PairOutcome {
                    h,
                    grad_i: Some(g.d_dlambda_e),
                    grad_j: Some(g.d_dlambda_j),
                    status: DistanceStatus::Optimal,
                    failed: false,
                },
                Err(_) => PairOutcome {
                    h,
                    grad_i: None,
                    grad_j: None,
                    status: DistanceStatus::Optimal,
                    failed: true,
                },
            }
        }
        DistanceStatus::Intersecting => PairOutcome {
            h,
            grad_i: None,
            grad_j: None,
            status: DistanceStatus::Intersecting,
            failed: false,
        },
        other => PairOutcome {
            h,
            grad_i: None,
            grad_j: None,
            status: other,
            failed: true,
        },
    }
}

const TRACE_HEADER: &str = "t,agent_id,xc1,xc2,theta,v,omega,u1,u2,h_min,qp_status";
const PAIR_HEADER: &str = "t,agent_id,obstacle_id,h";

/// Nine significant digits, scientific notation; infinities and NaN pass
/// through as Rust's standard spellings.
fn fmt9(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        format!("{x}")
    }
}

/// Writes `trace.csv`, `pairs.csv`, and `metadata.toml` into `dir`.
pub fn write_trace(trace: &SimTrace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::with_capacity(trace.rows.len() * 96);
    csv.push_str(TRACE_HEADER);
    csv.push('\n');
    for r in &trace.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            fmt9(r.t),
            r.agent_id,
            fmt9(r.xc1),
            fmt9(r.xc2),
            fmt9(r.theta),
            fmt9(r.v),
            fmt9(r.omega),
            fmt9(r.u1),
            fmt9(r.u2),
            fmt9(r.h_min),
            r.status
        ));
    }
    std::fs::write(dir.join("trace.csv"), csv)?;

    let mut side = String::with_capacity(trace.pair_rows.len() * 48);
    side.push_str(PAIR_HEADER);
    side.push('\n');
    for r in &trace.pair_rows {
        side.push_str(&format!(
            "{},{},{},{}\n",
            fmt9(r.t),
            r.agent_id,
            r.obstacle_id,
            fmt9(r.h)
        ));
    }
    std::fs::write(dir.join("pairs.csv"), side)?;

    #[derive(Serialize)]
    struct Metadata<'a> {
        version: &'a str,
        timings: &'a StageTimings,
        config: &'a SimConfig,
    }
    let meta = toml::to_string_pretty(&Metadata {
        version: env!("CARGO_PKG_VERSION"),
        timings: &trace.timings,
        config: &trace.config,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("metadata.toml"), meta)?;
    Ok(())
}

/// Reads back the configuration echoed into `metadata.toml` by
/// [`write_trace`], so rendering does not need the original file.
pub fn load_trace_config(dir: &Path) -> Result<SimConfig> {
    #[derive(Deserialize)]
    struct Metadata {
        config: SimConfig,
    }
    let text = std::fs::read_to_string(dir.join("metadata.toml"))?;
    let meta: Metadata = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    meta.config.validate()?;
    Ok(meta.config)
}

/// Rows parsed back from a trace directory.
#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub rows: Vec<TickRow>,
    pub pair_rows: Vec<PairRow>,
}

/// Parses `trace.csv` and `pairs.csv` back from `dir`.
pub fn load_trace(dir: &Path) -> Result<LoadedTrace> {
    let text = std::fs::read_to_string(dir.join("trace.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::InvalidInput("trace.csv: unexpected header".into()));
    }
    let parse_f = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidInput(format!("bad float field {s:?}")))
    };
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::InvalidInput(format!(
                "trace.csv: expected 11 fields, got {}",
                f.len()
            )));
        }
        rows.push(TickRow {
            t: parse_f(f[0])?,
            agent_id: f[1]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad agent id {:?}", f[1])))?,
            xc1: parse_f(f[2])?,
            xc2: parse_f(f[3])?,
            theta: parse_f(f[4])?,
            v: parse_f(f[5])?,
            omega: parse_f(f[6])?,
            u1: parse_f(f[7])?,
            u2: parse_f(f[8])?,
            h_min: parse_f(f[9])?,
            status: f[10].parse()?,
        });
    }

    let text = std::fs::read_to_string(dir.join("pairs.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some(PAIR_HEADER) {
        return Err(Error::InvalidInput("pairs.csv: unexpected header".into()));
    }
    let mut pair_rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "pairs.csv: expected 4 fields, got {}",
                f.len()
            )));
        }
        pair_rows.push(PairRow {
            t: parse_f(f[0])?,
            agent_id: f[1]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad agent id {:?}", f[1])))?,
            obstacle_id: f[2]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad obstacle id {:?}", f[2])))?,
            h: parse_f(f[3])?,
        });
    }
    Ok(LoadedTrace { rows, pair_rows })
}

/// Points tracing the smoothed boundary `membership_margin = 0` by
/// bisecting along rays from the body center.
pub fn trace_smooth_boundary(
    set: &dyn SetSpec,
    lambda: &ParamVector,
    samples: usize,
) -> Result<Vec<[f64; 2]>> {
    let center = set.interior_hint(lambda);
    let mut points = Vec::with_capacity(samples);
    for k in 0..samples {
        let phi = k as f64 / samples as f64 * std::f64::consts::TAU;
        let dir = [phi.cos(), phi.sin()];
        // Grow until outside, then bisect the crossing.
        let mut lo = 0.0_f64;
        let mut hi = 0.5_f64;
        let margin_at = |r: f64| -> Result<f64> {
            let x = DVector::from_row_slice(&[center[0] + r * dir[0], center[1] + r * dir[1]]);
            membership_margin(set, &x, lambda)
        };
        let mut guard = 0;
        while margin_at(hi)? <= 0.0 {
            lo = hi;
            hi *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(Error::NumericalFailure(
                    "smoothed boundary ray never exits the set".into(),
                ));
            }
        }
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if margin_at(mid)? <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        points.push([center[0] + r * dir[0], center[1] + r * dir[1]]);
    }
    Ok(points)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Renders still frames every `every_k` ticks plus one barrier chart.
///
/// A frame shows each agent's exact polygon, the traced smoothed boundary,
/// and a star at its goal.  `every_k` larger than the last tick index
/// selects no frames (chart only).  Returns the number of frames written.
pub fn render_frames(
    trace: &LoadedTrace,
    cfg: &SimConfig,
    every_k: usize,
    dir: &Path,
) -> Result<usize> {
    if trace.rows.is_empty() {
        return Err(Error::InvalidInput("trace has no rows".into()));
    }
    if every_k == 0 {
        return Err(Error::InvalidInput("every_k must be at least 1".into()));
    }
    std::fs::create_dir_all(dir)?;
    let smoothing = SmoothMaxParams::new(cfg.epsilon)
        .map_err(|e| Error::Config(format!("epsilon: {e}")))?;
    let bodies: Vec<(u32, RigidPolytope, [f64; 2])> = cfg
        .agents
        .iter()
        .map(|a| Ok((a.id, a.shape.build(smoothing)?, a.goal)))
        .collect::<Result<_>>()?;

    // Group rows by tick (rows are written agent-major within a tick).
    let agents = cfg.agents.len();
    if trace.rows.len() % agents != 0 {
        return Err(Error::InvalidInput(
            "trace row count is not a multiple of the agent count".into(),
        ));
    }
    let ticks = trace.rows.len() / agents;

    // World extents over the whole run, padded by the largest body.
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut grow = |x: f64, y: f64| {
        lo[0] = lo[0].min(x);
        lo[1] = lo[1].min(y);
        hi[0] = hi[0].max(x);
        hi[1] = hi[1].max(y);
    };
    for r in &trace.rows {
        grow(r.xc1, r.xc2);
    }
    for (_, _, goal) in &bodies {
        grow(goal[0], goal[1]);
    }
    let max_r = bodies
        .iter()
        .map(|(_, b, _)| b.circumradius())
        .fold(0.0, f64::max);
    let pad = max_r + 1.0;
    let (lo, hi) = ([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad]);

    let size = 640.0;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = size / span;
    let sx = |x: f64| (x - lo[0]) * scale;
    let sy = |y: f64| size - (y - lo[1]) * scale;

    let mut frames = 0usize;
    if every_k <= ticks {
        for tick in (0..ticks).step_by(every_k) {
            let mut svg = String::new();
            svg.push_str(&format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
            ));
            for (slot, (id, body, goal)) in bodies.iter().enumerate() {
                let row = &trace.rows[tick * agents + slot];
                if row.agent_id != *id {
                    return Err(Error::InvalidInput(
                        "trace rows are not in configuration agent order".into(),
                    ));
                }
                let color = PALETTE[slot % PALETTE.len()];
                let lambda = ParamVector::rigid_pose(row.xc1, row.xc2, row.theta)?;

                // Smoothed boundary (semi-transparent).
                let ring = trace_smooth_boundary(body, &lambda, 90)?;
                svg.push_str(&format!(
                    "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"{color}\" stroke-opacity=\"0.5\" stroke-width=\"1\"/>\n",
                    ring.iter()
                        .map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1])))
                        .collect::<Vec<_>>()
                        .join(" ")
                ));
                // Exact body.
                let verts = body.world_vertices(&lambda)?;
                svg.push_str(&format!(
                    "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.55\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                    verts
                        .iter()
                        .map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1])))
                        .collect::<Vec<_>>()
                        .join(" ")
                ));
                // Goal star.
                svg.push_str(&star_path(sx(goal[0]), sy(goal[1]), 8.0, color));
                svg.push_str(&format!(
                    "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"black\">{}</text>\n",
                    sx(row.xc1) + 4.0,
                    sy(row.xc2) - 4.0,
                    id
                ));
            }
            svg.push_str(&format!(
                "<text x=\"8\" y=\"16\" font-size=\"12\" fill=\"black\">t = {:.2} s</text>\n</svg>\n",
                trace.rows[tick * agents].t
            ));
            std::fs::write(dir.join(format!("frame_{tick:06}.svg")), svg)?;
            frames += 1;
        }
    }

    write_chart(trace, agents, dir)?;
    Ok(frames)
}

fn star_path(cx: f64, cy: f64, r: f64, color: &str) -> String {
    let mut pts = Vec::with_capacity(10);
    for k in 0..10 {
        let rad = if k % 2 == 0 { r } else { r * 0.45 };
        let phi = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
        pts.push(format!(
            "{:.2},{:.2}",
            cx + rad * phi.cos(),
            cy + rad * phi.sin()
        ));
    }
    format!(
        "<polygon points=\"{}\" fill=\"{color}\" stroke=\"black\" stroke-width=\"0.5\"/>\n",
        pts.join(" ")
    )
}

/// Line chart of every agent's `h_min` over time with a zero reference.
fn write_chart(trace: &LoadedTrace, agents: usize, dir: &Path) -> Result<()> {
    let (w, h) = (800.0, 400.0);
    let margin = 45.0;
    let t_max = trace.rows.iter().map(|r| r.t).fold(0.0, f64::max).max(1e-9);
    let finite_h: Vec<f64> = trace
        .rows
        .iter()
        .map(|r| r.h_min)
        .filter(|v| v.is_finite())
        .collect();
    let h_lo = finite_h.iter().cloned().fold(0.0_f64, f64::min) - 0.5;
    let h_hi = finite_h.iter().cloned().fold(1.0_f64, f64::max) + 0.5;
    let sx = |t: f64| margin + t / t_max * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - h_lo) / (h_hi - h_lo) * (h - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    ));
    // Axes and the zero line.
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        h - margin,
        w - margin,
        h - margin
    ));
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        h - margin
    ));
    if h_lo < 0.0 && h_hi > 0.0 {
        svg.push_str(&format!(
            "<line x1=\"{margin}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"red\" stroke-dasharray=\"5,4\"/>\n",
            sy(0.0),
            w - margin
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">t (s)</text>\n<text x=\"6\" y=\"{margin}\" font-size=\"11\">h_min</text>\n",
        w - margin,
        h - margin + 28.0
    ));

    // One polyline per agent (rows are agent-major within each tick).
    let ticks = trace.rows.len() / agents;
    for slot in 0..agents {
        let color = PALETTE[slot % PALETTE.len()];
        let pts: Vec<String> = (0..ticks)
            .filter_map(|tick| {
                let r = &trace.rows[tick * agents + slot];
                r.h_min
                    .is_finite()
                    .then(|| format!("{:.2},{:.2}", sx(r.t), sy(r.h_min)))
            })
            .collect();
        if !pts.is_empty() {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            ));
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(dir.join("hmin_chart.svg"), svg)?;
    Ok(())
}
