//! Command-line front end: run scenarios, inspect pairwise distances,
//! spot-check gradients against finite differences, and render traces.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use safeset::corpus::random_disjoint_pair;
use safeset::distance::{solve_distance, DistanceProblem, SolveOptions};
use safeset::lse::SmoothMaxParams;
use safeset::oracles::{finite_difference_gradient, OracleReport};
use safeset::sensitivity::distance_gradient;
use safeset::sim::{load_config, load_trace, load_trace_config, render_frames, run_simulation,
    write_trace, SimConfig, TickStatus};

#[derive(Parser)]
#[command(name = "safeset", version, about = "Safety filtering for moving convex sets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a closed-loop scenario and write trace.csv / pairs.csv /
    /// metadata.toml into the output directory.
    Simulate(SimulateArgs),
    /// Solve the smoothed distance between two configured agents at their
    /// start poses and print the full solution.
    Distance(DistanceArgs),
    /// Compare analytic distance gradients against central finite
    /// differences on randomly generated disjoint pairs.
    GradCheck(GradCheckArgs),
    /// Render per-tick SVG frames and the barrier chart from a trace
    /// directory.
    Render(RenderArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the configured timestep (seconds).
    #[arg(long)]
    dt: Option<f64>,
    /// Override the configured final time (seconds).
    #[arg(long)]
    tf: Option<f64>,
    /// Override the configured smoothing sharpness.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DistanceArgs {
    /// Scenario TOML file supplying shapes and start poses.
    #[arg(long)]
    config: PathBuf,
    /// The two agent ids to measure between.
    #[arg(long, num_args = 2, value_names = ["I", "J"])]
    pair: Vec<u32>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Number of random problem instances.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Args)]
struct RenderArgs {
    /// Directory previously written by `simulate`.
    #[arg(long)]
    trace: PathBuf,
    /// Render one frame every K ticks.
    #[arg(long, value_name = "K")]
    every: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Simulate(a) => simulate(&a),
        Cmd::Distance(a) => distance(&a),
        Cmd::GradCheck(a) => grad_check(&a),
        Cmd::Render(a) => render(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn simulate(args: &SimulateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(dt) = args.dt {
        cfg.dt = dt;
    }
    if let Some(tf) = args.tf {
        cfg.t_final = tf;
    }
    if let Some(eps) = args.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("configuration after flag overrides")?;

    let trace = run_simulation(&cfg).context("simulation")?;
    write_trace(&trace, &args.out)
        .with_context(|| format!("writing trace into {}", args.out.display()))?;

    // Status census over all agent-ticks.
    let mut census: BTreeMap<String, usize> = BTreeMap::new();
    let mut h_min = f64::INFINITY;
    for row in &trace.rows {
        *census.entry(row.status.to_string()).or_insert(0) += 1;
        h_min = h_min.min(row.h_min);
    }
    let ticks = cfg.tick_count();
    println!(
        "simulated {} agents for {} ticks (dt = {}, t_final = {})",
        cfg.agents.len(),
        ticks,
        cfg.dt,
        cfg.t_final
    );
    for (status, count) in &census {
        println!("  {status}: {count} agent-ticks");
    }
    println!("  minimum barrier value over the run: {h_min:.6}");
    for a in &cfg.agents {
        let last = trace
            .rows
            .iter()
            .rev()
            .find(|r| r.agent_id == a.id)
            .expect("agent has rows");
        let goal_err =
            ((last.xc1 - a.goal[0]).powi(2) + (last.xc2 - a.goal[1]).powi(2)).sqrt();
        println!("  agent {}: final goal error {goal_err:.4}", a.id);
    }
    println!(
        "  wall clock: {:.2} s total ({:.2} s distance, {:.2} s sensitivity, {:.2} s qp)",
        trace.timings.total_s,
        trace.timings.distance_s,
        trace.timings.sensitivity_s,
        trace.timings.qp_s
    );
    println!("wrote {}", args.out.join("trace.csv").display());

    let clean = trace.rows.iter().all(|r| r.status == TickStatus::Optimal);
    Ok(if clean {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn distance(args: &DistanceArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let [i, j] = args.pair[..] else {
        bail!("--pair expects exactly two agent ids");
    };
    let smoothing = SmoothMaxParams::new(cfg.epsilon).context("epsilon")?;
    let find = |id: u32| -> Result<_> {
        cfg.agents
            .iter()
            .find(|a| a.id == id)
            .with_context(|| format!("no agent with id {id} in the configuration"))
    };
    let (ae, aj) = (find(i)?, find(j)?);
    let body_e = ae.shape.build(smoothing).context("ego shape")?;
    let body_j = aj.shape.build(smoothing).context("obstacle shape")?;
    let pose = |s: [f64; 3]| safeset::ParamVector::rigid_pose(s[0], s[1], s[2]);
    let problem = DistanceProblem::new(
        &body_e,
        &body_j,
        pose(ae.start)?,
        pose(aj.start)?,
    )?;
    let sol = solve_distance(&problem, &SolveOptions::default())?;

    println!("pair: agent {i} vs agent {j} (start poses, epsilon = {})", cfg.epsilon);
    println!("status: {:?}", sol.status);
    println!("value (squared-length units): {:.12}", sol.value);
    println!("separation sqrt(2 d): {:.12}", (2.0 * sol.value).sqrt());
    println!("witness on agent {i}: ({:.9}, {:.9})", sol.z_e[0], sol.z_e[1]);
    println!("witness on agent {j}: ({:.9}, {:.9})", sol.z_j[0], sol.z_j[1]);
    println!("multipliers: ({:.6e}, {:.6e})", sol.mu[0], sol.mu[1]);
    println!("kkt residual: {:.3e}", sol.kkt_residual);
    println!(
        "constraint residuals: ({:.3e}, {:.3e})",
        sol.constraint_residuals[0], sol.constraint_residuals[1]
    );
    println!("newton steps: {}", sol.iterations);
    Ok(ExitCode::SUCCESS)
}

fn grad_check(args: &GradCheckArgs) -> Result<ExitCode> {
    let smoothing = SmoothMaxParams::new(100.0).expect("positive epsilon");
    let mut failures = 0usize;
    println!(
        "{:<22} {:>14} {:>14} {:>10}  {}",
        "component", "finite diff", "analytic", "rel err", "verdict"
    );
    for seed in 0..args.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_disjoint_pair(&mut rng, smoothing);
        let problem = DistanceProblem::new(
            &pair.ego,
            &pair.obstacle,
            pair.lambda_e.clone(),
            pair.lambda_j.clone(),
        )?;
        let sol = solve_distance(&problem, &SolveOptions::default())?;
        let grad = distance_gradient(&problem, &sol)
            .with_context(|| format!("sensitivity solve failed on seed {seed}"))?;

        // Finite differences over the stacked parameters (λ_E then λ_j).
        let theta0 = {
            let mut v = DVector::zeros(6);
            v.rows_mut(0, 3).copy_from(pair.lambda_e.values());
            v.rows_mut(3, 3).copy_from(pair.lambda_j.values());
            v
        };
        let mut value_at = |theta: &DVector<f64>| -> safeset::Result<f64> {
            let le = pair.lambda_e.with_values(theta.rows(0, 3).into_owned())?;
            let lj = pair.lambda_j.with_values(theta.rows(3, 3).into_owned())?;
            let p = DistanceProblem::new(&pair.ego, &pair.obstacle, le, lj)?;
            let opts = SolveOptions {
                init: Some((sol.z_e.clone(), sol.z_j.clone())),
                ..SolveOptions::default()
            };
            Ok(solve_distance(&p, &opts)?.value)
        };
        let fd = finite_difference_gradient(&mut value_at, &theta0, 1e-5)?;

        let mut analytic = DVector::zeros(6);
        analytic.rows_mut(0, 3).copy_from(&grad.d_dlambda_e);
        analytic.rows_mut(3, 3).copy_from(&grad.d_dlambda_j);
        let labels = ["xc1_E", "xc2_E", "th_E", "xc1_j", "xc2_j", "th_j"];
        for k in 0..6 {
            let report = OracleReport::compare(
                format!("seed {seed} d/{}", labels[k]),
                fd[k],
                analytic[k],
                1e-4,
                1e-7,
            );
            if !report.pass {
                failures += 1;
            }
            println!(
                "{:<22} {:>14.8} {:>14.8} {:>10.2e}  {}",
                report.name,
                report.reference,
                report.produced,
                report.rel_err,
                if report.pass { "pass" } else { "FAIL" }
            );
        }
    }
    println!(
        "{} instances x 6 components: {}",
        args.seeds,
        if failures == 0 {
            "all pass".to_string()
        } else {
            format!("{failures} FAILURES")
        }
    );
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn render(args: &RenderArgs) -> Result<ExitCode> {
    let cfg: SimConfig = load_trace_config(&args.trace)
        .with_context(|| format!("reading metadata from {}", args.trace.display()))?;
    let loaded = load_trace(&args.trace)
        .with_context(|| format!("reading trace from {}", args.trace.display()))?;
    let out = args.trace.join("frames");
    let frames = render_frames(&loaded, &cfg, args.every, &out)?;
    println!(
        "wrote {frames} frame(s) and hmin_chart.svg into {}",
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
