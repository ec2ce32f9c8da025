//! End-to-end checks of the command-line binary: scenario runs, the
//! distance and gradient subcommands, rendering, and error handling.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safeset"))
}

fn scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/cross_swap.toml")
}

#[test]
fn simulate_runs_clean_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&d1, &d2] {
        let out = bin()
            .args(["simulate", "--config"])
            .arg(scenario())
            .arg("--out")
            .arg(d)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "simulate failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("Optimal: 5004 agent-ticks"), "{stdout}");
    }
    let trace = std::fs::read_to_string(d1.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,agent_id,xc1,xc2,theta,v,omega,u1,u2,h_min,qp_status"
    );
    assert_eq!(lines.count(), 5004, "4 agents x 1251 ticks");
    assert!(d1.join("pairs.csv").exists());
    assert!(d1.join("metadata.toml").exists());
    assert_eq!(
        std::fs::read(d1.join("trace.csv")).unwrap(),
        std::fs::read(d2.join("trace.csv")).unwrap(),
        "trace bytes differ between reruns"
    );
}

#[test]
fn distance_subcommand_reports_certified_pair() {
    let out = bin()
        .args(["distance", "--config"])
        .arg(scenario())
        .args(["--pair", "1", "3"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "distance failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("status: Optimal"), "{stdout}");
    assert!(stdout.contains("kkt residual"), "{stdout}");
}

#[test]
fn grad_check_subcommand_passes() {
    let out = bin()
        .args(["grad-check", "--seeds", "3"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "grad-check failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all pass"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn render_writes_frames_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let trace_dir = dir.path().join("run");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(scenario())
        .arg("--out")
        .arg(&trace_dir)
        .args(["--tf", "1.0"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "simulate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = bin()
        .arg("render")
        .arg("--trace")
        .arg(&trace_dir)
        .args(["--every", "25"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "render failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let frames = trace_dir.join("frames");
    assert!(frames.join("hmin_chart.svg").exists());
    assert!(frames.join("frame_000000.svg").exists());
    assert!(frames.join("frame_000050.svg").exists());
}

#[test]
fn missing_config_fails_with_context() {
    let out = bin()
        .args(["simulate", "--config", "/nonexistent/nope.toml", "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "{stderr}");
    assert!(stderr.contains("nope.toml"), "{stderr}");
}
