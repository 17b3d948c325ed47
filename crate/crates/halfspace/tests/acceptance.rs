//! Acceptance run at the default configuration: one PASS/FAIL line per
//! criterion. Failures are reported, not asserted; the summary line gives
//! the count.

use std::time::Instant;

use halfspace::checks::{check_bundle, run_with, CheckResult};
use halfspace::config::Config;
use halfspace::harness::{convergence_study, study_with_bundle, write_study, ConvergenceReport};

fn line(n: usize, pass: bool, what: &str, detail: &str) -> bool {
    println!("[{}] {n:>2}. {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn find<'a>(checks: &'a [CheckResult], name: &str) -> &'a CheckResult {
    checks.iter().find(|c| c.name == name).expect("suite present")
}

fn report_bytes(report: &ConvergenceReport, rows: &[halfspace::harness::NormRow], tag: &str) -> Vec<u8> {
    let dir = std::env::temp_dir().join(format!("halfspace-acceptance-{}-{tag}", std::process::id()));
    write_study(&dir, report, rows).expect("write study");
    let bytes = std::fs::read(dir.join("report.json")).expect("read report");
    std::fs::remove_dir_all(&dir).ok();
    bytes
}

fn main() {
    let cfg = Config::default();
    let g = cfg.grid().expect("grid");
    let mut passed = Vec::new();

    let start = Instant::now();
    let bundle = check_bundle(&cfg, &g);
    let build_s = start.elapsed().as_secs_f64();
    let checks = run_with(&cfg, &g, bundle.as_ref().ok());

    let c = |name: &str| find(&checks, name);
    passed.push(line(1, c("collision conservation").pass, "conservation", &c("collision conservation").detail));
    passed.push(line(2, c("null space and spectral gap").pass, "null space and gap", &c("null space and spectral gap").detail));

    let study_start = Instant::now();
    let study = bundle
        .as_ref()
        .map_err(|e| e.clone())
        .and_then(|b| study_with_bundle(&cfg, &g, b, &mut |m| eprintln!("  {m}")));
    let study_s = build_s + study_start.elapsed().as_secs_f64();

    // slip formula and its fingerprint in the direct solution
    let slip = c("order-1 slip formula");
    let (fp_pass, fp_detail) = match (&study, &bundle) {
        (Ok((r, _)), Ok(b)) => {
            let traj = b.euler().expect("euler");
            let p = traj.states[traj.index_of(cfg.study.t_final)].params(0);
            let coeff = p.t.sqrt() * (p.rho * p.t.sqrt() + 1.0);
            let parts: Vec<(f64, f64)> = r
                .runs
                .iter()
                .filter(|d| d.eps <= 0.01 + 1e-12)
                .map(|d| (d.eps, d.wall_u3_scaled))
                .collect();
            let ok = !parts.is_empty() && parts.iter().all(|(_, u)| ((u - coeff) / coeff).abs() <= 0.2);
            let txt: Vec<String> = parts.iter().map(|(e, u)| format!("eps {e}: {u:.3}")).collect();
            (ok, format!("u3/sqrt(eps) at the wall {} vs coefficient {coeff:.4}", txt.join(", ")))
        }
        (Err(e), _) | (_, Err(e)) => (false, format!("study failed: {e}")),
    };
    passed.push(line(3, slip.pass && fp_pass, "slip formula", &format!("{}; {fp_detail}", slip.detail)));

    passed.push(line(4, c("Robin machinery").pass, "Robin machinery", &c("Robin machinery").detail));
    passed.push(line(5, c("structural zeros").pass, "order-1 structural zeros", &c("structural zeros").detail));
    passed.push(line(6, c("kinetic layer solvability").pass, "kinetic layer solvability", &c("kinetic layer solvability").detail));
    passed.push(line(7, c("kinetic layer decay").pass, "kinetic layer decay", &c("kinetic layer decay").detail));
    passed.push(line(8, c("manufactured orders").pass, "manufactured orders", &c("manufactured orders").detail));

    match &study {
        Ok((r, _)) => {
            let verdict = |k: usize, target: f64, tol: f64| -> (bool, String) {
                match r.fit(k, "L2") {
                    Some(f) if f.stderr < 0.1 => (
                        (f.slope - target).abs() <= tol,
                        format!("K={k} slope {:.3} +- {:.3} (target {target} +- {tol})", f.slope, f.stderr),
                    ),
                    Some(f) => (false, format!("K={k} slope stderr {:.3} too large for a verdict", f.stderr)),
                    None => (false, format!("K={k} not in the study")),
                }
            };
            let (p0, d0) = verdict(0, 0.5, 0.15);
            let (p1, d1) = verdict(1, 1.0, 0.2);
            let fast = study_s <= 1800.0;
            passed.push(line(9, p0 && p1 && fast, "hydrodynamic-limit rate", &format!("{d0}; {d1}; {study_s:.0} s")));
        }
        Err(e) => passed.push(line(9, false, "hydrodynamic-limit rate", &format!("study failed: {e}"))),
    }

    // an independent rerun from scratch must reproduce report.json byte for byte
    let rerun = convergence_study(&cfg, &mut |_| {});
    match (&study, &rerun) {
        (Ok((a, ra)), Ok((b, rb))) => {
            let (x, y) = (report_bytes(a, ra, "a"), report_bytes(b, rb, "b"));
            passed.push(line(10, x == y, "determinism", &format!("report.json {} bytes, identical: {}", x.len(), x == y)));
        }
        (_, Err(e)) | (Err(e), _) => passed.push(line(10, false, "determinism", &format!("study failed: {e}"))),
    }

    let n = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n}/{} criteria pass", passed.len());
}
