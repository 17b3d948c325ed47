//! Command-line contract: exit codes and output files.

use std::path::{Path, PathBuf};
use std::process::Command;

const SMALL: &str = "\
[velocity]
n = 12
vmax = 6.0
[euler]
nx = 64
[prandtl]
nz = 100
dt = 2e-3
[knudsen]
nxi = 60
ximax = 12.0
[study]
epsilons = [0.04, 0.02, 0.01]
t_final = 0.01
cells = 60
wall_cells_per_eps = 2.0
stretch_max = 1.1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_halfspace"))
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("halfspace-cli-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn usage_and_config_errors_exit_2() {
    let d = scratch("usage");
    assert_eq!(code(&mut bin()), 2);
    assert_eq!(code(bin().args(["study"])), 2);
    assert_eq!(code(bin().args(["study", "--config", d.join("absent.toml").to_str().unwrap()])), 2);
    let ok = write(&d, "ok.toml", SMALL);
    assert_eq!(code(bin().args(["study", "--config", ok.to_str().unwrap(), "--bogus"])), 2);
    let bad = write(&d, "bad.toml", "[study]\nnot_a_key = 1\n");
    assert_eq!(code(bin().args(["expand", "--config", bad.to_str().unwrap()])), 2);
    let one = write(&d, "one.toml", &SMALL.replace("[0.04, 0.02, 0.01]", "[0.01]"));
    assert_eq!(code(bin().args(["study", "--config", one.to_str().unwrap(), "--out", d.to_str().unwrap()])), 2);
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn study_writes_reproducible_outputs() {
    let d = scratch("study");
    let cfg = write(&d, "small.toml", SMALL);
    let run = |out: &str| {
        let o = d.join(out);
        let st = bin()
            .args(["study", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
        o
    };
    let (a, b) = (run("a"), run("b"));
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["fits"].as_array().unwrap().len(), 4);
    let csv = std::fs::read_to_string(a.join("norms.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("eps,K,L2,Linf,runtime_s"));
    assert_eq!(lines.count(), 6);
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn expand_and_direct_write_checkpoints() {
    let d = scratch("expand");
    let cfg = write(&d, "small.toml", SMALL);
    let out = d.join("bundle");
    assert_eq!(code(bin().args(["expand", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(!manifest["config_hash"].as_str().unwrap().is_empty());
    let out = d.join("direct");
    assert_eq!(code(bin().args(["direct", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let (head, rows) = halfspace::checkpoint::read_field(&out.join("eps_0.01.bin")).unwrap();
    assert_eq!(head["eps"], 0.01);
    assert_eq!(rows.len(), 61);
    assert_eq!(rows[0].len(), 1728);
    std::fs::remove_dir_all(&d).ok();
}
