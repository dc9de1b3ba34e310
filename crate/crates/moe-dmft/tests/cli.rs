use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::process::Command;

use moe_dmft::dynamics::Trace;

const BIN: &str = env!("CARGO_BIN_EXE_moe-dmft");

const SMALL: &str = "
[model]
d = 2
n = 8
e = 2
n_e = 4
p = 3
steps = 6
dt = 0.05

[kernels.grid]
dense_until = 3
";

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> i32 {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("MOE_DMFT_SEED");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap().status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_steps_emit_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)], &[("MOE_DMFT_MODEL__STEPS", "0")]), 0);
    let text = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("step,time,loss"));
}

#[test]
fn verify_accepts_untouched_and_rejects_corrupted_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "4"], &[]), 0);
    let trace_path = out.join("trace.bin");
    assert_eq!(run(&["verify", s(&trace_path), "--out", s(&out)], &[]), 0);
    assert!(fs::read_to_string(out.join("residuals.csv")).unwrap().starts_with("identity,max_abs,max_rel,where"));

    let mut t = Trace::read_binary(fs::File::open(&trace_path).unwrap()).unwrap();
    t.records[3].params.as_mut().unwrap().w3[1] += 1e-6;
    let bad = dir.path().join("bad.bin");
    t.write_binary(BufWriter::new(fs::File::create(&bad).unwrap())).unwrap();
    assert_eq!(run(&["verify", s(&bad)], &[]), 1);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)], &[("MOE_DMFT_MODEL__COLOUR", "1")]), 2);
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)], &[("MOE_DMFT_MODEL__N", "0")]), 2);
    assert_eq!(run(&["train", "--config", s(&dir.path().join("missing.toml"))], &[]), 2);
    assert_eq!(run(&["dmft", "--config", s(&cfg), "--out", s(&out)], &[]), 2);
    assert_eq!(run(&["frobnicate"], &[]), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(o), "--threads", "2"], &[]), 0);
    }
    for f in ["trace.bin", "steps.jsonl", "loss.csv", "kernels.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let resolved = fs::read_to_string(a.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("[model]") && resolved.contains("seed = 0"));
}

#[test]
fn numeric_columns_carry_seventeen_digits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)], &[]), 0);
    let text = fs::read_to_string(out.join("kernels.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kernel,mu,nu,n,np,value"));
    for line in lines.take(50) {
        let v = line.rsplit(',').next().unwrap();
        let mantissa = v.split('e').next().unwrap();
        assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{line}");
    }
}

#[test]
fn sweep_writes_curves_fits_and_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "
[sweep]
scheme = \"moe-table\"
scales = [1.0, 2.0, 4.0]
seeds = 4
couple_sizes = true
probes = [{ kernel = \"H0\", mu = 0, nu = 0, n = 0, np = 0 }]
";
    let cfg = write_config(dir.path(), extra);
    let out = dir.path().join("o");
    assert_eq!(run(&["sweep", "--config", s(&cfg), "--out", s(&out)], &[]), 0);
    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 3 * 4 * 7);
    let fits = fs::read_to_string(out.join("fits.csv")).unwrap();
    assert!(fits.lines().nth(1).unwrap().starts_with("H0[0,0,0,0],"));
    assert_eq!(fs::read_to_string(out.join("collapse.csv")).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(out.join("regime.json")).unwrap().contains("ode"));
}

#[test]
fn dmft_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "
[init]
s0 = 1.0
s1 = 1.0
s2 = 1.0
s3 = 0.0
sr = 0.0
sb = 1.0

[lrs]
eta0 = 0.5
eta1 = 0.5
eta2 = 0.5
eta3 = 0.5
eta_r = 0.5
eta_b = 0.5

[dmft]
rates = { c0 = 0.5, c1 = 0.5, c2 = 0.5, c3 = 0.5, c_r = 0.5, c_b = 0.5 }
pops = { residual = 256, experts = 256, within = 16 }
max_iter = 30
";
    let cfg = write_config(dir.path(), extra);
    let (fin, mf, gaps) = (dir.path().join("f"), dir.path().join("m"), dir.path().join("g"));
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&fin)], &[]), 0);
    assert_eq!(run(&["dmft", "--config", s(&cfg), "--out", s(&mf)], &[]), 0);
    assert!(fs::read_to_string(mf.join("convergence.jsonl")).unwrap().lines().count() >= 2);
    let fk = fin.join("kernels.csv");
    let mk = mf.join("kernels.csv");
    let args = ["compare", "--finite", s(&fk), "--dmft", s(&mk), "--out", s(&gaps)];
    assert_eq!(run(&args, &[]), 0);
    let table = fs::read_to_string(gaps.join("gaps.csv")).unwrap();
    for row in ["loss,", "H0[diag],", "Gt,", "MPhi,"] {
        assert!(table.lines().any(|l| l.starts_with(row)), "{row}");
    }
    let strict = [&args[..], &["--tol", "0", "--check", "loss"]].concat();
    assert_eq!(run(&strict, &[]), 1);
}
