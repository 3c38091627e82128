use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn l96calib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l96calib"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn smoke(command: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command, "--profile", "smoke", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    l96calib(&args)
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn header(path: PathBuf) -> String {
    fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

fn fields(path: PathBuf) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

fn rows(path: PathBuf) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

const QUICK_EKI: &[&str] = &["--eki.max_iter", "2", "--noise.levels", "[0.5]", "--eki.sizes", "[4]"];
const QUICK_MCMC: &[&str] = &["--mcmc.n_iter", "30", "--mcmc.burn_in", "10", "--mcmc.warm_start", "prior"];

#[test]
fn output_headers() {
    let tmp = TempDir::new().unwrap();
    let d = |name: &str| tmp.path().join(name);

    assert_ok(&smoke("simulate", &d("sim"), &[]));
    let traj = fields(d("sim").join("trajectory.csv"));
    assert_eq!(traj.len(), 1 + 8 + 32);
    assert_eq!(traj[..3], ["time", "X[1]", "X[2]"]);
    assert_eq!(traj[9..11], ["Y[1,1]", "Y[2,1]"]);
    assert_eq!(traj[40], "Y[4,8]");
    let moments = header(d("sim").join("moments.csv"));
    assert!(moments.starts_with("time,X[1],"), "{moments}");
    assert!(moments.contains(",Ybar[1],") && moments.contains(",XYbar[8],"), "{moments}");
    assert!(moments.ends_with(",Y2bar[8],r_slow,r_fast"), "{moments}");

    assert_ok(&smoke("scan", &d("scan"), &["--scan.points", "2"]));
    assert_eq!(header(d("scan").join("scan_F.csv")), "value,r,U");

    assert_ok(&smoke("eki", &d("eki"), QUICK_EKI));
    let summary = "r,M,iter,theta_mean_F,theta_mean_h,theta_mean_c,theta_mean_b,\
                   theta_std_F,theta_std_h,theta_std_c,theta_std_b,error_norm,collapsed";
    assert_eq!(header(d("eki").join("eki_summary.csv")), summary);
    assert_eq!(header(d("eki").join("eki_members.csv")), "r,M,iter,member,F,h,c,b,diverged");
    assert_eq!(
        header(d("eki").join("eki_iqr.csv")),
        "r,M,iter,q25_F,q25_h,q25_c,q25_b,q75_F,q75_h,q75_c,q75_b"
    );

    assert_ok(&smoke("mcmc", &d("mcmc"), QUICK_MCMC));
    assert_eq!(header(d("mcmc").join("chain.csv")), "iter,F,h,c,b,U,accepted");
    assert_eq!(header(d("mcmc").join("samples.csv")), "iter,F,h,c,b,U,accepted");
    for p in ["F", "h", "c", "b"] {
        assert_eq!(header(d("mcmc").join(format!("hist_{p}.csv"))), "bin_lo,bin_hi,mass");
    }

    assert_ok(&smoke("fast", &d("fast"), QUICK_MCMC));
    assert_eq!(header(d("fast").join("chain.csv")), "iter,F,h,c,b,U,accepted");
    assert!(!d("fast").join("hist_F.csv").exists());

    let mut args = vec!["--validate.identity_duration", "200", "--validate.identity_tol", "1"];
    args.extend(["--validate.mcmc_steps", "2000"]);
    let o = smoke("validate", &d("val"), &args);
    assert_eq!(header(d("val").join("validate.csv")), "check,measured,threshold,passed");
    assert!(matches!(o.status.code(), Some(0) | Some(2)));

    for sub in ["sim", "scan", "eki", "mcmc", "fast", "val"] {
        assert!(d(sub).join("manifest.json").exists(), "{sub} has no manifest");
    }
}

#[test]
fn zero_duration_writes_headers_only() {
    let tmp = TempDir::new().unwrap();
    assert_ok(&smoke("simulate", tmp.path(), &["--simulate.duration", "0"]));
    assert!(rows(tmp.path().join("trajectory.csv")).is_empty());
    assert!(rows(tmp.path().join("moments.csv")).is_empty());
}

#[test]
fn fixed_seed_runs_are_byte_identical_and_rerunnable() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c, other) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"), tmp.path().join("o"));
    assert_ok(&smoke("mcmc", &a, &[&["--seed", "7"], QUICK_MCMC].concat()));
    assert_ok(&smoke("mcmc", &b, &[&["--seed", "7"], QUICK_MCMC].concat()));
    assert_ok(&l96calib(&[
        "rerun",
        "--manifest",
        a.join("manifest.json").to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]));
    assert_ok(&smoke("mcmc", &other, &[&["--seed", "8"], QUICK_MCMC].concat()));
    let first = csv_bytes(&a);
    assert!(first.contains_key("chain.csv"));
    assert_eq!(first, csv_bytes(&b));
    assert_eq!(first, csv_bytes(&c));
    assert_ne!(first["chain.csv"], csv_bytes(&other)["chain.csv"]);
}

#[test]
fn configuration_errors_exit_with_code_4() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(smoke("simulate", &out, &["--system.bogus", "1"]).status.code(), Some(4));
    assert_eq!(smoke("simulate", &out, &["--system.K", "2"]).status.code(), Some(4));
    assert_eq!(smoke("simulate", &out, &["--integrator.dt", "0.01"]).status.code(), Some(4));
    assert_eq!(smoke("simulate", &out, &["--mcmc.burn_in", "5000"]).status.code(), Some(4));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[system]\nK = 8\nwidth = 3\n").unwrap();
    assert_eq!(smoke("simulate", &out, &["--config", bad.to_str().unwrap()]).status.code(), Some(4));
    assert_eq!(l96calib(&["simulate", "--profile", "tiny"]).status.code(), Some(4));
}

#[test]
fn config_file_values_are_used() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("run.toml");
    fs::write(&file, "profile = \"smoke\"\nseed = 3\n\n[simulate]\nduration = 2.0\nsample_interval = 0.5\n").unwrap();
    let out = tmp.path().join("o");
    let o = l96calib(&["simulate", "--config", file.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_ok(&o);
    assert_eq!(rows(out.join("trajectory.csv")).len(), 4);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"master_seed\": 3"), "{manifest}");
}

#[test]
fn blow_up_exits_with_code_3() {
    let tmp = TempDir::new().unwrap();
    let o = smoke("simulate", tmp.path(), &["--truth.c", "1e5"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupted_coupling_fails_validation() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["--validate.coupling_sign", "-1", "--validate.identity_duration", "200"];
    args.extend(["--validate.identity_tol", "1", "--validate.mcmc_steps", "2000"]);
    let o = smoke("validate", tmp.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    let report = fs::read_to_string(tmp.path().join("validate.txt")).unwrap();
    let line = report.lines().find(|l| l.contains("energy_drift")).unwrap();
    assert!(line.starts_with("FAIL"), "{report}");
    assert!(tmp.path().join("manifest.json").exists());
}

#[test]
fn minimal_chain_keeps_one_sample() {
    let tmp = TempDir::new().unwrap();
    let args = ["--mcmc.n_iter", "22", "--mcmc.burn_in", "20", "--mcmc.thin", "2", "--mcmc.warm_start", "prior"];
    assert_ok(&smoke("mcmc", tmp.path(), &args));
    assert_eq!(rows(tmp.path().join("chain.csv")).len(), 22);
    let kept = rows(tmp.path().join("samples.csv"));
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0][0], "20");
}

#[test]
fn two_member_ensemble_is_well_formed() {
    let tmp = TempDir::new().unwrap();
    let args = ["--eki.sizes", "[2]", "--eki.max_iter", "3", "--noise.levels", "[0.5]"];
    assert_ok(&smoke("eki", tmp.path(), &args));
    let summary = rows(tmp.path().join("eki_summary.csv"));
    assert_eq!(summary.len(), 4);
    assert!(summary.iter().all(|r| r.len() == 13));
    assert_eq!(rows(tmp.path().join("eki_members.csv")).len(), 8);
}

#[test]
fn single_point_scan_has_one_row() {
    let tmp = TempDir::new().unwrap();
    let args = ["--scan.points", "1", "--noise.levels", "[0.5]"];
    assert_ok(&smoke("scan", tmp.path(), &args));
    assert_eq!(rows(tmp.path().join("scan_F.csv")).len(), 1);
}

fn scan_minimizers(dir: &Path, param: &str) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for row in rows(dir.join(format!("scan_{param}.csv"))) {
        let (v, u): (f64, f64) = (row[0].parse().unwrap(), row[2].parse().unwrap());
        let e = best.entry(row[1].clone()).or_insert((v, u));
        if u < e.1 {
            *e = (v, u);
        }
    }
    best.into_iter().map(|(r, (v, _))| (r, v)).collect()
}

#[test]
fn scans_locate_the_truth_and_follow_the_prior() {
    let tmp = TempDir::new().unwrap();
    let long = ["--control.duration", "3000", "--windows.scan", "1000"];
    let f_dir = tmp.path().join("f");
    let args = [&long[..], &["--scan.points", "9", "--noise.levels", "[0.5]"]].concat();
    assert_ok(&smoke("scan", &f_dir, &args));
    let f_best = scan_minimizers(&f_dir, "F")["0.5"];
    assert!((f_best - 10.0).abs() <= 0.5, "minimizer at F = {f_best}");

    let h_dir = tmp.path().join("h");
    let args = [
        &long[..],
        &["--scan.param", "h", "--scan.lo", "-0.5", "--scan.hi", "2", "--scan.points", "11"],
        &["--noise.levels", "[0.1, 1.0]"],
    ]
    .concat();
    assert_ok(&smoke("scan", &h_dir, &args));
    let h_best = scan_minimizers(&h_dir, "h");
    assert!(h_best["1"].abs() <= h_best["0.1"].abs(), "{h_best:?}");
}
