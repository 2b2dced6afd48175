use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn maxar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maxar"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate_small(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let o = maxar(
        dir,
        &[
            "simulate", "--output", name, "--m1", "6", "--m2", "6", "--mesh", "1", "--t-len", "60", "--tau1", "1",
            "--a", "0.7", "--kappa", "2", "--lookback-tol", "0.01", "--seed", seed,
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join(name)
}

/// Rewrites a Fréchet field to log scale so it can be fed as raw data.
fn to_log_scale(src: &Path, dst: &Path) {
    let text = std::fs::read_to_string(src).unwrap();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
        } else {
            let (head, v) = line.rsplit_once(',').unwrap();
            out.push_str(&format!("{head},{:e}", v.parse::<f64>().unwrap().ln()));
        }
        out.push('\n');
    }
    std::fs::write(dst, out).unwrap();
}

#[test]
fn simulate_is_reproducible_and_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let o = maxar(
        dir.path(),
        &["simulate", "--output", "a.csv", "--m1", "10", "--m2", "10", "--t-len", "50", "--seed", "5", "--lookback-tol", "0.01"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    let o = maxar(
        dir.path(),
        &["simulate", "--output", "b.csv", "--m1", "10", "--m2", "10", "--t-len", "50", "--seed", "5", "--lookback-tol", "0.01"],
    );
    assert_eq!(code(&o), 0);
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    let meta = std::fs::read_to_string(dir.path().join("a.csv.meta")).unwrap();
    assert!(meta.contains("subcommand=simulate"));
    assert!(meta.contains("seed=5"));
    assert!(meta.contains("kappa=2"));

    // rerun from the sidecar alone
    let o = maxar(dir.path(), &["--config", "a.csv.meta", "simulate", "--output", "c.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(a, std::fs::read(dir.path().join("c.csv")).unwrap());
}

#[test]
fn misaligned_advection_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = maxar(dir.path(), &["simulate", "--output", "x.csv", "--mesh", "0.5", "--tau1", "0.3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("not a multiple of the grid mesh"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&maxar(dir.path(), &["simulate", "--bogus", "1"])), 2);
    std::fs::write(dir.path().join("c.txt"), "nonsense_key=3\n").unwrap();
    let o = maxar(dir.path(), &["--config", "c.txt", "simulate", "--output", "x.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown key"));
    std::fs::write(dir.path().join("d.txt"), "subcommand=fit\n").unwrap();
    assert_eq!(code(&maxar(dir.path(), &["--config", "d.txt", "simulate", "--output", "x.csv"])), 2);
}

#[test]
fn missing_input_is_a_data_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = maxar(dir.path(), &["fit", "--input", "nope.csv", "--output", "f"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("nope.csv"));
}

#[test]
fn raw_values_declared_frechet_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_small(dir.path(), "sim.csv", "2");
    to_log_scale(&sim, &dir.path().join("raw.csv"));
    let o = maxar(dir.path(), &["fit", "--input", "raw.csv", "--scale", "frechet", "--output", "f"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("out of support"));
    let o = maxar(dir.path(), &["forecast", "--input", "raw.csv", "--fit", "f.fit", "--output", "x.csv"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pipeline_fit_forecast_diagnose_score() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = simulate_small(d, "sim.csv", "7");
    to_log_scale(&sim, &d.join("raw.csv"));

    let o = maxar(d, &["fit", "--input", "raw.csv", "--output", "run", "--r", "1", "--r-spatial", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["run.fit", "run.gev.csv", "run.eps.csv", "run.fit.meta"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let eps = std::fs::read_to_string(d.join("run.eps.csv")).unwrap();
    assert_eq!(eps.lines().count(), 4);
    let fit = std::fs::read_to_string(d.join("run.fit")).unwrap();
    assert!(fit.contains("kappa=") && fit.contains("tau1="));

    let o = maxar(d, &["fit", "--input", "raw.csv", "--output", "small", "--bootstrap", "10", "--skip-eps-report"]);
    assert_eq!(code(&o), 2, "B < 50 must be refused");

    let o = maxar(
        d,
        &[
            "forecast", "--input", "raw.csv", "--marginals", "run.gev.csv", "--fit", "run.fit", "--output", "fc.csv",
            "--lead", "1,2", "--ensemble-size", "5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fc = std::fs::read_to_string(d.join("fc.csv")).unwrap();
    let mut lines = fc.lines();
    assert_eq!(lines.next().unwrap(), "i1,i2,t0,u,member,value_frechet,value_raw,conditioned");
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().any(|r| r.split(',').nth(3) == Some("2")));
    assert!(rows.iter().filter(|r| !r.ends_with("missing")).all(|r| r.split(',').nth(6).is_some_and(|v| !v.is_empty())));

    let o = maxar(d, &["diagnose", "--input", "sim.csv", "--scale", "frechet", "--output", "diag", "--lags", "1:0:1,0:1:1", "--fit", "run.fit"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let atoms = std::fs::read_to_string(d.join("diag.atoms.csv")).unwrap();
    let first = atoms.lines().nth(1).unwrap();
    assert!(first.starts_with("1,0,1,7.0000000000e-1"), "{first}");
    assert!(atoms.lines().nth(2).unwrap().ends_with(",,"));
    for f in ["diag.ratio.csv", "diag.madogram.csv", "diag.crosscorr.csv"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    let score_args = [
        "score", "--input", "raw.csv", "--marginals", "run.gev.csv", "--fit", "run.fit", "--output", "sc.csv", "--lead",
        "1,2", "--events", "50", "--ensemble-size", "20", "--seed", "3",
    ];
    let o = maxar(d, &score_args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sc = std::fs::read_to_string(d.join("sc.csv")).unwrap();
    assert!(sc.starts_with("lead,mean_crps,rmse,n_events,n_excluded\n"));
    assert_eq!(sc.lines().count(), 3);

    // same seed, more threads: identical table; the sidecar reproduces it too
    let mut threaded = vec!["--threads", "3"];
    threaded.extend(score_args.iter().map(|s| if *s == "sc.csv" { "sc2.csv" } else { s }));
    assert_eq!(code(&maxar(d, &threaded)), 0);
    assert_eq!(sc, std::fs::read_to_string(d.join("sc2.csv")).unwrap());
    let o = maxar(d, &["--config", "sc.csv.meta", "score", "--output", "sc3.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(sc, std::fs::read_to_string(d.join("sc3.csv")).unwrap());

    // the RMSE column agrees with the per-event file
    let events = std::fs::read_to_string(d.join("sc.csv.events.csv")).unwrap();
    let mut sq = 0.0;
    let mut n = 0;
    for line in events.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        if f[2] == 1.0 {
            sq += (f[4] - f[3]).powi(2);
            n += 1;
        }
    }
    let row1: Vec<&str> = sc.lines().nth(1).unwrap().split(',').collect();
    let rmse: f64 = row1[2].parse().unwrap();
    assert_eq!(row1[3].parse::<usize>().unwrap(), n);
    assert!(((sq / n as f64).sqrt() - rmse).abs() < 1e-9 * rmse.max(1.0));
}
