use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sos_ot::baselines::GaussianMeasure;
use sos_ot::io::write_points;
use tempfile::TempDir;

fn sos_ot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sos-ot"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn read_points(p: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn generate(dir: &Path, d: usize, n: usize, seed: u64) {
    let out = sos_ot(&[
        "generate",
        "--dim",
        &d.to_string(),
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn mean_sq_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sum();
    total / a.len() as f64
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&sos_ot(&["--help"])), 0);
    assert_eq!(code(&sos_ot(&[])), 1);
    assert_eq!(code(&sos_ot(&["frobnicate"])), 1);
    assert_eq!(code(&sos_ot(&["fit", "--mu", "a.csv"])), 1);
    assert_eq!(
        code(&sos_ot(&["generate", "--out", "x", "--kernel", "cubic"])),
        1
    );
}

#[test]
fn missing_input_and_bad_config_exit_1() {
    let dir = TempDir::new().unwrap();
    let missing = path(dir.path(), "nope.csv");
    let out = sos_ot(&[
        "fit",
        "--mu",
        &missing,
        "--nu",
        &missing,
        "--lambda1",
        "1e-2",
        "--lambda2",
        "1e-2",
        "--out",
        &path(dir.path(), "fit"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "d = 2\nbogus = 1\n").unwrap();
    let out = sos_ot(&["experiment", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    fs::write(&cfg, "sample_sizes = 50, 25\n").unwrap();
    assert_eq!(
        code(&sos_ot(&["experiment", "--config", cfg.to_str().unwrap()])),
        1
    );
}

#[test]
fn generate_is_deterministic_and_shaped() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    generate(a.path(), 2, 25, 9);
    generate(b.path(), 2, 25, 9);
    for f in ["mu.csv", "nu.csv", "mu_params.csv", "nu_params.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    for f in ["mu.csv", "nu.csv"] {
        let pts = read_points(&a.path().join(f));
        assert_eq!(pts.len(), 25);
        assert!(pts.iter().all(|p| p.len() == 2));
    }
    let params = read_points(&a.path().join("mu_params.csv"));
    assert_eq!(params.len(), 3);

    let c = TempDir::new().unwrap();
    generate(c.path(), 2, 25, 10);
    assert_ne!(
        fs::read(a.path().join("mu.csv")).unwrap(),
        fs::read(c.path().join("mu.csv")).unwrap()
    );
}

#[test]
fn generated_sample_mean_within_three_standard_errors() {
    const N: usize = 100_000;
    let dir = TempDir::new().unwrap();
    generate(dir.path(), 3, N, 4);
    let params = read_points(&dir.path().join("mu_params.csv"));
    let pts = read_points(&dir.path().join("mu.csv"));
    for i in 0..3 {
        let mean = pts.iter().map(|p| p[i]).sum::<f64>() / N as f64;
        let se = (params[1 + i][i] / N as f64).sqrt();
        assert!((mean - params[0][i]).abs() <= 3.0 * se, "coordinate {i}");
    }
}

#[test]
fn fit_writes_artifacts_and_map_reproduces_them() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), 2, 20, 1);
    let fit_dir = path(dir.path(), "fit");
    let out = sos_ot(&[
        "fit",
        "--mu",
        &path(dir.path(), "mu.csv"),
        "--nu",
        &path(dir.path(), "nu.csv"),
        "--lambda1",
        "1e-2",
        "--lambda2",
        "1e-2",
        "--exact",
        "--out",
        &fit_dir,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fit = Path::new(&fit_dir);
    for f in [
        "model.json",
        "diagnostics.json",
        "estimates.json",
        "mapped_mu.csv",
        "mapped_nu.csv",
    ] {
        assert!(fit.join(f).exists(), "{f}");
    }
    let diag = read_json(&fit.join("diagnostics.json"));
    assert_eq!(diag["converged"], true);
    let est = read_json(&fit.join("estimates.json"));
    assert!(est["ot_value"].as_f64().unwrap().is_finite());
    assert_eq!(est["w2_convention"], "half");

    let mapped = path(dir.path(), "mapped.csv");
    let out = sos_ot(&[
        "map",
        "--model",
        &path(fit, "model.json"),
        "--input",
        &path(dir.path(), "mu.csv"),
        "--out",
        &mapped,
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(&mapped).unwrap(),
        fs::read(fit.join("mapped_mu.csv")).unwrap()
    );
    let out = sos_ot(&[
        "map",
        "--model",
        &path(fit, "model.json"),
        "--input",
        &path(dir.path(), "nu.csv"),
        "--direction",
        "backward",
        "--out",
        &mapped,
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(&mapped).unwrap(),
        fs::read(fit.join("mapped_nu.csv")).unwrap()
    );
}

#[test]
fn iteration_cap_exits_2_with_diagnostics() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), 2, 15, 2);
    let fit_dir = path(dir.path(), "fit");
    let out = sos_ot(&[
        "fit",
        "--mu",
        &path(dir.path(), "mu.csv"),
        "--nu",
        &path(dir.path(), "nu.csv"),
        "--lambda1",
        "1e-6",
        "--lambda2",
        "1e-6",
        "--max-iter",
        "3",
        "--out",
        &fit_dir,
    ]);
    assert_eq!(code(&out), 2);
    let diag = read_json(&Path::new(&fit_dir).join("diagnostics.json"));
    assert_eq!(diag["converged"], false);
    assert_eq!(diag["iterations"], 3);
}

/// Same samples as the identity-transport acceptance instance, fitted at the
/// cell its grid search selects.
#[test]
fn identical_measures_give_near_identity_maps() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = GaussianMeasure::random_wishart(&mut rng, 2).unwrap();
    let mu = dir.path().join("mu.csv");
    write_points(&mu, &g.sample(&mut rng, 100)).unwrap();
    let mu = mu.to_str().unwrap();
    let fit_dir = path(dir.path(), "fit");
    let out = sos_ot(&[
        "fit",
        "--mu",
        mu,
        "--nu",
        mu,
        "--lambda1",
        "1e-5",
        "--lambda2",
        "1e-6",
        "--max-iter",
        "2000",
        "--out",
        &fit_dir,
    ]);
    assert!(
        matches!(code(&out), 0 | 2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let x = read_points(Path::new(mu));
    let fwd = read_points(&Path::new(&fit_dir).join("mapped_mu.csv"));
    let bwd = read_points(&Path::new(&fit_dir).join("mapped_nu.csv"));
    let mse = mean_sq_dist(&fwd, &x) + mean_sq_dist(&bwd, &x);
    let avg_sq_norm = x
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / x.len() as f64;
    assert!(
        mse <= 0.05 * avg_sq_norm,
        "mse {mse} vs {}",
        0.05 * avg_sq_norm
    );
}

#[test]
fn full_rank_nystrom_matches_exact_features() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), 2, 30, 5);
    let (mu, nu) = (path(dir.path(), "mu.csv"), path(dir.path(), "nu.csv"));
    let ot = |extra: &[&str], name: &str| -> f64 {
        let out_dir = path(dir.path(), name);
        let mut args = vec![
            "fit",
            "--mu",
            &mu,
            "--nu",
            &nu,
            "--lambda1",
            "1e-2",
            "--lambda2",
            "1e-2",
            "--tol",
            "1e-11",
            "--out",
            &out_dir,
        ];
        args.extend_from_slice(extra);
        let out = sos_ot(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        read_json(&Path::new(&out_dir).join("estimates.json"))["ot_value"]
            .as_f64()
            .unwrap()
    };
    let exact = ot(&["--exact"], "exact");
    let nys = ot(&["--rank", "30"], "nys");
    assert!(
        (exact - nys).abs() <= 1e-6 * exact.abs(),
        "{exact} vs {nys}"
    );
}

#[test]
fn gridsearch_writes_table_and_best_model() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), 2, 20, 3);
    let gs = path(dir.path(), "gs");
    let out = sos_ot(&[
        "gridsearch",
        "--mu",
        &path(dir.path(), "mu.csv"),
        "--nu",
        &path(dir.path(), "nu.csv"),
        "--lambda1",
        "1e-3,1e-2",
        "--lambda2",
        "1e-3,1e-2",
        "--max-iter",
        "3000",
        "--out",
        &gs,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(Path::new(&gs).join("gridsearch.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "lambda1,lambda2,mmd_criterion,ot_value,w2_value,iterations,converged"
    );
    assert_eq!(lines.count(), 4);
    for f in [
        "model.json",
        "estimates.json",
        "mapped_mu.csv",
        "mapped_nu.csv",
    ] {
        assert!(Path::new(&gs).join(f).exists(), "{f}");
    }
}

#[test]
fn experiment_writes_stable_csvs() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        "# tiny sweep\nd = 2\nsample_sizes = 10, 15\nnum_repeats = 2\nlambda1_values = 1e-3, 1e-2\n\
         lambda2_values = 1e-2\nmax_iter = 2000\nseed = 7\n",
    )
    .unwrap();
    let run = |name: &str| -> (String, String) {
        let out = path(dir.path(), name);
        let res = sos_ot(&[
            "experiment",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            &out,
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        let agg = out.replace(".csv", "_aggregate.csv");
        (
            fs::read_to_string(&out).unwrap(),
            fs::read_to_string(agg).unwrap(),
        )
    };
    let (results, agg) = run("a.csv");
    let mut lines = results.lines();
    assert_eq!(
        lines.next().unwrap(),
        "d,n,repeat_index,lambda1,lambda2,ot_error,w2_error,plugin_error,map_mse,mmd_criterion,\
         solver_iterations,wall_time_ms"
    );
    assert_eq!(lines.count(), 4);
    assert_eq!(agg.lines().count(), 3);
    assert!(agg.starts_with("d,n,count,"));
    assert_eq!(run("b.csv"), (results, agg));
}
