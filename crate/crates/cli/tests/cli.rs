use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_agropanel");

fn agro(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("AGROPANEL_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = agro(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn simulate(dir: &Path, seed: &str) {
    std::fs::write(
        dir.join("dgp.json"),
        r#"{"n_units": 20, "n_years": 6, "n_stations": 10, "step_minutes": 60}"#,
    )
    .unwrap();
    ok(dir, &["simulate", "--config", "dgp.json", "--seed", seed, "--out-dir", "data"]);
}

fn sorted_lines(p: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines.sort();
    lines
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("manifest.json") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const MODEL: &[&str] = &[
    "--panel", "data/panel.csv", "--bins", "bins.csv", "--basis", "ncs", "--df", "5", "--fe", "unit,year",
    "--controls", "ppt,ppt^2",
];

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let help = agro(d, &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
    for sub in [
        "interpolate", "zonal", "project", "bins", "degdays", "regress", "impact", "permtest", "moran", "sem",
        "speccurve", "simulate",
    ] {
        assert_eq!(code(&agro(d, &[sub, "--help"])), 0, "{sub}");
    }
    assert_eq!(code(&agro(d, &["plot"])), 2);
    assert_eq!(code(&agro(d, &["bins", "--nope"])), 2);
    assert_eq!(code(&agro(d, &[])), 2);
    // randomized commands insist on a seed
    let no_seed = agro(d, &["permtest", "--panel", "p.csv", "--out", "x.json"]);
    assert_eq!(code(&no_seed), 2);
    assert!(String::from_utf8_lossy(&no_seed.stderr).contains("--seed"));
}

#[test]
fn io_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = agro(d, &["degdays", "--bins", "nothing.csv", "--from", "8", "--to", "30", "--out", "dd.csv"]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nothing.csv"));

    simulate(d, "3");
    let bad_date = agro(
        d,
        &["interpolate", "--stations", "data/stations.csv", "--grid", "data/grid.asc", "--date", "2000-02-30",
          "--var", "tmax", "--out", "g.asc"],
    );
    assert_eq!(code(&bad_date), 2);
    assert!(String::from_utf8_lossy(&bad_date.stderr).contains("2000-02-30"));
    let bad_season = agro(
        d,
        &["bins", "--tmax", "data/A_tmax.csv", "--tmin", "data/A_tmin.csv", "--season", "04-13", "--out", "b.csv"],
    );
    assert_eq!(code(&bad_season), 2);
    // the simulated series only cover April to September
    let short = agro(
        d,
        &["bins", "--tmax", "data/A_tmax.csv", "--tmin", "data/A_tmin.csv", "--season", "03-08", "--out", "b.csv"],
    );
    assert_eq!(code(&short), 2);
    let zero_threads = Command::new(BIN)
        .args(["degdays", "--bins", "x.csv", "--from", "8", "--to", "30", "--out", "dd.csv"])
        .current_dir(d)
        .env("AGROPANEL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&zero_threads), 2);
}

#[test]
fn demo_pipeline_produces_a_chart() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "11");
    ok(
        d,
        &["bins", "--tmax", "data/A_tmax.csv", "--tmin", "data/A_tmin.csv", "--lo", "0", "--hi", "38", "--width", "1",
          "--season", "04-09", "--step-minutes", "60", "--out", "bins.csv"],
    );
    // same curve, same bins: the command reproduces the generator's exposures
    assert_eq!(sorted_lines(&d.join("bins.csv")), sorted_lines(&d.join("data/exposures.csv")));

    ok(
        d,
        &["regress", "--panel", "data/panel.csv", "--bins", "bins.csv", "--basis", "ncs", "--df", "7", "--fe",
          "unit,year", "--trend", "state-quadratic", "--se", "cluster:state", "--controls", "ppt,ppt^2", "--out",
          "fit.json"],
    );
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["gamma"].as_array().unwrap().len(), fit["coef_names"].as_array().unwrap().len());
    assert_eq!(fit["response_curve"]["beta"].as_array().unwrap().len(), 39);
    assert_eq!(fit["residuals"].as_array().unwrap().len(), 120);
    // one state's trend is the reference under year effects
    let names: Vec<&str> = fit["coef_names"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("trend:")).count(), 4);

    ok(
        d,
        &["speccurve", "--panel", "data/panel.csv", "--weather", "data/weather.csv", "--baseline",
          "tmean,precip,quadratic,mar_aug,pooled", "--se", "cluster:state", "--out-svg", "chart.svg", "--out-csv",
          "chart.csv"],
    );
    let svg = std::fs::read_to_string(d.join("chart.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(std::fs::read_to_string(d.join("chart.csv")).unwrap().lines().count(), 73);

    // manifests record the input hashes
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("fit.json.manifest.json")).unwrap()).unwrap();
    let inputs = m["inputs"].as_array().unwrap();
    let panel = inputs.iter().find(|i| i["path"] == "data/panel.csv").unwrap();
    let bytes = std::fs::read(d.join("data/panel.csv")).unwrap();
    use sha2::Digest;
    assert_eq!(panel["sha256"], hex::encode(sha2::Sha256::digest(&bytes)));
    assert!(d.join("chart.svg.manifest.json").exists());
    assert!(d.join("data/manifest.json").exists());
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    simulate(a.path(), "5");
    simulate(b.path(), "5");
    simulate(c.path(), "6");
    let (fa, fb, fc) = (files(a.path()), files(b.path()), files(c.path()));
    assert_eq!(fa, fb);
    assert_ne!(fa[Path::new("data/panel.csv")], fc[Path::new("data/panel.csv")]);

    let d = a.path();
    ok(
        d,
        &["bins", "--tmax", "data/A_tmax.csv", "--tmin", "data/A_tmin.csv", "--step-minutes", "60", "--out", "bins.csv"],
    );
    let perm = |threads: &str, out: &str| {
        let mut args = vec!["--threads", threads, "permtest"];
        args.extend_from_slice(MODEL);
        args.extend_from_slice(&["--B", "49", "--seed", "42", "--stat", "warming:2", "--out", out]);
        ok(d, &args);
        std::fs::read(d.join(out)).unwrap()
    };
    let p1 = perm("1", "p1.json");
    assert_eq!(p1, perm("1", "p1b.json"));
    if cfg!(feature = "parallel") {
        assert_eq!(p1, perm("2", "p2.json"));
    }
    let p: serde_json::Value = serde_json::from_slice(&p1).unwrap();
    let pv = p["p"].as_f64().unwrap();
    assert!(pv > 0.0 && pv <= 1.0);
    assert_eq!(p["null_draws"].as_array().unwrap().len() + p["skipped"].as_u64().unwrap() as usize, 49);

    let moran = |out: &str| {
        ok(d, &["moran", "--fit", "f.json", "--centroids", "data/centroids.csv", "--seed", "9", "--out", out]);
        std::fs::read(d.join(out)).unwrap()
    };
    let mut args = vec!["regress"];
    args.extend_from_slice(MODEL);
    args.extend_from_slice(&["--out", "f.json"]);
    ok(d, &args);
    assert_eq!(moran("m1.json"), moran("m2.json"));
}

#[test]
fn remaining_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "21");
    ok(
        d,
        &["bins", "--tmax", "data/A_tmax.csv", "--tmin", "data/A_tmin.csv", "--step-minutes", "60", "--out", "bins.csv"],
    );

    // projecting the first-season grids gives back the generator's unit series
    ok(d, &["project", "--weights", "data/admin_weights.csv", "--stack", "data/tmax/tmax.csv", "--out", "A.csv"]);
    let projected = sorted_lines(&d.join("A.csv"));
    let all: std::collections::HashSet<String> = sorted_lines(&d.join("data/A_tmax.csv")).into_iter().collect();
    assert_eq!(projected.len(), 20 * 183 + 1);
    assert!(projected.iter().all(|l| all.contains(l)));

    ok(d, &["degdays", "--bins", "bins.csv", "--from", "8", "--to", "30", "--out", "dd.csv"]);
    // an exposure spread over the bins can never exceed 22 °C × 24 h per day
    for line in std::fs::read_to_string(d.join("dd.csv")).unwrap().lines().skip(1) {
        let dd: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=22.0 * 24.0 * 183.0).contains(&dd), "{line}");
    }

    let mut args = vec!["impact"];
    args.extend_from_slice(MODEL);
    args.extend_from_slice(&["--delta", "0", "--out", "i0.json"]);
    ok(d, &args);
    let i0: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("i0.json")).unwrap()).unwrap();
    assert_eq!(i0["estimate"].as_f64().unwrap(), 0.0);
    assert_eq!(i0["se"].as_f64().unwrap(), 0.0);

    let poly = ok(
        d,
        &["impact", "--panel", "data/panel.csv", "--basis", "poly", "--temp", "tavg", "--df", "2", "--fe", "unit",
          "--se", "conley:500,1", "--centroids", "data/centroids.csv", "--out", "ip.json"],
    );
    assert!(poly.status.success());
    let no_centroids = agro(
        d,
        &["impact", "--panel", "data/panel.csv", "--basis", "poly", "--temp", "tavg", "--se", "conley:500", "--out",
          "x.json"],
    );
    assert_eq!(code(&no_centroids), 2);

    let mut args = vec!["sem"];
    args.extend_from_slice(MODEL);
    args.extend_from_slice(&["--centroids", "data/centroids.csv", "--wk", "knn:4", "--out", "sem.json"]);
    ok(d, &args);
    let sem: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("sem.json")).unwrap()).unwrap();
    let lambda = sem["lambda"].as_f64().unwrap();
    assert!(lambda.abs() < 1.0);

    ok(
        d,
        &["interpolate", "--stations", "data/stations.csv", "--grid", "data/grid.asc", "--date", "2000-04-01", "--var",
          "tmax", "--method", "nearest", "--out", "g.asc"],
    );
    let g = std::fs::read_to_string(d.join("g.asc")).unwrap();
    assert_eq!(g.lines().count(), 6 + 20);
    ok(d, &["zonal", "--fine", "data/grid.asc", "--coarse", "data/grid.asc", "--class", "1", "--out", "z.asc"]);
}
