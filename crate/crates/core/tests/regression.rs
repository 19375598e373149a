use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use agropanel::basis::{ncs_basis, recover_curve, BasisMatrix};
use agropanel::data::PanelTable;
use agropanel::regress::{
    attach_binned, build_spec_hybrid, build_spec_quadratic, fit_within, long_difference, warming_impact,
    weather_history, FixedEffect, ModelSpec, Trend,
};
use agropanel::rng::SplitMix64;
use agropanel::synth::{dummy_design, fe_test_panel, generate, oracle_dense_ols, DGPConfig};
use agropanel::thermal::{exposure_from_daily, BinGrid, ExposureTable, SineConfig};

fn two_way(regs: &[&str]) -> ModelSpec {
    ModelSpec::new(
        regs.iter().map(|s| s.to_string()).collect(),
        vec![FixedEffect::col("unit"), FixedEffect::col("year")],
    )
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn two_way_within_equals_dummy_ols() {
    for seed in 0..10 {
        let p = fe_test_panel(seed, 20, 10, 3).unwrap();
        let fit = fit_within(&p, &two_way(&["x1", "x2", "x3"])).unwrap();
        let cols = dummy_design(&p, &["x1", "x2", "x3"], true, true).unwrap();
        let beta = oracle_dense_ols(&p.y, &cols).unwrap();
        for j in 0..3 {
            assert!(rel(fit.gamma[j], beta[j]) < 1e-8, "seed {seed} coef {j}");
        }
        let n = p.n_rows();
        let fitted: Vec<f64> = (0..n).map(|i| cols.iter().zip(&beta).map(|(c, b)| c[i] * b).sum()).collect();
        let resid: Vec<f64> = p.y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        for (a, b) in fit.residuals.iter().zip(&resid) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
        }
        let ybar = p.y.iter().sum::<f64>() / n as f64;
        let tss: f64 = p.y.iter().map(|y| (y - ybar).powi(2)).sum();
        let r2 = 1.0 - resid.iter().map(|e| e * e).sum::<f64>() / tss;
        assert!(rel(fit.r2, r2) < 1e-8);
        assert_eq!(fit.dof, n - cols.len());
    }
}

#[test]
fn weighted_within_equals_weighted_dummy_ols() {
    let p = fe_test_panel(77, 15, 8, 2).unwrap();
    let fit = fit_within(&p, &two_way(&["x1", "x2"]).with_weights("w")).unwrap();
    let cols = dummy_design(&p, &["x1", "x2"], true, true).unwrap();
    let sw: Vec<f64> = p.real("w").unwrap().iter().map(|w| w.sqrt()).collect();
    let ys: Vec<f64> = p.y.iter().zip(&sw).map(|(y, s)| y * s).collect();
    let xs: Vec<Vec<f64>> = cols.iter().map(|c| c.iter().zip(&sw).map(|(v, s)| v * s).collect()).collect();
    let beta = oracle_dense_ols(&ys, &xs).unwrap();
    assert!(rel(fit.gamma[0], beta[0]) < 1e-8);
    assert!(rel(fit.gamma[1], beta[1]) < 1e-8);
}

#[test]
fn per_bin_fit_recovers_g_without_noise() {
    let cfg = DGPConfig {
        seed: 3,
        n_units: 80,
        n_years: 20,
        n_stations: 0,
        noise_sd: 0.0,
        ..DGPConfig::default()
    };
    let g = generate(&cfg).unwrap();
    let bins = g.exposures.bins;
    // bin 0 is the reference; total exposure is collinear with the unit effects
    let basis = BasisMatrix::identity(&bins).without_column(0).unwrap();
    let (mut panel, mut regs, _) = attach_binned(&g.panel, &g.exposures, &basis, "b").unwrap();
    let ppt = panel.real("ppt").unwrap().to_vec();
    panel.set_real("ppt_sq", ppt.iter().map(|v| v * v).collect()).unwrap();
    regs.extend(["ppt".into(), "ppt_sq".into()]);
    let spec = ModelSpec::new(regs.clone(), vec![FixedEffect::col("unit"), FixedEffect::col("year")]);
    let fit = fit_within(&panel, &spec).unwrap();
    let (gamma, v) = fit.subset(&regs[..basis.n_cols()]).unwrap();
    let curve = recover_curve(&gamma, &v, &basis).unwrap();
    for k in 0..bins.n_bins() {
        let truth = g.truth.g_mid[k] - g.truth.g_mid[0];
        assert!((curve.beta[k] - truth).abs() < 1e-6, "bin {k}: {} vs {truth}", curve.beta[k]);
    }
    // identity chain: the recovered curve is Γ̂ itself
    for j in 0..basis.n_cols() {
        assert_eq!(curve.beta[j + 1], gamma[j]);
    }
}

#[test]
fn quadratic_model_recovers_coefficients() {
    let truth = [0.05, -0.002, 0.004, -0.00001];
    let reps = 40;
    let mut est = vec![Vec::new(); 4];
    for rep in 0..reps {
        let mut rng = SplitMix64::new(900 + rep);
        let (nu, nt) = (40, 15);
        let alpha: Vec<f64> = (0..nu).map(|_| rng.normal()).collect();
        let (mut ids, mut years, mut y, mut t, mut pr) = (vec![], vec![], vec![], vec![], vec![]);
        for i in 0..nu {
            for s in 0..nt {
                let tv = 18.0 + 0.1 * alpha[i] + 2.0 * rng.normal();
                let pv = 500.0 + 120.0 * rng.normal();
                ids.push(format!("u{i}"));
                years.push(2000 + s);
                y.push(
                    truth[0] * tv + truth[1] * tv * tv + truth[2] * pv + truth[3] * pv * pv + alpha[i] + 0.05 * rng.normal(),
                );
                t.push(tv);
                pr.push(pv);
            }
        }
        let mut p = PanelTable::new(ids, years, y).unwrap();
        p.set_real("tavg", t).unwrap();
        p.set_real("ppt", pr).unwrap();
        let (p, spec) = build_spec_quadratic(&p, "tavg", "ppt", Trend::None).unwrap();
        let fit = fit_within(&p, &spec).unwrap();
        assert_eq!(fit.coef_names, ["tavg", "tavg_sq", "ppt", "ppt_sq"]);
        for j in 0..4 {
            est[j].push(fit.gamma[j]);
        }
    }
    for j in 0..4 {
        let m = est[j].iter().sum::<f64>() / reps as f64;
        let sd = (est[j].iter().map(|e| (e - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!((m - truth[j]).abs() < 3.0 * sd / (reps as f64).sqrt() + 1e-12, "coef {j}: {m} vs {}", truth[j]);
    }
}

#[test]
fn hybrid_model_recovers_coefficients() {
    let truth = [0.3, -0.01, -0.02];
    let reps = 30;
    let mut est = vec![Vec::new(); 3];
    for rep in 0..reps {
        let mut rng = SplitMix64::new(1300 + rep);
        let nu = 60;
        let mut obs = Vec::new();
        let mut ids = Vec::new();
        for i in 0..nu {
            // a slowly drifting climate gives the normals within-unit variation
            let (mut level, drift) = (14.0 + 3.0 * rng.normal(), 0.05 * rng.normal());
            for t in 1950..2011 {
                level += drift + 0.3 * rng.normal();
                obs.push((i, t, level + 1.5 * rng.normal()));
            }
            ids.push(format!("u{i:02}"));
        }
        let history = weather_history(obs.iter().map(|&(i, t, v)| (ids[i].as_str(), t, v))).unwrap();
        let (mut pid, mut years, mut y) = (vec![], vec![], vec![]);
        for i in 0..nu {
            let a = rng.normal();
            for t in 1990..2011 {
                let h = &history[&ids[i]];
                let nrm = (t - 30..t).map(|s| h[&s]).sum::<f64>() / 30.0;
                let w = h[&t];
                let s = (t - 2000) as f64;
                pid.push(ids[i].clone());
                years.push(t);
                y.push(truth[0] * nrm + truth[1] * nrm * nrm + truth[2] * (w - nrm).powi(2) + a + 0.01 * a * s + 0.1 * rng.normal());
            }
        }
        let panel = PanelTable::new(pid, years, y).unwrap();
        let (panel, spec) = build_spec_hybrid(&panel, &history, "tavg").unwrap();
        let fit = fit_within(&panel, &spec).unwrap();
        for j in 0..3 {
            est[j].push(fit.gamma[j]);
        }
    }
    for j in 0..3 {
        let m = est[j].iter().sum::<f64>() / reps as f64;
        let sd = (est[j].iter().map(|e| (e - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!((m - truth[j]).abs() < 3.0 * sd / (reps as f64).sqrt() + 1e-12, "coef {j}: {m} vs {}", truth[j]);
    }
}

#[test]
fn long_difference_matches_group_means() {
    let mut rng = SplitMix64::new(55);
    let (mut ids, mut years, mut y, mut t) = (vec![], vec![], vec![], vec![]);
    for i in 0..12 {
        for s in 1980..2010 {
            // ragged: some unit-years missing
            if rng.uniform() < 0.2 {
                continue;
            }
            ids.push(format!("u{i:02}"));
            years.push(s);
            y.push(rng.normal());
            t.push(20.0 + rng.normal());
        }
    }
    let p = PanelTable::new(ids.clone(), years.clone(), y.clone()).unwrap();
    let mut p = p;
    p.set_real("tavg", t.clone()).unwrap();
    let ld = long_difference(&p, &["tavg"], (1980, 1989), (2000, 2009)).unwrap();
    for (k, u) in ld.unit_ids.iter().enumerate() {
        let mean = |lo: i32, hi: i32, v: &[f64]| {
            let sel: Vec<f64> = (0..ids.len()).filter(|&r| &ids[r] == u && years[r] >= lo && years[r] <= hi).map(|r| v[r]).collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        assert!((ld.dy[k] - (mean(2000, 2009, &y) - mean(1980, 1989, &y))).abs() < 1e-12);
        let (ta, tb) = (mean(1980, 1989, &t), mean(2000, 2009, &t));
        assert!((ld.dz["tavg"][k] - (tb - ta)).abs() < 1e-12);
        assert!((ld.dz_sq["tavg"][k] - (tb * tb - ta * ta)).abs() < 1e-9);
    }
    assert_eq!(ld.unit_ids.len() + ld.dropped_units, 12);
}

#[test]
fn binned_impact_matches_rebinned_shifted_weather() {
    let mut rng = SplitMix64::new(66);
    let bins = BinGrid::unit_bins(0, 38).unwrap();
    let cfg = SineConfig::default();
    let (nu, nt, days) = (40, 10, 60);
    let g = |m: f64| if m < 29.0 { 0.0005 * m } else { 0.0145 - 0.006 * (m - 29.0) };
    let mut weather = Vec::new();
    let mut rows = Vec::new();
    let (mut ids, mut years, mut y) = (vec![], vec![], vec![]);
    for i in 0..nu {
        let climate = 14.0 + 4.0 * rng.uniform();
        for s in 0..nt {
            let year_shift = 2.0 * rng.normal();
            let lo: Vec<f64> = (0..days).map(|_| climate + year_shift + 2.0 * rng.normal()).collect();
            let hi: Vec<f64> = lo.iter().map(|v| v + 8.0 + 6.0 * rng.uniform()).collect();
            let e = exposure_from_daily(&format!("u{i:02}"), 2000 + s, &lo, &hi, &cfg, &bins).unwrap();
            let signal: f64 = e.z.iter().enumerate().map(|(k, z)| z * g(bins.midpoint(k))).sum();
            ids.push(e.unit_id.clone());
            years.push(e.period);
            y.push(signal + 0.02 * rng.normal());
            rows.push(e);
            weather.push((lo, hi));
        }
    }
    let table = ExposureTable { bins, rows };
    let panel = PanelTable::new(ids, years, y).unwrap();
    let basis = ncs_basis(&bins, 7).unwrap();
    let (panel, regs, rule) = attach_binned(&panel, &table, &basis, "b").unwrap();
    let mut spec = ModelSpec::new(regs.clone(), vec![FixedEffect::col("unit"), FixedEffect::col("year")]);
    spec.warming = Some(rule);
    let fit = fit_within(&panel, &spec).unwrap();
    let impact = warming_impact(&fit, &spec, &panel, 2.0).unwrap();

    let curve = basis.values.clone() * DVector::from_fn(7, |j, _| fit.gamma[j]);
    let mut oracle = 0.0;
    for (r, (lo, hi)) in weather.iter().enumerate() {
        let up: (Vec<f64>, Vec<f64>) = (lo.iter().map(|v| v + 2.0).collect(), hi.iter().map(|v| v + 2.0).collect());
        let shifted = exposure_from_daily("u", 0, &up.0, &up.1, &cfg, &bins).unwrap();
        let dz = DMatrix::from_fn(1, bins.n_bins(), |_, k| shifted.z[k] - table.rows[r].z[k]);
        oracle += (dz * &curve)[(0, 0)];
    }
    oracle /= weather.len() as f64;
    assert!((impact.estimate - oracle).abs() < 0.01, "{} vs {oracle}", impact.estimate);
    assert!(impact.se > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn within_r2_ignores_absorbed_shifts(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let p = fe_test_panel(seed, 8, 5, 2).unwrap();
        let spec = two_way(&["x1", "x2"]);
        let base = fit_within(&p, &spec).unwrap();
        let mut rng = SplitMix64::new(seed + 1);
        let ua: Vec<f64> = (0..8).map(|_| scale * rng.normal()).collect();
        let yb: Vec<f64> = (0..5).map(|_| scale * rng.normal()).collect();
        let units = p.units();
        let years = p.year_set();
        let y: Vec<f64> = (0..p.n_rows())
            .map(|r| {
                let u = units.iter().position(|v| *v == p.unit_ids[r]).unwrap();
                let t = years.iter().position(|v| *v == p.years[r]).unwrap();
                p.y[r] + ua[u] + yb[t]
            })
            .collect();
        let mut q = p.clone();
        q.y = y;
        let shifted = fit_within(&q, &spec).unwrap();
        prop_assert!((shifted.within_r2 - base.within_r2).abs() < 1e-8);
        for j in 0..2 {
            prop_assert!((shifted.gamma[j] - base.gamma[j]).abs() < 1e-8 * (1.0 + base.gamma[j].abs()));
        }
    }
}

#[test]
fn absorbed_trends_drop_to_a_reference_region() {
    let mut p = fe_test_panel(17, 24, 9, 2).unwrap();
    let state: Vec<String> = p.unit_ids.iter().map(|u| format!("S{}", u.bytes().map(|b| b as usize).sum::<usize>() % 4)).collect();
    p.set_text("state", state.clone()).unwrap();
    let with_trends = two_way(&["x1", "x2"]).with_trend(Trend::ByRegionQuadratic("state".into()));
    let a = fit_within(&p, &with_trends).unwrap();

    // explicit trend columns for every state but the first, centered years
    let mut levels = state.clone();
    levels.sort();
    levels.dedup();
    let mean = p.years.iter().sum::<i32>() as f64 / p.n_rows() as f64;
    let mut regs = vec!["x1".to_string(), "x2".to_string()];
    for s in &levels[1..] {
        let t: Vec<f64> = (0..p.n_rows()).map(|r| if &state[r] == s { p.years[r] as f64 - mean } else { 0.0 }).collect();
        p.set_real(&format!("t_{s}"), t.clone()).unwrap();
        p.set_real(&format!("t2_{s}"), t.iter().map(|v| v * v).collect()).unwrap();
        regs.push(format!("t_{s}"));
        regs.push(format!("t2_{s}"));
    }
    let b = fit_within(&p, &ModelSpec::new(regs, vec![FixedEffect::col("unit"), FixedEffect::col("year")])).unwrap();
    assert_eq!(a.coef_names.len(), 2 + 2 * (levels.len() - 1));
    assert!(!a.coef_names.iter().any(|n| n == &format!("trend:{}", levels[0])));
    for j in 0..a.gamma.len() {
        assert!((a.gamma[j] - b.gamma[j]).abs() < 1e-8 * (1.0 + b.gamma[j].abs()), "{}", a.coef_names[j]);
    }
    assert_eq!(a.dof, b.dof);

    // state-by-year effects absorb every state trend
    let mut spec = with_trends.clone();
    spec.fixed_effects = vec![FixedEffect::col("unit"), FixedEffect::Interaction("state".into(), "year".into())];
    let c = fit_within(&p, &spec).unwrap();
    assert_eq!(c.coef_names, vec!["x1".to_string(), "x2".to_string()]);
}
