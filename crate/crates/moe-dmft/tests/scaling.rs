mod common;

use moe_dmft::model::{InitScheme, ModelDims};
use moe_dmft::scaling::{
    classify_limit, concentration_fit, lr_grid, run_lr_scan, run_sweep, CellResult, KernelProbe, Regime, StateProbe,
    SweepBase, SweepPlan, SweepReport,
};
use moe_dmft::seed;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

#[test]
fn best_rate_multiplier_transfers_to_double_size() {
    let base = SweepBase::probe(ModelDims::new(8, 16, 4, 8, 4).with_steps(30, 0.1), 0);
    let mut plan = SweepPlan::new(base, "moe-table", vec![1.0], 4);
    plan.couple_sizes = true;
    let grid = lr_grid(1.0, 7);
    let small = run_lr_scan(&plan, 1.0, &grid).unwrap();
    let large = run_lr_scan(&plan, 2.0, &grid).unwrap();
    let (a, b) = (argmin(&small), argmin(&large));
    assert!(a.abs_diff(b) <= 1, "argmin {a} vs {b}: {small:?} / {large:?}");
    assert!(a > 0 && a < grid.len() - 1, "argmin {a} at the grid edge: {small:?}");
}

#[test]
fn seed_group_distance_decays_along_the_proportional_path() {
    let base = SweepBase::probe(ModelDims::new(4, 16, 2, 4, 2).with_steps(10, 0.1), 0);
    let mut plan = SweepPlan::new(base, "moe-table", vec![1.0, 2.0, 4.0, 8.0], 8);
    plan.states = vec![StateProbe { level: 'S', step: 10 }];
    let rep = run_sweep(&plan).unwrap();
    let pts = rep.seed_group_dbl(0, 2000, 5).unwrap();
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let slope = common::loglog_slope(&x, &y);
    assert!(slope <= -0.3, "slope {slope}, distances {y:?}");
}

#[test]
fn smoke_sweep_has_one_curve_per_size_and_seed() {
    let base = SweepBase::probe(ModelDims::new(4, 8, 2, 4, 3).with_steps(5, 0.1), 2);
    let plan = SweepPlan::new(base, "moe-table", vec![1.0, 2.0, 4.0], 8);
    let rep = run_sweep(&plan).unwrap();
    assert_eq!(rep.results.len(), 24);
    assert!(rep.results.iter().all(|r| r.losses.len() == 6 && r.diverged.is_none()));
    let dims: Vec<_> = (0..3).map(|c| (rep.cell(c).next().unwrap().dims.n, rep.cell(c).count())).collect();
    assert_eq!(dims, vec![(8, 8), (16, 8), (32, 8)]);
}

/// Report whose observable at scale `s` is the mean of `s` standard normals.
fn clt_report(scales: &[f64], seeds: usize, constant: bool) -> SweepReport {
    let base = SweepBase::probe(ModelDims::new(1, 1, 1, 1, 1), 0);
    let mut plan = SweepPlan::new(base, "moe-table", scales.to_vec(), seeds);
    plan.probes = vec![KernelProbe::new("H0", 0, 0, 0, 0)];
    let mut results = Vec::new();
    for (c, &s) in scales.iter().enumerate() {
        for j in 0..seeds {
            let mut rng = seed::stream(17, &format!("{c}/{j}"));
            let m = s as usize;
            let v = if constant { 0.3 } else { (0..m).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).sum::<f64>() / m as f64 };
            results.push(CellResult {
                cell: c,
                scale: s,
                dims: plan.dims(c).unwrap(),
                seed_index: j,
                seed: j as u64,
                losses: vec![],
                observables: vec![v],
                states: vec![],
                diverged: None,
            });
        }
    }
    SweepReport { plan, results }
}

#[test]
fn concentration_fit_recovers_the_clt_rate() {
    let rep = clt_report(&[1.0, 4.0, 16.0, 64.0, 256.0], 200, false);
    let f = concentration_fit(&rep, "H0[0,0,0,0]").unwrap();
    assert!((f.slope + 0.5).abs() < 0.1, "slope {}", f.slope);
}

#[test]
fn constant_observable_has_zero_slope() {
    let rep = clt_report(&[1.0, 2.0, 4.0], 6, true);
    assert_eq!(concentration_fit(&rep, "H0[0,0,0,0]").unwrap().slope, 0.0);
}

#[test]
fn zero_init_sweep_gives_a_flat_fit() {
    let mut base = SweepBase::probe(ModelDims::new(2, 4, 2, 2, 2).with_steps(2, 0.1), 0);
    base.hyper.init = InitScheme::zeros();
    let mut plan = SweepPlan::new(base, "ntk-baseline", vec![1.0, 2.0, 4.0], 4);
    plan.probes = vec![KernelProbe::new("Gt", 0, 0, 2, 2)];
    let rep = run_sweep(&plan).unwrap();
    assert_eq!(concentration_fit(&rep, "Gt[0,0,2,2]").unwrap().slope, 0.0);
}

proptest! {
    #[test]
    fn regime_is_invariant_under_common_rescaling(
        a in 0usize..3, b in 0usize..3, c in 0usize..3,
        n0 in 1usize..6, e0 in 1usize..6, ne0 in 1usize..6,
        k in 2usize..9,
    ) {
        prop_assume!(a + b + c > 0);
        let seq = |m: usize| -> Vec<ModelDims> {
            (0..4).map(|i| {
                let s = 1usize << i;
                ModelDims::new(1, m * n0 * s.pow(a as u32), m * e0 * s.pow(b as u32), m * ne0 * s.pow(c as u32), 1)
            }).collect()
        };
        let r1 = classify_limit(&seq(1)).unwrap();
        let rk = classify_limit(&seq(k)).unwrap();
        prop_assert_eq!(std::mem::discriminant(&r1), std::mem::discriminant(&rk));
        if let (Regime::Sde { alpha_star: x }, Regime::Sde { alpha_star: y }) = (r1, rk) {
            prop_assert!((y * k as f64 - x).abs() < 1e-9 * x.max(1.0));
        }
    }
}
