#![allow(dead_code)]

use microlp::{ComparisonOp, OptimizationDirection, Problem, SolveOutcome};

/// Exact bounded-Lipschitz distance between two small empirical measures by
/// linear programming over the values of ψ on the pooled support.
pub fn exact_dbl(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut wa = Vec::new();
    let mut wb = Vec::new();
    let mut slot = |s: &Vec<f64>| match pts.iter().position(|p| p == s) {
        Some(i) => i,
        None => {
            pts.push(s.clone());
            pts.len() - 1
        }
    };
    let ia: Vec<usize> = a.iter().map(&mut slot).collect();
    let ib: Vec<usize> = b.iter().map(&mut slot).collect();
    wa.resize(pts.len(), 0.0);
    wb.resize(pts.len(), 0.0);
    for i in ia {
        wa[i] += 1.0 / a.len() as f64;
    }
    for i in ib {
        wb[i] += 1.0 / b.len() as f64;
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..pts.len()).map(|i| lp.add_var(wa[i] - wb[i], (-1.0, 1.0))).collect();
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i != j {
                let d = pts[i].iter().zip(&pts[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                lp.add_constraint([(vars[i], 1.0), (vars[j], -1.0)], ComparisonOp::Le, d);
            }
        }
    }
    match lp.solve().expect("bounded LP") {
        SolveOutcome::Solution(s) => s.objective(),
        SolveOutcome::Interrupted(_) => panic!("LP interrupted"),
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
