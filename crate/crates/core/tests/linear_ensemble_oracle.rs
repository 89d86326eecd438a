use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seaice_core::bundle::ForecastBundle;
use seaice_core::ensemble::{fit_linear_ensemble, MemberSet, DEFAULT_RIDGE};
use seaice_core::grid::{week_start, GridGeometry};
use seaice_core::tensor::{Shape3, Tensor3};

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let p = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        b.swap(col, p);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Ridge on the three weights, none on the intercept, via the uncentred
/// 4x4 normal equations `(XᵀX + diag(λ,λ,λ,0)) β = Xᵀy`.
fn oracle(rows: &[[f64; 3]], y: &[f64], ridge: f64) -> [f64; 4] {
    let mut a = [[0.0; 4]; 4];
    let mut b = [0.0; 4];
    for (r, &t) in rows.iter().zip(y) {
        let x = [r[0], r[1], r[2], 1.0];
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] += x[i] * x[j];
            }
            b[i] += x[i] * t;
        }
    }
    for (i, row) in a.iter_mut().enumerate().take(3) {
        row[i] += ridge;
    }
    solve4(a, b)
}

#[test]
fn linear_fit_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (h, w, dates) = (3, 4, 9);
    let shape = Shape3::new(52, h, w);
    let g = GridGeometry::new(h, w, 14.0).unwrap();
    let mut sets = Vec::new();
    let mut targets = Vec::new();
    for d in 0..dates {
        let issue = week_start(2010 * 52 + 3 * d as i64);
        let mut member = || {
            let v = Tensor3::from_fn(shape, |_, _, _| rng.gen_range(0.0f32..1.0));
            ForecastBundle::new(issue, v, g, vec![true; h * w], "m").unwrap()
        };
        let (a, b, c) = (member(), member(), member());
        sets.push(MemberSet::new(a, b, c).unwrap());
        targets.push(Tensor3::from_fn(shape, |_, _, _| rng.gen_range(0.0f32..1.0)));
    }
    let fit = fit_linear_ensemble(&sets, &targets, DEFAULT_RIDGE).unwrap();
    for i in 0..shape.len() {
        let rows: Vec<[f64; 3]> = sets
            .iter()
            .map(|s| {
                let m = s.members();
                [0, 1, 2].map(|j| m[j].values.as_slice()[i] as f64)
            })
            .collect();
        let y: Vec<f64> = targets.iter().map(|t| t.as_slice()[i] as f64).collect();
        let want = oracle(&rows, &y, DEFAULT_RIDGE);
        for (got, want) in fit.coefficients[i].iter().zip(want) {
            assert!((got - want).abs() < 1e-8, "element {i}: {got} vs {want}");
        }
    }
}
