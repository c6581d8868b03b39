//! Independent numeric oracles used by unit tests.

use ndarray::Array2;

/// Singular values of `m` (descending) by one-sided Jacobi rotations.
pub fn singular_values(m: &Array2<f64>) -> Vec<f64> {
    let mut u = m.clone();
    let n = u.ncols();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let cp = u.column(p).to_owned();
                let cq = u.column(q).to_owned();
                let alpha = cp.dot(&cp);
                let beta = cq.dot(&cq);
                let gamma = cp.dot(&cq);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..u.nrows() {
                    let (a, b) = (u[[k, p]], u[[k, q]]);
                    u[[k, p]] = c * a - s * b;
                    u[[k, q]] = s * a + c * b;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| u.column(j).dot(&u.column(j)).sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}
