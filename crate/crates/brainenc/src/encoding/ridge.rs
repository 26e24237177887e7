//! Ridge regression with closed-form leave-one-out validation.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, row-major. Fails on a non-positive pivot (rank deficiency).
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0f64, f64::max);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= scale.max(1.0) * 1e-14 {
                    return Err(Error::IllPosed(format!(
                        "non-positive pivot {s:.3e} at column {i} (rank-deficient system)"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve `L L^T x = b` in place.
fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Shared factorization of `X^T X + lambda I` for one design matrix and one
/// lambda; every parcel fit and the leave-one-out leverages reuse it.
pub struct RidgeSolver {
    pub lambda: f64,
    n: usize,
    p: usize,
    x: Vec<f64>,
    l: Vec<f64>,
}

impl RidgeSolver {
    pub fn new(x: &[f64], n: usize, p: usize, lambda: f64) -> Result<RidgeSolver> {
        if lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        if n == 0 || x.len() != n * p {
            return Err(Error::ShapeMismatch(format!(
                "design matrix {n}x{p} vs data length {}",
                x.len()
            )));
        }
        let mut gram = vec![0.0; p * p];
        for row in x.chunks(p) {
            for i in 0..p {
                let xi = row[i];
                if xi != 0.0 {
                    for j in 0..p {
                        gram[i * p + j] += xi * row[j];
                    }
                }
            }
        }
        for i in 0..p {
            gram[i * p + i] += lambda;
        }
        let l = cholesky(&gram, p)?;
        Ok(RidgeSolver {
            lambda,
            n,
            p,
            x: x.to_vec(),
            l,
        })
    }

    /// Exact minimizer of `||y - Xb||^2 + lambda ||b||^2`.
    pub fn fit(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n, "target length mismatch");
        let mut rhs = vec![0.0; self.p];
        for (row, &yi) in self.x.chunks(self.p).zip(y) {
            for j in 0..self.p {
                rhs[j] += row[j] * yi;
            }
        }
        chol_solve(&self.l, self.p, &mut rhs);
        rhs
    }

    pub fn predict_rows(&self, b: &[f64]) -> Vec<f64> {
        self.x
            .chunks(self.p)
            .map(|row| row.iter().zip(b).map(|(x, w)| x * w).sum())
            .collect()
    }

    /// Diagonal of the ridge hat matrix `X (X^T X + lambda I)^-1 X^T`.
    pub fn hat_diag(&self) -> Vec<f64> {
        self.x
            .chunks(self.p)
            .map(|row| {
                let mut v = row.to_vec();
                chol_solve(&self.l, self.p, &mut v);
                row.iter().zip(&v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

/// One-shot ridge fit.
pub fn ridge_fit(x: &[f64], n: usize, p: usize, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    Ok(RidgeSolver::new(x, n, p, lambda)?.fit(y))
}

/// Leave-one-out lambda selection over a grid via the hat-matrix identity
/// `e_loo_i = e_i / (1 - h_ii)`. Ties break toward the larger lambda.
/// Returns the winning lambda and its full-train coefficients.
pub fn loo_select_lambda(
    x: &[f64],
    n: usize,
    p: usize,
    y: &[f64],
    grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for &lambda in &lambdas {
        let solver = RidgeSolver::new(x, n, p, lambda)?;
        let mse = loo_mse(&solver, y)?;
        let take = match &best {
            None => true,
            Some((best_mse, _, _)) => mse <= *best_mse,
        };
        if take {
            let b = solver.fit(y);
            best = Some((mse, lambda, b));
        }
    }
    let (_, lambda, b) = best.unwrap();
    Ok((lambda, b))
}

pub(crate) fn loo_mse(solver: &RidgeSolver, y: &[f64]) -> Result<f64> {
    let b = solver.fit(y);
    let pred = solver.predict_rows(&b);
    let hat = solver.hat_diag();
    loo_mse_from_parts(y, &pred, &hat)
}

pub(crate) fn loo_mse_from_parts(y: &[f64], pred: &[f64], hat: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let denom = 1.0 - hat[i];
        if denom.abs() < 1e-10 {
            return Err(Error::DegenerateLeverage);
        }
        let e = (y[i] - pred[i]) / denom;
        acc += e * e;
    }
    Ok(acc / y.len() as f64)
}

/// Sample Pearson correlation. Constant input yields r = 0 with the
/// degenerate flag set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("series lengths differ".into()));
    }
    if a.len() < 2 {
        return Err(Error::TooFewRows {
            need: 2,
            got: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - ma;
        let db = y - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa < 1e-24 || sbb < 1e-24 {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        r: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}
