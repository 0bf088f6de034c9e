//! Laplacian positional encodings for small token graphs.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as the Laplacian kernel.
pub const NONTRIVIAL_EPS: f64 = 1e-8;

const MAX_SWEEPS: usize = 100;

/// `L = I - D^{-1/2} A D^{-1/2}`, with all-zero rows and columns for isolated nodes.
pub fn normalized_laplacian(adj: &Array2<f64>) -> Result<Array2<f64>> {
    check_symmetric(adj, 0.0)?;
    let n = adj.nrows();
    let inv_sqrt: Vec<f64> = adj
        .axis_iter(Axis(0))
        .map(|row| {
            let d = row.sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Array2::zeros((n, n));
    for a in 0..n {
        if inv_sqrt[a] > 0.0 {
            l[[a, a]] = 1.0;
        }
        for b in 0..n {
            if a != b && adj[[a, b]] != 0.0 {
                l[[a, b]] = -adj[[a, b]] * inv_sqrt[a] * inv_sqrt[b];
            }
        }
    }
    Ok(l)
}

fn check_symmetric(m: &Array2<f64>, tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimMismatch {
            left: m.nrows(),
            right: m.ncols(),
        });
    }
    let mut worst = 0.0f64;
    for a in 0..m.nrows() {
        for b in (a + 1)..m.ncols() {
            worst = worst.max((m[[a, b]] - m[[b, a]]).abs());
        }
    }
    if worst > tol {
        Err(Error::NotSymmetric(worst))
    } else {
        Ok(())
    }
}

/// Eigenpairs of a real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `j` pairs with `values[j]`.
    pub vectors: Array2<f64>,
}

/// Cyclic Jacobi eigensolver for small dense symmetric matrices.
pub fn eigen_decompose_symmetric(m: &Array2<f64>, tol: f64) -> Result<SymmetricEigen> {
    check_symmetric(m, tol)?;
    let n = m.nrows();
    let mut a = m.clone();
    // symmetrize exactly
    for p in 0..n {
        for q in (p + 1)..n {
            let avg = 0.5 * (a[[p, q]] + a[[q, p]]);
            a[[p, q]] = avg;
            a[[q, p]] = avg;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    let off_norm = |a: &Array2<f64>| {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[[p, q]] * a[[p, q]];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) > 1e-14 * scale {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off_norm(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[[x, x]].total_cmp(&a[[y, y]]).then(x.cmp(&y)));
    let values = order.iter().map(|&j| a[[j, j]]).collect();
    let vectors = v.select(Axis(1), &order);
    Ok(SymmetricEigen { values, vectors })
}

/// Per-token positional encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPE {
    pub k: usize,
    /// tokens x k, zero-padded on the right.
    pub vectors: Array2<f64>,
    /// Eigenvalues of the emitted (non-padding) columns, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Flips `col` so its largest-magnitude entry (lowest index on ties) is positive.
fn canonicalize_sign(col: &mut [f64]) {
    let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(lead) = col.iter().position(|x| x.abs() >= max - 1e-12) {
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Bottom `k` nontrivial eigenvectors of the normalized Laplacian of `adj`.
pub fn laplacian_pe(adj: &Array2<f64>, k: usize) -> Result<LaplacianPE> {
    let n = adj.nrows();
    let mut vectors = Array2::zeros((n, k));
    let mut eigenvalues = Vec::new();
    if n == 0 || k == 0 {
        return Ok(LaplacianPE { k, vectors, eigenvalues });
    }
    let lap = normalized_laplacian(adj)?;
    let eig = eigen_decompose_symmetric(&lap, 1e-12)?;
    let picked = eig
        .values
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > NONTRIVIAL_EPS)
        .take(k);
    for (col, (j, &lambda)) in picked.enumerate() {
        let mut u: Vec<f64> = eig.vectors.column(j).to_vec();
        canonicalize_sign(&mut u);
        vectors.column_mut(col).assign(&ndarray::Array1::from(u));
        eigenvalues.push(lambda);
    }
    Ok(LaplacianPE { k, vectors, eigenvalues })
}
