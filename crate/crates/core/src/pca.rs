//! Linear baseline: PCA fit / compress / reconstruct.
//!
//! The fit runs a one-sided Jacobi (Hestenes) SVD on the centered data
//! matrix — numerically robust and dependency-free at desk scale. A
//! two-sided Jacobi eigendecomposition of the covariance matrix
//! ([`symmetric_eig`]) provides an independent route to the same subspace
//! and serves as the verification oracle.

use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::Tensor;
use crate::error::CoreError;

/// Rotation threshold: a column pair is considered orthogonal when
/// |⟨a,b⟩| ≤ tol·‖a‖‖b‖.
const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// Column mean μ of the training data, length d.
    pub mean: Vec<f64>,
    /// [d, m]; orthonormal columns in descending explained-variance order.
    pub components: Tensor,
    /// σ²/(n−1) per retained component, non-increasing.
    pub explained_variance: Vec<f64>,
}

/// One-sided Jacobi SVD of `a` ([n, d], destroyed): returns (singular
/// values descending, right singular vectors as columns of a [d, d] matrix,
/// matched order).
fn jacobi_svd(a: &mut Tensor) -> (Vec<f64>, Tensor) {
    let n = a.rows();
    let d = a.cols();
    // Right-rotation accumulator; columns track the columns of `a`.
    let mut v = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        v.row_mut(i)[i] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    let row = a.row(i);
                    app += row[p] * row[p];
                    aqq += row[q] * row[q];
                    apq += row[p] * row[q];
                }
                if apq.abs() <= JACOBI_TOL * (app.sqrt() * aqq.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let row = a.row_mut(i);
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for i in 0..d {
                    let row = v.row_mut(i);
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| a.row(i)[j] * a.row(i)[j]).sum::<f64>().sqrt())
        .collect();
    // Descending σ; stable on ties via the original column index.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));
    let mut v_sorted = Tensor::zeros(vec![d, d]);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..d {
            v_sorted.row_mut(i)[new_j] = v.row(i)[old_j];
        }
    }
    sigma = order.iter().map(|&j| sigma[j]).collect();
    (sigma, v_sorted)
}

/// Two-sided Jacobi eigendecomposition of a symmetric [d, d] matrix:
/// returns (eigenvalues descending, eigenvectors as matching columns).
/// Independent of [`jacobi_svd`]; used as the PCA verification oracle.
pub fn symmetric_eig(sym: &Tensor) -> Result<(Vec<f64>, Tensor), CoreError> {
    if sym.ndim() != 2 || sym.rows() != sym.cols() {
        return Err(CoreError::contract("symmetric_eig needs a square matrix"));
    }
    let d = sym.rows();
    let mut a = sym.clone();
    let mut v = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        v.row_mut(i)[i] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a.row(p)[q] * a.row(p)[q];
            }
        }
        if off.sqrt() <= 1e-15 * (1.0 + frobenius(&a)) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.row(p)[q];
                if apq == 0.0 {
                    continue;
                }
                let app = a.row(p)[p];
                let aqq = a.row(q)[q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // A ← JᵀAJ, rotating rows then columns p and q.
                for k in 0..d {
                    let (x, y) = (a.row(p)[k], a.row(q)[k]);
                    a.row_mut(p)[k] = c * x - s * y;
                    a.row_mut(q)[k] = s * x + c * y;
                }
                for k in 0..d {
                    let (x, y) = (a.row(k)[p], a.row(k)[q]);
                    a.row_mut(k)[p] = c * x - s * y;
                    a.row_mut(k)[q] = s * x + c * y;
                }
                for k in 0..d {
                    let (x, y) = (v.row(k)[p], v.row(k)[q]);
                    v.row_mut(k)[p] = c * x - s * y;
                    v.row_mut(k)[q] = s * x + c * y;
                }
            }
        }
    }

    let mut evals: Vec<f64> = (0..d).map(|i| a.row(i)[i]).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap().then(i.cmp(&j)));
    let mut v_sorted = Tensor::zeros(vec![d, d]);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..d {
            v_sorted.row_mut(i)[new_j] = v.row(i)[old_j];
        }
    }
    evals = order.iter().map(|&j| evals[j]).collect();
    Ok((evals, v_sorted))
}

fn frobenius(a: &Tensor) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fit PCA on [n, d] data, keeping the top m components.
pub fn pca_fit(data: &Tensor, m: usize) -> Result<PcaModel, CoreError> {
    if data.ndim() != 2 {
        return Err(CoreError::contract("pca_fit needs an [n, d] matrix"));
    }
    let n = data.rows();
    let d = data.cols();
    if n < 2 {
        return Err(CoreError::contract("pca_fit needs at least 2 samples"));
    }
    if m == 0 || m > n.min(d) {
        return Err(CoreError::contract(
            "component count must satisfy 1 <= m <= min(n, d)",
        ));
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in mean.iter_mut().zip(data.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }

    let mut centered = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        for (c, (x, mu)) in centered
            .row_mut(i)
            .iter_mut()
            .zip(data.row(i).iter().zip(&mean))
        {
            *c = x - mu;
        }
    }

    let (sigma, v) = jacobi_svd(&mut centered);

    let mut components = Tensor::zeros(vec![d, m]);
    for j in 0..m {
        // Deterministic sign: the largest-magnitude entry of each component
        // is positive (first such entry on magnitude ties).
        let mut lead = 0;
        for i in 1..d {
            if v.row(i)[j].abs() > v.row(lead)[j].abs() {
                lead = i;
            }
        }
        let flip = if v.row(lead)[j] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components.row_mut(i)[j] = flip * v.row(i)[j];
        }
    }
    let explained_variance = sigma[..m]
        .iter()
        .map(|s| s * s / (n as f64 - 1.0))
        .collect();

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn d(&self) -> usize {
        self.components.rows()
    }

    pub fn m(&self) -> usize {
        self.components.cols()
    }

    /// z = Uᵀ(x − μ).
    pub fn compress(&self, x: &[f64]) -> Result<Vec<f64>, CoreError> {
        if x.len() != self.d() {
            return Err(CoreError::LengthMismatch {
                context: "pca compress",
                expected: self.d(),
                actual: x.len(),
            });
        }
        let mut z = vec![0.0; self.m()];
        for (i, (xi, mu)) in x.iter().zip(&self.mean).enumerate() {
            let c = xi - mu;
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += self.components.row(i)[j] * c;
            }
        }
        Ok(z)
    }

    /// x̂ = μ + U·z.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>, CoreError> {
        if z.len() != self.m() {
            return Err(CoreError::LengthMismatch {
                context: "pca reconstruct",
                expected: self.m(),
                actual: z.len(),
            });
        }
        let mut x = self.mean.clone();
        for (i, xi) in x.iter_mut().enumerate() {
            for (j, zj) in z.iter().enumerate() {
                *xi += self.components.row(i)[j] * zj;
            }
        }
        Ok(x)
    }

    pub fn compress_batch(&self, data: &Tensor) -> Tensor {
        let n = data.rows();
        let mut out = Tensor::zeros(vec![n, self.m()]);
        for i in 0..n {
            let z = self.compress(data.row(i)).expect("dimension checked");
            out.row_mut(i).copy_from_slice(&z);
        }
        out
    }

    pub fn reconstruct_batch(&self, codes: &Tensor) -> Tensor {
        let n = codes.rows();
        let mut out = Tensor::zeros(vec![n, self.d()]);
        for i in 0..n {
            let x = self.reconstruct(codes.row(i)).expect("dimension checked");
            out.row_mut(i).copy_from_slice(&x);
        }
        out
    }
}
