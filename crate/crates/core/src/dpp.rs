//! DPP kernels over hidden nodes and exact k-DPP sampling.
//!
//! Sampling follows the spectral construction: eigendecompose `L`, choose
//! `k` eigenvectors with probabilities given by elementary symmetric
//! polynomials of the eigenvalues, then draw items one at a time from the
//! projection DPP spanned by those eigenvectors. Ground sets here are hidden
//! layers (tens of nodes), so everything is dense and exact.

use itertools::Itertools;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{rows, TestSet};
use crate::error::{check_dim, Error, Result};
use crate::netcore::TwoLayerNet;

pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_EPS: f64 = 1e-6;

/// Largest ground set [`kdpp_subset_prob`] will enumerate.
pub const MAX_ENUMERATION: usize = 25;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

/// Where a kernel's entries came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSource {
    /// Gaussian similarity of post-activation vectors.
    Activation,
    /// Normalized inner products of pre-activation vectors.
    InnerProduct,
    /// The student-student order parameter `Q`.
    Analytic,
    /// Supplied directly.
    External,
}

/// Symmetric PSD similarity kernel `L` over a ground set of hidden nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppKernel {
    #[serde(with = "rows")]
    pub l: Array2<f64>,
    /// Bandwidth; zero when the kernel is not a Gaussian kernel.
    pub beta: f64,
    /// Diagonal jitter already included in `l`.
    pub eps: f64,
    pub source: KernelSource,
}

/// A set of ground-set indices, zero-based and strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut indices: Vec<usize>, ground: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("subset has duplicate indices".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= ground {
                return Err(Error::InvalidArgument(format!(
                    "index {last} outside ground set of size {ground}"
                )));
            }
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl DppKernel {
    /// Wraps a precomputed matrix after checking symmetry and PSD-ness.
    pub fn from_matrix(l: Array2<f64>) -> Result<Self> {
        validate_psd(&l)?;
        Ok(Self { l, beta: 0.0, eps: 0.0, source: KernelSource::External })
    }

    pub fn size(&self) -> usize {
        self.l.nrows()
    }

    /// Whitespace-delimited text, one row per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.l.outer_iter() {
            out.push_str(&row.iter().map(|x| format!("{x:e}")).join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows_: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("{t:?}: {e}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let l = rows::from_rows(&rows_).map_err(Error::InvalidArgument)?;
        Self::from_matrix(l)
    }
}

fn to_nalgebra(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn validate_psd(l: &Array2<f64>) -> Result<()> {
    check_dim("kernel columns", l.nrows(), l.ncols())?;
    if !l.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("kernel entries must be finite".into()));
    }
    let scale = max_abs(l).max(1.0);
    let asym = max_abs(&(l - &l.t()));
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidArgument(format!("kernel asymmetric by {asym:e}")));
    }
    if l.nrows() > 0 {
        let eig = SymmetricEigen::new(to_nalgebra(l.view()));
        let min = eig.eigenvalues.min();
        if min < -PSD_TOL * scale {
            return Err(Error::InvalidArgument(format!("kernel has eigenvalue {min:e} < 0")));
        }
    }
    Ok(())
}

/// `L = L' + eps I` with `L'_st = exp(-beta ||a_s - a_t||^2)`, where row `s`
/// of `activations` is the activation vector of node `s` over the samples.
pub fn activation_kernel(activations: ArrayView2<f64>, beta: f64, eps: f64) -> Result<DppKernel> {
    if activations.ncols() == 0 {
        return Err(Error::InvalidArgument("need at least one activation sample".into()));
    }
    if !(beta > 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("need beta > 0 and eps >= 0, got {beta}, {eps}")));
    }
    if !activations.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("activations must be finite".into()));
    }
    let n = activations.nrows();
    let mut l = Array2::zeros((n, n));
    for s in 0..n {
        l[[s, s]] = 1.0 + eps;
        for t in 0..s {
            let d2: f64 = activations
                .row(s)
                .iter()
                .zip(activations.row(t).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = (-beta * d2).exp();
            l[[s, t]] = v;
            l[[t, s]] = v;
        }
    }
    Ok(DppKernel { l, beta, eps, source: KernelSource::Activation })
}

/// Activation kernel of `net`'s hidden layer on the inputs in `xs` (rows).
pub fn activation_kernel_for(net: &TwoLayerNet, xs: ArrayView2<f64>, beta: f64, eps: f64) -> Result<DppKernel> {
    let acts = net.activations_batch(xs)?;
    activation_kernel(acts.t(), beta, eps)
}

/// Inner-product kernel `L = H H^T / (N n)` of the pre-activations
/// `h_ij = w_i . t_j` over the `n` inputs of `test`. Its expectation over
/// Gaussian inputs is `Q`.
pub fn inner_product_kernel(net: &TwoLayerNet, test: &TestSet) -> Result<DppKernel> {
    check_dim("test set input dimension", net.input_dim(), test.input_dim)?;
    let k = net.hidden_count();
    let mut acc = Array2::<f64>::zeros((k, k));
    test.for_each_chunk(|xs| {
        let h = xs.dot(&net.w().t());
        acc += &h.t().dot(&h);
    });
    let l = acc / (net.input_dim() as f64 * test.n as f64);
    Ok(DppKernel { l, beta: 0.0, eps: 0.0, source: KernelSource::InnerProduct })
}

/// Uses the order parameter `Q` as the kernel. Negative eigenvalues from
/// rounding are floored at zero.
pub fn analytic_kernel(q: &Array2<f64>) -> Result<DppKernel> {
    check_dim("Q columns", q.nrows(), q.ncols())?;
    let scale = max_abs(q).max(1.0);
    let asym = max_abs(&(q - &q.t()));
    if asym > PSD_TOL * scale {
        return Err(Error::InvalidArgument(format!("Q asymmetric by {asym:e}")));
    }
    let sym = (q + &q.t()) * 0.5;
    let eig = SymmetricEigen::new(to_nalgebra(sym.view()));
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * scale {
        return Err(Error::InvalidArgument(format!("Q has eigenvalue {min:e} < 0")));
    }
    let floored = eig.eigenvalues.map(|x| x.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    let n = q.nrows();
    let l = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]));
    Ok(DppKernel { l, beta: 0.0, eps: 0.0, source: KernelSource::Analytic })
}

/// `table[l][n] = e_l(lambda_1, ..., lambda_n)` for `l <= k`.
fn elementary_symmetric_table(lambda: &[f64], k: usize) -> Vec<Vec<f64>> {
    let n = lambda.len();
    let mut e = vec![vec![0.0; n + 1]; k + 1];
    e[0].iter_mut().for_each(|x| *x = 1.0);
    for l in 1..=k {
        for m in 1..=n {
            e[l][m] = e[l][m - 1] + lambda[m - 1] * e[l - 1][m - 1];
        }
    }
    e
}

/// Draws `Y` with `|Y| = k` and `P(Y) ∝ det(L_Y)`.
pub fn sample_kdpp<R: Rng + ?Sized>(kernel: &DppKernel, k: usize, rng: &mut R) -> Result<Subset> {
    let n = kernel.size();
    if k == 0 {
        return Ok(Subset(Vec::new()));
    }
    if k > n {
        return Err(Error::InfeasibleSize { k, n, rank: n });
    }
    let eig = SymmetricEigen::new(to_nalgebra(kernel.l.view()));
    let top = eig.eigenvalues.max().max(0.0);
    // Scale to max 1 so the polynomial table stays in range; the
    // distribution is invariant to scaling L.
    let lambda: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&x| if top > 0.0 && x > RANK_TOL * top { x / top } else { 0.0 })
        .collect();
    let rank = lambda.iter().filter(|&&x| x > 0.0).count();
    if k > rank {
        return Err(Error::InfeasibleSize { k, n, rank });
    }

    let e = elementary_symmetric_table(&lambda, k);
    let mut chosen = Vec::with_capacity(k);
    let mut remaining = k;
    for m in (1..=n).rev() {
        if remaining == 0 {
            break;
        }
        let p = lambda[m - 1] * e[remaining - 1][m - 1] / e[remaining][m];
        if rng.random::<f64>() < p {
            chosen.push(m - 1);
            remaining -= 1;
        }
    }
    debug_assert_eq!(remaining, 0);

    let mut basis: Vec<Vec<f64>> = chosen
        .iter()
        .map(|&c| eig.eigenvectors.column(c).iter().copied().collect())
        .collect();
    let mut items = Vec::with_capacity(k);
    while !basis.is_empty() {
        let weights: Vec<f64> = (0..n).map(|i| basis.iter().map(|v| v[i] * v[i]).sum()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut item = n - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                item = i;
                break;
            }
            u -= w;
        }
        // Guard against landing on a zero-weight tail through rounding.
        while weights[item] <= 0.0 && item > 0 {
            item -= 1;
        }
        items.push(item);

        // Eliminate the pivot column's component along `item`, then
        // re-orthonormalize what is left.
        let pivot = (0..basis.len())
            .max_by(|&a, &b| basis[a][item].abs().total_cmp(&basis[b][item].abs()))
            .expect("nonempty basis");
        let pv = basis.swap_remove(pivot);
        for v in basis.iter_mut() {
            let f = v[item] / pv[item];
            v.iter_mut().zip(&pv).for_each(|(x, p)| *x -= f * p);
        }
        for j in 0..basis.len() {
            for i in 0..j {
                let d: f64 = basis[j].iter().zip(&basis[i]).map(|(a, b)| a * b).sum();
                let (head, tail) = basis.split_at_mut(j);
                tail[0].iter_mut().zip(&head[i]).for_each(|(x, b)| *x -= d * b);
            }
            let norm = basis[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            basis[j].iter_mut().for_each(|x| *x /= norm);
        }
    }
    Subset::new(items, n)
}

fn principal_det(l: &Array2<f64>, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| l[[idx[a], idx[b]]]).determinant()
}

/// Every size-`k` subset with its k-DPP probability, by enumeration.
pub fn kdpp_distribution(kernel: &DppKernel, k: usize) -> Result<Vec<(Subset, f64)>> {
    let n = kernel.size();
    if n > MAX_ENUMERATION {
        return Err(Error::EnumerationTooLarge { n, max: MAX_ENUMERATION });
    }
    if k > n {
        return Err(Error::InfeasibleSize { k, n, rank: n });
    }
    let dets: Vec<(Subset, f64)> = (0..n)
        .combinations(k)
        .map(|c| {
            let d = principal_det(&kernel.l, &c).max(0.0);
            (Subset(c), d)
        })
        .collect();
    let z: f64 = dets.iter().map(|(_, d)| d).sum();
    if !(z > 0.0) {
        return Err(Error::InfeasibleSize { k, n, rank: 0 });
    }
    Ok(dets.into_iter().map(|(s, d)| (s, d / z)).collect())
}

/// `det(L_Y) / sum_{|Y'| = |Y|} det(L_Y')`, normalized by enumeration.
pub fn kdpp_subset_prob(kernel: &DppKernel, subset: &Subset) -> Result<f64> {
    let n = kernel.size();
    if n > MAX_ENUMERATION {
        return Err(Error::EnumerationTooLarge { n, max: MAX_ENUMERATION });
    }
    if subset.indices().iter().any(|&i| i >= n) {
        return Err(Error::InvalidArgument("subset outside ground set".into()));
    }
    let k = subset.len();
    let z: f64 = (0..n).combinations(k).map(|c| principal_det(&kernel.l, &c).max(0.0)).sum();
    if !(z > 0.0) {
        return Err(Error::InfeasibleSize { k, n, rank: 0 });
    }
    Ok(principal_det(&kernel.l, subset.indices()).max(0.0) / z)
}

/// Total-variation distance between empirical subset counts and an
/// enumerated distribution.
pub fn total_variation(counts: &std::collections::HashMap<Subset, usize>, exact: &[(Subset, f64)]) -> f64 {
    let total: usize = counts.values().sum();
    let mut tv = 0.0;
    let mut seen = 0;
    for (s, p) in exact {
        let c = counts.get(s).copied().unwrap_or(0);
        seen += c;
        tv += (c as f64 / total as f64 - p).abs();
    }
    // Mass the sampler put outside the support.
    tv += (total - seen) as f64 / total as f64;
    0.5 * tv
}
