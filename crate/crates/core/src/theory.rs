//! Closed-form errors of pruned, perfectly specialized students.
//!
//! The student has `K = Z M` hidden nodes in `M` blocks of `Z` copies of a
//! teacher node, each with second-layer weight `v*/Z`, and the teacher has
//! orthonormal first-layer rows (`T = I`). Errors are in units where the
//! unpruned student has error 0 and a silent one has `M v*^2 / 6`.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analytics::OrderParams;
use crate::error::{Error, Result};
use crate::pruning::optimal_edge_scale;

/// Largest `K` the random-node expectation will enumerate.
pub const MAX_ENUMERATED_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub m: usize,
    pub z: usize,
    pub v_star: f64,
    pub k_n: Option<usize>,
    pub c: Option<f64>,
}

impl TheoryParams {
    pub fn new(m: usize, z: usize, v_star: f64) -> Self {
        Self { m, z, v_star, k_n: None, c: None }
    }

    /// Node budget `k_n` with the matching edge keep fraction `k_n / K`.
    pub fn with_k_n(mut self, k_n: usize) -> Self {
        self.k_n = Some(k_n);
        self.c = Some(k_n as f64 / self.hidden_count() as f64);
        self
    }

    pub fn with_c(mut self, c: f64) -> Self {
        self.c = Some(c);
        self
    }

    pub fn hidden_count(&self) -> usize {
        self.z * self.m
    }

    /// `M v*^2 / 6`: the error of a student with no output.
    pub fn silent_ge(&self) -> f64 {
        self.m as f64 * self.v_star * self.v_star / 6.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.z == 0 {
            return Err(Error::InvalidArgument(format!("need M, Z >= 1, got {}, {}", self.m, self.z)));
        }
        if !self.v_star.is_finite() {
            return Err(Error::InvalidArgument("v* must be finite".into()));
        }
        if let Some(c) = self.c {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidArgument(format!("c = {c} outside [0, 1]")));
            }
        }
        if let (Some(k), Some(c)) = (self.k_n, self.c) {
            if (c * self.hidden_count() as f64 - k as f64).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("c = {c} does not match k_n = {k}")));
            }
        }
        Ok(())
    }

    fn node_budget(&self, max: usize) -> Result<usize> {
        self.validate()?;
        let k = self.k_n.ok_or_else(|| Error::InvalidArgument("k_n not set".into()))?;
        if k > max {
            return Err(Error::TheoremDomain(format!("k_n = {k} exceeds {max}")));
        }
        Ok(k)
    }

    fn keep_fraction(&self) -> Result<f64> {
        self.validate()?;
        self.c.ok_or_else(|| Error::InvalidArgument("c not set".into()))
    }
}

/// DPP node pruning keeps at most one node per block; `k_n <= M`.
pub fn thm1_ge_dpp(p: &TheoryParams) -> Result<f64> {
    let k = p.node_budget(p.m)? as f64;
    let z = p.z as f64;
    let tail = 1.0 - 1.0 / z;
    Ok(p.v_star * p.v_star * (k / 6.0 * tail * tail + (p.m as f64 - k) / 6.0))
}

/// As [`thm1_ge_dpp`] after the survivors' second layer absorbs their block.
pub fn thm1_ge_dpp_reweighted(p: &TheoryParams) -> Result<f64> {
    let k = p.node_budget(p.m)? as f64;
    Ok((p.m as f64 - k) * p.v_star * p.v_star / 6.0)
}

fn check_occupancy(occupancy: &[usize], z: usize) -> Result<()> {
    if z == 0 {
        return Err(Error::InvalidArgument("Z must be positive".into()));
    }
    if let Some(&l) = occupancy.iter().find(|&&l| l > z) {
        return Err(Error::InvalidArgument(format!("occupancy {l} exceeds block size {z}")));
    }
    Ok(())
}

/// Error of a node-pruned student keeping `l_m` nodes of block `m`.
pub fn lemma_np_ge(occupancy: &[usize], z: usize, v_star: f64) -> Result<f64> {
    check_occupancy(occupancy, z)?;
    let zf = z as f64;
    let s: f64 = occupancy.iter().map(|&l| (1.0 - l as f64 / zf).powi(2)).sum();
    Ok(v_star * v_star / 6.0 * s)
}

/// As [`lemma_np_ge`] after reweighting: only empty blocks contribute.
pub fn lemma_np_ge_reweighted(occupancy: &[usize], z: usize, v_star: f64) -> Result<f64> {
    check_occupancy(occupancy, z)?;
    let empty = occupancy.iter().filter(|&&l| l == 0).count() as f64;
    Ok(v_star * v_star / 6.0 * empty)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    // Each partial product is itself a binomial, so the division is exact.
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// `P(l)` for the number of survivors `l` in one block when `k_n` of the
/// `K` nodes are kept uniformly at random.
fn block_occupancy_pmf(p: &TheoryParams, k_n: usize) -> Result<Vec<f64>> {
    let k = p.hidden_count();
    if k > MAX_ENUMERATED_HIDDEN {
        return Err(Error::EnumerationTooLarge { n: k, max: MAX_ENUMERATED_HIDDEN });
    }
    let total = binomial(k, k_n) as f64;
    Ok((0..=p.z)
        .map(|l| match k_n.checked_sub(l) {
            Some(rest) => (binomial(p.z, l) * binomial(k - p.z, rest)) as f64 / total,
            None => 0.0,
        })
        .collect())
}

/// Expected [`lemma_np_ge`] under uniform random node selection. The error
/// is a sum over blocks, so only the one-block hypergeometric marginal is
/// needed.
pub fn expected_rand_node_ge(p: &TheoryParams) -> Result<f64> {
    let k_n = p.node_budget(p.hidden_count())?;
    let pmf = block_occupancy_pmf(p, k_n)?;
    let zf = p.z as f64;
    let per_block: f64 = pmf.iter().enumerate().map(|(l, pr)| pr * (1.0 - l as f64 / zf).powi(2)).sum();
    Ok(p.v_star * p.v_star / 6.0 * p.m as f64 * per_block)
}

/// Expected [`lemma_np_ge_reweighted`] under uniform random node selection.
pub fn expected_rand_node_ge_reweighted(p: &TheoryParams) -> Result<f64> {
    let k_n = p.node_budget(p.hidden_count())?;
    let pmf = block_occupancy_pmf(p, k_n)?;
    Ok(p.silent_ge() * pmf[0])
}

fn edge_terms(c: f64, z: usize) -> (f64, f64) {
    let zf = z as f64;
    let self_term = (c / (1.0 + c)).asin() / zf + (1.0 - 1.0 / zf) * (c * c / (1.0 + c)).asin();
    let cross = (c / (2.0 * (1.0 + c)).sqrt()).asin();
    (self_term, cross)
}

/// Error of the expected network after keeping each first-layer edge with
/// probability `c`.
pub fn thm3_ge_rand_edge(p: &TheoryParams) -> Result<f64> {
    thm5_ge_rw_rand_edge(p, 1.0)
}

/// As [`thm3_ge_rand_edge`] with the second layer scaled by `a`.
pub fn thm5_ge_rw_rand_edge(p: &TheoryParams, a: f64) -> Result<f64> {
    let c = p.keep_fraction()?;
    let (self_term, cross) = edge_terms(c, p.z);
    let m = p.m as f64;
    Ok(m * p.v_star * p.v_star / PI * (a * a * self_term + PI / 6.0 - 2.0 * a * cross))
}

/// Mean order parameters over Bernoulli(`c`) edge masks: off-diagonal `Q`
/// scales by `c^2`, diagonal `Q` and `R` by `c`.
pub fn expected_edge_order_params(op: &OrderParams, c: f64) -> Result<OrderParams> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("c = {c} outside [0, 1]")));
    }
    let k = op.q.nrows();
    let q = Array2::from_shape_fn((k, k), |(i, j)| op.q[[i, j]] * if i == j { c } else { c * c });
    Ok(OrderParams { q, r: &op.r * c, t: op.t.clone() })
}

/// Theorem-inequality differences over `(Z, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffGrid {
    pub z_values: Vec<usize>,
    /// One row of keep fractions per `Z`; the range `[0, 1/Z]` depends on `Z`.
    pub c_values: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl DiffGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Z,c,diff\n");
        for ((z, cs), vs) in self.z_values.iter().zip(&self.c_values).zip(&self.values) {
            for (c, v) in cs.iter().zip(vs) {
                out.push_str(&format!("{z},{c},{v}\n"));
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.z_values
            .iter()
            .zip(&self.c_values)
            .zip(&self.values)
            .flat_map(|((&z, cs), vs)| cs.iter().zip(vs).map(move |(&c, &v)| (z, c, v)))
    }
}

/// Exact points `k_n / (Z M)` for `k_n` in `first..=M`, merged with
/// `c_resolution` evenly spaced points on `[0, 1/Z]` (zero excluded when
/// `first > 0`).
fn c_axis(m: usize, z: usize, first: usize, c_resolution: usize) -> Vec<f64> {
    let k = (z * m) as f64;
    let mut cs: Vec<f64> = (first..=m).map(|kn| kn as f64 / k).collect();
    for j in 1..c_resolution {
        cs.push(j as f64 / (c_resolution as f64 * z as f64));
    }
    cs.sort_by(f64::total_cmp);
    cs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    cs
}

fn check_grid_z(z_values: &[usize]) -> Result<()> {
    if let Some(&z) = z_values.iter().find(|&&z| z < 4) {
        return Err(Error::TheoremDomain(format!("grid needs Z >= 4, got {z}")));
    }
    Ok(())
}

fn dpp_node_ge_continuous(m: usize, z: usize, v_star: f64, c: f64, reweighted: bool) -> f64 {
    let kn = c * (z * m) as f64;
    let tail = if reweighted { 0.0 } else { (1.0 - 1.0 / z as f64).powi(2) };
    v_star * v_star * (kn / 6.0 * tail + (m as f64 - kn) / 6.0)
}

/// DPP-node error minus random-edge error at matched parameter counts.
/// Between exact points the node budget `k_n = c Z M` is treated as real.
pub fn thm4_grid(m: usize, v_star: f64, z_values: &[usize], c_resolution: usize) -> Result<DiffGrid> {
    check_grid_z(z_values)?;
    let mut c_values = Vec::with_capacity(z_values.len());
    let mut values = Vec::with_capacity(z_values.len());
    for &z in z_values {
        let cs = c_axis(m, z, 0, c_resolution);
        let row = cs
            .iter()
            .map(|&c| {
                if c == 0.0 {
                    return Ok(0.0);
                }
                let edge = thm3_ge_rand_edge(&TheoryParams::new(m, z, v_star).with_c(c))?;
                Ok(dpp_node_ge_continuous(m, z, v_star, c, false) - edge)
            })
            .collect::<Result<Vec<_>>>()?;
        c_values.push(cs);
        values.push(row);
    }
    Ok(DiffGrid { z_values: z_values.to_vec(), c_values, values })
}

/// Reweighted DPP-node error minus optimally rescaled random-edge error.
pub fn thm5_grid(m: usize, v_star: f64, z_values: &[usize], c_resolution: usize) -> Result<DiffGrid> {
    check_grid_z(z_values)?;
    let mut c_values = Vec::with_capacity(z_values.len());
    let mut values = Vec::with_capacity(z_values.len());
    for &z in z_values {
        let cs = c_axis(m, z, 1, c_resolution);
        let row = cs
            .iter()
            .map(|&c| {
                let a = optimal_edge_scale(c, z)?;
                let edge = thm5_ge_rw_rand_edge(&TheoryParams::new(m, z, v_star).with_c(c), a)?;
                Ok(dpp_node_ge_continuous(m, z, v_star, c, true) - edge)
            })
            .collect::<Result<Vec<_>>>()?;
        c_values.push(cs);
        values.push(row);
    }
    Ok(DiffGrid { z_values: z_values.to_vec(), c_values, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::ge_closed_form;
    use itertools::Itertools;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn p(m: usize, z: usize, v: f64, k: usize) -> TheoryParams {
        TheoryParams::new(m, z, v).with_k_n(k)
    }

    #[test]
    fn thm1_values() {
        assert!((thm1_ge_dpp(&p(2, 3, 4.0, 2)).unwrap() - 64.0 / 27.0).abs() < 1e-12);
        assert_eq!(thm1_ge_dpp(&p(3, 1, 2.0, 3)).unwrap(), 0.0);
        assert!((thm1_ge_dpp(&p(2, 3, 4.0, 0)).unwrap() - 16.0 / 3.0).abs() < 1e-12);
        assert!(matches!(thm1_ge_dpp(&p(2, 3, 4.0, 3)), Err(Error::TheoremDomain(_))));
        assert_eq!(thm1_ge_dpp_reweighted(&p(2, 3, 4.0, 2)).unwrap(), 0.0);
        assert!((thm1_ge_dpp_reweighted(&p(2, 3, 4.0, 0)).unwrap() - 16.0 / 3.0).abs() < 1e-12);
        assert!(thm1_ge_dpp(&TheoryParams::new(2, 3, 4.0)).is_err());
    }

    #[test]
    fn lemma_values() {
        assert_eq!(lemma_np_ge(&[3, 3], 3, 4.0).unwrap(), 0.0);
        assert!((lemma_np_ge(&[0, 0], 3, 4.0).unwrap() - 16.0 / 3.0).abs() < 1e-12);
        assert!(lemma_np_ge(&[4, 0], 3, 4.0).is_err());
        assert!((lemma_np_ge_reweighted(&[0, 2], 3, 4.0).unwrap() - 16.0 / 6.0).abs() < 1e-12);
        for m in 1..6 {
            for z in 1..6 {
                let ones = vec![1; m];
                let a = lemma_np_ge(&ones, z, 1.7).unwrap();
                let b = thm1_ge_dpp(&p(m, z, 1.7, m)).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Averages the lemma over every size-`k_n` subset of the `K` nodes.
    fn rand_node_by_subsets(m: usize, z: usize, v: f64, k_n: usize) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for subset in (0..z * m).combinations(k_n) {
            let mut occ = vec![0; m];
            subset.iter().for_each(|&i| occ[i / z] += 1);
            sum += lemma_np_ge(&occ, z, v).unwrap();
            count += 1;
        }
        sum / count as f64
    }

    #[test]
    fn random_node_expectation() {
        let hand = (6.0 / 15.0) * (160.0 / 54.0) + (9.0 / 15.0) * (128.0 / 54.0);
        let got = expected_rand_node_ge(&p(2, 3, 4.0, 2)).unwrap();
        assert!((got - hand).abs() < 1e-12, "{got}");
        assert!((got - 2.6074).abs() < 1e-4);
        assert_eq!(expected_rand_node_ge(&p(2, 3, 4.0, 6)).unwrap(), 0.0);
        for (m, z) in [(2, 3), (3, 2), (2, 4), (3, 3)] {
            for k in 0..=m * z {
                let a = expected_rand_node_ge(&p(m, z, 1.3, k)).unwrap();
                let b = rand_node_by_subsets(m, z, 1.3, k);
                assert!((a - b).abs() < 1e-12, "{m} {z} {k}");
            }
        }
        assert!(matches!(
            expected_rand_node_ge(&p(5, 13, 1.0, 2)),
            Err(Error::EnumerationTooLarge { .. })
        ));
        assert_eq!(binomial(64, 32), 1_832_624_140_942_590_534);
    }

    #[test]
    fn random_node_worse_than_dpp_node() {
        // A single kept node, or a single block, always has occupancy of
        // ones, so the two coincide there; strict from k_n = 2 on.
        for m in 1..=6 {
            for z in 2..=8 {
                for k in 1..=m {
                    let q = p(m, z, 1.0, k);
                    let (rand, dpp) = (expected_rand_node_ge(&q).unwrap(), thm1_ge_dpp(&q).unwrap());
                    let (rand_rw, dpp_rw) =
                        (expected_rand_node_ge_reweighted(&q).unwrap(), thm1_ge_dpp_reweighted(&q).unwrap());
                    if k == 1 {
                        assert!((rand - dpp).abs() < 1e-14 && (rand_rw - dpp_rw).abs() < 1e-14);
                    } else {
                        assert!(rand > dpp, "M={m} Z={z} k_n={k}: {rand} <= {dpp}");
                        assert!(rand_rw > dpp_rw, "M={m} Z={z} k_n={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn rand_edge_endpoints_and_monotone() {
        let base = TheoryParams::new(2, 3, 4.0);
        assert!((thm3_ge_rand_edge(&base.with_c(0.0)).unwrap() - 16.0 / 3.0).abs() < 1e-12);
        for z in 1..8 {
            assert!(thm3_ge_rand_edge(&TheoryParams::new(2, z, 4.0).with_c(1.0)).unwrap().abs() < 1e-12);
        }
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let g = thm3_ge_rand_edge(&base.with_c(i as f64 / 1000.0)).unwrap();
            assert!(g <= prev + 1e-12);
            prev = g;
        }
        assert!(thm3_ge_rand_edge(&base.with_c(1.5)).is_err());
    }

    #[test]
    fn rescaled_edge_consistency() {
        let q = TheoryParams::new(2, 3, 4.0).with_c(0.3);
        assert!((thm5_ge_rw_rand_edge(&q, 0.0).unwrap() - 16.0 / 3.0).abs() < 1e-12);
        assert!((thm5_ge_rw_rand_edge(&q, 1.0).unwrap() - thm3_ge_rand_edge(&q).unwrap()).abs() < 1e-15);
        for z in [1, 2, 3, 6] {
            for c in [0.05, 1.0 / 6.0, 0.3, 0.7, 1.0] {
                let q = TheoryParams::new(2, z, 4.0).with_c(c);
                // A* grows like Z / sqrt(2) as c -> 0, past the [0, 3] range.
                let best = (0..=10_000)
                    .map(|i| i as f64 * 1e-3)
                    .min_by(|&a, &b| {
                        thm5_ge_rw_rand_edge(&q, a).unwrap().total_cmp(&thm5_ge_rw_rand_edge(&q, b).unwrap())
                    })
                    .unwrap();
                assert!((best - optimal_edge_scale(c, z).unwrap()).abs() <= 1e-3, "Z={z} c={c}");
            }
        }
    }

    /// Order parameters of a student made of `z` exact copies of each of `m`
    /// orthonormal teacher rows.
    fn specialized(m: usize, z: usize) -> OrderParams {
        let k = m * z;
        OrderParams {
            q: Array2::from_shape_fn((k, k), |(i, j)| if i / z == j / z { 1.0 } else { 0.0 }),
            r: Array2::from_shape_fn((k, m), |(i, n)| if i / z == n { 1.0 } else { 0.0 }),
            t: Array2::eye(m),
        }
    }

    #[test]
    fn expected_order_params_edges() {
        let op = specialized(2, 3);
        assert_eq!(expected_edge_order_params(&op, 1.0).unwrap(), op);
        let zero = expected_edge_order_params(&op, 0.0).unwrap();
        assert!(zero.q.iter().chain(zero.r.iter()).all(|&x| x == 0.0));
        assert_eq!(zero.t, op.t);
        assert!(expected_edge_order_params(&op, -0.1).is_err());
    }

    #[test]
    fn closed_form_on_expected_params_matches_rand_edge() {
        for (m, z) in [(2, 3), (1, 4), (3, 2), (5, 5)] {
            let op = specialized(m, z);
            let v_star = Array1::from_elem(m, 4.0);
            for c in [0.0, 0.1, 1.0 / 3.0, 0.5, 0.9, 1.0] {
                let e = expected_edge_order_params(&op, c).unwrap();
                for a in [1.0, 0.7, 2.2] {
                    let v = Array1::from_elem(m * z, a * 4.0 / z as f64);
                    let closed = ge_closed_form(&e, v.view(), v_star.view()).unwrap();
                    let thm = thm5_ge_rw_rand_edge(&TheoryParams::new(m, z, 4.0).with_c(c), a).unwrap();
                    assert!((closed - thm).abs() < 1e-10, "M={m} Z={z} c={c} A={a}");
                }
            }
        }
    }

    #[test]
    fn diff_grids_have_theorem_signs() {
        let zs: Vec<usize> = (4..=30).collect();
        let g4 = thm4_grid(5, 1.0, &zs, 50).unwrap();
        assert!(g4.iter().all(|(_, _, d)| d >= 0.0));
        assert!(g4.iter().filter(|&(_, c, _)| c == 0.0).all(|(_, _, d)| d == 0.0));
        let g5 = thm5_grid(5, 1.0, &zs, 50).unwrap();
        assert!(g5.iter().all(|(_, _, d)| d <= 0.0));
        assert!(g5.iter().all(|(_, c, _)| c > 0.0));
        for (z, cs) in g4.z_values.iter().zip(&g4.c_values) {
            assert!(cs.iter().all(|&c| c <= 1.0 / *z as f64 + 1e-12));
            for kn in 0..=5 {
                assert!(cs.iter().any(|&c| (c - kn as f64 / (5 * z) as f64).abs() < 1e-15));
            }
        }
        let scaled = thm4_grid(5, 3.0, &zs, 50).unwrap();
        for ((_, _, a), (_, _, b)) in g4.iter().zip(scaled.iter()) {
            assert!((9.0 * a - b).abs() < 1e-12);
        }
        assert!(matches!(thm4_grid(5, 1.0, &[3, 4], 10), Err(Error::TheoremDomain(_))));
        assert!(thm5_grid(5, 1.0, &[2], 10).is_err());
        let csv = thm4_grid(2, 1.0, &[4], 2).unwrap().to_csv();
        assert!(csv.starts_with("Z,c,diff\n4,0,0\n"));
    }

    proptest! {
        #[test]
        fn reweighting_never_hurts_dpp(m in 1usize..8, z in 1usize..8, v in 0.1f64..10.0, frac in 0.0f64..=1.0) {
            let k = (frac * m as f64) as usize;
            let q = p(m, z, v, k);
            prop_assert!(thm1_ge_dpp_reweighted(&q).unwrap() <= thm1_ge_dpp(&q).unwrap() + 1e-12);
        }

        #[test]
        fn optimal_scale_minimizes(z in 1usize..20, c in 0.001f64..=1.0, da in -0.5f64..0.5) {
            let q = TheoryParams::new(2, z, 1.0).with_c(c);
            let a = optimal_edge_scale(c, z).unwrap();
            prop_assert!(thm5_ge_rw_rand_edge(&q, a).unwrap() <= thm5_ge_rw_rand_edge(&q, a + da).unwrap() + 1e-12);
        }
    }
}
