//! Order parameters, specialization groups and generalization error.
//!
//! For standard-normal inputs the local fields of any pair of networks are
//! jointly Gaussian with covariances `Q`, `R`, `T`, so the arcsin closed form
//! below is the exact expected error at every input dimension, not only in
//! the large-`N` limit. The Monte-Carlo estimators are the independent check.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};
use crate::netcore::{activation, fill_standard_normal, TwoLayerNet};
use crate::rng;

/// Slack allowed on arcsin arguments before clamping becomes an error.
pub const ARCSIN_TOLERANCE: f64 = 1e-9;

/// Rows generated per block when streaming a test set.
const TEST_CHUNK: usize = 1024;

/// Overlap matrices: student-student `q` (K x K), student-teacher `r`
/// (K x M) and teacher-teacher `t` (M x M), all normalized by `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParams {
    #[serde(with = "rows")]
    pub q: Array2<f64>,
    #[serde(with = "rows")]
    pub r: Array2<f64>,
    #[serde(with = "rows")]
    pub t: Array2<f64>,
}

/// Row-major `Vec<Vec<f64>>` (de)serialization for dense matrices.
pub mod rows {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>, String> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| e.to_string())
    }
}

impl OrderParams {
    pub fn student_count(&self) -> usize {
        self.q.nrows()
    }

    pub fn teacher_count(&self) -> usize {
        self.t.nrows()
    }

    fn validate_shapes(&self) -> Result<()> {
        let (k, m) = (self.q.nrows(), self.t.nrows());
        check_dim("Q columns", k, self.q.ncols())?;
        check_dim("T columns", m, self.t.ncols())?;
        check_dim("R rows", k, self.r.nrows())?;
        check_dim("R columns", m, self.r.ncols())
    }

    /// Student-student overlaps normalized to cosines. Rows with zero norm
    /// give zeros.
    pub fn q_cosine(&self) -> Array2<f64> {
        let d = self.q.diag().mapv(f64::sqrt);
        Array2::from_shape_fn(self.q.dim(), |(i, k)| {
            let n = d[i] * d[k];
            if n > 0.0 { self.q[[i, k]] / n } else { 0.0 }
        })
    }

    /// Student-teacher overlaps normalized to cosines.
    pub fn r_cosine(&self) -> Array2<f64> {
        let dq = self.q.diag().mapv(f64::sqrt);
        let dt = self.t.diag().mapv(f64::sqrt);
        Array2::from_shape_fn(self.r.dim(), |(i, n)| {
            let s = dq[i] * dt[n];
            if s > 0.0 { self.r[[i, n]] / s } else { 0.0 }
        })
    }
}

/// `Q = w w^T / N`, `R = w w*^T / N`, `T = w* w*^T / N`.
pub fn order_params(student: &TwoLayerNet, teacher: &TwoLayerNet) -> Result<OrderParams> {
    check_dim("teacher input dimension", student.input_dim(), teacher.input_dim())?;
    let n = student.input_dim() as f64;
    let (w, ws) = (student.w(), teacher.w());
    Ok(OrderParams {
        q: w.dot(&w.t()) / n,
        r: w.dot(&ws.t()) / n,
        t: ws.dot(&ws.t()) / n,
    })
}

fn clamped_arcsin(num: f64, diag_a: f64, diag_b: f64, what: &str) -> Result<f64> {
    let arg = num / ((1.0 + diag_a) * (1.0 + diag_b)).sqrt();
    if !arg.is_finite() || arg.abs() > 1.0 + ARCSIN_TOLERANCE {
        return Err(Error::AnalyticDomain(format!(
            "{what} arcsin argument {arg} outside [-1, 1]"
        )));
    }
    Ok(arg.clamp(-1.0, 1.0).asin())
}

/// Closed-form generalization error `f1(Q) + f2(T) - f3(R, Q, T)` with
///
/// ```text
/// f1 = 1/pi sum_ik v_i v_k asin(Q_ik / sqrt((1+Q_ii)(1+Q_kk)))
/// f2 = 1/pi sum_nm v*_n v*_m asin(T_nm / sqrt((1+T_nn)(1+T_mm)))
/// f3 = 2/pi sum_in v_i v*_n asin(R_in / sqrt((1+Q_ii)(1+T_nn)))
/// ```
///
/// The result can dip below zero by rounding; callers that report it should
/// clamp.
pub fn ge_closed_form(op: &OrderParams, v: ArrayView1<f64>, v_star: ArrayView1<f64>) -> Result<f64> {
    op.validate_shapes()?;
    check_dim("student second layer", op.student_count(), v.len())?;
    check_dim("teacher second layer", op.teacher_count(), v_star.len())?;
    let (k, m) = (op.student_count(), op.teacher_count());
    let (q, r, t) = (&op.q, &op.r, &op.t);

    let mut f1 = 0.0;
    for i in 0..k {
        for j in 0..k {
            f1 += v[i] * v[j] * clamped_arcsin(q[[i, j]], q[[i, i]], q[[j, j]], "Q")?;
        }
    }
    let mut f2 = 0.0;
    for a in 0..m {
        for b in 0..m {
            f2 += v_star[a] * v_star[b] * clamped_arcsin(t[[a, b]], t[[a, a]], t[[b, b]], "T")?;
        }
    }
    let mut f3 = 0.0;
    for i in 0..k {
        for a in 0..m {
            f3 += v[i] * v_star[a] * clamped_arcsin(r[[i, a]], q[[i, i]], t[[a, a]], "R")?;
        }
    }
    Ok((f1 + f2 - 2.0 * f3) / PI)
}

/// Closed-form error of a student against a teacher.
pub fn ge_between(student: &TwoLayerNet, teacher: &TwoLayerNet) -> Result<f64> {
    let op = order_params(student, teacher)?;
    ge_closed_form(&op, student.v().view(), teacher.v().view())
}

/// Monte-Carlo error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeEstimate {
    pub value: f64,
    pub std_err: f64,
    pub n_samples: usize,
}

/// Streaming mean and variance; merge is Chan's parallel update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / total as f64;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / total as f64;
        self.count = total;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance (n - 1 denominator); zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 { 0.0 } else { self.m2 / (self.count - 1) as f64 }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn estimate(&self) -> GeEstimate {
        GeEstimate {
            value: self.mean,
            std_err: if self.count == 0 { 0.0 } else { self.std_dev() / (self.count as f64).sqrt() },
            n_samples: self.count,
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::default();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

/// A reproducible held-out set of standard-normal inputs, regenerated in
/// fixed-size blocks from its seed instead of being stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestSet {
    pub seed: u64,
    pub n: usize,
    pub input_dim: usize,
}

impl TestSet {
    pub fn new(seed: u64, n: usize, input_dim: usize) -> Self {
        Self { seed, n, input_dim }
    }

    /// Calls `f` on consecutive row blocks; the concatenation is the same
    /// `n x input_dim` matrix on every call.
    pub fn for_each_chunk<F: FnMut(ArrayView2<f64>)>(&self, mut f: F) {
        let mut rng = rng::stream(self.seed);
        let mut buf = Array2::<f64>::zeros((TEST_CHUNK, self.input_dim));
        let mut done = 0;
        while done < self.n {
            let rows = TEST_CHUNK.min(self.n - done);
            let mut block = buf.slice_mut(s![..rows, ..]);
            fill_standard_normal(block.as_slice_mut().expect("contiguous rows"), &mut rng);
            f(buf.slice(s![..rows, ..]));
            done += rows;
        }
    }

    /// Materializes the whole set. Only for small sets and tests.
    pub fn to_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.input_dim));
        let mut at = 0;
        self.for_each_chunk(|c| {
            out.slice_mut(s![at..at + c.nrows(), ..]).assign(&c);
            at += c.nrows();
        });
        out
    }
}

/// `1/2 <(phi_student - phi_teacher)^2>` over `n_test` fresh inputs drawn
/// from `rng`. Label noise never enters.
pub fn ge_monte_carlo<R: Rng + ?Sized>(
    student: &TwoLayerNet,
    teacher: &TwoLayerNet,
    n_test: usize,
    rng: &mut R,
) -> Result<GeEstimate> {
    if n_test < 100 {
        return Err(Error::InvalidArgument(format!("n_test must be >= 100, got {n_test}")));
    }
    let test = TestSet::new(rng.random(), n_test, teacher.input_dim());
    let mut out = ge_on_test_set(std::slice::from_ref(student), &[1.0], teacher, &test)?;
    Ok(out.remove(0).remove(0))
}

/// Monte-Carlo error of many students on one shared test set.
///
/// Each student is also evaluated with its output multiplied by every entry
/// of `output_scales`; `result[s][j]` is student `s` at scale `j`. All first
/// layers go through a single matrix product per block of inputs.
pub fn ge_on_test_set(
    students: &[TwoLayerNet],
    output_scales: &[f64],
    teacher: &TwoLayerNet,
    test: &TestSet,
) -> Result<Vec<Vec<GeEstimate>>> {
    check_dim("test set input dimension", teacher.input_dim(), test.input_dim)?;
    let n = test.input_dim;
    let mut offsets = Vec::with_capacity(students.len() + 1);
    let mut rows = 0;
    for s in students {
        check_dim("student input dimension", n, s.input_dim())?;
        offsets.push(rows);
        rows += s.hidden_count();
    }
    offsets.push(rows);
    let m = teacher.hidden_count();

    let mut stacked = Array2::<f64>::zeros((rows + m, n));
    for (s, &off) in students.iter().zip(&offsets) {
        stacked.slice_mut(s![off..off + s.hidden_count(), ..]).assign(s.w());
    }
    stacked.slice_mut(s![rows.., ..]).assign(teacher.w());
    let stacked_t = stacked.t();
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();

    let mut stats = vec![vec![RunningStats::default(); output_scales.len()]; students.len()];
    test.for_each_chunk(|xs| {
        let mut acts = xs.dot(&stacked_t);
        acts.mapv_inplace(|f| activation(f * inv_sqrt_n));
        let target = acts.slice(s![.., rows..]).dot(teacher.v());
        for (si, st) in students.iter().enumerate() {
            let out = acts.slice(s![.., offsets[si]..offsets[si + 1]]).dot(st.v());
            for (j, &scale) in output_scales.iter().enumerate() {
                let chunk: RunningStats = out
                    .iter()
                    .zip(target.iter())
                    .map(|(&o, &t)| {
                        let d = scale * o - t;
                        0.5 * d * d
                    })
                    .collect();
                stats[si][j].merge(&chunk);
            }
        }
    });
    Ok(stats
        .into_iter()
        .map(|row| row.into_iter().map(|s| s.estimate()).collect())
        .collect())
}

/// Student hidden activations and teacher outputs on a test set, cached so
/// any node subset with any second layer can be scored in O(n k).
#[derive(Debug, Clone)]
pub struct ActivationCache {
    acts: Array2<f64>,
    target: Array1<f64>,
}

impl ActivationCache {
    pub fn build(student: &TwoLayerNet, teacher: &TwoLayerNet, test: &TestSet) -> Result<Self> {
        check_dim("teacher input dimension", student.input_dim(), teacher.input_dim())?;
        check_dim("test set input dimension", student.input_dim(), test.input_dim)?;
        let k = student.hidden_count();
        let mut acts = Array2::zeros((test.n, k));
        let mut target = Array1::zeros(test.n);
        let mut at = 0;
        test.for_each_chunk(|xs| {
            let rows = xs.nrows();
            let a = student.activations_batch(xs).expect("checked dimensions");
            acts.slice_mut(s![at..at + rows, ..]).assign(&a);
            let t = teacher.forward_batch(xs).expect("checked dimensions");
            target.slice_mut(s![at..at + rows]).assign(&t);
            at += rows;
        });
        Ok(Self { acts, target })
    }

    pub fn hidden_count(&self) -> usize {
        self.acts.ncols()
    }

    /// Error of the network restricted to `kept` hidden nodes with second
    /// layer `v_kept` (aligned with `kept`).
    pub fn ge_subset(&self, kept: &[usize], v_kept: &[f64]) -> Result<GeEstimate> {
        check_dim("kept second layer", kept.len(), v_kept.len())?;
        if let Some(&bad) = kept.iter().find(|&&i| i >= self.hidden_count()) {
            return Err(Error::InvalidArgument(format!("hidden index {bad} out of range")));
        }
        let sub = self.acts.select(Axis(1), kept);
        let out = sub.dot(&ArrayView1::from(v_kept));
        let stats: RunningStats = out
            .iter()
            .zip(self.target.iter())
            .map(|(&o, &t)| 0.5 * (o - t) * (o - t))
            .collect();
        Ok(stats.estimate())
    }
}

/// Which teacher node each student node has specialized on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    /// Zero-based teacher index per student node; `None` for dead nodes.
    pub group: Vec<Option<usize>>,
    /// Orientation of each student relative to its teacher: `+1` when it
    /// learned `w*`, `-1` when it learned `-w*` (with a negated second-layer
    /// weight, which computes the same function because `g` is odd).
    pub sign: Vec<f64>,
    /// Number of assigned student nodes per teacher node.
    pub occupancy: Vec<usize>,
}

impl GroupAssignment {
    /// Occupancy counting only the student nodes in `kept`.
    pub fn occupancy_of(&self, kept: &[usize]) -> Vec<usize> {
        let mut occ = vec![0; self.occupancy.len()];
        for &i in kept {
            if let Some(Some(g)) = self.group.get(i) {
                occ[*g] += 1;
            }
        }
        occ
    }

    /// Every teacher node is learned by exactly `z` students.
    pub fn is_specialized(&self, z: usize) -> bool {
        self.group.iter().all(Option::is_some) && self.occupancy.iter().all(|&l| l == z)
    }

    /// Number of teacher nodes with at least one assigned student.
    pub fn explained(&self) -> usize {
        self.occupancy.iter().filter(|&&l| l > 0).count()
    }

    /// Student indices grouped by teacher node.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.occupancy.len()];
        for (i, g) in self.group.iter().enumerate() {
            if let Some(g) = g {
                out[*g].push(i);
            }
        }
        out
    }

    /// Orientation-corrected second-layer sum per teacher node,
    /// `sum_{i in G_n} sign_i v_i`.
    pub fn group_sums(&self, v: ArrayView1<f64>) -> Vec<f64> {
        let mut sums = vec![0.0; self.occupancy.len()];
        for (i, g) in self.group.iter().enumerate() {
            if let Some(g) = g {
                sums[*g] += self.sign[i] * v[i];
            }
        }
        sums
    }

    /// Student order with groups contiguous (teacher order, then index);
    /// unassigned students last.
    pub fn block_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = self.members().into_iter().flatten().collect();
        order.extend((0..self.group.len()).filter(|&i| self.group[i].is_none()));
        order
    }
}

/// Assigns student `i` to the teacher node maximizing the magnitude of the
/// cosine `R_in / sqrt(Q_ii T_nn)`; ties go to the smaller teacher index.
/// Students with `Q_ii = 0` stay unassigned.
pub fn assign_groups(op: &OrderParams) -> GroupAssignment {
    let cos = op.r_cosine();
    let (k, m) = (op.student_count(), op.teacher_count());
    let mut occupancy = vec![0; m];
    let mut sign = vec![1.0; k];
    let group = (0..k)
        .map(|i| {
            if op.q[[i, i]] <= 0.0 || m == 0 {
                return None;
            }
            let mut best = 0;
            for n in 1..m {
                if cos[[i, n]].abs() > cos[[i, best]].abs() {
                    best = n;
                }
            }
            occupancy[best] += 1;
            if cos[[i, best]] < 0.0 {
                sign[i] = -1.0;
            }
            Some(best)
        })
        .collect();
    GroupAssignment { group, sign, occupancy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::forward;
    use crate::rng::stream;
    use ndarray::{array, Array1};
    use std::f64::consts::FRAC_2_PI;

    #[test]
    fn order_params_match_naive_loops() {
        let mut rng = stream(4);
        let s = TwoLayerNet::random(3, 5, &mut rng);
        let t = TwoLayerNet::random(2, 5, &mut rng);
        let op = order_params(&s, &t).unwrap();
        let dot = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
            let mut acc = 0.0;
            for j in 0..a.len() {
                acc += a[j] * b[j];
            }
            acc / 5.0
        };
        for i in 0..3 {
            for k in 0..3 {
                assert!((op.q[[i, k]] - dot(s.w().row(i), s.w().row(k))).abs() < 1e-12);
            }
            for n in 0..2 {
                assert!((op.r[[i, n]] - dot(s.w().row(i), t.w().row(n))).abs() < 1e-12);
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                assert!((op.t[[a, b]] - dot(t.w().row(a), t.w().row(b))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_networks_share_overlaps() {
        let net = TwoLayerNet::random(3, 8, &mut stream(9));
        let op = order_params(&net, &net).unwrap();
        assert_eq!(op.q, op.r);
        assert_eq!(op.q, op.t);
        assert!(ge_between(&net, &net).unwrap().abs() < 1e-12);
    }

    #[test]
    fn closed_form_hand_values() {
        let one = array![[1.0]];
        let op = OrderParams { q: one.clone(), r: one.clone(), t: one };
        let ge = ge_closed_form(&op, array![1.0].view(), array![1.0].view()).unwrap();
        assert!(ge.abs() < 1e-15);

        let op = OrderParams {
            q: Array2::eye(2),
            r: Array2::zeros((2, 2)),
            t: Array2::eye(2),
        };
        let ge = ge_closed_form(&op, Array1::zeros(2).view(), array![4.0, 4.0].view()).unwrap();
        assert!((ge - 32.0 / 6.0).abs() < 1e-12, "{ge}");
    }

    #[test]
    fn closed_form_rejects_out_of_domain() {
        let op = OrderParams {
            q: array![[1.0]],
            r: array![[3.0]],
            t: array![[1.0]],
        };
        assert!(matches!(
            ge_closed_form(&op, array![1.0].view(), array![1.0].view()),
            Err(Error::AnalyticDomain(_))
        ));
        // Within tolerance is silently clamped.
        let op = OrderParams {
            q: array![[1.0]],
            r: array![[2.0 * (1.0 + 5e-10)]],
            t: array![[1.0]],
        };
        assert!(ge_closed_form(&op, array![1.0].view(), array![1.0].view()).is_ok());
    }

    #[test]
    fn closed_form_permutation_invariant() {
        let mut rng = stream(17);
        let s = TwoLayerNet::random(4, 30, &mut rng);
        let t = TwoLayerNet::teacher(2, 30, 2.0, &mut rng);
        let op = order_params(&s, &t).unwrap();
        let base = ge_closed_form(&op, s.v().view(), t.v().view()).unwrap();
        let perm = [2, 0, 3, 1];
        let q = Array2::from_shape_fn((4, 4), |(i, k)| op.q[[perm[i], perm[k]]]);
        let r = Array2::from_shape_fn((4, 2), |(i, n)| op.r[[perm[i], n]]);
        let v = Array1::from_shape_fn(4, |i| s.v()[perm[i]]);
        let permuted = OrderParams { q, r, t: op.t.clone() };
        let ge = ge_closed_form(&permuted, v.view(), t.v().view()).unwrap();
        assert!((ge - base).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_identical_is_zero() {
        let mut rng = stream(2);
        let net = TwoLayerNet::random(3, 25, &mut rng);
        let est = ge_monte_carlo(&net, &net, 500, &mut rng).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.n_samples, 500);
        assert!(ge_monte_carlo(&net, &net, 99, &mut rng).is_err());
    }

    #[test]
    fn monte_carlo_silent_student() {
        let mut rng = stream(31);
        let teacher = TwoLayerNet::teacher(2, 400, 4.0, &mut rng);
        let student = TwoLayerNet::random(6, 400, &mut rng).with_v(Array1::zeros(6)).unwrap();
        let est = ge_monte_carlo(&student, &teacher, 20_000, &mut rng).unwrap();
        let closed = ge_between(&student, &teacher).unwrap();
        assert!((est.value - closed).abs() < 3.0 * est.std_err, "{est:?} vs {closed}");
        let t = order_params(&student, &teacher).unwrap().t;
        let mut half_teacher_power = 0.0;
        for m in 0..2 {
            for n in 0..2 {
                let c = t[[m, n]] / ((1.0 + t[[m, m]]) * (1.0 + t[[n, n]])).sqrt();
                half_teacher_power += 0.5 * 16.0 * FRAC_2_PI * c.asin();
            }
        }
        assert!((closed - half_teacher_power).abs() < 1e-12, "{closed}");
    }

    #[test]
    fn monte_carlo_matches_closed_form_and_scales() {
        let mut rng = stream(77);
        let teacher = TwoLayerNet::teacher(2, 60, 1.5, &mut rng);
        let student = TwoLayerNet::random(3, 60, &mut rng);
        let closed = ge_between(&student, &teacher).unwrap();
        let small = ge_monte_carlo(&student, &teacher, 40_000, &mut rng).unwrap();
        let large = ge_monte_carlo(&student, &teacher, 80_000, &mut rng).unwrap();
        assert!((large.value - closed).abs() <= 3.0 * large.std_err);
        let ratio = large.std_err / small.std_err;
        assert!((ratio - 0.5f64.sqrt()).abs() < 0.2 * 0.5f64.sqrt(), "ratio {ratio}");
    }

    #[test]
    fn batched_evaluation_matches_per_sample_loop() {
        let mut rng = stream(5);
        let teacher = TwoLayerNet::teacher(2, 12, 3.0, &mut rng);
        let a = TwoLayerNet::random(3, 12, &mut rng);
        let b = TwoLayerNet::random(1, 12, &mut rng);
        let test = TestSet::new(99, 2_500, 12);
        let got = ge_on_test_set(&[a.clone(), b.clone()], &[1.0, 0.5], &teacher, &test).unwrap();
        let xs = test.to_matrix();
        for (si, net) in [&a, &b].into_iter().enumerate() {
            for (j, scale) in [1.0, 0.5].into_iter().enumerate() {
                let naive: RunningStats = xs
                    .outer_iter()
                    .map(|x| {
                        let d = scale * forward(net, x).unwrap() - forward(&teacher, x).unwrap();
                        0.5 * d * d
                    })
                    .collect();
                assert!((got[si][j].value - naive.mean()).abs() < 1e-10);
                assert!((got[si][j].std_err - naive.estimate().std_err).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn activation_cache_matches_batched_evaluation() {
        let mut rng = stream(8);
        let teacher = TwoLayerNet::teacher(2, 16, 2.0, &mut rng);
        let student = TwoLayerNet::random(4, 16, &mut rng);
        let test = TestSet::new(3, 1_500, 16);
        let cache = ActivationCache::build(&student, &teacher, &test).unwrap();
        let kept = [0, 2];
        let v = [student.v()[0], student.v()[2]];
        let sub = crate::netcore::select_hidden(&student, &kept);
        let direct = ge_on_test_set(&[sub], &[1.0], &teacher, &test).unwrap()[0][0];
        let cached = cache.ge_subset(&kept, &v).unwrap();
        assert!((direct.value - cached.value).abs() < 1e-10);
        assert!(cache.ge_subset(&[7], &[1.0]).is_err());
    }

    #[test]
    fn groups_from_identical_rows() {
        let net = TwoLayerNet::random(3, 10, &mut stream(1));
        let g = assign_groups(&order_params(&net, &net).unwrap());
        assert_eq!(g.group, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(g.occupancy, vec![1, 1, 1]);
        assert!(g.is_specialized(1));
    }

    #[test]
    fn group_ties_and_dead_nodes() {
        let op = OrderParams {
            q: array![[1.0, 0.0], [0.0, 0.0]],
            r: array![[0.5, 0.5], [0.0, 0.0]],
            t: Array2::eye(2),
        };
        let g = assign_groups(&op);
        assert_eq!(g.group, vec![Some(0), None]);
        assert_eq!(g.sign[0], 1.0);
        assert_eq!(g.occupancy, vec![1, 0]);
        assert_eq!(g.occupancy_of(&[1]), vec![0, 0]);
        assert_eq!(g.explained(), 1);
    }

    #[test]
    fn mirrored_students_join_their_teacher() {
        let mut rng = stream(4);
        let teacher = TwoLayerNet::teacher(2, 40, 3.0, &mut rng);
        let mut w = Array2::zeros((4, 40));
        w.row_mut(0).assign(&teacher.w().row(0));
        w.row_mut(1).assign(&(-&teacher.w().row(0)));
        w.row_mut(2).assign(&teacher.w().row(1));
        w.row_mut(3).assign(&(-&teacher.w().row(1)));
        let student = TwoLayerNet::new(w, array![1.0, -2.0, 1.5, -1.5]).unwrap();
        let g = assign_groups(&order_params(&student, &teacher).unwrap());
        assert_eq!(g.group, vec![Some(0), Some(0), Some(1), Some(1)]);
        assert_eq!(g.sign, vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(g.group_sums(student.v().view()), vec![3.0, 3.0]);
        assert!(ge_between(&student, &teacher).unwrap().abs() < 1e-12);
        assert_eq!(g.block_order(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn running_stats_merge_is_exact() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let whole: RunningStats = xs.iter().copied().collect();
        let mut left: RunningStats = xs[..333].iter().copied().collect();
        let right: RunningStats = xs[333..].iter().copied().collect();
        left.merge(&right);
        assert!((left.mean() - whole.mean()).abs() < 1e-12);
        assert!((left.variance() - whole.variance()).abs() < 1e-9);
    }

    #[test]
    fn order_params_json_is_row_major() {
        let op = OrderParams {
            q: array![[1.0, 2.0], [3.0, 4.0]],
            r: array![[5.0], [6.0]],
            t: array![[7.0]],
        };
        let s = serde_json::to_string(&op).unwrap();
        assert_eq!(s, r#"{"q":[[1.0,2.0],[3.0,4.0]],"r":[[5.0],[6.0]],"t":[[7.0]]}"#);
        let back: OrderParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, op);
    }
}
