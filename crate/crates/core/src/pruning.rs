//! Node and edge pruning, parameter matching between the two, and
//! second-layer reweighting.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dpp::{sample_kdpp, DppKernel};
use crate::error::{check_dim, Error, Result};
use crate::netcore::{select_hidden, TwoLayerNet};

/// Default number of probe inputs used to fit reweighted second layers.
pub const DEFAULT_PROBE_SAMPLES: usize = 10_000;

const RIDGE: f64 = 1e-8;

/// Surviving hidden nodes, zero-based and strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMask {
    kept: Vec<usize>,
    hidden_count: usize,
}

impl NodeMask {
    pub fn new(mut kept: Vec<usize>, hidden_count: usize) -> Result<Self> {
        kept.sort_unstable();
        kept.dedup();
        if let Some(&bad) = kept.iter().find(|&&i| i >= hidden_count) {
            return Err(Error::InvalidArgument(format!("node {bad} outside hidden layer of {hidden_count}")));
        }
        Ok(Self { kept, hidden_count })
    }

    pub fn full(hidden_count: usize) -> Self {
        Self { kept: (0..hidden_count).collect(), hidden_count }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn k_n(&self) -> usize {
        self.kept.len()
    }

    pub fn hidden_count(&self) -> usize {
        self.hidden_count
    }
}

/// Surviving first-layer edges, one row per hidden node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEdgeMask", into = "RawEdgeMask")]
pub struct EdgeMask {
    kept: Array2<bool>,
    per_node_counts: Vec<usize>,
}

/// Row-major `'0'/'1'` bitstring form.
#[derive(Serialize, Deserialize)]
struct RawEdgeMask {
    rows: usize,
    cols: usize,
    bits: String,
}

impl TryFrom<RawEdgeMask> for EdgeMask {
    type Error = Error;

    fn try_from(raw: RawEdgeMask) -> Result<Self> {
        check_dim("edge mask bits", raw.rows * raw.cols, raw.bits.len())?;
        let bits = raw
            .bits
            .bytes()
            .map(|b| match b {
                b'0' => Ok(false),
                b'1' => Ok(true),
                _ => Err(Error::InvalidArgument(format!("bad mask bit {:?}", b as char))),
            })
            .collect::<Result<Vec<_>>>()?;
        let kept = Array2::from_shape_vec((raw.rows, raw.cols), bits).expect("length checked");
        Ok(EdgeMask::from_bools(kept))
    }
}

impl From<EdgeMask> for RawEdgeMask {
    fn from(m: EdgeMask) -> Self {
        RawEdgeMask {
            rows: m.kept.nrows(),
            cols: m.kept.ncols(),
            bits: m.kept.iter().map(|&b| if b { '1' } else { '0' }).collect(),
        }
    }
}

impl EdgeMask {
    pub fn from_bools(kept: Array2<bool>) -> Self {
        let per_node_counts = kept.outer_iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
        Self { kept, per_node_counts }
    }

    pub fn full(hidden_count: usize, input_dim: usize) -> Self {
        Self::from_bools(Array2::from_elem((hidden_count, input_dim), true))
    }

    pub fn kept(&self) -> &Array2<bool> {
        &self.kept
    }

    pub fn per_node_counts(&self) -> &[usize] {
        &self.per_node_counts
    }

    pub fn total_kept(&self) -> usize {
        self.per_node_counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mask {
    Node(NodeMask),
    Edge(EdgeMask),
}

/// Node/edge sizes with equal parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub k_n: usize,
    pub k_e: usize,
    pub c: f64,
}

fn check_k(k: usize, max: usize, what: &str) -> Result<()> {
    if k > max {
        return Err(Error::InvalidArgument(format!("{what} = {k} exceeds {max}")));
    }
    Ok(())
}

pub fn prune_random_node<R: Rng + ?Sized>(hidden_count: usize, k_n: usize, rng: &mut R) -> Result<NodeMask> {
    check_k(k_n, hidden_count, "k_n")?;
    NodeMask::new(sample(rng, hidden_count, k_n).into_vec(), hidden_count)
}

/// Keeps the `k_n` largest `|v_i|`; ties go to the smaller index.
pub fn prune_importance_node(v: ArrayView1<f64>, k_n: usize) -> Result<NodeMask> {
    check_k(k_n, v.len(), "k_n")?;
    NodeMask::new(top_k_by_magnitude(v, k_n), v.len())
}

pub fn prune_dpp_node<R: Rng + ?Sized>(kernel: &DppKernel, k_n: usize, rng: &mut R) -> Result<NodeMask> {
    let subset = sample_kdpp(kernel, k_n, rng)?;
    NodeMask::new(subset.into_vec(), kernel.size())
}

/// Keeps each edge independently with probability `c`.
pub fn prune_random_edge<R: Rng + ?Sized>(hidden_count: usize, input_dim: usize, c: f64, rng: &mut R) -> Result<EdgeMask> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("keep probability {c} outside [0, 1]")));
    }
    let kept = Array2::from_shape_simple_fn((hidden_count, input_dim), || rng.random::<f64>() < c);
    Ok(EdgeMask::from_bools(kept))
}

/// Keeps exactly `k_e` uniformly chosen incoming edges per hidden node.
pub fn prune_random_edge_exact<R: Rng + ?Sized>(
    hidden_count: usize,
    input_dim: usize,
    k_e: usize,
    rng: &mut R,
) -> Result<EdgeMask> {
    check_k(k_e, input_dim, "k_e")?;
    let mut kept = Array2::from_elem((hidden_count, input_dim), false);
    for mut row in kept.outer_iter_mut() {
        for j in sample(rng, input_dim, k_e) {
            row[j] = true;
        }
    }
    Ok(EdgeMask::from_bools(kept))
}

/// Per hidden node, keeps the `k_e` largest `|w_ij|`; ties go to the smaller
/// column.
pub fn prune_importance_edge(w: ArrayView2<f64>, k_e: usize) -> Result<EdgeMask> {
    check_k(k_e, w.ncols(), "k_e")?;
    let mut kept = Array2::from_elem(w.raw_dim(), false);
    for (row, mut out) in w.outer_iter().zip(kept.outer_iter_mut()) {
        for j in top_k_by_magnitude(row, k_e) {
            out[j] = true;
        }
    }
    Ok(EdgeMask::from_bools(kept))
}

fn top_k_by_magnitude(x: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    // Stable sort keeps the smaller index first among equal magnitudes.
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()));
    order.truncate(k);
    order
}

pub fn apply_node_mask(net: &TwoLayerNet, mask: &NodeMask) -> Result<TwoLayerNet> {
    check_dim("node mask size", net.hidden_count(), mask.hidden_count)?;
    Ok(select_hidden(net, &mask.kept))
}

pub fn apply_edge_mask(net: &TwoLayerNet, mask: &EdgeMask) -> Result<TwoLayerNet> {
    check_dim("edge mask rows", net.hidden_count(), mask.kept.nrows())?;
    check_dim("edge mask columns", net.input_dim(), mask.kept.ncols())?;
    let mut w = net.w().clone();
    w.zip_mut_with(&mask.kept, |x, &keep| {
        if !keep {
            *x = 0.0;
        }
    });
    Ok(TwoLayerNet::from_parts_unchecked(w, net.v().clone()))
}

pub fn apply_mask(net: &TwoLayerNet, mask: &Mask) -> Result<TwoLayerNet> {
    match mask {
        Mask::Node(m) => apply_node_mask(net, m),
        Mask::Edge(m) => apply_edge_mask(net, m),
    }
}

/// `c = k_n / K` and `k_e = round((k_n (1 + N) - K) / K)`: a node-pruned net
/// keeping `k_n` nodes and an edge-pruned net keeping `k_e` edges per node
/// have (up to rounding) the same number of parameters.
pub fn match_params(k_n: usize, hidden_count: usize, input_dim: usize) -> Result<MatchSpec> {
    if k_n == 0 || k_n > hidden_count {
        return Err(Error::InvalidArgument(format!("k_n = {k_n} outside 1..={hidden_count}")));
    }
    let k = hidden_count as f64;
    let k_e = ((k_n as f64 * (1.0 + input_dim as f64) - k) / k).round().max(0.0) as usize;
    Ok(MatchSpec { k_n, k_e: k_e.min(input_dim), c: k_n as f64 / k })
}

/// Gram matrix of a network's hidden activations over a probe set; fits any
/// node subset's second layer without touching the probes again.
#[derive(Debug, Clone)]
pub struct ProbeGram {
    gram: Array2<f64>,
    n_probes: usize,
}

impl ProbeGram {
    pub fn new(net: &TwoLayerNet, probes: ArrayView2<f64>) -> Result<Self> {
        let acts = net.activations_batch(probes)?;
        Ok(Self { gram: acts.t().dot(&acts), n_probes: probes.nrows() })
    }

    /// Least-squares second layer over `mask` reproducing the output of
    /// `original` (the network the Gram matrix was built from).
    pub fn reweight(&self, original: &TwoLayerNet, mask: &NodeMask) -> Result<TwoLayerNet> {
        check_dim("Gram size", self.gram.nrows(), original.hidden_count())?;
        check_dim("node mask size", original.hidden_count(), mask.hidden_count)?;
        let k = mask.k_n();
        if k == 0 {
            return Err(Error::InvalidArgument("cannot reweight an empty mask".into()));
        }
        if self.n_probes < 10 * k {
            return Err(Error::InvalidArgument(format!(
                "{} probes is fewer than 10 per kept node ({k})",
                self.n_probes
            )));
        }
        let sub = self.gram.select(Axis(0), &mask.kept);
        let rhs = sub.dot(original.v());
        let a = sub.select(Axis(1), &mask.kept);
        let ridge = RIDGE * a.diag().sum();
        if ridge <= 0.0 {
            log::warn!("probe activations vanish on the kept nodes; second layer set to zero");
            return Ok(select_hidden(original, &mask.kept).with_v(Array1::zeros(k))?);
        }
        let mat = DMatrix::from_fn(k, k, |i, j| a[[i, j]] + if i == j { ridge } else { 0.0 });
        let b = DVector::from_iterator(k, rhs.iter().copied());
        let v_hat = match mat.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                log::warn!("regularized probe Gram matrix not positive definite; using LU");
                mat.lu()
                    .solve(&b)
                    .ok_or_else(|| Error::InvalidArgument("degenerate probe set".into()))?
            }
        };
        select_hidden(original, &mask.kept).with_v(Array1::from_iter(v_hat.iter().copied()))
    }
}

/// Node-pruned `original` whose second layer is refit by ridge least squares
/// on `probe_inputs` to reproduce the unpruned output.
pub fn reweight_node(original: &TwoLayerNet, mask: &NodeMask, probe_inputs: ArrayView2<f64>) -> Result<TwoLayerNet> {
    ProbeGram::new(original, probe_inputs)?.reweight(original, mask)
}

/// Scales the second layer by `a`.
pub fn reweight_edge_scale(pruned: &TwoLayerNet, a: f64) -> TwoLayerNet {
    TwoLayerNet::from_parts_unchecked(pruned.w().clone(), pruned.v() * a)
}

/// Minimizer over `A` of the expected error of a random-edge pruned,
/// converged student whose second layer is scaled by `A`. Returns 0 at
/// `c = 0`, where every output is zero regardless of `A`.
pub fn optimal_edge_scale(c: f64, z: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) || z == 0 {
        return Err(Error::InvalidArgument(format!("need c in [0, 1] and Z >= 1, got {c}, {z}")));
    }
    if c == 0.0 {
        log::warn!("edge keep fraction is zero; scale is arbitrary, using 0");
        return Ok(0.0);
    }
    let zf = z as f64;
    let num = (c / (2.0 * (1.0 + c)).sqrt()).asin();
    let den = (c / (1.0 + c)).asin() / zf + (1.0 - 1.0 / zf) * (c * c / (1.0 + c)).asin();
    Ok(num / den)
}
