//! Divergence and mutual-information estimators built on critic fits.
//!
//! The divergence estimate between two empirical distributions is
//! `D̂_f = E_{Q_n}[t̂] − E_{P_n}[f†(t̂)]` where `t̂` minimizes the inner
//! objective (see [`crate::critic`]). Mutual information is estimated as the
//! divergence of the paired (joint) empirical distribution from the product
//! of the two marginals.

use crate::critic::{self, Critic, CriticClass, FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::fdiv::FDivergenceSpec;
use crate::seeds::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum sample count per side for estimation.
pub const MIN_SAMPLES: usize = 8;

/// Cap on the number of materialized product-of-marginals points; above this
/// the full n² enumeration is replaced by a row-stratified subsample.
pub const DEFAULT_PRODUCT_CAP: usize = 100_000;

/// A finite weighted multiset of d-dimensional points. Weights default to
/// uniform `1/n` and must be positive and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    data: Vec<f64>,
    dim: usize,
    weights: Option<Vec<f64>>,
}

impl EmpiricalDistribution {
    /// Build from a flat row-major buffer of `len/dim` points.
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::EmptySample);
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("samples must be finite".into()));
        }
        Ok(EmpiricalDistribution {
            data,
            dim,
            weights: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySample);
        }
        let dim = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, dim)
    }

    /// Attach per-point weights (positive, summing to 1 within 1e-12).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("weights must be positive".into()));
        }
        let total = neumaier_sum(weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "weights must sum to 1 (got {total})"
            )));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.len() as f64,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Per-axis sample mean.
    pub fn axis_mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (a, v) in self.point(i).iter().enumerate() {
                mean[a] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Per-axis sample standard deviation (population normalization).
    pub fn axis_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mean = self.axis_mean();
        let mut var = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (a, v) in self.point(i).iter().enumerate() {
                let c = v - mean[a];
                var[a] += c * c;
            }
        }
        var.iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Sample covariance matrix (population normalization), row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let n = self.len() as f64;
        let mean = self.axis_mean();
        let mut cov = vec![0.0; d * d];
        for i in 0..self.len() {
            let x = self.point(i);
            for a in 0..d {
                for b in a..d {
                    cov[a * d + b] += (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[a * d + b] = cov[b * d + a];
            }
        }
        cov.iter_mut().for_each(|v| *v /= n);
        cov
    }
}

/// Paired observations `(x_i, y_i)` with possibly different dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSamples {
    xs: Vec<f64>,
    ys: Vec<f64>,
    dx: usize,
    dy: usize,
}

impl PairedSamples {
    pub fn new(xs: Vec<f64>, dx: usize, ys: Vec<f64>, dy: usize) -> Result<Self> {
        if dx == 0 || dy == 0 {
            return Err(Error::InvalidParameter("dimensions must be positive".into()));
        }
        if xs.is_empty() || xs.len() % dx != 0 || ys.len() % dy != 0 {
            return Err(Error::EmptySample);
        }
        let (n, m) = (xs.len() / dx, ys.len() / dy);
        if n != m {
            return Err(Error::GroupSizeMismatch { p: n, q: m });
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("samples must be finite".into()));
        }
        Ok(PairedSamples { xs, ys, dx, dy })
    }

    pub fn len(&self) -> usize {
        self.xs.len() / self.dx
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn dy(&self) -> usize {
        self.dy
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dx..(i + 1) * self.dx]
    }

    pub fn y(&self, i: usize) -> &[f64] {
        &self.ys[i * self.dy..(i + 1) * self.dy]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    /// The x-stream as an empirical distribution.
    pub fn x_distribution(&self) -> EmpiricalDistribution {
        EmpiricalDistribution::new(self.xs.clone(), self.dx).expect("validated")
    }

    pub fn y_distribution(&self) -> EmpiricalDistribution {
        EmpiricalDistribution::new(self.ys.clone(), self.dy).expect("validated")
    }
}

/// A fitted divergence estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub critic: Critic,
    pub n_p: usize,
    pub n_q: usize,
    pub report: FitReport,
}

/// Joint and product-of-marginals empirical distributions for paired data,
/// retaining the cross-pair index structure needed for per-report
/// conditional payments.
#[derive(Debug, Clone)]
pub struct JointProduct {
    pub joint: EmpiricalDistribution,
    pub product: EmpiricalDistribution,
    /// For each row i, the y-indices j whose cross pair (x_i, y_j) is in the
    /// product. Full enumeration lists every j; the subsample has equal (±1)
    /// per-row counts with the diagonal j = i excluded.
    rows: Vec<Vec<u32>>,
    /// Transposed structure: for each column j, the x-indices i scoring the
    /// second group; mirrors `rows` under the exchange of roles.
    cols: Vec<Vec<u32>>,
    dx: usize,
    dy: usize,
}

impl JointProduct {
    pub fn n(&self) -> usize {
        self.joint.len()
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn dy(&self) -> usize {
        self.dy
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn col(&self, j: usize) -> &[u32] {
        &self.cols[j]
    }

    /// x-part of pair i (a view into the joint).
    pub fn x(&self, i: usize) -> &[f64] {
        &self.joint.point(i)[..self.dx]
    }

    /// y-part of pair j.
    pub fn y(&self, j: usize) -> &[f64] {
        &self.joint.point(j)[self.dx..]
    }
}

/// Build the joint empirical distribution (the n concatenated pairs) and the
/// product of marginals (all n² cross pairs, or a deterministic stratified
/// subsample of [`DEFAULT_PRODUCT_CAP`] cross pairs when n² exceeds the cap).
pub fn build_joint_and_product(pairs: &PairedSamples, seed: u64) -> Result<JointProduct> {
    build_joint_and_product_with_cap(pairs, DEFAULT_PRODUCT_CAP, seed)
}

/// As [`build_joint_and_product`] with an explicit product cap.
pub fn build_joint_and_product_with_cap(
    pairs: &PairedSamples,
    cap: usize,
    seed: u64,
) -> Result<JointProduct> {
    if pairs.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            min: MIN_SAMPLES,
            got: pairs.len(),
        });
    }
    build_unchecked(pairs, cap, seed)
}

pub(crate) fn build_unchecked(pairs: &PairedSamples, cap: usize, seed: u64) -> Result<JointProduct> {
    let n = pairs.len();
    let (dx, dy) = (pairs.dx(), pairs.dy());
    let d = dx + dy;
    if cap == 0 {
        return Err(Error::InvalidParameter("product cap must be positive".into()));
    }

    let mut joint_data = Vec::with_capacity(n * d);
    for i in 0..n {
        joint_data.extend_from_slice(pairs.x(i));
        joint_data.extend_from_slice(pairs.y(i));
    }
    let joint = EmpiricalDistribution::new(joint_data, d)?;

    let full = n.checked_mul(n).map(|nn| nn <= cap).unwrap_or(false);
    let (product, rows, cols) = if full {
        let mut data = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for j in 0..n {
                data.extend_from_slice(pairs.x(i));
                data.extend_from_slice(pairs.y(j));
            }
        }
        let all: Vec<u32> = (0..n as u32).collect();
        (
            EmpiricalDistribution::new(data, d)?,
            vec![all.clone(); n],
            vec![all; n],
        )
    } else {
        let rows = stratified_cross_indices(n, cap, derive_seed(seed, &[0x726f77]));
        let cols = stratified_cross_indices(n, cap, derive_seed(seed, &[0x636f6c]));
        let total: usize = rows.iter().map(|r| r.len()).sum();
        let mut data = Vec::with_capacity(total * d);
        let mut weights = Vec::with_capacity(total);
        for (i, row) in rows.iter().enumerate() {
            let w = 1.0 / (n as f64 * row.len() as f64);
            for &j in row {
                data.extend_from_slice(pairs.x(i));
                data.extend_from_slice(pairs.y(j as usize));
                weights.push(w);
            }
        }
        (
            EmpiricalDistribution::new(data, d)?.with_weights(weights)?,
            rows,
            cols,
        )
    };

    Ok(JointProduct {
        joint,
        product,
        rows,
        cols,
        dx,
        dy,
    })
}

/// For each of the n rows, draw `cap/n` (±1) partner indices without
/// replacement, excluding the diagonal, via a seeded partial shuffle. Exactly
/// `cap` indices in total.
fn stratified_cross_indices(n: usize, cap: usize, seed: u64) -> Vec<Vec<u32>> {
    let base = cap / n;
    let rem = cap - base * n;
    let mut out = Vec::with_capacity(n);
    let mut pool: Vec<u32> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let k = base + usize::from(i < rem);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        pool.clear();
        pool.extend((0..n as u32).filter(|&j| j != i as u32));
        let take = k.min(pool.len());
        for t in 0..take {
            let pick = rng.gen_range(t..pool.len());
            pool.swap(t, pick);
        }
        out.push(pool[..take].to_vec());
    }
    out
}

/// Compensated (Neumaier) summation; used where finite-sum identities are
/// asserted to 1e-9 or tighter.
pub(crate) fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `E_{Q_n}[t̂] − E_{P_n}[f†(t̂)]` for a given critic, in compensated
/// arithmetic.
pub fn variational_value(
    critic: &Critic,
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
) -> Result<f64> {
    if critic.divergence() != spec.name {
        return Err(Error::InvalidParameter(format!(
            "critic was built for {} but the estimate uses {}",
            critic.divergence(),
            spec.name
        )));
    }
    let q_term = neumaier_sum((0..q.len()).map(|j| q.weight(j) * spec.squash(critic.raw(q.point(j)))));
    let p_term = neumaier_sum((0..p.len()).map(|i| p.weight(i) * spec.conj_of_squash(critic.raw(p.point(i)))));
    Ok(q_term - p_term)
}

/// Fit a critic and return `D̂_f(q||p)`: the critic separates role-P samples
/// (denominator) from role-Q samples (numerator).
pub fn estimate_divergence(
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cfg: &FitConfig,
) -> Result<DivergenceEstimate> {
    let (critic, report) = critic::fit(&CriticClass::FeatureBasis, spec, p, q, cfg)?;
    let value = variational_value(&critic, spec, p, q)?;
    Ok(DivergenceEstimate {
        value,
        critic,
        n_p: p.len(),
        n_q: q.len(),
        report,
    })
}

/// Generalized f-mutual information `Î_f = D̂_f(joint || product)` from
/// paired samples: the critic discriminates the joint (role Q) from the
/// product of marginals (role P).
pub fn estimate_mutual_information(
    spec: &FDivergenceSpec,
    pairs: &PairedSamples,
    cfg: &FitConfig,
) -> Result<DivergenceEstimate> {
    let jp = build_joint_and_product(pairs, derive_seed(cfg.seed, &[0x7375_6273]))?;
    estimate_divergence(spec, &jp.product, &jp.joint, cfg)
}

/// Per-report conditional terms of the peer-prediction payment: for report i,
/// the joint term is `t̂(x_i, y_{π(i)})` under the natural pairing, and the
/// product term is the mean of `f†(t̂(x_i, y_j))` over the product's row i.
pub fn conditional_terms(
    critic: &Critic,
    spec: &FDivergenceSpec,
    jp: &JointProduct,
    i: usize,
) -> Result<(f64, f64)> {
    if i >= jp.n() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: jp.n(),
        });
    }
    if critic.divergence() != spec.name {
        return Err(Error::InvalidParameter(format!(
            "critic was built for {} but the mechanism uses {}",
            critic.divergence(),
            spec.name
        )));
    }
    let joint_term = critic.raw_then_squash(spec, jp.joint.point(i));
    let row = jp.row(i);
    let mut buf = vec![0.0; jp.dx + jp.dy];
    buf[..jp.dx].copy_from_slice(jp.x(i));
    let product_term = neumaier_sum(row.iter().map(|&j| {
        buf[jp.dx..].copy_from_slice(jp.y(j as usize));
        spec.conj_of_squash(critic.raw(&buf))
    })) / row.len() as f64;
    Ok((joint_term, product_term))
}

/// Transposed conditional terms for second-group reports: fixes the y
/// coordinate at report j and averages the conjugate over the column's
/// x-partners.
pub fn conditional_terms_transposed(
    critic: &Critic,
    spec: &FDivergenceSpec,
    jp: &JointProduct,
    j: usize,
) -> Result<(f64, f64)> {
    if j >= jp.n() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: jp.n(),
        });
    }
    let joint_term = critic.raw_then_squash(spec, jp.joint.point(j));
    let col = jp.col(j);
    let mut buf = vec![0.0; jp.dx + jp.dy];
    buf[jp.dx..].copy_from_slice(jp.y(j));
    let product_term = neumaier_sum(col.iter().map(|&i| {
        buf[..jp.dx].copy_from_slice(jp.x(i as usize));
        spec.conj_of_squash(critic.raw(&buf))
    })) / col.len() as f64;
    Ok((joint_term, product_term))
}

impl Critic {
    fn raw_then_squash(&self, spec: &FDivergenceSpec, x: &[f64]) -> f64 {
        spec.squash(self.raw(x))
    }
}
