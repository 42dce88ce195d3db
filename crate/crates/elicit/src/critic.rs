//! Parameterized witness functions for the variational divergence objective.
//!
//! A critic is a function `t(x) = g_f(raw(x))` where `raw` is a parameterized
//! map to ℝ and `g_f` is the divergence's squash onto `dom f†`. Fitting
//! minimizes the empirical inner objective
//!
//! ```text
//! J(t) = E_{x~P_n}[f†(t(x))] − E_{x~Q_n}[t(x)]
//! ```
//!
//! whose negated optimum is the divergence estimate. The default class is a
//! radial-basis feature expansion (convex objective under identity squash);
//! a small bounded-weight ReLU network is available as a stress-test class.

use crate::error::{Error, Result};
use crate::estimator::EmpiricalDistribution;
use crate::fdiv::{Divergence, FDivergenceSpec};
use crate::linalg;
use crate::seeds::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum sample count per side accepted by [`fit`].
pub const MIN_FIT_SAMPLES: usize = 8;

/// Default cap on the number of radial-basis centers.
pub const DEFAULT_MAX_CENTERS: usize = 128;

/// Armijo sufficient-decrease constant.
const ARMIJO_C: f64 = 1e-4;

/// Line-search shrink factor.
const BACKTRACK: f64 = 0.5;

/// Optimizer configuration for [`fit`]. Deterministic given `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub seed: u64,
    /// Initial line-search step.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Exit when the parameter-gradient norm drops below this.
    pub grad_tolerance: f64,
    /// Cap on radial-basis centers (the class uses `min(cap, n_pooled)`).
    pub max_centers: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            seed: 42,
            step_size: 1.0,
            max_iterations: 5000,
            grad_tolerance: 1e-6,
            max_centers: DEFAULT_MAX_CENTERS,
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        FitConfig {
            seed,
            ..FitConfig::default()
        }
    }
}

/// Outcome of a fit: final objective, iterations, exit gradient norm, the
/// seed used, and the per-iteration objective trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub seed: u64,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// Radial-basis feature critic: `raw(x) = Σ_k w_k φ_k(x) + w_m` with
/// `φ_k(x) = exp(−½ Σ_a ((x_a − c_{k,a}) / b_a)²)`.
///
/// Bandwidths are per axis so the kernel respects anisotropic sample scales;
/// they are chosen as the pooled per-axis standard deviation times the median
/// pairwise distance of the standardized pooled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasisCritic {
    pub dim: usize,
    /// `m × dim`, row-major, in sample-space units.
    pub centers: Vec<f64>,
    /// Per-axis bandwidth, length `dim`.
    pub bandwidth: Vec<f64>,
    /// `m + 1` weights; the last entry is the bias.
    pub weights: Vec<f64>,
    pub divergence: Divergence,
}

impl FeatureBasisCritic {
    pub fn num_centers(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn num_features(&self) -> usize {
        self.num_centers() + 1
    }

    fn features_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let m = self.num_centers();
        for k in 0..m {
            let mut s = 0.0;
            for a in 0..d {
                let z = (x[a] - self.centers[k * d + a]) / self.bandwidth[a];
                s += z * z;
            }
            out[k] = (-0.5 * s).exp();
        }
        out[m] = 1.0;
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let m = self.num_centers();
        let mut acc = self.weights[m];
        for k in 0..m {
            let mut s = 0.0;
            for a in 0..d {
                let z = (x[a] - self.centers[k * d + a]) / self.bandwidth[a];
                s += z * z;
            }
            acc += self.weights[k] * (-0.5 * s).exp();
        }
        acc
    }

    /// Gradient of `raw` with respect to the input point.
    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let m = self.num_centers();
        let mut g = vec![0.0; d];
        for k in 0..m {
            let mut s = 0.0;
            for a in 0..d {
                let z = (x[a] - self.centers[k * d + a]) / self.bandwidth[a];
                s += z * z;
            }
            let phi = (-0.5 * s).exp();
            let wphi = self.weights[k] * phi;
            for a in 0..d {
                let b2 = self.bandwidth[a] * self.bandwidth[a];
                g[a] += wphi * (self.centers[k * d + a] - x[a]) / b2;
            }
        }
        g
    }
}

/// Fully-connected ReLU network with uniformly bounded parameters; the raw
/// output is the final pre-activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCritic {
    /// Layer widths `(d, k_1, …, k_L, 1)`.
    pub widths: Vec<usize>,
    /// Flat parameters: for each layer, the weight matrix (row-major,
    /// `k_j × k_{j-1}`) followed by the bias vector.
    pub weights: Vec<f64>,
    /// Uniform magnitude bound enforced by projection after each step.
    pub weight_cap: f64,
    pub divergence: Divergence,
}

impl MlpCritic {
    pub fn param_count(widths: &[usize]) -> usize {
        widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn zeroed(dim: usize, hidden: &[usize], weight_cap: f64, divergence: Divergence) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(dim);
        widths.extend_from_slice(hidden);
        widths.push(1);
        let n = Self::param_count(&widths);
        MlpCritic {
            widths,
            weights: vec![0.0; n],
            weight_cap,
            divergence,
        }
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        let mut cur: Vec<f64> = x.to_vec();
        let mut offset = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (k_in, k_out) = (w[0], w[1]);
            let mut next = vec![0.0; k_out];
            for o in 0..k_out {
                let mut s = self.weights[offset + k_in * k_out + o];
                for i in 0..k_in {
                    s += self.weights[offset + o * k_in + i] * cur[i];
                }
                next[o] = if l < last { s.max(0.0) } else { s };
            }
            offset += k_in * k_out + k_out;
            cur = next;
        }
        cur[0]
    }

    /// Forward pass retaining pre-activations for backpropagation.
    fn forward_trace(&self, x: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let mut activations = vec![x.to_vec()];
        let mut offset = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (k_in, k_out) = (w[0], w[1]);
            let cur = activations.last().unwrap().clone();
            let mut next = vec![0.0; k_out];
            for o in 0..k_out {
                let mut s = self.weights[offset + k_in * k_out + o];
                for i in 0..k_in {
                    s += self.weights[offset + o * k_in + i] * cur[i];
                }
                next[o] = if l < last { s.max(0.0) } else { s };
            }
            offset += k_in * k_out + k_out;
            activations.push(next);
        }
        (activations.last().unwrap()[0], activations)
    }

    /// Accumulate `scale * ∂raw/∂params` into `grad`; returns `∂raw/∂x` when
    /// requested.
    fn backprop(
        &self,
        activations: &[Vec<f64>],
        scale: f64,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        // Delta at the output layer.
        let mut delta = vec![scale];
        for l in (0..layers).rev() {
            let (k_in, k_out) = (self.widths[l], self.widths[l + 1]);
            let base = offsets[l];
            let input = &activations[l];
            // ReLU mask applies to this layer's output for hidden layers.
            let masked: Vec<f64> = if l < layers - 1 {
                delta
                    .iter()
                    .zip(&activations[l + 1])
                    .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
                    .collect()
            } else {
                delta.clone()
            };
            for o in 0..k_out {
                let dm = masked[o];
                if dm != 0.0 {
                    for i in 0..k_in {
                        grad[base + o * k_in + i] += dm * input[i];
                    }
                    grad[base + k_in * k_out + o] += dm;
                }
            }
            if l == 0 && !want_input_grad {
                break;
            }
            let mut prev = vec![0.0; k_in];
            for o in 0..k_out {
                let dm = masked[o];
                if dm != 0.0 {
                    for i in 0..k_in {
                        prev[i] += dm * self.weights[base + o * k_in + i];
                    }
                }
            }
            delta = prev;
        }
        if want_input_grad {
            Some(delta)
        } else {
            None
        }
    }

    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        let (_, acts) = self.forward_trace(x);
        let mut scratch = vec![0.0; self.weights.len()];
        self.backprop(&acts, 1.0, &mut scratch, true).unwrap()
    }
}

/// A fitted or hand-built variational witness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Critic {
    FeatureBasis(FeatureBasisCritic),
    Mlp(MlpCritic),
}

impl Critic {
    pub fn dim(&self) -> usize {
        match self {
            Critic::FeatureBasis(c) => c.dim,
            Critic::Mlp(c) => c.widths[0],
        }
    }

    pub fn divergence(&self) -> Divergence {
        match self {
            Critic::FeatureBasis(c) => c.divergence,
            Critic::Mlp(c) => c.divergence,
        }
    }

    pub fn spec(&self) -> FDivergenceSpec {
        FDivergenceSpec::of(self.divergence())
    }

    /// Raw (pre-squash) output.
    pub fn raw(&self, x: &[f64]) -> f64 {
        match self {
            Critic::FeatureBasis(c) => c.raw(x),
            Critic::Mlp(c) => c.raw(x),
        }
    }

    /// Flat parameter vector.
    pub fn parameters(&self) -> &[f64] {
        match self {
            Critic::FeatureBasis(c) => &c.weights,
            Critic::Mlp(c) => &c.weights,
        }
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let slot = match self {
            Critic::FeatureBasis(c) => &mut c.weights,
            Critic::Mlp(c) => &mut c.weights,
        };
        if params.len() != slot.len() {
            return Err(Error::DimensionMismatch {
                expected: slot.len(),
                got: params.len(),
            });
        }
        slot.copy_from_slice(params);
        Ok(())
    }

    /// Gradient of `raw` with respect to the input point.
    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Critic::FeatureBasis(c) => c.input_gradient(x),
            Critic::Mlp(c) => c.input_gradient(x),
        }
    }
}

/// Critic function-class choice for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CriticClass {
    FeatureBasis,
    Mlp { hidden: Vec<usize>, weight_cap: f64 },
}

impl Default for CriticClass {
    fn default() -> Self {
        CriticClass::FeatureBasis
    }
}

impl CriticClass {
    /// Default network shape for the bounded-weight stress class.
    pub fn default_mlp() -> Self {
        CriticClass::Mlp {
            hidden: vec![32, 32],
            weight_cap: 5.0,
        }
    }
}

/// Squashed critic output `t(x) = g_f(raw(x))`; always lies in `dom f†`.
pub fn evaluate(critic: &Critic, x: &[f64]) -> Result<f64> {
    if x.len() != critic.dim() {
        return Err(Error::DimensionMismatch {
            expected: critic.dim(),
            got: x.len(),
        });
    }
    Ok(critic.spec().squash(critic.raw(x)))
}

fn check_inputs(
    critic: &Critic,
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
) -> Result<()> {
    if critic.divergence() != spec.name {
        return Err(Error::InvalidParameter(format!(
            "critic was built for {} but the objective uses {}",
            critic.divergence(),
            spec.name
        )));
    }
    if p.len() == 0 || q.len() == 0 {
        return Err(Error::EmptySample);
    }
    for (label, dist) in [("P", p), ("Q", q)] {
        if dist.dim() != critic.dim() {
            let _ = label;
            return Err(Error::DimensionMismatch {
                expected: critic.dim(),
                got: dist.dim(),
            });
        }
    }
    Ok(())
}

/// Empirical inner objective `E_{P_n}[f†(t)] − E_{Q_n}[t]`.
pub fn objective(
    critic: &Critic,
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
) -> Result<f64> {
    check_inputs(critic, spec, p, q)?;
    let mut total = 0.0;
    for i in 0..p.len() {
        total += p.weight(i) * spec.conj_of_squash(critic.raw(p.point(i)));
    }
    for j in 0..q.len() {
        total -= q.weight(j) * spec.squash(critic.raw(q.point(j)));
    }
    Ok(total)
}

/// Analytic gradient of [`objective`] with respect to the critic parameters.
pub fn gradient(
    critic: &Critic,
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
) -> Result<Vec<f64>> {
    check_inputs(critic, spec, p, q)?;
    match critic {
        Critic::FeatureBasis(c) => {
            let m1 = c.num_features();
            let mut grad = vec![0.0; m1];
            let mut feats = vec![0.0; m1];
            for i in 0..p.len() {
                c.features_into(p.point(i), &mut feats);
                let raw: f64 = feats.iter().zip(&c.weights).map(|(a, b)| a * b).sum();
                let s = p.weight(i) * spec.conj_of_squash_dv(raw);
                for (g, f) in grad.iter_mut().zip(&feats) {
                    *g += s * f;
                }
            }
            for j in 0..q.len() {
                c.features_into(q.point(j), &mut feats);
                let raw: f64 = feats.iter().zip(&c.weights).map(|(a, b)| a * b).sum();
                let s = q.weight(j) * spec.squash_prime(raw);
                for (g, f) in grad.iter_mut().zip(&feats) {
                    *g -= s * f;
                }
            }
            Ok(grad)
        }
        Critic::Mlp(c) => {
            let mut grad = vec![0.0; c.weights.len()];
            for i in 0..p.len() {
                let (raw, acts) = c.forward_trace(p.point(i));
                let s = p.weight(i) * spec.conj_of_squash_dv(raw);
                c.backprop(&acts, s, &mut grad, false);
            }
            for j in 0..q.len() {
                let (raw, acts) = c.forward_trace(q.point(j));
                let s = -q.weight(j) * spec.squash_prime(raw);
                c.backprop(&acts, s, &mut grad, false);
            }
            Ok(grad)
        }
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Fit a critic of the given class by full-batch gradient descent with
/// Armijo backtracking. Deterministic given `cfg.seed`; the returned critic's
/// objective never exceeds the initial objective.
pub fn fit(
    class: &CriticClass,
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cfg: &FitConfig,
) -> Result<(Critic, FitReport)> {
    for dist in [p, q] {
        if dist.len() < MIN_FIT_SAMPLES {
            return Err(Error::TooFewSamples {
                min: MIN_FIT_SAMPLES,
                got: dist.len(),
            });
        }
    }
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    match class {
        CriticClass::FeatureBasis => {
            let mut critic = prepare_feature_basis(spec, p, q, cfg)?;
            let report = fit_feature_weights(&mut critic, spec, p, q, cfg, false)?;
            Ok((Critic::FeatureBasis(critic), report))
        }
        CriticClass::Mlp { hidden, weight_cap } => {
            let mut critic = MlpCritic::zeroed(p.dim(), hidden, *weight_cap, spec.name);
            init_mlp(&mut critic, cfg.seed);
            let report = fit_mlp(&mut critic, spec, p, q, cfg)?;
            Ok((Critic::Mlp(critic), report))
        }
    }
}

/// Deterministic row subsample: every `ceil(n / cap)`-th row.
fn stride_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let stride = n.div_ceil(cap);
    (0..n).step_by(stride).collect()
}

struct PooledView<'a> {
    p: &'a EmpiricalDistribution,
    q: &'a EmpiricalDistribution,
}

impl<'a> PooledView<'a> {
    fn len(&self) -> usize {
        self.p.len() + self.q.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        if i < self.p.len() {
            self.p.point(i)
        } else {
            self.q.point(i - self.p.len())
        }
    }
}

/// Choose centers and per-axis bandwidths from the pooled sample.
pub(crate) fn prepare_feature_basis(
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cfg: &FitConfig,
) -> Result<FeatureBasisCritic> {
    let d = p.dim();
    let pooled = PooledView { p, q };
    let n_pooled = pooled.len();

    // Per-axis standardization stats.
    let mut mean = vec![0.0; d];
    for i in 0..n_pooled {
        for (a, v) in pooled.point(i).iter().enumerate() {
            mean[a] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n_pooled as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n_pooled {
        for (a, v) in pooled.point(i).iter().enumerate() {
            let c = v - mean[a];
            var[a] += c * c;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n_pooled as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();

    // Median pairwise distance of the standardized pooled sample (strided
    // subsample keeps this O(1e6) regardless of n).
    let med_idx = stride_indices(n_pooled, 1024);
    let mut dists = Vec::with_capacity(med_idx.len() * (med_idx.len() - 1) / 2);
    for (ii, &i) in med_idx.iter().enumerate() {
        let xi = pooled.point(i);
        for &j in med_idx.iter().skip(ii + 1) {
            let xj = pooled.point(j);
            let mut s = 0.0;
            for a in 0..d {
                let z = (xi[a] - xj[a]) / std[a];
                s += z * z;
            }
            dists.push(s.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tau = if dists.is_empty() {
        1.0
    } else {
        let mid = dists[dists.len() / 2];
        if mid > 1e-12 {
            mid
        } else {
            1.0
        }
    };
    let bandwidth: Vec<f64> = std.iter().map(|s| tau * s).collect();

    // Seeded k-means++ center selection on the standardized pooled sample.
    let m = cfg.max_centers.clamp(1, n_pooled);
    let sel_idx = stride_indices(n_pooled, 32_768);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x6b6d]));
    let dist2 = |i: usize, j: usize| -> f64 {
        let (xi, xj) = (pooled.point(i), pooled.point(j));
        let mut s = 0.0;
        for a in 0..d {
            let z = (xi[a] - xj[a]) / std[a];
            s += z * z;
        }
        s
    };
    let mut chosen = Vec::with_capacity(m);
    let first = sel_idx[rng.gen_range(0..sel_idx.len())];
    chosen.push(first);
    let mut d2: Vec<f64> = sel_idx.iter().map(|&i| dist2(i, first)).collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = sel_idx.len() - 1;
            for (k, &w) in d2.iter().enumerate() {
                r -= w;
                if r <= 0.0 {
                    pick = k;
                    break;
                }
            }
            sel_idx[pick]
        } else {
            sel_idx[rng.gen_range(0..sel_idx.len())]
        };
        chosen.push(next);
        for (k, &i) in sel_idx.iter().enumerate() {
            let dn = dist2(i, next);
            if dn < d2[k] {
                d2[k] = dn;
            }
        }
    }

    let mut centers = Vec::with_capacity(m * d);
    for &i in &chosen {
        centers.extend_from_slice(pooled.point(i));
    }
    Ok(FeatureBasisCritic {
        dim: d,
        centers,
        bandwidth,
        weights: vec![0.0; m + 1],
        divergence: spec.name,
    })
}

/// Design matrices for the feature-basis fit.
struct Design {
    phi_p: Vec<f64>,
    phi_q: Vec<f64>,
    wp: Vec<f64>,
    wq: Vec<f64>,
    np: usize,
    nq: usize,
    m1: usize,
}

fn build_design(c: &FeatureBasisCritic, p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Design {
    let m1 = c.num_features();
    let mut phi_p = vec![0.0; p.len() * m1];
    for i in 0..p.len() {
        c.features_into(p.point(i), &mut phi_p[i * m1..(i + 1) * m1]);
    }
    let mut phi_q = vec![0.0; q.len() * m1];
    for j in 0..q.len() {
        c.features_into(q.point(j), &mut phi_q[j * m1..(j + 1) * m1]);
    }
    Design {
        phi_p,
        phi_q,
        wp: (0..p.len()).map(|i| p.weight(i)).collect(),
        wq: (0..q.len()).map(|j| q.weight(j)).collect(),
        np: p.len(),
        nq: q.len(),
        m1,
    }
}

impl Design {
    fn objective(&self, spec: &FDivergenceSpec, w: &[f64]) -> f64 {
        let m1 = self.m1;
        let mut total = 0.0;
        for i in 0..self.np {
            let row = &self.phi_p[i * m1..(i + 1) * m1];
            let raw: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            total += self.wp[i] * spec.conj_of_squash(raw);
        }
        for j in 0..self.nq {
            let row = &self.phi_q[j * m1..(j + 1) * m1];
            let raw: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            total -= self.wq[j] * spec.squash(raw);
        }
        total
    }

    fn objective_grad(&self, spec: &FDivergenceSpec, w: &[f64], grad: &mut [f64]) -> f64 {
        let m1 = self.m1;
        grad.fill(0.0);
        let mut total = 0.0;
        for i in 0..self.np {
            let row = &self.phi_p[i * m1..(i + 1) * m1];
            let raw: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            total += self.wp[i] * spec.conj_of_squash(raw);
            let s = self.wp[i] * spec.conj_of_squash_dv(raw);
            for (g, f) in grad.iter_mut().zip(row) {
                *g += s * f;
            }
        }
        for j in 0..self.nq {
            let row = &self.phi_q[j * m1..(j + 1) * m1];
            let raw: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
            total -= self.wq[j] * spec.squash(raw);
            let s = self.wq[j] * spec.squash_prime(raw);
            for (g, f) in grad.iter_mut().zip(row) {
                *g -= s * f;
            }
        }
        total
    }

    /// Cholesky factor of the (ridged) pooled feature gram, used as a fixed
    /// preconditioning metric for the descent.
    fn whitener(&self) -> Vec<f64> {
        let m1 = self.m1;
        let rows_p = stride_indices(self.np, 8192);
        let rows_q = stride_indices(self.nq, 8192);
        let count = (rows_p.len() + rows_q.len()) as f64;
        let mut gram = vec![0.0; m1 * m1];
        let mut accumulate = |row: &[f64]| {
            for a in 0..m1 {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..m1 {
                    gram[a * m1 + b] += ra * row[b];
                }
            }
        };
        for &i in &rows_p {
            accumulate(&self.phi_p[i * m1..(i + 1) * m1]);
        }
        for &j in &rows_q {
            accumulate(&self.phi_q[j * m1..(j + 1) * m1]);
        }
        for a in 0..m1 {
            for b in 0..a {
                gram[a * m1 + b] = gram[b * m1 + a];
            }
        }
        for v in gram.iter_mut() {
            *v /= count;
        }
        let trace: f64 = (0..m1).map(|a| gram[a * m1 + a]).sum();
        let mut ridge = 1e-8 * (trace / m1 as f64).max(1e-12);
        for _ in 0..8 {
            let mut g = gram.clone();
            for a in 0..m1 {
                g[a * m1 + a] += ridge;
            }
            if let Some(l) = linalg::cholesky(&g, m1) {
                return l;
            }
            ridge *= 100.0;
        }
        // Diagonal fallback.
        let mut l = vec![0.0; m1 * m1];
        for a in 0..m1 {
            l[a * m1 + a] = (gram[a * m1 + a] + ridge).sqrt();
        }
        l
    }
}

/// Fit the weights of an existing feature-basis critic (centers and
/// bandwidths fixed). With `warm_start` the current weights seed the descent;
/// otherwise a small seeded random initialization is used.
pub(crate) fn fit_feature_weights(
    critic: &mut FeatureBasisCritic,
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cfg: &FitConfig,
    warm_start: bool,
) -> Result<FitReport> {
    let design = build_design(critic, p, q);
    let m1 = design.m1;
    let chol = design.whitener();

    // Descent runs in whitened coordinates z with w = (L^T)^{-1} z; the
    // gradient maps back as g_z = L^{-1} g_w. Entry and exit are in raw
    // weight coordinates so warm starts and reports stay in the public
    // parameterization.
    let w0: Vec<f64> = if warm_start {
        critic.weights.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x77]));
        (0..m1)
            .map(|_| 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    };
    let to_w = |z: &[f64]| linalg::solve_lower_transpose(&chol, m1, z);
    let to_z = |w: &[f64]| {
        // z = L^T w
        let mut z = vec![0.0; m1];
        for a in 0..m1 {
            let mut s = 0.0;
            for b in a..m1 {
                s += chol[b * m1 + a] * w[b];
            }
            z[a] = s;
        }
        z
    };

    let mut z = to_z(&w0);
    let mut w = to_w(&z);
    let mut grad_w = vec![0.0; m1];
    let mut objective = design.objective_grad(spec, &w, &mut grad_w);
    if !objective.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut trace = vec![objective];
    let mut grad_norm = norm(&grad_w);
    let mut step = cfg.step_size;
    let mut iterations = 0;
    let mut converged = grad_norm < cfg.grad_tolerance;

    while !converged && iterations < cfg.max_iterations {
        let grad_z = linalg::solve_lower(&chol, m1, &grad_w);
        let decrease: f64 = grad_z.iter().map(|g| g * g).sum();
        let mut alpha = step;
        let mut accepted = false;
        for _ in 0..80 {
            let cand_z: Vec<f64> = z.iter().zip(&grad_z).map(|(zi, gi)| zi - alpha * gi).collect();
            let cand_w = to_w(&cand_z);
            let cand_obj = design.objective(spec, &cand_w);
            if cand_obj.is_finite() && cand_obj <= objective - ARMIJO_C * alpha * decrease {
                z = cand_z;
                w = cand_w;
                objective = cand_obj;
                accepted = true;
                break;
            }
            alpha *= BACKTRACK;
        }
        if !accepted {
            break;
        }
        step = (alpha * 2.0).min(1e12);
        iterations += 1;
        let new_obj = design.objective_grad(spec, &w, &mut grad_w);
        if !new_obj.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iterations });
        }
        objective = new_obj;
        trace.push(objective);
        grad_norm = norm(&grad_w);
        if grad_norm < cfg.grad_tolerance {
            converged = true;
        }
    }

    critic.weights.copy_from_slice(&w);
    Ok(FitReport {
        final_objective: objective,
        iterations,
        grad_norm,
        seed: cfg.seed,
        converged,
        objective_trace: trace,
    })
}

fn init_mlp(critic: &mut MlpCritic, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6d6c70]));
    let mut offset = 0;
    let widths = critic.widths.clone();
    for w in widths.windows(2) {
        let (k_in, k_out) = (w[0], w[1]);
        let scale = (2.0 / k_in as f64).sqrt() * 0.5;
        for v in critic.weights[offset..offset + k_in * k_out].iter_mut() {
            *v = scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
            *v = v.clamp(-critic.weight_cap, critic.weight_cap);
        }
        offset += k_in * k_out + k_out;
    }
}

fn fit_mlp(
    critic: &mut MlpCritic,
    spec: &FDivergenceSpec,
    p: &EmpiricalDistribution,
    q: &EmpiricalDistribution,
    cfg: &FitConfig,
) -> Result<FitReport> {
    let cap = critic.weight_cap;
    let wrapped = Critic::Mlp(critic.clone());
    let mut params = wrapped.parameters().to_vec();
    let mut work = critic.clone();

    let eval = |w: &[f64], work: &mut MlpCritic| -> f64 {
        work.weights.copy_from_slice(w);
        let mut total = 0.0;
        for i in 0..p.len() {
            total += p.weight(i) * spec.conj_of_squash(work.raw(p.point(i)));
        }
        for j in 0..q.len() {
            total -= q.weight(j) * spec.squash(work.raw(q.point(j)));
        }
        total
    };
    let eval_grad = |w: &[f64], work: &mut MlpCritic, grad: &mut [f64]| -> f64 {
        work.weights.copy_from_slice(w);
        grad.fill(0.0);
        let mut total = 0.0;
        for i in 0..p.len() {
            let (raw, acts) = work.forward_trace(p.point(i));
            total += p.weight(i) * spec.conj_of_squash(raw);
            work.backprop(&acts, p.weight(i) * spec.conj_of_squash_dv(raw), grad, false);
        }
        for j in 0..q.len() {
            let (raw, acts) = work.forward_trace(q.point(j));
            total -= q.weight(j) * spec.squash(raw);
            work.backprop(&acts, -q.weight(j) * spec.squash_prime(raw), grad, false);
        }
        total
    };

    let mut grad = vec![0.0; params.len()];
    let mut objective = eval_grad(&params, &mut work, &mut grad);
    if !objective.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut trace = vec![objective];
    let mut grad_norm = norm(&grad);
    let mut step = cfg.step_size;
    let mut iterations = 0;
    let mut converged = grad_norm < cfg.grad_tolerance;

    while !converged && iterations < cfg.max_iterations {
        let decrease: f64 = grad.iter().map(|g| g * g).sum();
        let mut alpha = step;
        let mut accepted = false;
        for _ in 0..80 {
            let cand: Vec<f64> = params
                .iter()
                .zip(&grad)
                .map(|(w, g)| (w - alpha * g).clamp(-cap, cap))
                .collect();
            let cand_obj = eval(&cand, &mut work);
            if cand_obj.is_finite() && cand_obj <= objective - ARMIJO_C * alpha * decrease {
                params = cand;
                objective = cand_obj;
                accepted = true;
                break;
            }
            alpha *= BACKTRACK;
        }
        if !accepted {
            break;
        }
        step = (alpha * 2.0).min(1e12);
        iterations += 1;
        let new_obj = eval_grad(&params, &mut work, &mut grad);
        if !new_obj.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iterations });
        }
        objective = new_obj;
        trace.push(objective);
        grad_norm = norm(&grad);
        if grad_norm < cfg.grad_tolerance {
            converged = true;
        }
    }

    critic.weights.copy_from_slice(&params);
    Ok(FitReport {
        final_objective: objective,
        iterations,
        grad_norm,
        seed: cfg.seed,
        converged,
        objective_trace: trace,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EmpiricalDistribution;
    use crate::fdiv::get_divergence;
    use rand::Rng;

    fn gaussian_1d(n: usize, mean: f64, std: f64, seed: u64) -> EmpiricalDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        EmpiricalDistribution::new(data, 1).unwrap()
    }

    fn constant_critic(dim: usize, c: f64, divergence: Divergence) -> Critic {
        Critic::FeatureBasis(FeatureBasisCritic {
            dim,
            centers: vec![0.0; dim],
            bandwidth: vec![1.0; dim],
            weights: vec![0.0, c],
            divergence,
        })
    }

    #[test]
    fn zero_critic_evaluates_to_squash_of_zero() {
        let kl = constant_critic(2, 0.0, Divergence::Kl);
        assert_eq!(evaluate(&kl, &[0.3, -1.0]).unwrap(), 0.0);
        let tv = constant_critic(1, 0.0, Divergence::TotalVariation);
        assert_eq!(evaluate(&tv, &[2.0]).unwrap(), 0.0);
        // tanh saturation pushes the output to the domain edge.
        let tv_sat = constant_critic(1, 50.0, Divergence::TotalVariation);
        assert!((evaluate(&tv_sat, &[0.0]).unwrap() - 0.5).abs() < 1e-12);
        let mlp = Critic::Mlp(MlpCritic::zeroed(3, &[8], 5.0, Divergence::JensenShannon));
        let spec = get_divergence("jensen_shannon").unwrap();
        assert_eq!(evaluate(&mlp, &[0.0; 3]).unwrap(), spec.squash(0.0));
    }

    #[test]
    fn evaluate_rejects_dimension_mismatch() {
        let c = constant_critic(2, 0.0, Divergence::Kl);
        assert!(matches!(
            evaluate(&c, &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn constant_critic_objective_matches_calculus() {
        let spec = get_divergence("kl").unwrap();
        let p = gaussian_1d(64, 0.0, 1.0, 1);
        let q = gaussian_1d(64, 0.0, 1.0, 2);
        // t ≡ c under kl gives e^{c-1} − c, minimized at c = 1 with value 0.
        for c in [0.0, 0.5, 1.0, 1.3] {
            let critic = constant_critic(1, c, Divergence::Kl);
            let j = objective(&critic, &spec, &p, &q).unwrap();
            assert!(
                (j - ((c - 1.0f64).exp() - c)).abs() < 1e-12,
                "objective at c={c}: {j}"
            );
        }
        let at1 = objective(&constant_critic(1, 1.0, Divergence::Kl), &spec, &p, &q).unwrap();
        assert!(at1.abs() < 1e-12);
        let tv = get_divergence("total_variation").unwrap();
        let zero = objective(
            &constant_critic(1, 0.0, Divergence::TotalVariation),
            &tv,
            &p,
            &q,
        )
        .unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn bias_gradient_matches_hand_chain_rule() {
        // With zero weights and P_n = Q_n under kl, the bias component of the
        // gradient is (f†)'(0) − 1 = e^{-1} − 1 and feature terms cancel.
        let spec = get_divergence("kl").unwrap();
        let pts = gaussian_1d(32, 0.0, 1.0, 3);
        let critic = Critic::FeatureBasis(FeatureBasisCritic {
            dim: 1,
            centers: vec![0.0, 1.0],
            bandwidth: vec![1.0],
            weights: vec![0.0, 0.0, 0.0],
            divergence: Divergence::Kl,
        });
        let g = gradient(&critic, &spec, &pts, &pts).unwrap();
        let expected = (-1.0f64).exp() - 1.0;
        assert!((g[2] - expected).abs() < 1e-12, "bias grad {}", g[2]);
        // Feature components also scale by the same factor when P = Q.
        for k in 0..2 {
            assert!(g[k].abs() < 1.0 && g[k].is_finite());
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for name in ["kl", "total_variation", "jensen_shannon", "reverse_kl"] {
            let spec = get_divergence(name).unwrap();
            let p = gaussian_1d(24, 0.2, 1.1, 10);
            let q = gaussian_1d(24, -0.3, 0.9, 11);
            for trial in 0..3 {
                let mut critic = Critic::FeatureBasis(FeatureBasisCritic {
                    dim: 1,
                    centers: vec![-1.0, 0.0, 1.0],
                    bandwidth: vec![0.8],
                    weights: vec![0.0; 4],
                    divergence: spec.name,
                });
                let params: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.8..0.8)).collect();
                critic.set_parameters(&params).unwrap();
                let g = gradient(&critic, &spec, &p, &q).unwrap();
                let h = 1e-5;
                let mut fd = vec![0.0; 4];
                for k in 0..4 {
                    let mut plus = params.clone();
                    plus[k] += h;
                    let mut minus = params.clone();
                    minus[k] -= h;
                    let mut c2 = critic.clone();
                    c2.set_parameters(&plus).unwrap();
                    let jp = objective(&c2, &spec, &p, &q).unwrap();
                    c2.set_parameters(&minus).unwrap();
                    let jm = objective(&c2, &spec, &p, &q).unwrap();
                    fd[k] = (jp - jm) / (2.0 * h);
                }
                let err = g
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                let scale = g.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
                assert!(
                    err / scale < 1e-4,
                    "{name} trial {trial}: fd mismatch {err} (scale {scale})"
                );
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let spec = get_divergence("squared_hellinger").unwrap();
        let p = gaussian_1d(16, 0.0, 1.0, 20);
        let q = gaussian_1d(16, 0.5, 1.0, 21);
        let mut mlp = MlpCritic::zeroed(1, &[6, 4], 5.0, spec.name);
        init_mlp(&mut mlp, 7);
        let critic = Critic::Mlp(mlp);
        let params = critic.parameters().to_vec();
        let g = gradient(&critic, &spec, &p, &q).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..params.len() {
            let mut plus = params.clone();
            plus[k] += h;
            let mut minus = params.clone();
            minus[k] -= h;
            let mut c2 = critic.clone();
            c2.set_parameters(&plus).unwrap();
            let jp = objective(&c2, &spec, &p, &q).unwrap();
            c2.set_parameters(&minus).unwrap();
            let jm = objective(&c2, &spec, &p, &q).unwrap();
            worst = worst.max(((jp - jm) / (2.0 * h) - g[k]).abs());
        }
        let scale = g.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
        assert!(worst / scale < 1e-4, "mlp fd mismatch {worst}");
    }

    #[test]
    fn fit_identical_samples_gives_near_zero_divergence() {
        let spec = get_divergence("kl").unwrap();
        let pts = gaussian_1d(256, 0.0, 1.0, 5);
        let (critic, report) = fit(
            &CriticClass::FeatureBasis,
            &spec,
            &pts,
            &pts,
            &FitConfig::with_seed(1),
        )
        .unwrap();
        // Divergence estimate is the negated objective at the optimum.
        assert!(report.final_objective.abs() < 0.05);
        let zero = constant_critic(1, 0.0, Divergence::Kl);
        let j_zero = objective(&zero, &spec, &pts, &pts).unwrap();
        let j_fit = objective(&critic, &spec, &pts, &pts).unwrap();
        assert!(j_fit <= j_zero + 1e-12);
        assert!(report.objective_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fit_recovers_gaussian_kl() {
        let spec = get_divergence("kl").unwrap();
        let p = gaussian_1d(2000, 0.0, 1.0, 30);
        let q = gaussian_1d(2000, 1.0, 1.0, 31);
        let (critic, report) = fit(
            &CriticClass::FeatureBasis,
            &spec,
            &p,
            &q,
            &FitConfig::with_seed(2),
        )
        .unwrap();
        let estimate = -report.final_objective;
        assert!(
            (estimate - 0.5).abs() < 0.1,
            "KL estimate {estimate} (iters {})",
            report.iterations
        );
        // The fitted witness approximates t*(x) = f'(q/p)(x) = x + 0.5 near
        // the bulk of P.
        let t0 = evaluate(&critic, &[0.0]).unwrap();
        assert!((t0 - 0.5).abs() < 0.25, "t(0) = {t0}");
    }

    #[test]
    fn fit_is_deterministic_and_restarts_agree() {
        let spec = get_divergence("kl").unwrap();
        let p = gaussian_1d(300, 0.0, 1.0, 40);
        let q = gaussian_1d(300, 0.6, 1.2, 41);
        let cfg = FitConfig::with_seed(9);
        let (c1, r1) = fit(&CriticClass::FeatureBasis, &spec, &p, &q, &cfg).unwrap();
        let (c2, r2) = fit(&CriticClass::FeatureBasis, &spec, &p, &q, &cfg).unwrap();
        assert_eq!(r1.objective_trace, r2.objective_trace);
        assert_eq!(c1.parameters(), c2.parameters());
        // Different seeds land on the same optimum of the convex objective.
        let (_, r3) = fit(
            &CriticClass::FeatureBasis,
            &spec,
            &p,
            &q,
            &FitConfig::with_seed(1234),
        )
        .unwrap();
        assert!(
            (r1.final_objective - r3.final_objective).abs() < 1e-4,
            "restart gap {}",
            (r1.final_objective - r3.final_objective).abs()
        );
    }

    #[test]
    fn fit_rejects_small_samples() {
        let spec = get_divergence("kl").unwrap();
        let p = gaussian_1d(7, 0.0, 1.0, 50);
        let q = gaussian_1d(64, 0.0, 1.0, 51);
        assert!(matches!(
            fit(&CriticClass::FeatureBasis, &spec, &p, &q, &FitConfig::default()),
            Err(Error::TooFewSamples { min: 8, got: 7 })
        ));
    }

    #[test]
    fn critic_serialization_round_trips() {
        let spec = get_divergence("jensen_shannon").unwrap();
        let p = gaussian_1d(64, 0.0, 1.0, 60);
        let q = gaussian_1d(64, 0.4, 1.0, 61);
        let (critic, _) = fit(
            &CriticClass::FeatureBasis,
            &spec,
            &p,
            &q,
            &FitConfig::with_seed(3),
        )
        .unwrap();
        let json = serde_json::to_string(&critic).unwrap();
        assert!(json.contains("\"class\""));
        assert!(json.contains("jensen_shannon"));
        let back: Critic = serde_json::from_str(&json).unwrap();
        assert_eq!(back, critic);
        let mlp = Critic::Mlp(MlpCritic::zeroed(2, &[4], 5.0, Divergence::Kl));
        let back: Critic = serde_json::from_str(&serde_json::to_string(&mlp).unwrap()).unwrap();
        assert_eq!(back, mlp);
    }

    #[test]
    fn mlp_fit_respects_weight_cap() {
        let spec = get_divergence("kl").unwrap();
        let p = gaussian_1d(128, 0.0, 1.0, 70);
        let q = gaussian_1d(128, 1.0, 1.0, 71);
        let (critic, report) = fit(
            &CriticClass::Mlp {
                hidden: vec![8, 8],
                weight_cap: 0.7,
            },
            &spec,
            &p,
            &q,
            &FitConfig {
                max_iterations: 200,
                ..FitConfig::with_seed(4)
            },
        )
        .unwrap();
        assert!(critic.parameters().iter().all(|w| w.abs() <= 0.7 + 1e-12));
        assert!(report.final_objective <= report.objective_trace[0] + 1e-12);
    }
}
