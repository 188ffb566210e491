//! Gaussian-mixture entropy estimation. A full-covariance mixture is fitted
//! to sampled actions by expectation-maximization, and the entropy is read
//! off the per-component closed form
//! `Σ π_k (−log π_k + ½ log((2πe)^d |Σ_k|))`.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::ActionSampler;
use crate::error::{ensure_dim, Error, Result};

pub const DEFAULT_COMPONENTS: usize = 3;
pub const DEFAULT_ACTIONS_PER_STATE: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tolerance: f64,
    /// Added to every covariance diagonal.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            jitter: 1e-6,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.tolerance > 0.0) || !(self.jitter > 0.0) {
            return Err(Error::invalid(
                "EM iterations, tolerance and jitter must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean per-sample log-likelihood of each successive model, starting
    /// with the initialization.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Cholesky-derived quantities for fast density evaluation.
struct Factor {
    inv_lower: DMatrix<f64>,
    log_det: f64,
}

fn factor(cov: &DMatrix<f64>, component: usize) -> Result<Factor> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { component })?;
    let l = chol.l();
    let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv_lower = l
        .solve_lower_triangular(&DMatrix::identity(cov.nrows(), cov.nrows()))
        .ok_or(Error::NotPositiveDefinite { component })?;
    Ok(Factor { inv_lower, log_det })
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let model = Self {
            weights,
            means,
            covariances,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::Empty("mixture components"));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(Error::invalid("mixture parameter counts disagree"));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("mixture weights must form a distribution"));
        }
        let d = self.dim();
        for (i, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            ensure_dim("mixture mean", d, m.len())?;
            if c.shape() != (d, d) {
                return Err(Error::DimensionMismatch {
                    context: "mixture covariance",
                    expected: d,
                    actual: c.nrows(),
                });
            }
            if (c - c.transpose()).abs().max() > 1e-9 * (1.0 + c.abs().max()) {
                return Err(Error::NotPositiveDefinite { component: i });
            }
            factor(c, i)?;
        }
        Ok(())
    }

    /// Per-sample log density.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        ensure_dim("mixture sample", self.dim(), x.len())?;
        let factors = self.factors()?;
        let data = ArrayView2::from_shape((1, x.len()), x).expect("row shape");
        let mut log_r = vec![0.0; self.n_components()];
        Ok(self.component_log_joint(&factors, data, 0, &mut log_r))
    }

    fn factors(&self) -> Result<Vec<Factor>> {
        self.covariances
            .iter()
            .enumerate()
            .map(|(i, c)| factor(c, i))
            .collect()
    }

    /// Fills `out[k] = log π_k + log N(x_n | μ_k, Σ_k)` and returns their
    /// log-sum-exp.
    fn component_log_joint(
        &self,
        factors: &[Factor],
        data: ArrayView2<f64>,
        n: usize,
        out: &mut [f64],
    ) -> f64 {
        let d = self.dim();
        let x = data.row(n);
        for (k, f) in factors.iter().enumerate() {
            let mu = &self.means[k];
            let mut maha = 0.0;
            for i in 0..d {
                let mut y = 0.0;
                for j in 0..=i {
                    y += f.inv_lower[(i, j)] * (x[j] - mu[j]);
                }
                maha += y * y;
            }
            out[k] = self.weights[k].ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + f.log_det + maha);
        }
        log_sum_exp(out)
    }

    /// Mean per-sample log-likelihood.
    pub fn mean_log_likelihood(&self, data: ArrayView2<f64>) -> Result<f64> {
        ensure_dim("mixture data", self.dim(), data.ncols())?;
        let factors = self.factors()?;
        let mut scratch = vec![0.0; self.n_components()];
        let total: f64 = (0..data.nrows())
            .map(|n| self.component_log_joint(&factors, data, n, &mut scratch))
            .sum();
        Ok(total / data.nrows() as f64)
    }

    /// Responsibilities `γ(z_k^n)` (rows sum to one) and the mean
    /// log-likelihood.
    pub fn responsibilities(&self, data: ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
        ensure_dim("mixture data", self.dim(), data.ncols())?;
        let factors = self.factors()?;
        let k = self.n_components();
        let mut resp = Array2::zeros((data.nrows(), k));
        let mut scratch = vec![0.0; k];
        let mut total = 0.0;
        for n in 0..data.nrows() {
            let lse = self.component_log_joint(&factors, data, n, &mut scratch);
            total += lse;
            for j in 0..k {
                resp[[n, j]] = (scratch[j] - lse).exp();
            }
        }
        Ok((resp, total / data.nrows() as f64))
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// The closed-form mixture entropy surrogate in nats. Components with zero
/// weight contribute nothing.
pub fn gmm_entropy(model: &GmmModel) -> Result<f64> {
    let d = model.dim() as f64;
    let mut h = 0.0;
    for (k, (&w, cov)) in model.weights.iter().zip(&model.covariances).enumerate() {
        let log_det = factor(cov, k)?.log_det;
        if w > 0.0 {
            h += w * (-w.ln() + 0.5 * (d * (2.0 * PI * E).ln() + log_det));
        }
    }
    Ok(h)
}

fn kmeans_pp_seeds<R: Rng + ?Sized>(
    data: ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let n = data.nrows();
    let row = |i: usize| DVector::from_iterator(data.ncols(), data.row(i).iter().copied());
    let mut centers = vec![row(rng.random_range(0..n))];
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| (row(i) - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            dist2
                .iter()
                .position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or_else(|| dist2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick);
        for (i, d) in dist2.iter_mut().enumerate() {
            *d = d.min((row(i) - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

/// Fits a `k`-component full-covariance mixture by EM, seeded with
/// k-means++ centers and the pooled covariance.
pub fn fit_em(data: ArrayView2<f64>, k: usize, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let (n, d) = data.dim();
    if k == 0 || d == 0 {
        return Err(Error::invalid(
            "EM needs at least one component and one dimension",
        ));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "EM needs at least {k} samples, got {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("EM samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ones = Array2::ones((n, 1));
    let pooled = m_step_component(data, ones.column(0), config.jitter, None);
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp_seeds(data, k, &mut rng),
        covariances: vec![pooled.1; k],
    };
    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 0..=config.max_iterations {
        let (resp, ll) = model.responsibilities(data)?;
        if let Some(&prev) = trace.last() {
            if ll - prev < config.tolerance {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iteration == config.max_iterations {
            break;
        }
        let mut next = model.clone();
        for j in 0..k {
            let r = resp.column(j);
            let nk: f64 = r.sum();
            next.weights[j] = nk / n as f64;
            if nk > 1e-12 {
                let (mean, cov) = m_step_component(data, r, config.jitter, Some(nk));
                next.means[j] = mean;
                next.covariances[j] = cov;
            }
        }
        let total: f64 = next.weights.iter().sum();
        next.weights.iter_mut().for_each(|w| *w /= total);
        model = next;
    }
    Ok(EmFit {
        model,
        log_likelihood: trace,
        converged,
    })
}

fn m_step_component(
    data: ArrayView2<f64>,
    r: ndarray::ArrayView1<f64>,
    jitter: f64,
    nk: Option<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = data.ncols();
    let nk = nk.unwrap_or_else(|| r.sum());
    let mut mean = DVector::zeros(d);
    for (x, &w) in data.rows().into_iter().zip(r) {
        for i in 0..d {
            mean[i] += w * x[i];
        }
    }
    mean /= nk;
    let mut cov = DMatrix::zeros(d, d);
    for (x, &w) in data.rows().into_iter().zip(r) {
        for i in 0..d {
            let di = x[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += w * di * (x[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov /= nk;
    for i in 0..d {
        cov[(i, i)] += jitter;
    }
    (mean, cov)
}

/// Mean over `states` of the fitted-mixture entropy of the sampler's
/// action distribution at each state.
pub fn estimate_policy_entropy<P: ActionSampler + ?Sized, R: Rng + ?Sized>(
    sampler: &P,
    states: ArrayView2<f64>,
    actions_per_state: usize,
    k: usize,
    config: &EmConfig,
    rng: &mut R,
) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::Empty("entropy state batch"));
    }
    if actions_per_state < k {
        return Err(Error::invalid(
            "actions_per_state must be at least the component count",
        ));
    }
    ensure_dim("entropy state", sampler.state_dim(), states.ncols())?;
    let mut total = 0.0;
    for s in states.rows() {
        let repeated = Array2::from_shape_fn((actions_per_state, s.len()), |(_, j)| s[j]);
        let z = Array2::from_shape_simple_fn((actions_per_state, sampler.action_dim()), || {
            rng.sample(StandardNormal)
        });
        let actions = sampler.act_batch(repeated.view(), z.view())?;
        let fit = fit_em(
            actions.view(),
            k,
            &EmConfig {
                seed: rng.random(),
                ..config.clone()
            },
        )?;
        total += gmm_entropy(&fit.model)?;
    }
    Ok(total / states.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const LOG_2PIE: f64 = 2.837_877_066_409_345_5;

    fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
    }

    fn iso(d: usize, s: f64) -> DMatrix<f64> {
        DMatrix::identity(d, d) * s
    }

    #[test]
    fn entropy_closed_forms() {
        let one = GmmModel::new(vec![1.0], vec![DVector::zeros(1)], vec![iso(1, 1.0)]).unwrap();
        assert!((gmm_entropy(&one).unwrap() - 0.5 * LOG_2PIE).abs() < 1e-12);
        assert!((gmm_entropy(&one).unwrap() - 1.41894).abs() < 1e-5);
        let two_d = GmmModel::new(vec![1.0], vec![DVector::zeros(2)], vec![iso(2, 1.0)]).unwrap();
        assert!((gmm_entropy(&two_d).unwrap() - LOG_2PIE).abs() < 1e-12);
        let split = GmmModel::new(
            vec![0.5, 0.5],
            vec![DVector::zeros(1), DVector::from_element(1, 3.0)],
            vec![iso(1, 1.0), iso(1, 1.0)],
        )
        .unwrap();
        let expected = 2f64.ln() + 0.5 * LOG_2PIE;
        assert!((gmm_entropy(&split).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 2.11208).abs() < 1e-5);
    }

    #[test]
    fn entropy_matches_gaussian_with_general_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
        let det: f64 = 2.0 * 0.5 - 0.36;
        let m = GmmModel::new(vec![1.0], vec![DVector::zeros(2)], vec![cov]).unwrap();
        assert!((gmm_entropy(&m).unwrap() - (LOG_2PIE + 0.5 * det.ln())).abs() < 1e-12);
    }

    #[test]
    fn model_validation() {
        assert!(GmmModel::new(vec![0.7], vec![DVector::zeros(1)], vec![iso(1, 1.0)]).is_err());
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GmmModel::new(vec![1.0], vec![DVector::zeros(2)], vec![not_pd]),
            Err(Error::NotPositiveDefinite { component: 0 })
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GmmModel::new(vec![1.0], vec![DVector::zeros(2)], vec![asym]).is_err());
    }

    #[test]
    fn single_component_is_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = gaussian(500, 3, &mut rng) * 0.7 + 0.2;
        let cfg = EmConfig::default();
        let fit = fit_em(data.view(), 1, &cfg).unwrap();
        let n = data.nrows() as f64;
        let mean: Array1<f64> = data.mean_axis(ndarray::Axis(0)).unwrap();
        let centered = &data - &mean;
        let cov = centered.t().dot(&centered) / n;
        assert_eq!(fit.model.weights, vec![1.0]);
        for i in 0..3 {
            assert!((fit.model.means[0][i] - mean[i]).abs() < 1e-12);
            for j in 0..3 {
                let jit = if i == j { cfg.jitter } else { 0.0 };
                assert!((fit.model.covariances[0][(i, j)] - cov[[i, j]] - jit).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recovers_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = gaussian(2000, 2, &mut rng);
        for (i, mut row) in data.rows_mut().into_iter().enumerate() {
            row[0] += if i % 2 == 0 { 5.0 } else { -5.0 };
        }
        let fit = fit_em(data.view(), 2, &EmConfig::default()).unwrap();
        let mut means: Vec<_> = fit.model.means.iter().map(|m| (m[0], m[1])).collect();
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(
            (means[0].0 + 5.0).abs() < 0.2 && means[0].1.abs() < 0.2,
            "{means:?}"
        );
        assert!(
            (means[1].0 - 5.0).abs() < 0.2 && means[1].1.abs() < 0.2,
            "{means:?}"
        );
        assert!(fit.model.weights.iter().all(|w| (w - 0.5).abs() < 0.05));
        assert!(fit.converged);
    }

    #[test]
    fn identical_samples_collapse_to_jitter() {
        let data = Array2::from_shape_fn((50, 2), |(_, j)| [0.3, -0.4][j]);
        let cfg = EmConfig::default();
        let fit = fit_em(data.view(), 3, &cfg).unwrap();
        for (m, c) in fit.model.means.iter().zip(&fit.model.covariances) {
            assert!((m[0] - 0.3).abs() < 1e-12 && (m[1] + 0.4).abs() < 1e-12);
            assert!((c - iso(2, cfg.jitter)).abs().max() < 1e-15);
        }
        let h = gmm_entropy(&fit.model).unwrap();
        let expected = 3f64.ln() + 0.5 * 2.0 * (2.0 * PI * E * cfg.jitter).ln();
        assert!((h - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_too_few_samples() {
        let data = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(fit_em(data.view(), 3, &EmConfig::default()).is_err());
        assert!(fit_em(data.view(), 0, &EmConfig::default()).is_err());
    }

    #[test]
    fn responsibilities_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gaussian(300, 2, &mut rng);
        let fit = fit_em(data.view(), 3, &EmConfig::default()).unwrap();
        let (resp, _) = fit.model.responsibilities(data.view()).unwrap();
        for row in resp.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_density_matches_gaussian_formula() {
        let m = GmmModel::new(
            vec![1.0],
            vec![DVector::from_vec(vec![1.0, -1.0])],
            vec![iso(2, 4.0)],
        )
        .unwrap();
        let x = [2.0, 1.0];
        let expected = -(2.0 * PI).ln() - 0.5 * 16f64.ln() - 0.5 * (1.0 + 4.0) / 4.0;
        assert!((m.log_density(&x).unwrap() - expected).abs() < 1e-12);
    }

    struct Identity;

    impl ActionSampler for Identity {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            2
        }
        fn act_batch(&self, _s: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>> {
            Ok(z.to_owned())
        }
    }

    struct Constant;

    impl ActionSampler for Constant {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            2
        }
        fn act_batch(&self, s: ArrayView2<f64>, _z: ArrayView2<f64>) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((s.nrows(), 2), 0.25))
        }
    }

    #[test]
    fn identity_sampler_entropy_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = array![[0.0]];
        let h = estimate_policy_entropy(
            &Identity,
            states.view(),
            10_000,
            1,
            &EmConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!((h - LOG_2PIE).abs() < 0.05, "{h}");
        // Overlapping components add their mixing entropy on top.
        let h3 = estimate_policy_entropy(
            &Identity,
            states.view(),
            10_000,
            3,
            &EmConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(h3 > LOG_2PIE + 0.05, "{h3}");
    }

    #[test]
    fn deterministic_sampler_gives_degenerate_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EmConfig::default();
        let states = array![[0.0], [1.0]];
        let degenerate = (2.0 * PI * E * cfg.jitter).ln();
        for k in [1, 3] {
            let h =
                estimate_policy_entropy(&Constant, states.view(), 50, k, &cfg, &mut rng).unwrap();
            assert!(
                (h - ((k as f64).ln() + degenerate)).abs() < 1e-9,
                "k={k}: {h}"
            );
        }
    }

    #[test]
    fn identical_states_agree_within_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = EmConfig::default();
        let reps: Vec<(f64, f64)> = (0..20)
            .map(|_| {
                let a = estimate_policy_entropy(
                    &Identity,
                    array![[0.0]].view(),
                    200,
                    3,
                    &cfg,
                    &mut rng,
                )
                .unwrap();
                let b = estimate_policy_entropy(
                    &Identity,
                    array![[1.0]].view(),
                    200,
                    3,
                    &cfg,
                    &mut rng,
                )
                .unwrap();
                (a, b)
            })
            .collect();
        let diffs: Vec<f64> = reps.iter().map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64)
            .sqrt();
        assert!(
            mean.abs() < 3.0 * sd / (diffs.len() as f64).sqrt(),
            "{mean} {sd}"
        );
    }

    #[test]
    fn entropy_estimate_validates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = EmConfig::default();
        assert!(estimate_policy_entropy(
            &Identity,
            Array2::zeros((0, 1)).view(),
            10,
            3,
            &cfg,
            &mut rng
        )
        .is_err());
        assert!(
            estimate_policy_entropy(&Identity, array![[0.0]].view(), 2, 3, &cfg, &mut rng).is_err()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn em_log_likelihood_is_monotone(seed in any::<u64>(), n in 20usize..200, d in 1usize..4, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers = gaussian(k, d, &mut rng) * 3.0;
            let data = Array2::from_shape_fn((n, d), |(i, j)| {
                centers[[i % k, j]] + rng.sample::<f64, _>(StandardNormal)
            });
            let fit = fit_em(data.view(), k, &EmConfig { seed, ..EmConfig::default() }).unwrap();
            for w in fit.log_likelihood.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.log_likelihood);
            }
            prop_assert!((fit.model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
