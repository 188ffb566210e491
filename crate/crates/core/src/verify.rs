//! Monte Carlo checks of the noise-injected path and its consequences.
//!
//! Every check owns a seeded generator and returns [`VerifyReport`]s; a
//! report passes when its statistic is at most its tolerance.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::flow::{
    fino_loss, integrate, perturbed_flow, target_noise_loss, FlowBatch, NoiseSchedule, TargetMode,
    VectorFieldNet,
};
use crate::nn::{adam_step, AdamState};

/// Minimum sample count for the path moment check.
pub const MIN_PATH_SAMPLES: usize = 100_000;
/// Mean tolerance in units of `1/√n`.
pub const PATH_MEAN_SIGMAS: f64 = 4.0;
pub const PATH_VARIANCE_REL_TOL: f64 = 0.01;
/// Absolute slack on variance comparisons whose target is zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const MIXTURE_VARIANCE_REL_TOL: f64 = 0.02;
pub const SINGLE_POINT_MEAN_TOL: f64 = 0.05;
pub const SINGLE_POINT_STD_REL_TOL: f64 = 0.2;
/// Collapse threshold on the per-dimension std when no noise is injected.
pub const COLLAPSE_STD_TOL: f64 = 0.05;
pub const NOOP_STANDARD_ERRORS: f64 = 3.0;
pub const MIN_NOOP_DRAWS: usize = 10_000;

/// Outcome of one numerical check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub check: String,
    pub statistic: f64,
    pub tolerance: f64,
    #[serde(rename = "pass")]
    pub passed: bool,
    pub samples: usize,
}

impl VerifyReport {
    pub fn new(check: impl Into<String>, statistic: f64, tolerance: f64, samples: usize) -> Self {
        Self {
            check: check.into(),
            statistic,
            tolerance,
            passed: statistic.is_finite() && statistic <= tolerance,
            samples,
        }
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: statistic {:.6e} tolerance {:.6e} (n = {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.check,
            self.statistic,
            self.tolerance,
            self.samples
        )
    }
}

pub fn all_passed(reports: &[VerifyReport]) -> bool {
    !reports.is_empty() && reports.iter().all(|r| r.passed)
}

/// One JSON object per line.
pub fn write_reports<W: Write>(reports: &[VerifyReport], mut w: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Decode(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Gaussian conditional path `N(t·xᵢ, (1 − (1 − η)t)² I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPath {
    pub eta: f64,
    pub t: f64,
}

impl GaussianPath {
    pub fn new(eta: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) || !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!(
                "path parameters eta={eta}, t={t} outside [0, 1]"
            )));
        }
        Ok(Self { eta, t })
    }

    pub fn mean(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter().map(|x| self.t * x).collect()
    }

    pub fn variance(&self) -> f64 {
        let s = 1.0 - (1.0 - self.eta) * self.t;
        s * s
    }
}

fn rel_error(estimate: f64, target: f64) -> f64 {
    let diff = (estimate - target).abs();
    if diff <= VARIANCE_FLOOR {
        0.0
    } else {
        diff / target.abs()
    }
}

/// Samples the input of the noise-injected loss at each `t` and compares its
/// per-dimension mean and variance with the Gaussian path.
pub fn check_conditional_path(
    eta: f64,
    times: &[f64],
    xi: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<VerifyReport>> {
    if n_samples < MIN_PATH_SAMPLES {
        return Err(Error::invalid(format!(
            "path check needs at least {MIN_PATH_SAMPLES} samples, got {n_samples}"
        )));
    }
    if xi.is_empty() {
        return Err(Error::Empty("data point"));
    }
    let schedule = NoiseSchedule::quadratic(eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = xi.len();
    let mut reports = Vec::with_capacity(2 * times.len());
    for &t in times {
        let path = GaussianPath::new(eta, t)?;
        let alpha = schedule.sigma(t)?;
        let target_mean = path.mean(xi);
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let mut x0 = vec![0.0; d];
        let mut eps = vec![0.0; d];
        for _ in 0..n_samples {
            for j in 0..d {
                x0[j] = rng.sample(StandardNormal);
                eps[j] = alpha * rng.sample::<f64, _>(StandardNormal);
            }
            let x = perturbed_flow(&x0, xi, t, &eps)?;
            // Centred on the target mean so a zero-variance path stays exact.
            for j in 0..d {
                let y = x[j] - target_mean[j];
                sum[j] += y;
                sum_sq[j] += y * y;
            }
        }
        let n = n_samples as f64;
        let mut mean_err: f64 = 0.0;
        let mut var_err: f64 = 0.0;
        for j in 0..d {
            let m = sum[j] / n;
            let v = (sum_sq[j] - n * m * m) / (n - 1.0);
            mean_err = mean_err.max(m.abs());
            var_err = var_err.max(rel_error(v.max(0.0), path.variance()));
        }
        let tag = format!("eta={eta},t={t}");
        reports.push(VerifyReport::new(
            format!("conditional_path.mean[{tag}]"),
            mean_err,
            PATH_MEAN_SIGMAS / n.sqrt(),
            n_samples,
        ));
        reports.push(VerifyReport::new(
            format!("conditional_path.variance[{tag}]"),
            var_err,
            PATH_VARIANCE_REL_TOL,
            n_samples,
        ));
    }
    Ok(reports)
}

/// Total variance (trace of the covariance) of the marginal path over an
/// equally weighted point set: `d·σₜ² + t²·(mean ‖xᵢ‖² − ‖x̄‖²)`.
///
/// Returns `(noise_injected, plain)`.
pub fn marginal_variance_closed_form(points: &[Vec<f64>], t: f64, eta: f64) -> Result<(f64, f64)> {
    let d = check_points(points)?;
    let fino = GaussianPath::new(eta, t)?.variance();
    let plain = GaussianPath::new(0.0, t)?.variance();
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sq = 0.0;
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
        sq += p.iter().map(|x| x * x).sum::<f64>() / n;
    }
    let between = t * t * (sq - mean.iter().map(|m| m * m).sum::<f64>());
    let d = d as f64;
    Ok((d * fino + between, d * plain + between))
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    if !(2..=64).contains(&points.len()) {
        return Err(Error::invalid(format!(
            "point set must hold 2 to 64 points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if d == 0 {
        return Err(Error::Empty("point dimension"));
    }
    for p in points {
        ensure_dim("point dimension", d, p.len())?;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("point set"));
        }
    }
    Ok(d)
}

/// Monte Carlo estimate of the marginal total variance: pick a point
/// uniformly, then draw from its conditional path through the quadratic
/// schedule.
pub fn marginal_variance_monte_carlo<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    t: f64,
    eta: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let d = check_points(points)?;
    if n_samples < 2 {
        return Err(Error::invalid(
            "variance estimate needs at least two samples",
        ));
    }
    let alpha = NoiseSchedule::quadratic(eta)?.sigma(t)?;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut x0 = vec![0.0; d];
    let mut eps = vec![0.0; d];
    for _ in 0..n_samples {
        let xi = &points[rng.random_range(0..points.len())];
        for j in 0..d {
            x0[j] = rng.sample(StandardNormal);
            eps[j] = alpha * rng.sample::<f64, _>(StandardNormal);
        }
        let x = perturbed_flow(&x0, xi, t, &eps)?;
        for j in 0..d {
            let y = x[j] - t * points[0][j];
            sum[j] += y;
            sum_sq[j] += y * y;
        }
    }
    let n = n_samples as f64;
    Ok(sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, q)| (q - s * s / n) / (n - 1.0))
        .sum())
}

/// Noise-injected marginal variance is at least the plain one at every `t`,
/// and both closed forms agree with Monte Carlo.
pub fn check_variance_ordering(
    points: &[Vec<f64>],
    eta: f64,
    times: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<VerifyReport>> {
    check_points(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(3 * times.len());
    let tag = |t: f64| format!("n={},eta={eta},t={t}", points.len());
    for &t in times {
        let (fino, plain) = marginal_variance_closed_form(points, t, eta)?;
        reports.push(VerifyReport::new(
            format!("variance_ordering.order[{}]", tag(t)),
            plain - fino,
            0.0,
            0,
        ));
        let mc_fino = marginal_variance_monte_carlo(points, t, eta, n_samples, &mut rng)?;
        reports.push(VerifyReport::new(
            format!("variance_ordering.noise_injected_mc[{}]", tag(t)),
            rel_error(mc_fino, fino),
            MIXTURE_VARIANCE_REL_TOL,
            n_samples,
        ));
        let mc_plain = marginal_variance_monte_carlo(points, t, 0.0, n_samples, &mut rng)?;
        reports.push(VerifyReport::new(
            format!("variance_ordering.plain_mc[{}]", tag(t)),
            rel_error(mc_plain, plain),
            MIXTURE_VARIANCE_REL_TOL,
            n_samples,
        ));
    }
    Ok(reports)
}

/// Training setup for [`check_single_point_generation`].
#[derive(Debug, Clone, PartialEq)]
pub struct SinglePointSetup {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub flow_steps: usize,
    pub seed: u64,
}

impl Default for SinglePointSetup {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            batch_size: 256,
            learning_rate: 1e-3,
            flow_steps: 10,
            seed: 0,
        }
    }
}

/// Trains a field on the single point `xi` with the exact target and the
/// quadratic schedule, then integrates fresh base noise without clamping.
/// Returns the generated samples, one per row.
pub fn train_single_point_field(
    eta: f64,
    xi: &[f64],
    train_steps: usize,
    n_samples: usize,
    setup: &SinglePointSetup,
) -> Result<Array2<f64>> {
    if xi.is_empty() {
        return Err(Error::Empty("data point"));
    }
    if n_samples < 2 || setup.batch_size == 0 {
        return Err(Error::invalid(
            "need at least two samples and a positive batch size",
        ));
    }
    let d = xi.len();
    let schedule = NoiseSchedule::quadratic(eta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut field = VectorFieldNet::new(1, d, &setup.hidden, &mut rng)?;
    let mut opt = AdamState::new(field.net(), setup.learning_rate);
    let states = Array2::zeros((setup.batch_size, 1));
    let actions = Array2::from_shape_fn((setup.batch_size, d), |(_, j)| xi[j]);
    for step in 1..=train_steps {
        let batch = FlowBatch::draw(states.view(), actions.view(), &schedule, &mut rng)?;
        let g =
            fino_loss(&field, &batch, &schedule, TargetMode::Exact).map_err(|e| e.at_step(step))?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite("single-point training loss").at_step(step));
        }
        adam_step(field.net_mut(), &mut opt, &g)?;
    }
    let z = Array2::from_shape_simple_fn((n_samples, d), || rng.sample(StandardNormal));
    integrate(
        &field,
        Array2::zeros((n_samples, 1)).view(),
        z.view(),
        setup.flow_steps,
    )
}

/// Generated samples match `N(xᵢ, η² I)`: mean within 0.05 and per-dim std
/// within 20% of `η` (absolute 0.05 when `η = 0`).
pub fn check_single_point_generation(
    eta: f64,
    xi: &[f64],
    train_steps: usize,
    n_samples: usize,
    setup: &SinglePointSetup,
) -> Result<Vec<VerifyReport>> {
    let samples = train_single_point_field(eta, xi, train_steps, n_samples, setup)?;
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let std = samples.std_axis(Axis(0), 1.0);
    let mean_err = mean
        .iter()
        .zip(xi)
        .map(|(m, x)| (m - x).abs())
        .fold(0.0, f64::max);
    let tag = format!("eta={eta}");
    let std_report = if eta == 0.0 {
        VerifyReport::new(
            format!("single_point.collapse[{tag}]"),
            std.iter().copied().fold(0.0, f64::max),
            COLLAPSE_STD_TOL,
            n_samples,
        )
    } else {
        VerifyReport::new(
            format!("single_point.std[{tag}]"),
            std.iter()
                .map(|s| (s - eta).abs() / eta)
                .fold(0.0, f64::max),
            SINGLE_POINT_STD_REL_TOL,
            n_samples,
        )
    };
    Ok(vec![
        VerifyReport::new(
            format!("single_point.mean[{tag}]"),
            mean_err,
            SINGLE_POINT_MEAN_TOL,
            n_samples,
        ),
        std_report,
    ])
}

/// Averages the gradient of the target-noise loss over `n_draws` noise
/// draws and compares it with the noiseless flow-matching gradient. The
/// tolerance is three times the norm of the Monte Carlo standard error.
pub fn check_target_noise_noop(
    net: &VectorFieldNet,
    batch: &FlowBatch,
    noise_std: f64,
    n_draws: usize,
    seed: u64,
) -> Result<VerifyReport> {
    if n_draws == 0 {
        return Err(Error::invalid("need at least one noise draw"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise std {noise_std} must be finite and non-negative"
        )));
    }
    let mut clean = batch.clone();
    clean.eps.fill(0.0);
    let reference = fino_loss(
        net,
        &clean,
        &NoiseSchedule::quadratic(0.0)?,
        TargetMode::Plain,
    )?
    .to_flat();

    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = reference.len();
    let mut mean = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    let mut noise = Array2::zeros(batch.x0.raw_dim());
    for k in 1..=n_draws {
        noise.mapv_inplace(|_| normal.sample(&mut rng));
        let g = target_noise_loss(net, batch, noise.view())?.to_flat();
        for ((m, s), x) in mean.iter_mut().zip(m2.iter_mut()).zip(&g) {
            let delta = x - *m;
            *m += delta / k as f64;
            *s += delta * (x - *m);
        }
    }
    let n = n_draws as f64;
    let diff = mean
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let se = if n_draws > 1 {
        (m2.iter().sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(VerifyReport::new(
        format!("target_noise_noop[std={noise_std}]"),
        diff,
        NOOP_STANDARD_ERRORS * se,
        n_draws,
    ))
}

/// Evaluation grid for [`kde_log_density`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (-1.0, 1.0),
            y_range: (-1.0, 1.0),
            nx: 101,
            ny: 101,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ok(self.x_range) || !ok(self.y_range) || self.nx < 2 || self.ny < 2 {
            return Err(Error::invalid(
                "grid needs finite increasing ranges and at least 2 points per axis",
            ));
        }
        Ok(())
    }

    pub fn spacing(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / (self.nx - 1) as f64,
            (self.y_range.1 - self.y_range.0) / (self.ny - 1) as f64,
        )
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_range.0 + i as f64 * self.spacing().0
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y_range.0 + j as f64 * self.spacing().1
    }
}

/// Log-density estimates on a grid. Rows run over `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid_spec: GridSpec,
    pub bandwidth: (f64, f64),
    /// `nx · ny` values, index `j · nx + i`.
    pub log_density: Vec<f64>,
}

impl DensityGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.log_density[j * self.grid_spec.nx + i]
    }

    /// Trapezoid-rule integral of the density over the grid.
    pub fn total_mass(&self) -> f64 {
        let (dx, dy) = self.grid_spec.spacing();
        let (nx, ny) = (self.grid_spec.nx, self.grid_spec.ny);
        let mut total = 0.0;
        for j in 0..ny {
            let wy = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
            for i in 0..nx {
                let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                total += wx * wy * self.at(i, j).exp();
            }
        }
        total * dx * dy
    }

    /// Grid index of the highest density.
    pub fn argmax(&self) -> (usize, usize) {
        let k = self
            .log_density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                if v > best.1 {
                    (k, v)
                } else {
                    best
                }
            })
            .0;
        (k % self.grid_spec.nx, k / self.grid_spec.nx)
    }

    /// `x,y,log_density` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,log_density")?;
        for j in 0..self.grid_spec.ny {
            for i in 0..self.grid_spec.nx {
                writeln!(
                    w,
                    "{},{},{}",
                    self.grid_spec.x(i),
                    self.grid_spec.y(j),
                    self.at(i, j)
                )?;
            }
        }
        Ok(())
    }
}

/// Per-axis Silverman bandwidth for two dimensions, `σⱼ · n^(−1/6)`, floored
/// at half the grid spacing.
fn silverman_bandwidth(samples: ArrayView2<f64>, grid_spec: &GridSpec) -> (f64, f64) {
    let n = samples.nrows() as f64;
    let std = samples.std_axis(Axis(0), 1.0);
    let factor = n.powf(-1.0 / 6.0);
    let (dx, dy) = grid_spec.spacing();
    (
        (std[0] * factor).max(0.5 * dx),
        (std[1] * factor).max(0.5 * dy),
    )
}

/// Gaussian product-kernel density estimate of 2-D samples.
pub fn kde_log_density(samples: ArrayView2<f64>, grid_spec: &GridSpec) -> Result<DensityGrid> {
    grid_spec.validate()?;
    ensure_dim("density samples", 2, samples.ncols())?;
    if samples.nrows() < 2 {
        return Err(Error::invalid(
            "density estimate needs at least two samples",
        ));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("density samples"));
    }
    let (hx, hy) = silverman_bandwidth(samples, grid_spec);
    let log_norm = -(samples.nrows() as f64).ln() - (2.0 * std::f64::consts::PI * hx * hy).ln();
    let mut log_density = Vec::with_capacity(grid_spec.nx * grid_spec.ny);
    let mut terms = vec![0.0; samples.nrows()];
    for j in 0..grid_spec.ny {
        let y = grid_spec.y(j);
        for i in 0..grid_spec.nx {
            let x = grid_spec.x(i);
            for (term, s) in terms.iter_mut().zip(samples.rows()) {
                let u = (x - s[0]) / hx;
                let v = (y - s[1]) / hy;
                *term = -0.5 * (u * u + v * v);
            }
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
            log_density.push(lse + log_norm);
        }
    }
    Ok(DensityGrid {
        grid_spec: *grid_spec,
        bandwidth: (hx, hy),
        log_density,
    })
}

/// Draws `n_samples` flow actions at `state` (clamped to the action box)
/// and estimates their log-density on `grid_spec`.
pub fn export_log_density<R: Rng + ?Sized>(
    net: &VectorFieldNet,
    state: &[f64],
    grid_spec: &GridSpec,
    n_samples: usize,
    flow_steps: usize,
    rng: &mut R,
) -> Result<DensityGrid> {
    if net.action_dim() != 2 {
        return Err(Error::invalid(format!(
            "log-density export needs a 2-D action space, got {}",
            net.action_dim()
        )));
    }
    ensure_dim("density state", net.state_dim(), state.len())?;
    let states = Array2::from_shape_fn((n_samples, state.len()), |(_, j)| state[j]);
    let z = Array2::from_shape_simple_fn((n_samples, 2), || rng.sample(StandardNormal));
    let samples = crate::flow::sample_actions(net, states.view(), z.view(), flow_steps)?;
    kde_log_density(samples.view(), grid_spec)
}

/// Sum of per-dimension sample variances.
pub fn total_variance(samples: ArrayView2<f64>) -> f64 {
    if samples.nrows() < 2 {
        return 0.0;
    }
    samples.var_axis(Axis(0), 1.0).sum()
}
