//! Covariance matrix adaptation evolution strategy, the (mu/mu_w, lambda)
//! variant with rank-based recombination weights, cumulative step-size
//! adaptation, and rank-1 plus rank-mu covariance updates.
//!
//! Updates depend on candidate values only through their ranking, so any
//! strictly increasing transform of the objective leaves the iterate
//! sequence bit-identical under a shared seed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct CmaOptions {
    /// Population size; defaults to 4 + floor(3 ln d).
    pub lambda: Option<usize>,
    pub max_generations: usize,
    /// Stop once the best value drops to or below this.
    pub target_value: Option<f64>,
    /// Stop when sigma times the largest covariance axis collapses.
    pub tol_sigma: f64,
    /// Per-coordinate initial standard deviations (diagonal of C0) relative
    /// to the global sigma0.
    pub initial_stds: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for CmaOptions {
    fn default() -> Self {
        CmaOptions {
            lambda: None,
            max_generations: 300,
            target_value: None,
            tol_sigma: 1e-14,
            initial_stds: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    TargetReached,
    MaxGenerations,
    SigmaCollapse,
}

/// Per-generation record; the means make rank-invariance checkable.
#[derive(Debug, Clone, Serialize)]
pub struct GenRecord {
    pub best: f64,
    pub sigma: f64,
    pub mean: Vec<f64>,
    pub min_eig: f64,
    pub max_eig: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CmaResult {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub evaluations: usize,
    pub generations: usize,
    pub stop: StopReason,
    pub trace: Vec<GenRecord>,
}

/// Search state: distribution mean, global step size, covariance, and the
/// two evolution paths.
pub struct CmaState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub path_sigma: DVector<f64>,
    pub path_cov: DVector<f64>,
    pub lambda: usize,
    pub generation: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_cov_path: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl CmaState {
    pub fn new(x0: &[f64], sigma0: f64, opts: &CmaOptions) -> Result<CmaState> {
        let d = x0.len();
        if d == 0 {
            return Err(Error::Contract("CMA needs at least one dimension".into()));
        }
        if sigma0 <= 0.0 {
            return Err(Error::Contract("sigma0 must be positive".into()));
        }
        let lambda = opts.lambda.unwrap_or(4 + (3.0 * (d as f64).ln()).floor() as usize).max(4);
        let mu = lambda / 2;
        let mut weights: Vec<f64> =
            (1..=mu).map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln()).collect();
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let df = d as f64;
        let c_sigma = (mu_eff + 2.0) / (df + mu_eff + 5.0);
        let d_sigma =
            1.0 + 2.0 * (((mu_eff - 1.0) / (df + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_cov_path = (4.0 + mu_eff / df) / (df + 4.0 + 2.0 * mu_eff / df);
        let c1 = 2.0 / ((df + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((df + 2.0).powi(2) + mu_eff));
        let chi_n = df.sqrt() * (1.0 - 1.0 / (4.0 * df) + 1.0 / (21.0 * df * df));

        let mut cov = DMatrix::identity(d, d);
        if let Some(stds) = &opts.initial_stds {
            if stds.len() != d {
                return Err(Error::Contract("initial_stds length mismatch".into()));
            }
            for (i, s) in stds.iter().enumerate() {
                cov[(i, i)] = s * s;
            }
        }
        Ok(CmaState {
            mean: DVector::from_column_slice(x0),
            sigma: sigma0,
            cov,
            path_sigma: DVector::zeros(d),
            path_cov: DVector::zeros(d),
            lambda,
            generation: 0,
            weights,

            mu_eff,
            c_sigma,
            d_sigma,
            c_cov_path,
            c1,
            c_mu,
            chi_n,
        })
    }
}

/// Minimize `objective` starting from `x0` with step size `sigma0`.
///
/// Candidates of one generation are evaluated in parallel; a candidate that
/// returns a non-finite value is ranked worst rather than aborting the run.
pub fn cma_minimize<F>(objective: F, x0: &[f64], sigma0: f64, opts: &CmaOptions) -> Result<CmaResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = x0.len();
    let mut st = CmaState::new(x0, sigma0, opts)?;
    let mut rng = rng::stream(opts.seed, 0xc3a_e5);
    let mut best_x = x0.to_vec();
    let mut best_f = f64::INFINITY;
    let mut evaluations = 0usize;
    let mut trace = Vec::new();
    let mut stop = StopReason::MaxGenerations;

    'outer: for gen in 0..opts.max_generations {
        st.generation = gen;
        // Eigendecomposition C = B D^2 B^T with a positivity floor.
        let sym = SymmetricEigen::new(st.cov.clone());
        let max_eig = sym.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
        let floor = max_eig.max(1e-300) * 1e-14;
        let eigs: Vec<f64> = sym.eigenvalues.iter().map(|e| e.max(floor)).collect();
        let min_eig = eigs.iter().copied().fold(f64::MAX, f64::min);
        let b = &sym.eigenvectors;
        let d_sqrt: Vec<f64> = eigs.iter().map(|e| e.sqrt()).collect();

        if st.sigma * d_sqrt.iter().cloned().fold(f64::MIN, f64::max) < opts.tol_sigma {
            stop = StopReason::SigmaCollapse;
            break;
        }

        // Sample lambda candidates x = m + sigma * B D z.
        let zs: Vec<DVector<f64>> = (0..st.lambda)
            .map(|_| DVector::from_fn(d, |_, _| normal(&mut rng)))
            .collect();
        let ys: Vec<DVector<f64>> = zs
            .iter()
            .map(|z| {
                let dz = DVector::from_fn(d, |i, _| d_sqrt[i] * z[i]);
                b * dz
            })
            .collect();
        let xs: Vec<Vec<f64>> =
            ys.iter().map(|y| (&st.mean + y * st.sigma).iter().cloned().collect()).collect();

        let values: Vec<f64> = xs.par_iter().map(|x| objective(x)).collect();
        evaluations += st.lambda;

        // Rank ascending; non-finite values sort worst, ties by index.
        let mut order: Vec<usize> = (0..st.lambda).collect();
        order.sort_by(|&i, &j| {
            let a = if values[i].is_finite() { values[i] } else { f64::INFINITY };
            let bv = if values[j].is_finite() { values[j] } else { f64::INFINITY };
            a.partial_cmp(&bv).unwrap().then(i.cmp(&j))
        });
        let gen_best = order[0];
        if values[gen_best].is_finite() && values[gen_best] < best_f {
            best_f = values[gen_best];
            best_x = xs[gen_best].clone();
        }

        // Recombination.
        let mut y_w = DVector::zeros(d);
        let mut z_w = DVector::zeros(d);
        for (k, w) in st.weights.iter().enumerate() {
            y_w += &ys[order[k]] * *w;
            z_w += &zs[order[k]] * *w;
        }
        st.mean += &y_w * st.sigma;

        // Step-size path uses C^(-1/2)(m'-m)/sigma = B z_w.
        let bz = b * &z_w;
        let cs = st.c_sigma;
        st.path_sigma = &st.path_sigma * (1.0 - cs) + bz * (cs * (2.0 - cs) * st.mu_eff).sqrt();
        let ps_norm = st.path_sigma.norm();
        let hsig_denom = (1.0 - (1.0 - cs).powi(2 * (gen as i32 + 1))).sqrt();
        let hsig = ps_norm / hsig_denom / st.chi_n < 1.4 + 2.0 / (d as f64 + 1.0);

        let cc = st.c_cov_path;
        let hs = if hsig { 1.0 } else { 0.0 };
        st.path_cov = &st.path_cov * (1.0 - cc) + &y_w * (hs * (cc * (2.0 - cc) * st.mu_eff).sqrt());

        // Covariance: rank-1 + rank-mu.
        let delta_hsig = (1.0 - hs) * cc * (2.0 - cc);
        let mut new_cov = &st.cov * (1.0 - st.c1 - st.c_mu + st.c1 * delta_hsig);
        new_cov += &st.path_cov * st.path_cov.transpose() * st.c1;
        for (k, w) in st.weights.iter().enumerate() {
            let y = &ys[order[k]];
            new_cov += y * y.transpose() * (st.c_mu * *w);
        }
        // Keep exact symmetry.
        st.cov = (&new_cov + new_cov.transpose()) * 0.5;

        st.sigma *= ((cs / st.d_sigma) * (ps_norm / st.chi_n - 1.0)).exp();

        trace.push(GenRecord {
            best: values[gen_best],
            sigma: st.sigma,
            mean: st.mean.iter().cloned().collect(),
            min_eig,
            max_eig,
        });

        if let Some(t) = opts.target_value {
            if best_f <= t {
                stop = StopReason::TargetReached;
                break 'outer;
            }
        }
    }

    Ok(CmaResult {
        best_x,
        best_f,
        evaluations,
        generations: trace.len(),
        stop,
        trace,
    })
}

fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
