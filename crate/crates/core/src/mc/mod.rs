//! Monte Carlo engine: Euler–Maruyama simulation, path-level actions of
//! finite transformations, Girsanov weights, and the quasi-invariance and
//! integration-by-parts estimators with standard errors.
//!
//! Noise is a counter-based stream keyed by (seed, path, step, component),
//! so a path depends only on its index: results are bit-identical for any
//! thread count, and heavy estimators stream paths through thread-local
//! buffers instead of materializing the whole ensemble.
//!
//! All Itô integrals are left-point sums over the stored increments, the
//! convention every estimated formula requires.

pub mod rng;

mod dump;

pub use dump::{read_ensemble, write_ensemble};

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::CompiledExpr;
use crate::fields::{FieldError, MatrixField, ScalarField, VectorField};
use crate::sde::{apply_generator, SdeError, SdeModel};
use crate::symmetry::{InfinitesimalSymmetry, SymmetryError};
use crate::transform::{FiniteTransformation, TransformError};

/// Overflow guard: any state component beyond this magnitude aborts the path.
const BLOWUP_GUARD: f64 = 1e12;
/// Girsanov log-weights beyond this magnitude are flagged (never dropped).
const LOG_WEIGHT_FLAG: f64 = 50.0;

#[derive(Debug, Error)]
pub enum McError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error("numerical blowup on path {path} at step {step}")]
    NumericalBlowup { path: usize, step: usize },
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("time {t} not covered by the simulated horizon {horizon}")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Simulation parameters. The horizon must be an integer number of steps.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimulationConfig {
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub seed: u64,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

fn default_chunk() -> usize {
    4096
}

fn default_dt() -> f64 {
    1e-3
}

fn default_horizon() -> f64 {
    1.0
}

impl SimulationConfig {
    pub fn n_steps(&self) -> Result<usize, McError> {
        if self.n_paths == 0 {
            return Err(McError::Config("n_paths must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(McError::Config("dt must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(McError::Config("chunk_size must be positive".into()));
        }
        let k = self.horizon / self.dt;
        let rounded = k.round();
        if (k - rounded).abs() > 1e-9 * (1.0 + rounded.abs()) || rounded < 1.0 {
            return Err(McError::Config(format!(
                "horizon {} is not an integer multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        Ok(rounded as usize)
    }
}

/// Runs `f` under a rayon pool capped at `cap` threads (None: global pool).
/// Results are independent of the cap by construction.
pub fn with_thread_cap<T: Send>(cap: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match cap {
        None => f(),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}

/// N simulated trajectories with their driving Brownian increments.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub seed: u64,
    pub time_grid: Vec<f64>,
    states: Vec<f64>,     // n_paths × (K+1) × n, row-major
    increments: Vec<f64>, // n_paths × K × m, row-major
    weights: Vec<f64>,    // n_paths
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.weights.len()
    }

    pub fn n_steps(&self) -> usize {
        self.time_grid.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.time_grid.last().expect("non-empty grid")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn path(&self, p: usize) -> PathView<'_> {
        let k = self.n_steps();
        PathView {
            n: self.n,
            m: self.m,
            dt: self.dt,
            time_grid: &self.time_grid,
            states: &self.states[p * (k + 1) * self.n..(p + 1) * (k + 1) * self.n],
            increments: &self.increments[p * k * self.m..(p + 1) * k * self.m],
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_raw(
        n: usize,
        m: usize,
        dt: f64,
        seed: u64,
        time_grid: Vec<f64>,
        states: Vec<f64>,
        increments: Vec<f64>,
        weights: Vec<f64>,
    ) -> Self {
        PathEnsemble {
            n,
            m,
            dt,
            seed,
            time_grid,
            states,
            increments,
            weights,
        }
    }

    pub(crate) fn raw_states(&self) -> &[f64] {
        &self.states
    }

    pub(crate) fn raw_increments(&self) -> &[f64] {
        &self.increments
    }
}

/// Borrowed view of one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub time_grid: &'a [f64],
    pub states: &'a [f64],
    pub increments: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn n_steps(&self) -> usize {
        self.time_grid.len() - 1
    }

    pub fn state(&self, k: usize) -> &'a [f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn increment(&self, k: usize) -> &'a [f64] {
        &self.increments[k * self.m..(k + 1) * self.m]
    }

    /// Linear interpolation of the state at an off-grid time.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>, McError> {
        let horizon = *self.time_grid.last().expect("grid");
        if t < -1e-12 || t > horizon + 1e-9 {
            return Err(McError::TimeOutOfRange { t, horizon });
        }
        let t = t.clamp(0.0, horizon);
        let pos = t / self.dt;
        let j = (pos.floor() as usize).min(self.n_steps() - 1);
        let frac = pos - j as f64;
        let a = self.state(j);
        if frac <= 1e-12 {
            return Ok(a.to_vec());
        }
        let b = self.state(j + 1);
        Ok((0..self.n).map(|i| a[i] + frac * (b[i] - a[i])).collect())
    }
}

struct CompiledModel {
    n: usize,
    m: usize,
    mu: Vec<CompiledExpr>,
    sigma: Vec<CompiledExpr>, // row-major n×m
    log_flags: Vec<bool>,
    initial: Vec<f64>,
}

fn compile_model(model: &SdeModel) -> Result<CompiledModel, McError> {
    let n = model.n();
    let m = model.m();
    let mut mu = Vec::with_capacity(n);
    for i in 0..n {
        mu.push(
            model
                .mu()
                .component(i)
                .compiled()
                .ok_or_else(|| {
                    McError::Field(FieldError::NotSymbolic(
                        "simulation requires symbolic drift".into(),
                    ))
                })?
                .clone(),
        );
    }
    let mut sigma = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            sigma.push(
                model
                    .sigma()
                    .entry(i, j)
                    .compiled()
                    .ok_or_else(|| {
                        McError::Field(FieldError::NotSymbolic(
                            "simulation requires symbolic diffusion".into(),
                        ))
                    })?
                    .clone(),
            );
        }
    }
    Ok(CompiledModel {
        n,
        m,
        mu,
        sigma,
        log_flags: model.log_coords().to_vec(),
        initial: model.initial_point().to_vec(),
    })
}

/// Per-thread scratch for one path.
struct PathBuffers {
    states: Vec<f64>,
    increments: Vec<f64>,
    point: Vec<f64>,
    work: Vec<f64>, // log-state where flagged
    mu: Vec<f64>,
    sig: Vec<f64>,
    stack: Vec<f64>,
}

impl PathBuffers {
    fn new(cm: &CompiledModel, k: usize) -> Self {
        PathBuffers {
            states: vec![0.0; (k + 1) * cm.n],
            increments: vec![0.0; k * cm.m],
            point: vec![0.0; cm.n + 1],
            work: vec![0.0; cm.n],
            mu: vec![0.0; cm.n],
            sig: vec![0.0; cm.n * cm.m],
            stack: Vec::with_capacity(32),
        }
    }
}

/// Euler–Maruyama for one path into the scratch buffers.
///
/// Coordinates flagged positivity-preserving are advanced in log space with
/// the Itô-corrected drift (μᵢ/xᵢ − ½Σ_α σᵢ²_α/xᵢ²) and exponentiated for
/// storage, so stored states are always in the original coordinates.
fn run_path(
    cm: &CompiledModel,
    seed: u64,
    dt: f64,
    k_steps: usize,
    path: usize,
    buf: &mut PathBuffers,
) -> Result<(), McError> {
    let n = cm.n;
    let m = cm.m;
    let sqrt_dt = dt.sqrt();
    buf.states[..n].copy_from_slice(&cm.initial);
    for i in 0..n {
        buf.work[i] = if cm.log_flags[i] {
            cm.initial[i].ln()
        } else {
            cm.initial[i]
        };
    }
    let eval_fail = |path: usize, step: usize| McError::NumericalBlowup { path, step };
    for k in 0..k_steps {
        let t = k as f64 * dt;
        let (head, tail) = buf.states.split_at_mut((k + 1) * n);
        let x = &head[k * n..(k + 1) * n];
        buf.point[..n].copy_from_slice(x);
        buf.point[n] = t;
        for i in 0..n {
            buf.mu[i] = cm.mu[i]
                .eval_with(&buf.point, &mut buf.stack)
                .map_err(|_| eval_fail(path, k))?;
        }
        for idx in 0..n * m {
            buf.sig[idx] = cm.sigma[idx]
                .eval_with(&buf.point, &mut buf.stack)
                .map_err(|_| eval_fail(path, k))?;
        }
        let dw = &mut buf.increments[k * m..(k + 1) * m];
        for (alpha, w) in dw.iter_mut().enumerate() {
            *w = sqrt_dt * rng::normal(seed, path as u64, k as u64, alpha as u64);
        }
        let next = &mut tail[..n];
        for i in 0..n {
            let mut noise = 0.0;
            for alpha in 0..m {
                noise += buf.sig[i * m + alpha] * dw[alpha];
            }
            if cm.log_flags[i] {
                let xi = x[i];
                let mut q = 0.0;
                for alpha in 0..m {
                    let s = buf.sig[i * m + alpha];
                    q += s * s;
                }
                buf.work[i] += (buf.mu[i] / xi - 0.5 * q / (xi * xi)) * dt + noise / xi;
                next[i] = buf.work[i].exp();
            } else {
                buf.work[i] = x[i] + buf.mu[i] * dt + noise;
                next[i] = buf.work[i];
            }
            if !next[i].is_finite() || next[i].abs() > BLOWUP_GUARD {
                return Err(McError::NumericalBlowup { path, step: k });
            }
        }
    }
    Ok(())
}

fn time_grid(dt: f64, k_steps: usize) -> Vec<f64> {
    (0..=k_steps).map(|k| k as f64 * dt).collect()
}

/// Streams every path through `f`, returning per-path values in path order.
/// Chunks are processed in parallel; each path's noise depends only on its
/// index, so the output is independent of the thread count.
pub fn map_paths<T, F>(
    model: &SdeModel,
    cfg: &SimulationConfig,
    f: F,
) -> Result<Vec<T>, McError>
where
    T: Send,
    F: Fn(usize, PathView<'_>) -> Result<T, McError> + Sync,
{
    let cm = compile_model(model)?;
    let k_steps = cfg.n_steps()?;
    let grid = time_grid(cfg.dt, k_steps);
    let n_chunks = cfg.n_paths.div_ceil(cfg.chunk_size);
    let results: Vec<Result<Vec<T>, McError>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * cfg.chunk_size;
            let hi = ((chunk + 1) * cfg.chunk_size).min(cfg.n_paths);
            let mut buf = PathBuffers::new(&cm, k_steps);
            let mut out = Vec::with_capacity(hi - lo);
            for path in lo..hi {
                run_path(&cm, cfg.seed, cfg.dt, k_steps, path, &mut buf)?;
                let view = PathView {
                    n: cm.n,
                    m: cm.m,
                    dt: cfg.dt,
                    time_grid: &grid,
                    states: &buf.states,
                    increments: &buf.increments,
                };
                out.push(f(path, view)?);
            }
            Ok(out)
        })
        .collect();
    let mut flat = Vec::with_capacity(cfg.n_paths);
    for r in results {
        flat.extend(r?);
    }
    Ok(flat)
}

/// Simulates and materializes the full ensemble.
pub fn simulate(model: &SdeModel, cfg: &SimulationConfig) -> Result<PathEnsemble, McError> {
    let cm = compile_model(model)?;
    let k_steps = cfg.n_steps()?;
    let grid = time_grid(cfg.dt, k_steps);
    let state_stride = (k_steps + 1) * cm.n;
    let incr_stride = k_steps * cm.m;
    let mut states = vec![0.0; cfg.n_paths * state_stride];
    let mut increments = vec![0.0; cfg.n_paths * incr_stride];

    let result: Result<(), McError> = states
        .par_chunks_mut(state_stride * cfg.chunk_size)
        .zip(increments.par_chunks_mut(incr_stride * cfg.chunk_size))
        .enumerate()
        .try_for_each(|(chunk, (s_chunk, i_chunk))| {
            let lo = chunk * cfg.chunk_size;
            let count = s_chunk.len() / state_stride;
            let mut buf = PathBuffers::new(&cm, k_steps);
            for j in 0..count {
                run_path(&cm, cfg.seed, cfg.dt, k_steps, lo + j, &mut buf)?;
                s_chunk[j * state_stride..(j + 1) * state_stride].copy_from_slice(&buf.states);
                i_chunk[j * incr_stride..(j + 1) * incr_stride]
                    .copy_from_slice(&buf.increments);
            }
            Ok(())
        });
    result?;
    Ok(PathEnsemble {
        n: cm.n,
        m: cm.m,
        dt: cfg.dt,
        seed: cfg.seed,
        time_grid: grid,
        states,
        increments,
        weights: vec![1.0; cfg.n_paths],
    })
}

/// Rotated Brownian increments ΔW′_k = B(X_k, t_k) ΔW_k along the stored
/// states; returns the new increment array (n_paths × K × m).
pub fn rotate_brownian(
    ensemble: &PathEnsemble,
    b: &MatrixField,
) -> Result<Vec<f64>, McError> {
    let m = ensemble.m;
    if b.nrows() != m || b.ncols() != m {
        return Err(McError::Shape(format!(
            "rotation field must be {m}x{m}, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    let k_steps = ensemble.n_steps();
    let mut out = vec![0.0; ensemble.n_paths() * k_steps * m];
    let stride = k_steps * m;
    out.par_chunks_mut(stride)
        .enumerate()
        .try_for_each(|(p, chunk)| -> Result<(), McError> {
            let view = ensemble.path(p);
            let mut point = vec![0.0; ensemble.n + 1];
            let mut scratch = Vec::new();
            let mut bmat = vec![0.0; m * m];
            for k in 0..k_steps {
                point[..ensemble.n].copy_from_slice(view.state(k));
                point[ensemble.n] = view.time_grid[k];
                for i in 0..m {
                    for j in 0..m {
                        bmat[i * m + j] = b.entry(i, j).eval_scratch(&point, &mut scratch)?;
                    }
                }
                let dw = view.increment(k);
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += bmat[i * m + j] * dw[j];
                    }
                    chunk[k * m + i] = acc;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Per-path Girsanov weights at time `t` for the drift shift `h`:
/// Z = exp(Σ_k h(X_k,t_k)·ΔW_k − ½ Σ_k |h(X_k,t_k)|² dt), left-point sums.
///
/// Returns the weights and the count of flagged paths (|log Z| > 50); flags
/// never drop paths.
pub fn girsanov_weight(
    ensemble: &PathEnsemble,
    h: &VectorField,
    t: f64,
) -> Result<(Vec<f64>, usize), McError> {
    if h.len() != ensemble.m {
        return Err(McError::Shape(format!(
            "h must have {} components",
            ensemble.m
        )));
    }
    let weights: Vec<(f64, bool)> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| -> Result<(f64, bool), McError> {
            let view = ensemble.path(p);
            let log_z = log_girsanov_along(&view, h, t)?;
            Ok((log_z.exp(), log_z.abs() > LOG_WEIGHT_FLAG))
        })
        .collect::<Result<_, _>>()?;
    let flagged = weights.iter().filter(|(_, f)| *f).count();
    Ok((weights.into_iter().map(|(z, _)| z).collect(), flagged))
}

/// Left-point Itô log-weight along one path, up to time `t`.
fn log_girsanov_along(view: &PathView<'_>, h: &VectorField, t: f64) -> Result<f64, McError> {
    let horizon = *view.time_grid.last().expect("grid");
    if t > horizon + 1e-9 {
        return Err(McError::TimeOutOfRange { t, horizon });
    }
    let mut point = vec![0.0; view.n + 1];
    let mut scratch = Vec::new();
    let mut ito = 0.0;
    let mut quad = 0.0;
    for k in 0..view.n_steps() {
        let tk = view.time_grid[k];
        if tk >= t - 1e-12 {
            break;
        }
        point[..view.n].copy_from_slice(view.state(k));
        point[view.n] = tk;
        let dw = view.increment(k);
        for alpha in 0..view.m {
            let h_val = h.component(alpha).eval_scratch(&point, &mut scratch)?;
            ito += h_val * dw[alpha];
            quad += h_val * h_val;
        }
    }
    Ok(ito - 0.5 * quad * view.dt)
}

/// The path action P_T: states become Φ̃(X_{f⁻¹(t)}) (linear interpolation
/// between grid states) and the Brownian part is dW′ = √η B (dW − h dt)
/// accumulated on the original grid, then resampled at f⁻¹ of the output
/// grid (the time-change convention for Itô integrals).
pub fn apply_path_transformation(
    t: &FiniteTransformation,
    ensemble: &PathEnsemble,
) -> Result<PathEnsemble, McError> {
    let n = ensemble.n;
    let m = ensemble.m;
    if t.brownian_dim() != m || t.vars().n_spatial() != n {
        return Err(McError::Shape(
            "transformation dimensions do not match the ensemble".into(),
        ));
    }
    let k_steps = ensemble.n_steps();
    let horizon = ensemble.horizon();
    // Pre-image times of the output grid, shared by all paths.
    let mut pre_times = Vec::with_capacity(k_steps + 1);
    for &tk in &ensemble.time_grid {
        let s = t.time().f_inv(tk)?;
        if s < -1e-9 || s > horizon + 1e-9 {
            return Err(McError::TimeOutOfRange { t: s, horizon });
        }
        pre_times.push(s.clamp(0.0, horizon));
    }
    let state_stride = (k_steps + 1) * n;
    let incr_stride = k_steps * m;
    let mut states = vec![0.0; ensemble.n_paths() * state_stride];
    let mut increments = vec![0.0; ensemble.n_paths() * incr_stride];

    states
        .par_chunks_mut(state_stride)
        .zip(increments.par_chunks_mut(incr_stride))
        .enumerate()
        .try_for_each(|(p, (s_out, i_out))| -> Result<(), McError> {
            let view = ensemble.path(p);
            // W′ accumulated on the original grid (left-point sums).
            let mut w_prime = vec![0.0; (k_steps + 1) * m];
            let mut point = vec![0.0; n + 1];
            let mut scratch = Vec::new();
            let mut bmat = vec![0.0; m * m];
            let mut h_vec = vec![0.0; m];
            for k in 0..k_steps {
                let tk = view.time_grid[k];
                point[..n].copy_from_slice(view.state(k));
                point[n] = tk;
                let eta = t.eta_field().eval_scratch(&point, &mut scratch)?;
                for i in 0..m {
                    for j in 0..m {
                        bmat[i * m + j] =
                            t.rotation().entry(i, j).eval_scratch(&point, &mut scratch)?;
                    }
                    h_vec[i] = t
                        .drift_shift()
                        .component(i)
                        .eval_scratch(&point, &mut scratch)?;
                }
                let dw = view.increment(k);
                let sqrt_eta = eta.sqrt();
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += bmat[i * m + j] * (dw[j] - h_vec[j] * view.dt);
                    }
                    w_prime[(k + 1) * m + i] = w_prime[k * m + i] + sqrt_eta * acc;
                }
            }
            let sample_w = |s: f64, out: &mut [f64]| {
                let pos = (s / view.dt).clamp(0.0, k_steps as f64);
                let j = (pos.floor() as usize).min(k_steps - 1);
                let frac = pos - j as f64;
                for i in 0..m {
                    let a = w_prime[j * m + i];
                    let b = w_prime[(j + 1) * m + i];
                    out[i] = a + frac * (b - a);
                }
            };
            let mut w_here = vec![0.0; m];
            let mut w_next = vec![0.0; m];
            for (k, &s) in pre_times.iter().enumerate() {
                let x = view.state_at(s)?;
                let y = t.phi().apply(&x)?;
                s_out[k * n..(k + 1) * n].copy_from_slice(&y);
                if k < k_steps {
                    sample_w(s, &mut w_here);
                    sample_w(pre_times[k + 1], &mut w_next);
                    for i in 0..m {
                        i_out[k * m + i] = w_next[i] - w_here[i];
                    }
                }
            }
            Ok(())
        })?;

    Ok(PathEnsemble {
        n,
        m,
        dt: ensemble.dt,
        seed: ensemble.seed,
        time_grid: ensemble.time_grid.clone(),
        states,
        increments,
        weights: ensemble.weights.clone(),
    })
}

/// A Monte Carlo estimate with its standard error and additive breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimate: f64,
    pub std_error: f64,
    pub n_effective: f64,
    /// Named additive components; they sum to `estimate`.
    pub terms: Vec<(String, f64)>,
    /// Human-readable diagnostics (flagged weights, moment warnings).
    pub diagnostics: Vec<String>,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Quasi-invariance estimator: Δ = Ê[g(X_t)] − Ê[g(X′_t) Z_t] with
/// X′ = P_T(X) and Z the Girsanov weight of T's drift shift, both terms on
/// the same ensemble (common random numbers).
pub fn estimate_quasi_invariance(
    model: &SdeModel,
    t: &FiniteTransformation,
    g: &ScalarField,
    t_time: f64,
    cfg: &SimulationConfig,
) -> Result<EstimatorResult, McError> {
    if g.vars() != model.vars() {
        return Err(McError::Shape(
            "observable must be defined over the model variables".into(),
        ));
    }
    if t_time > cfg.horizon + 1e-9 {
        return Err(McError::TimeOutOfRange {
            t: t_time,
            horizon: cfg.horizon,
        });
    }
    let s_time = t.time().f_inv(t_time)?;
    if s_time < -1e-9 || s_time > cfg.horizon + 1e-9 {
        return Err(McError::TimeOutOfRange {
            t: s_time,
            horizon: cfg.horizon,
        });
    }
    let h_zero = t.drift_shift().is_zero();
    let g = g.clone();
    let n = model.n();

    struct PerPath {
        g_orig: f64,
        g_transformed_weighted: f64,
        z: f64,
        flagged: bool,
    }

    let rows = map_paths(model, cfg, |_p, view| {
        let mut scratch = Vec::new();
        let x_t = view.state_at(t_time)?;
        let mut point = vec![0.0; n + 1];
        point[..n].copy_from_slice(&x_t);
        point[n] = t_time;
        let g_orig = g.eval_scratch(&point, &mut scratch)?;

        let x_s = view.state_at(s_time)?;
        let y = t.phi().apply(&x_s)?;
        point[..n].copy_from_slice(&y);
        point[n] = t_time;
        let g_prime = g.eval_scratch(&point, &mut scratch)?;

        let (z, flagged) = if h_zero {
            (1.0, false)
        } else {
            let log_z = log_girsanov_along(&view, t.drift_shift(), t_time)?;
            (log_z.exp(), log_z.abs() > LOG_WEIGHT_FLAG)
        };
        Ok(PerPath {
            g_orig,
            g_transformed_weighted: g_prime * z,
            z,
            flagged,
        })
    })?;

    let deltas: Vec<f64> = rows
        .iter()
        .map(|r| r.g_orig - r.g_transformed_weighted)
        .collect();
    let (_, se) = mean_and_se(&deltas);
    let mean_orig = rows.iter().map(|r| r.g_orig).sum::<f64>() / rows.len() as f64;
    let mean_trans =
        rows.iter().map(|r| r.g_transformed_weighted).sum::<f64>() / rows.len() as f64;
    let sum_z: f64 = rows.iter().map(|r| r.z).sum();
    let sum_z2: f64 = rows.iter().map(|r| r.z * r.z).sum();
    let flagged = rows.iter().filter(|r| r.flagged).count();
    let mut diagnostics = vec![format!("mean Girsanov weight {}", sum_z / rows.len() as f64)];
    if flagged > 0 {
        diagnostics.push(format!(
            "{flagged} paths with |log Z| > {LOG_WEIGHT_FLAG} (kept, not dropped)"
        ));
    }
    Ok(EstimatorResult {
        estimate: mean_orig - mean_trans,
        std_error: se,
        n_effective: sum_z * sum_z / sum_z2,
        terms: vec![
            ("E[g(X_t)]".into(), mean_orig),
            ("-E[g(X'_t) Z_t]".into(), -mean_trans),
        ],
        diagnostics,
    })
}

/// Options for the integration-by-parts estimator.
#[derive(Debug, Clone)]
pub struct IbpOptions {
    /// Bound on sampled second moments of H, CH, L(Y), Y(H); exceeding it
    /// produces a diagnostic warning (regularity proxy), never an error.
    pub moment_bound: f64,
    /// Stride for sampling the moment diagnostics along the path.
    pub moment_stride: usize,
    /// Sampled-sup bound for |F(X_t)|: the formula assumes a bounded
    /// functional, but unbounded test functions (polynomial Stein/Isserlis
    /// checks) are useful, so exceeding the bound only warns by default.
    pub functional_bound: f64,
    /// When set, an exceeded functional bound is an error instead of a
    /// warning.
    pub strict_boundedness: bool,
}

impl Default for IbpOptions {
    fn default() -> Self {
        IbpOptions {
            moment_bound: 1e8,
            moment_stride: 32,
            functional_bound: 1e6,
            strict_boundedness: false,
        }
    }
}

/// The four-term integration-by-parts estimator along an infinitesimal
/// symmetry:
///
/// ```text
/// −m(t)·Ê[L(F)(X_t)] + Ê[F(X_t)·∫₀ᵗ H_α dW^α] + Ê[Y(F)(X_t)] − Y(F)(X₀)
/// ```
///
/// The standard error is computed from per-path totals, since the terms
/// share paths.
pub fn estimate_ibp(
    model: &SdeModel,
    v: &InfinitesimalSymmetry,
    f: &ScalarField,
    t_time: f64,
    cfg: &SimulationConfig,
    opts: &IbpOptions,
) -> Result<EstimatorResult, McError> {
    let ctx = IbpContext::prepare(model, v, f, t_time)?;
    let rows = map_paths(model, cfg, |_p, view| ctx.per_path(&view, opts))?;
    ctx.reduce(rows, opts)
}

/// Same estimator evaluated on a stored ensemble (shared-ensemble
/// comparisons, e.g. against specialized closed-form implementations).
pub fn estimate_ibp_on(
    ensemble: &PathEnsemble,
    model: &SdeModel,
    v: &InfinitesimalSymmetry,
    f: &ScalarField,
    t_time: f64,
    opts: &IbpOptions,
) -> Result<EstimatorResult, McError> {
    let ctx = IbpContext::prepare(model, v, f, t_time)?;
    let rows = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| ctx.per_path(&ensemble.path(p), opts))
        .collect::<Result<Vec<_>, _>>()?;
    ctx.reduce(rows, opts)
}

struct IbpPerPath {
    lf: f64,
    f_ito: f64,
    yf: f64,
    f_abs: f64,
    moment_sq: [f64; 4],
    moment_count: usize,
}

struct IbpContext {
    n: usize,
    m: usize,
    t_time: f64,
    m_t: f64,
    lf: ScalarField,
    f: ScalarField,
    yf: ScalarField,
    yf_at_start: f64,
    h: VectorField,
    // Diagnostics fields (symbolic): H, CH, L(Y), Y(H).
    ch: VectorField,
    ly: VectorField,
    yh: VectorField,
}

impl IbpContext {
    fn prepare(
        model: &SdeModel,
        v: &InfinitesimalSymmetry,
        f: &ScalarField,
        t_time: f64,
    ) -> Result<Arc<IbpContext>, McError> {
        if f.vars() != model.vars() {
            return Err(McError::Shape(
                "functional must be defined over the model variables".into(),
            ));
        }
        let n = model.n();
        let m = model.m();
        let lf = apply_generator(model, f)?;
        let yf = v.apply_to_field(f)?;
        let m_t = v.m_at(t_time)?;
        // Y(F) at the deterministic start (X₀, time 0).
        let mut p0 = vec![0.0; n + 1];
        p0[..n].copy_from_slice(model.initial_point());
        let yf_at_start = yf.eval(&p0)?;

        let vars = model.vars();
        let mut ch = Vec::with_capacity(m);
        for alpha in 0..m {
            let mut acc = crate::expr::Expr::Const(0.0);
            for k in 0..m {
                let c = v
                    .c_rotation()
                    .entry(alpha, k)
                    .expr()
                    .ok_or_else(|| FieldError::NotSymbolic("C".into()))?;
                let hk = v
                    .h_dot()
                    .component(k)
                    .expr()
                    .ok_or_else(|| FieldError::NotSymbolic("H".into()))?;
                acc = crate::expr::Expr::add(acc, crate::expr::Expr::mul(c.clone(), hk.clone()));
            }
            ch.push(ScalarField::from_expr(crate::expr::simplify(&acc), vars)?);
        }
        let mut ly = Vec::with_capacity(n);
        for i in 0..n {
            ly.push(apply_generator(model, v.y_spatial().component(i))?);
        }
        let mut yh = Vec::with_capacity(m);
        for alpha in 0..m {
            yh.push(v.apply_to_field(v.h_dot().component(alpha))?);
        }

        Ok(Arc::new(IbpContext {
            n,
            m,
            t_time,
            m_t,
            lf,
            f: f.clone(),
            yf,
            yf_at_start,
            h: v.h_dot().clone(),
            ch: VectorField::new(ch)?,
            ly: VectorField::new(ly)?,
            yh: VectorField::new(yh)?,
        }))
    }

    fn per_path(&self, view: &PathView<'_>, opts: &IbpOptions) -> Result<IbpPerPath, McError> {
        let n = self.n;
        let mut point = vec![0.0; n + 1];
        let mut scratch = Vec::new();
        // ∫₀ᵗ H_α dW^α as a left-point sum, with moment diagnostics sampled
        // every `moment_stride` steps.
        let mut ito = 0.0;
        let mut moment_sq = [0.0f64; 4];
        let mut moment_count = 0usize;
        for k in 0..view.n_steps() {
            let tk = view.time_grid[k];
            if tk >= self.t_time - 1e-12 {
                break;
            }
            point[..n].copy_from_slice(view.state(k));
            point[n] = tk;
            let dw = view.increment(k);
            for alpha in 0..self.m {
                let h_val = self.h.component(alpha).eval_scratch(&point, &mut scratch)?;
                ito += h_val * dw[alpha];
            }
            if k % opts.moment_stride == 0 {
                moment_count += 1;
                for alpha in 0..self.m {
                    let hv = self.h.component(alpha).eval_scratch(&point, &mut scratch)?;
                    let chv = self.ch.component(alpha).eval_scratch(&point, &mut scratch)?;
                    let yhv = self.yh.component(alpha).eval_scratch(&point, &mut scratch)?;
                    moment_sq[0] += hv * hv;
                    moment_sq[1] += chv * chv;
                    moment_sq[3] += yhv * yhv;
                }
                for i in 0..n {
                    let lyv = self.ly.component(i).eval_scratch(&point, &mut scratch)?;
                    moment_sq[2] += lyv * lyv;
                }
            }
        }
        let x_t = view.state_at(self.t_time)?;
        point[..n].copy_from_slice(&x_t);
        point[n] = self.t_time;
        let lf = self.lf.eval_scratch(&point, &mut scratch)?;
        let f_val = self.f.eval_scratch(&point, &mut scratch)?;
        let yf = self.yf.eval_scratch(&point, &mut scratch)?;
        Ok(IbpPerPath {
            lf,
            f_ito: f_val * ito,
            yf,
            f_abs: f_val.abs(),
            moment_sq,
            moment_count,
        })
    }

    fn reduce(&self, rows: Vec<IbpPerPath>, opts: &IbpOptions) -> Result<EstimatorResult, McError> {
        let n_paths = rows.len() as f64;
        let totals: Vec<f64> = rows
            .iter()
            .map(|r| -self.m_t * r.lf + r.f_ito + r.yf - self.yf_at_start)
            .collect();
        let (_, se) = mean_and_se(&totals);
        let mean_lf = rows.iter().map(|r| r.lf).sum::<f64>() / n_paths;
        let mean_f_ito = rows.iter().map(|r| r.f_ito).sum::<f64>() / n_paths;
        let mean_yf = rows.iter().map(|r| r.yf).sum::<f64>() / n_paths;
        let terms = vec![
            ("-m(t) E[L(F)(X_t)]".into(), -self.m_t * mean_lf),
            ("E[F(X_t) int_H_dW]".into(), mean_f_ito),
            ("E[Y(F)(X_t)]".into(), mean_yf),
            ("-Y(F)(X_0)".into(), -self.yf_at_start),
        ];
        let estimate = terms.iter().map(|(_, v)| v).sum();

        let mut diagnostics = Vec::new();
        let f_sup = rows.iter().map(|r| r.f_abs).fold(0.0f64, f64::max);
        if f_sup > opts.functional_bound {
            let msg = format!(
                "sampled sup |F(X_t)| = {f_sup:.3e} exceeds the boundedness proxy {:.1e}",
                opts.functional_bound
            );
            if opts.strict_boundedness {
                return Err(McError::Config(msg));
            }
            diagnostics.push(msg);
        }
        let total_samples: usize = rows.iter().map(|r| r.moment_count).sum();
        if total_samples > 0 {
            let names = ["H", "C H", "L(Y)", "Y(H)"];
            for (i, name) in names.iter().enumerate() {
                let mean_sq =
                    rows.iter().map(|r| r.moment_sq[i]).sum::<f64>() / total_samples as f64;
                if mean_sq > opts.moment_bound {
                    diagnostics.push(format!(
                        "moment diagnostic: sample second moment of {name} is {mean_sq:.3e}, above bound {:.1e} (regularity proxy)",
                        opts.moment_bound
                    ));
                }
            }
        }
        Ok(EstimatorResult {
            estimate,
            std_error: se,
            n_effective: n_paths,
            terms,
            diagnostics,
        })
    }
}

/// Direct implementation of the two-term rotational IBP identity for the
/// planar Brownian model: 0 = Ê[F(X_t,Y_t)·∫(−Y_s β′ dW¹ + X_s β′ dW²)]
/// + Ê[β(t)(Y_t ∂ₓF − X_t ∂_yF)], on a stored ensemble.
///
/// Used as the specialization oracle for the generic four-term estimator.
pub fn estimate_ibp_vbeta_direct(
    ensemble: &PathEnsemble,
    beta: &ScalarField,
    f: &ScalarField,
    t_time: f64,
) -> Result<EstimatorResult, McError> {
    if ensemble.n < 2 || ensemble.m != 2 {
        return Err(McError::Shape(
            "the direct rotational identity needs two spatial coordinates and two Brownian components".into(),
        ));
    }
    let vars = f.vars().clone();
    let time_name = vars.time_var().to_string();
    let beta_expr = beta
        .expr()
        .ok_or_else(|| FieldError::NotSymbolic("beta".into()))?;
    // β is written in the clock coordinate z; its time derivative is d/dz.
    let beta_vars: Vec<String> = beta_expr.variables().into_iter().collect();
    let dvar = beta_vars.first().cloned().unwrap_or(time_name);
    let beta_prime = ScalarField::from_expr(beta_expr.diff(&dvar), &vars)?;
    let fx = f.diff(&vars.names()[0].clone())?;
    let fy = f.diff(&vars.names()[1].clone())?;

    let n = ensemble.n;
    let rows: Vec<(f64, f64)> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| -> Result<(f64, f64), McError> {
            let view = ensemble.path(p);
            let mut point = vec![0.0; n + 1];
            let mut scratch = Vec::new();
            let mut ito = 0.0;
            for k in 0..view.n_steps() {
                let tk = view.time_grid[k];
                if tk >= t_time - 1e-12 {
                    break;
                }
                let x = view.state(k);
                point[..n].copy_from_slice(x);
                point[n] = tk;
                let bp = beta_prime.eval_scratch(&point, &mut scratch)?;
                let dw = view.increment(k);
                ito += -x[1] * bp * dw[0] + x[0] * bp * dw[1];
            }
            let x_t = view.state_at(t_time)?;
            point[..n].copy_from_slice(&x_t);
            point[n] = t_time;
            let f_val = f.eval_scratch(&point, &mut scratch)?;
            let beta_t = beta.eval_scratch(&point, &mut scratch)?;
            let fx_v = fx.eval_scratch(&point, &mut scratch)?;
            let fy_v = fy.eval_scratch(&point, &mut scratch)?;
            Ok((f_val * ito, beta_t * (x_t[1] * fx_v - x_t[0] * fy_v)))
        })
        .collect::<Result<_, _>>()?;

    let n_paths = rows.len() as f64;
    let totals: Vec<f64> = rows.iter().map(|(a, b)| a + b).collect();
    let (_, se) = mean_and_se(&totals);
    let term_ito = rows.iter().map(|(a, _)| a).sum::<f64>() / n_paths;
    let term_bdry = rows.iter().map(|(_, b)| b).sum::<f64>() / n_paths;
    let terms = vec![
        ("E[F(X_t) int_H_dW]".into(), term_ito),
        ("E[beta(t)(Y Fx - X Fy)]".into(), term_bdry),
    ];
    Ok(EstimatorResult {
        estimate: term_ito + term_bdry,
        std_error: se,
        n_effective: n_paths,
        terms,
        diagnostics: Vec::new(),
    })
}

/// Stein identity check by exact Gaussian sampling: draws (X,Y) ~ N(0, tI₂)
/// and estimates t·Ê[∂ₓ²F + ∂_y²F] − Ê[X ∂ₓF + Y ∂_yF].
pub fn estimate_stein(
    t_time: f64,
    f: &ScalarField,
    cfg: &SimulationConfig,
) -> Result<EstimatorResult, McError> {
    gaussian_identity(t_time, f, cfg, GaussianIdentity::Stein)
}

/// Isserlis identity check by exact Gaussian sampling:
/// Ê[Y ∂ₓF] − Ê[X ∂_yF] over (X,Y) ~ N(0, tI₂).
pub fn estimate_isserlis(
    t_time: f64,
    f: &ScalarField,
    cfg: &SimulationConfig,
) -> Result<EstimatorResult, McError> {
    gaussian_identity(t_time, f, cfg, GaussianIdentity::Isserlis)
}

enum GaussianIdentity {
    Stein,
    Isserlis,
}

fn gaussian_identity(
    t_time: f64,
    f: &ScalarField,
    cfg: &SimulationConfig,
    which: GaussianIdentity,
) -> Result<EstimatorResult, McError> {
    if f.vars().len() < 3 {
        return Err(McError::Shape(
            "functional needs two spatial variables plus time".into(),
        ));
    }
    if cfg.n_paths == 0 {
        return Err(McError::Config("n_paths must be positive".into()));
    }
    if !(t_time > 0.0) {
        return Err(McError::Config("t must be positive".into()));
    }
    let names = f.vars().names().to_vec();
    let fx = f.diff(&names[0])?;
    let fy = f.diff(&names[1])?;
    let (ga, gb): (ScalarField, ScalarField) = match which {
        GaussianIdentity::Stein => (fx.diff(&names[0])?, fy.diff(&names[1])?),
        GaussianIdentity::Isserlis => (fx.clone(), fy.clone()),
    };
    let sqrt_t = t_time.sqrt();
    let nvars = f.vars().len();
    let rows: Vec<(f64, f64)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64), McError> {
            let x = sqrt_t * rng::normal(cfg.seed, i as u64, 0, 0);
            let y = sqrt_t * rng::normal(cfg.seed, i as u64, 0, 1);
            let mut point = vec![0.0; nvars];
            point[0] = x;
            point[1] = y;
            point[nvars - 1] = t_time;
            let mut scratch = Vec::new();
            match which {
                GaussianIdentity::Stein => {
                    let lhs = t_time
                        * (ga.eval_scratch(&point, &mut scratch)?
                            + gb.eval_scratch(&point, &mut scratch)?);
                    let rhs = x * fx.eval_scratch(&point, &mut scratch)?
                        + y * fy.eval_scratch(&point, &mut scratch)?;
                    Ok((lhs, -rhs))
                }
                GaussianIdentity::Isserlis => {
                    let lhs = y * ga.eval_scratch(&point, &mut scratch)?;
                    let rhs = x * gb.eval_scratch(&point, &mut scratch)?;
                    Ok((lhs, -rhs))
                }
            }
        })
        .collect::<Result<_, _>>()?;
    let n_paths = rows.len() as f64;
    let totals: Vec<f64> = rows.iter().map(|(a, b)| a + b).collect();
    let (_, se) = mean_and_se(&totals);
    let lhs_mean = rows.iter().map(|(a, _)| a).sum::<f64>() / n_paths;
    let rhs_mean = rows.iter().map(|(_, b)| b).sum::<f64>() / n_paths;
    let (lhs_name, rhs_name) = match which {
        GaussianIdentity::Stein => ("t E[Fxx + Fyy]", "-E[X Fx + Y Fy]"),
        GaussianIdentity::Isserlis => ("E[Y Fx]", "-E[X Fy]"),
    };
    Ok(EstimatorResult {
        estimate: lhs_mean + rhs_mean,
        std_error: se,
        n_effective: n_paths,
        terms: vec![
            (lhs_name.to_string(), lhs_mean),
            (rhs_name.to_string(), rhs_mean),
        ],
        diagnostics: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, Expr, VarSet};
    use crate::models::{bm2d, bm2d_finite_v_beta, v_alpha};
    use crate::transform::SpatialMap;

    fn cfg(n_paths: usize, dt: f64, horizon: f64, seed: u64) -> SimulationConfig {
        SimulationConfig {
            n_paths,
            dt,
            horizon,
            seed,
            chunk_size: 1024,
        }
    }

    fn model_1d(mu: &str, sigma: &str) -> SdeModel {
        let vars = VarSet::spatial_and_time(&["x"], "t").unwrap();
        SdeModel::new(
            vars.clone(),
            crate::fields::VectorField::parse(&[mu], &vars).unwrap(),
            crate::fields::MatrixField::parse(&[vec![sigma]], &vars).unwrap(),
            vec![[-10.0, 10.0], [0.0, 2.0]],
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn frozen_coefficients_yield_constant_paths() {
        let model = model_1d("0", "0");
        let ens = simulate(&model, &cfg(8, 0.1, 1.0, 3)).unwrap();
        for p in 0..8 {
            let view = ens.path(p);
            for k in 0..=view.n_steps() {
                assert_eq!(view.state(k)[0], 1.0);
            }
        }
    }

    #[test]
    fn deterministic_exponential_growth() {
        // μ = x, σ = 0, x₀ = 1: X_T → e within Euler bias O(dt).
        let model = model_1d("x", "0");
        let ens = simulate(&model, &cfg(2, 1e-3, 1.0, 5)).unwrap();
        let x_t = ens.path(0).state(ens.n_steps())[0];
        assert!(
            (x_t - std::f64::consts::E).abs() < 3e-3,
            "x_T {x_t} vs e"
        );
    }

    #[test]
    fn bm_terminal_covariance_matches_law() {
        let model = bm2d();
        let n = 20_000;
        let ens = simulate(&model, &cfg(n, 0.01, 1.0, 11)).unwrap();
        let k = ens.n_steps();
        let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
        for p in 0..n {
            let s = ens.path(p).state(k);
            cxx += s[0] * s[0];
            cyy += s[1] * s[1];
            cxy += s[0] * s[1];
        }
        let nf = n as f64;
        let tol = 4.0 / nf.sqrt();
        assert!((cxx / nf - 1.0).abs() < tol);
        assert!((cyy / nf - 1.0).abs() < tol);
        assert!((cxy / nf).abs() < tol);
        // The clock coordinate integrates dt exactly.
        assert!((ens.path(0).state(k)[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simulation_is_bit_identical_across_thread_counts() {
        let model = bm2d();
        let c = cfg(512, 0.01, 0.5, 77);
        let a = with_thread_cap(Some(1), || simulate(&model, &c).unwrap());
        let b = with_thread_cap(Some(2), || simulate(&model, &c).unwrap());
        assert_eq!(a.raw_states(), b.raw_states());
        assert_eq!(a.raw_increments(), b.raw_increments());
        // And chunking does not matter either.
        let mut c2 = c.clone();
        c2.chunk_size = 37;
        let d = simulate(&model, &c2).unwrap();
        assert_eq!(a.raw_states(), d.raw_states());
    }

    #[test]
    fn blowup_is_reported_with_path_and_step() {
        let model = model_1d("x^3*1e6", "0");
        match simulate(&model, &cfg(1, 0.5, 1.0, 1)) {
            Err(McError::NumericalBlowup { .. }) => {}
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn identity_rotation_keeps_increments() {
        let model = bm2d();
        let ens = simulate(&model, &cfg(16, 0.05, 0.5, 9)).unwrap();
        let b = MatrixField::identity(2, model.vars());
        let rotated = rotate_brownian(&ens, &b).unwrap();
        assert_eq!(rotated.as_slice(), ens.raw_increments());
    }

    #[test]
    fn constant_rotation_preserves_brownian_covariance() {
        let model = bm2d();
        let n = 20_000;
        let ens = simulate(&model, &cfg(n, 0.01, 1.0, 13)).unwrap();
        let b = MatrixField::parse(
            &[vec!["cos(0.8)", "sin(0.8)"], vec!["-sin(0.8)", "cos(0.8)"]],
            model.vars(),
        )
        .unwrap();
        let rotated = rotate_brownian(&ens, &b).unwrap();
        let k = ens.n_steps();
        let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
        for p in 0..n {
            let (mut wx, mut wy) = (0.0, 0.0);
            for step in 0..k {
                wx += rotated[p * k * 2 + step * 2];
                wy += rotated[p * k * 2 + step * 2 + 1];
            }
            cxx += wx * wx;
            cyy += wy * wy;
            cxy += wx * wy;
        }
        let nf = n as f64;
        let tol = 4.0 / nf.sqrt();
        assert!((cxx / nf - 1.0).abs() < tol);
        assert!((cyy / nf - 1.0).abs() < tol);
        assert!((cxy / nf).abs() < tol);
    }

    #[test]
    fn girsanov_weights_examples() {
        // h ≡ 0 ⇒ Z ≡ 1 exactly.
        let model = bm2d();
        let ens = simulate(&model, &cfg(64, 0.05, 0.5, 21)).unwrap();
        let h0 = VectorField::zeros(2, model.vars());
        let (z, flagged) = girsanov_weight(&ens, &h0, 0.5).unwrap();
        assert!(z.iter().all(|&v| v == 1.0));
        assert_eq!(flagged, 0);

        // Constant shift on a 1D Brownian motion: E[Z] = 1 and
        // E[Z·W_t] = c·t within 3 standard errors.
        let model = model_1d("0", "1");
        let n = 40_000;
        let t = 1.0;
        let c_shift = 0.8;
        let ens = simulate(&model, &cfg(n, 0.01, t, 23)).unwrap();
        let h = VectorField::parse(&["0.8"], model.vars()).unwrap();
        let (z, _) = girsanov_weight(&ens, &h, t).unwrap();
        let k = ens.n_steps();
        let w_t: Vec<f64> = (0..n).map(|p| ens.path(p).state(k)[0] - 1.0).collect();
        let zs: Vec<f64> = z.clone();
        let (mz, sez) = mean_and_se(&zs);
        assert!((mz - 1.0).abs() < 3.0 * sez, "E[Z] = {mz} ± {sez}");
        let zw: Vec<f64> = z.iter().zip(&w_t).map(|(a, b)| a * b).collect();
        let (mzw, sezw) = mean_and_se(&zw);
        assert!(
            (mzw - c_shift * t).abs() < 3.0 * sezw + 0.02,
            "E[Z W] = {mzw} ± {sezw}, want {}",
            c_shift * t
        );
    }

    #[test]
    fn identity_path_transformation_is_exact() {
        let model = bm2d();
        let ens = simulate(&model, &cfg(8, 0.05, 0.5, 31)).unwrap();
        let t = crate::transform::FiniteTransformation::identity(&model).unwrap();
        let out = apply_path_transformation(&t, &ens).unwrap();
        for (a, b) in ens.raw_states().iter().zip(out.raw_states()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in ens.raw_increments().iter().zip(out.raw_increments()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_doubling_doubles_states() {
        let model = model_1d("0", "1");
        let vars = model.vars();
        let t = crate::transform::FiniteTransformation::new(
            vars,
            1,
            SpatialMap::symbolic(
                vec![parse("2*x", vars).unwrap()],
                vars,
                model.spatial_box().to_vec(),
            )
            .unwrap(),
            ScalarField::constant(1.0, vars),
            MatrixField::identity(1, vars),
            VectorField::zeros(1, vars),
            model.domain_box().to_vec(),
        )
        .unwrap();
        let ens = simulate(&model, &cfg(4, 0.1, 1.0, 37)).unwrap();
        let out = apply_path_transformation(&t, &ens).unwrap();
        for p in 0..4 {
            for k in 0..=ens.n_steps() {
                assert!(
                    (out.path(p).state(k)[0] - 2.0 * ens.path(p).state(k)[0]).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn time_change_rescales_the_clock() {
        // η = 4: P_T(W)_t = W′_{t/4} with dW′ = 2 dW has variance t, while
        // the state part X_{t/4} has variance t/4.
        let model = model_1d("0", "1");
        let vars = model.vars();
        let t = crate::transform::FiniteTransformation::new(
            vars,
            1,
            SpatialMap::identity(vars, model.spatial_box().to_vec()),
            ScalarField::constant(4.0, vars),
            MatrixField::identity(1, vars),
            VectorField::zeros(1, vars),
            model.domain_box().to_vec(),
        )
        .unwrap();
        let n = 20_000;
        let ens = simulate(&model, &cfg(n, 0.01, 1.0, 41)).unwrap();
        let out = apply_path_transformation(&t, &ens).unwrap();
        let k = ens.n_steps();
        let nf = n as f64;
        let mut var_w = 0.0;
        let mut var_x = 0.0;
        for p in 0..n {
            let w: f64 = (0..k).map(|j| out.path(p).increment(j)[0]).sum();
            var_w += w * w;
            let x = out.path(p).state(k)[0] - 1.0; // x₀ = 1
            var_x += x * x;
        }
        let tol = 4.0 / nf.sqrt();
        assert!((var_w / nf - 1.0).abs() < tol, "var W' {}", var_w / nf);
        assert!((var_x / nf - 0.25).abs() < tol, "var X' {}", var_x / nf);
    }

    #[test]
    fn quasi_invariance_identity_is_exact_zero() {
        let model = bm2d();
        let t = crate::transform::FiniteTransformation::identity(&model).unwrap();
        let g = ScalarField::parse("tanh(x) + tanh(y)", model.vars()).unwrap();
        let r = estimate_quasi_invariance(&model, &t, &g, 0.5, &cfg(256, 0.05, 0.5, 43)).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.std_error, 0.0);
        let sum: f64 = r.terms.iter().map(|(_, v)| v).sum();
        assert!((sum - r.estimate).abs() < 1e-12);
    }

    #[test]
    fn quasi_invariance_with_nontrivial_girsanov_weight() {
        // Rotational symmetry with β = z: h_λ = λ(−y, x) is nonzero, so the
        // quasi-invariance identity exercises the full weight machinery.
        let model = bm2d();
        let beta = parse("z", model.vars()).unwrap();
        let t = bm2d_finite_v_beta(&model, &beta, 0.3).unwrap();
        let g = ScalarField::parse("tanh(x)*tanh(y) + 0.5*tanh(x)", model.vars()).unwrap();
        let r =
            estimate_quasi_invariance(&model, &t, &g, 1.0, &cfg(20_000, 0.005, 1.0, 47)).unwrap();
        assert!(
            r.estimate.abs() <= 3.0 * r.std_error + 0.01,
            "delta {} ± {}",
            r.estimate,
            r.std_error
        );
        assert!(r.n_effective > 1000.0);
    }

    #[test]
    fn quasi_invariance_rejects_uncovered_times() {
        let model = bm2d();
        let t = crate::transform::FiniteTransformation::identity(&model).unwrap();
        let g = ScalarField::parse("x", model.vars()).unwrap();
        assert!(matches!(
            estimate_quasi_invariance(&model, &t, &g, 2.0, &cfg(16, 0.05, 0.5, 1)),
            Err(McError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn scaling_ibp_reduces_to_stein_for_quartic() {
        // V with constant α on the planar model, F = x⁴: the four-term sum
        // collapses to the Stein identity, −6t·E[X²] + 2E[X⁴] → 0.
        let model = bm2d();
        let v = v_alpha(&Expr::Const(1.0)).unwrap();
        let f = ScalarField::parse("x^4", model.vars()).unwrap();
        let r = estimate_ibp(
            &model,
            &v,
            &f,
            1.0,
            &cfg(20_000, 0.01, 1.0, 63),
            &IbpOptions::default(),
        )
        .unwrap();
        assert!(
            r.estimate.abs() <= 3.0 * r.std_error + 0.01,
            "sum {} se {}",
            r.estimate,
            r.std_error
        );
        // Term values approach −6t² and +6t² (E[X⁴] = 3t², E[X²] = t).
        assert!((r.terms[0].1 + 6.0).abs() < 0.5, "m-term {}", r.terms[0].1);
        assert!((r.terms[2].1 - 6.0).abs() < 0.5, "Y(F) term {}", r.terms[2].1);
        assert!(r.terms[1].1.abs() < 1e-15, "H term {}", r.terms[1].1);
    }

    #[test]
    fn crn_variance_no_worse_than_independent_ensembles() {
        let model = bm2d();
        let v = v_alpha(&Expr::Const(1.0)).unwrap();
        let t = crate::symmetry::flow_transformation(&v, &model, 0.2, 200).unwrap();
        let g = ScalarField::parse("tanh(x) + tanh(y)", model.vars()).unwrap();
        let c = cfg(4000, 0.01, 1.0, 53);
        let r = estimate_quasi_invariance(&model, &t, &g, 1.0, &c).unwrap();
        let var_crn = r.std_error * r.std_error * c.n_paths as f64;

        // Independent-ensemble estimator: subtract means from two seeds.
        let r1 = estimate_quasi_invariance(&model, &t, &g, 1.0, &c).unwrap();
        let mut c2 = c.clone();
        c2.seed = 54;
        let r2 = estimate_quasi_invariance(&model, &t, &g, 1.0, &c2).unwrap();
        // Var(indep) = Var(g(X)) + Var(g(X')Z); reconstruct from the runs.
        // The per-term spread is close to Var(g(X_t)) for both, so the CRN
        // variance must be no larger than twice that spread.
        let spread1 = r1.std_error * r1.std_error * c.n_paths as f64;
        let spread2 = r2.std_error * r2.std_error * c.n_paths as f64;
        let _ = (spread1, spread2);
        // Direct check on the definition instead: the difference of the two
        // independent first terms has variance ≈ Var(gX)/n + Var(gX')/n,
        // which dominates the CRN standard error here.
        let g_var = {
            let ens = simulate(&model, &c).unwrap();
            let k = ens.n_steps();
            let vals: Vec<f64> = (0..c.n_paths)
                .map(|p| {
                    let s = ens.path(p).state(k);
                    (s[0]).tanh() + (s[1]).tanh()
                })
                .collect();
            let (_, se) = mean_and_se(&vals);
            se * se * c.n_paths as f64
        };
        assert!(
            var_crn <= 2.0 * g_var + 1e-9,
            "CRN variance {var_crn} vs independent scale {g_var}"
        );
    }

    #[test]
    fn ito_term_vanishes_for_constant_functional() {
        let model = bm2d();
        let v = crate::models::v_beta(&parse("z", model.vars()).unwrap()).unwrap();
        let f = ScalarField::parse("1", model.vars()).unwrap();
        let r = estimate_ibp(
            &model,
            &v,
            &f,
            1.0,
            &cfg(10_000, 0.01, 1.0, 59),
            &IbpOptions::default(),
        )
        .unwrap();
        // Every term involving derivatives of F vanishes; the whole sum is
        // E[∫H dW], a martingale started at zero.
        assert!(
            r.estimate.abs() <= 3.0 * r.std_error + 1e-12,
            "estimate {} se {}",
            r.estimate,
            r.std_error
        );
    }

    #[test]
    fn generic_ibp_matches_direct_rotational_identity() {
        let model = bm2d();
        let beta = parse("z", model.vars()).unwrap();
        let v = crate::models::v_beta(&beta).unwrap();
        let f = ScalarField::parse("sin(x)*cos(y)", model.vars()).unwrap();
        let c = cfg(2000, 0.01, 1.0, 61);
        let ens = simulate(&model, &c).unwrap();
        let generic = estimate_ibp_on(&ens, &model, &v, &f, 1.0, &IbpOptions::default()).unwrap();
        let beta_field = ScalarField::from_expr(beta, model.vars()).unwrap();
        let direct = estimate_ibp_vbeta_direct(&ens, &beta_field, &f, 1.0).unwrap();
        // m ≡ 0 and Y(F)(0) = 0 for this family, so the two non-trivial
        // terms must agree with the direct implementation to 1e-12.
        assert!((generic.terms[0].1).abs() < 1e-15);
        assert!((generic.terms[3].1).abs() < 1e-15);
        assert!(
            (generic.terms[1].1 - direct.terms[0].1).abs() < 1e-12,
            "ito terms {} vs {}",
            generic.terms[1].1,
            direct.terms[0].1
        );
        assert!(
            (generic.terms[2].1 - direct.terms[1].1).abs() < 1e-12,
            "boundary terms {} vs {}",
            generic.terms[2].1,
            direct.terms[1].1
        );
    }

    #[test]
    fn stein_and_isserlis_examples() {
        let vars = VarSet::spatial_and_time(&["x", "y"], "t").unwrap();
        let c = cfg(50_000, 1.0, 1.0, 67);
        // F = x²: both sides are 2t.
        let f = ScalarField::parse("x^2", &vars).unwrap();
        let r = estimate_stein(1.0, &f, &c).unwrap();
        assert!((r.terms[0].1 - 2.0).abs() < 0.1);
        assert!(r.estimate.abs() <= 3.0 * r.std_error + 1e-12);
        // F constant: both sides vanish identically.
        let f = ScalarField::parse("3", &vars).unwrap();
        let r = estimate_stein(1.0, &f, &c).unwrap();
        assert_eq!(r.estimate, 0.0);
        // Isserlis with F = xy: both sides approach t.
        let f = ScalarField::parse("x*y", &vars).unwrap();
        let r = estimate_isserlis(1.0, &f, &c).unwrap();
        assert!(r.estimate.abs() <= 3.0 * r.std_error);
        assert!((r.terms[0].1 - 1.0).abs() < 3.0 * r.std_error + 0.05);
    }

    #[test]
    fn ensemble_dump_round_trips() {
        let model = bm2d();
        let ens = simulate(&model, &cfg(16, 0.05, 0.25, 71)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paths.bin");
        write_ensemble(&path, &ens).unwrap();
        let back = read_ensemble(&path).unwrap();
        assert_eq!(ens.raw_states(), back.raw_states());
        assert_eq!(ens.raw_increments(), back.raw_increments());
        assert_eq!(ens.weights(), back.weights());
        assert_eq!(ens.time_grid, back.time_grid);
        assert_eq!(ens.seed, back.seed);
    }

    #[test]
    fn config_validation() {
        assert!(matches!(
            cfg(0, 0.1, 1.0, 1).n_steps(),
            Err(McError::Config(_))
        ));
        assert!(matches!(
            cfg(1, 0.3, 1.0, 1).n_steps(),
            Err(McError::Config(_))
        ));
        assert_eq!(cfg(1, 0.1, 1.0, 1).n_steps().unwrap(), 10);
    }
}
