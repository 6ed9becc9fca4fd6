//! Black-box maximization over a bounded box: adaptive Lipschitz (AdaLipo)
//! global search alternated with a quadratic trust-region model around the
//! best point.
//!
//! The optimizer is driven through [`OptimizerState::ask`] and
//! [`OptimizerState::tell`], so the objective can live anywhere (a closure,
//! another process, a training job). Internally every point is mapped to the
//! unit cube `[0, 1]^d`; Lipschitz slopes, trust-region radii and distances
//! are all measured there.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Uniform draws tried per exploitation step before giving up on the
/// acceptance test.
const MAX_EXPLOIT_DRAWS: usize = 10_000;
const INITIAL_RADIUS_FRACTION: f64 = 0.1;
const MIN_RADIUS_FRACTION: f64 = 1e-6;
const RANK_TOL: f64 = 1e-10;

const TABLE3_SPACE: &str = include_str!("../data/table3.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HyperoptError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("objective value {0} is not finite")]
    NonFiniteValue(f64),
    #[error("no trials recorded yet")]
    Empty,
    #[error("need at least {needed} trials to fit the quadratic model, have {have}")]
    NotEnoughTrials { needed: usize, have: usize },
    #[error("quadratic fit is rank deficient (rank {rank} of {terms})")]
    RankDeficient { rank: usize, terms: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub integer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self, HyperoptError> {
        let space = Self { dims };
        space.validate()?;
        Ok(space)
    }

    /// Parses the JSON list form `[{"name", "lo", "hi", "integer"}, ...]`.
    pub fn from_json(text: &str) -> Result<Self, HyperoptError> {
        let dims: Vec<Dim> = serde_json::from_str(text).map_err(|e| HyperoptError::InvalidSpace(e.to_string()))?;
        Self::new(dims)
    }

    /// ANCHOR_PER_GRID, NMS_THRESH, LEARNING_RATE and WEIGHT_DECAY bounds of
    /// the SqueezeDet search.
    pub fn table3() -> Self {
        Self::from_json(TABLE3_SPACE).expect("bundled space is valid")
    }

    pub fn table3_json() -> &'static str {
        TABLE3_SPACE
    }

    pub fn validate(&self) -> Result<(), HyperoptError> {
        if self.dims.is_empty() {
            return Err(HyperoptError::InvalidSpace("no dimensions".into()));
        }
        for (i, d) in self.dims.iter().enumerate() {
            if !(d.lo.is_finite() && d.hi.is_finite() && d.lo < d.hi) {
                return Err(HyperoptError::InvalidSpace(format!("dimension {:?}: need finite lo < hi, got [{}, {}]", d.name, d.lo, d.hi)));
            }
            if self.dims[..i].iter().any(|o| o.name == d.name) {
                return Err(HyperoptError::InvalidSpace(format!("duplicate dimension name {:?}", d.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dims.len()
            && point.iter().zip(&self.dims).all(|(v, d)| *v >= d.lo && *v <= d.hi && (!d.integer || v.fract() == 0.0))
    }

    fn to_unit(&self, point: &[f64]) -> Vec<f64> {
        point.iter().zip(&self.dims).map(|(v, d)| (v - d.lo) / (d.hi - d.lo)).collect()
    }

    fn point_from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter().zip(&self.dims).map(|(u, d)| (d.lo + u.clamp(0.0, 1.0) * (d.hi - d.lo)).clamp(d.lo, d.hi)).collect()
    }

    /// Diagonal of the unit cube.
    fn diagonal(&self) -> f64 {
        (self.dims.len() as f64).sqrt()
    }
}

/// Integer dims rounded half away from zero, then clamped to their bounds.
pub fn round_integers(point: &[f64], space: &SearchSpace) -> Vec<f64> {
    point.iter().zip(&space.dims).map(|(&v, d)| if d.integer { v.round().clamp(d.lo.ceil(), d.hi.floor()) } else { v }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub point: Vec<f64>,
    pub value: f64,
    pub seq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Global,
    Local,
}

/// Quadratic surrogate around the best point, in unit-cube coordinates
/// relative to `center`.
///
/// `quad_coeffs` are ordered `[1, s_0, .., s_{d-1}, s_0 s_0, s_0 s_1, .., s_{d-1} s_{d-1}]`
/// (upper triangle, row by row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegionModel {
    pub center: Vec<f64>,
    pub radius: f64,
    pub quad_coeffs: Vec<f64>,
    /// Sequence numbers of the trials used in the fit.
    pub fit_points: Vec<usize>,
}

impl TrustRegionModel {
    /// Model value at a unit-cube point.
    pub fn predict(&self, unit_point: &[f64]) -> f64 {
        let s: Vec<f64> = unit_point.iter().zip(&self.center).map(|(u, c)| u - c).collect();
        quadratic_features(&s).iter().zip(&self.quad_coeffs).map(|(f, c)| f * c).sum()
    }
}

/// Number of coefficients of a full quadratic in `d` variables.
pub fn quadratic_terms(d: usize) -> usize {
    (d + 1) * (d + 2) / 2
}

fn quadratic_features(s: &[f64]) -> Vec<f64> {
    let d = s.len();
    let mut f = Vec::with_capacity(quadratic_terms(d));
    f.push(1.0);
    f.extend_from_slice(s);
    for i in 0..d {
        for j in i..d {
            f.push(s[i] * s[j]);
        }
    }
    f
}

/// Least-squares fit of a full quadratic in `s = x - center` to `(points, values)`.
///
/// Columns are scaled by the spread of the points before solving so that
/// tightly clustered fits keep their conditioning.
pub fn fit_quadratic(points: &[Vec<f64>], values: &[f64], center: &[f64]) -> Result<Vec<f64>, HyperoptError> {
    let d = center.len();
    let terms = quadratic_terms(d);
    if points.len() < terms {
        return Err(HyperoptError::NotEnoughTrials { needed: terms, have: points.len() });
    }
    let shifted: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(center).map(|(a, c)| a - c).collect()).collect();
    let scale = shifted.iter().flat_map(|s| s.iter().map(|v| v.abs())).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(HyperoptError::RankDeficient { rank: 1, terms });
    }
    let rows: Vec<f64> = shifted.iter().flat_map(|s| quadratic_features(&s.iter().map(|v| v / scale).collect::<Vec<_>>())).collect();
    let a = DMatrix::from_row_slice(points.len(), terms, &rows);
    let b = DVector::from_column_slice(values);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax).count();
    if rank < terms {
        return Err(HyperoptError::RankDeficient { rank, terms });
    }
    let coeffs = svd.solve(&b, RANK_TOL * smax).map_err(|e| HyperoptError::InvalidParameter(e.to_string()))?;
    // undo the column scaling: degree-k terms divide by scale^k
    let mut out = Vec::with_capacity(terms);
    out.push(coeffs[0]);
    out.extend((1..=d).map(|i| coeffs[i] / scale));
    out.extend(coeffs.iter().skip(d + 1).map(|c| c / (scale * scale)));
    Ok(out)
}

/// Smallest `(1 + alpha)^i`, `i` an integer, that is `>= slope`; 0 for a zero slope.
pub fn lipschitz_grid_value(slope: f64, alpha: f64) -> f64 {
    if slope <= 0.0 || !slope.is_finite() {
        return 0.0;
    }
    let base = 1.0 + alpha;
    let mut i = (slope.ln() / base.ln()).ceil() as i32;
    while base.powi(i) < slope {
        i += 1;
    }
    while base.powi(i - 1) >= slope {
        i -= 1;
    }
    base.powi(i)
}

fn max_slope(points: &[Vec<f64>], values: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            let dist = euclid(&points[a], &points[b]);
            if dist > 0.0 {
                best = best.max((values[a] - values[b]).abs() / dist);
            }
        }
    }
    best
}

/// Lipschitz constant estimate over the given trials: the max pairwise slope
/// rounded up onto the `(1 + alpha)^i` grid. Pairs at zero distance are skipped.
pub fn lipschitz_estimate(trials: &[Trial], alpha: f64) -> f64 {
    let points: Vec<Vec<f64>> = trials.iter().map(|t| t.point.clone()).collect();
    let values: Vec<f64> = trials.iter().map(|t| t.value).collect();
    lipschitz_grid_value(max_slope(&points, &values), alpha)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub space: SearchSpace,
    pub trials: Vec<Trial>,
    pub lipschitz_k: f64,
    pub exploration_p: f64,
    pub alpha: f64,
    pub noise_eps: f64,
    pub tr: Option<TrustRegionModel>,
    /// Trust-region radius in unit-cube units, kept between fits.
    pub tr_radius: f64,
    pub rng_seed: u64,
    pub phase: Phase,
    /// Iterations where the local model could not be fit and a global step ran instead.
    pub local_fallbacks: usize,
    max_slope: f64,
    unit_points: Vec<Vec<f64>>,
    pending: Option<Vec<f64>>,
    asks: usize,
    rng: ChaCha8Rng,
}

impl OptimizerState {
    pub fn new(space: SearchSpace, exploration_p: f64, alpha: f64, noise_eps: f64, seed: u64) -> Result<Self, HyperoptError> {
        space.validate()?;
        if !(0.0..=1.0).contains(&exploration_p) {
            return Err(HyperoptError::InvalidParameter(format!("exploration_p {exploration_p} outside [0, 1]")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(HyperoptError::InvalidParameter(format!("alpha {alpha} must be positive")));
        }
        if !(noise_eps.is_finite() && noise_eps >= 0.0) {
            return Err(HyperoptError::InvalidParameter(format!("noise_eps {noise_eps} must be nonnegative")));
        }
        let tr_radius = INITIAL_RADIUS_FRACTION * space.diagonal();
        Ok(Self {
            space,
            trials: Vec::new(),
            lipschitz_k: 0.0,
            exploration_p,
            alpha,
            noise_eps,
            tr: None,
            tr_radius,
            rng_seed: seed,
            phase: Phase::Global,
            local_fallbacks: 0,
            max_slope: 0.0,
            unit_points: Vec::new(),
            pending: None,
            asks: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Defaults: exploration probability 0.1, grid growth 0.5, no noise slack.
    pub fn with_defaults(space: SearchSpace, seed: u64) -> Result<Self, HyperoptError> {
        Self::new(space, 0.1, 0.5, 0.0, seed)
    }

    pub fn pending(&self) -> Option<&[f64]> {
        self.pending.as_deref()
    }

    pub fn best(&self) -> Result<&Trial, HyperoptError> {
        // first maximum wins, so ties go to the earliest seq
        self.trials
            .iter()
            .fold(None::<&Trial>, |acc, t| match acc {
                Some(b) if b.value >= t.value => Some(b),
                _ => Some(t),
            })
            .ok_or(HyperoptError::Empty)
    }

    fn best_index(&self) -> Option<usize> {
        self.best().ok().map(|t| t.seq)
    }

    /// Proposes the next point to evaluate.
    pub fn ask(&mut self) -> Result<Vec<f64>, HyperoptError> {
        if self.pending.is_some() {
            return Err(HyperoptError::Protocol("ask called again before tell".into()));
        }
        self.asks += 1;
        let d = self.space.len();
        let local_turn = self.trials.len() >= quadratic_terms(d) && self.asks.is_multiple_of(2);

        let mut point = None;
        if local_turn {
            match self.local_candidate() {
                Ok(p) => {
                    self.phase = Phase::Local;
                    point = Some(p);
                }
                Err(e) => {
                    debug!("local model unavailable ({e}), taking a global step");
                    self.local_fallbacks += 1;
                }
            }
        }
        let point = match point {
            Some(p) => p,
            None => {
                self.phase = Phase::Global;
                self.global_candidate()
            }
        };
        self.pending = Some(point.clone());
        Ok(point)
    }

    /// Records the objective value for the pending point.
    pub fn tell(&mut self, point: &[f64], value: f64) -> Result<(), HyperoptError> {
        let Some(pending) = &self.pending else {
            return Err(HyperoptError::Protocol("tell without a pending ask".into()));
        };
        if pending.as_slice() != point {
            return Err(HyperoptError::Protocol(format!("told point {point:?} but pending ask is {pending:?}")));
        }
        if !value.is_finite() {
            return Err(HyperoptError::NonFiniteValue(value));
        }
        self.pending = None;
        self.record(point.to_vec(), value);
        Ok(())
    }

    fn record(&mut self, point: Vec<f64>, value: f64) {
        let prev_best = self.best().ok().map(|t| t.value);
        let unit = self.space.to_unit(&point);
        for (u, t) in self.unit_points.iter().zip(&self.trials) {
            let dist = euclid(u, &unit);
            if dist > 0.0 {
                self.max_slope = self.max_slope.max((t.value - value).abs() / dist);
            }
        }
        self.lipschitz_k = lipschitz_grid_value(self.max_slope, self.alpha);

        if let Some(prev) = prev_best {
            let diag = self.space.diagonal();
            self.tr_radius = if value > prev + self.noise_eps {
                (self.tr_radius * 2.0).min(diag)
            } else {
                (self.tr_radius * 0.5).max(MIN_RADIUS_FRACTION * diag)
            };
        }

        let seq = self.trials.len();
        self.trials.push(Trial { point, value, seq });
        self.unit_points.push(unit);
    }

    /// Builds the trust-region model around the current best point.
    pub fn fit_quadratic_tr(&self) -> Result<TrustRegionModel, HyperoptError> {
        let d = self.space.len();
        let terms = quadratic_terms(d);
        if self.trials.len() < terms {
            return Err(HyperoptError::NotEnoughTrials { needed: terms, have: self.trials.len() });
        }
        let best = self.best_index().ok_or(HyperoptError::Empty)?;
        let center = self.unit_points[best].clone();
        let mut by_dist: Vec<(f64, usize)> = self.unit_points.iter().enumerate().map(|(i, u)| (euclid(u, &center), i)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let m = (2 * terms).min(self.trials.len());
        let fit_points: Vec<usize> = by_dist[..m].iter().map(|&(_, i)| i).collect();
        let pts: Vec<Vec<f64>> = fit_points.iter().map(|&i| self.unit_points[i].clone()).collect();
        let vals: Vec<f64> = fit_points.iter().map(|&i| self.trials[i].value).collect();
        let quad_coeffs = fit_quadratic(&pts, &vals, &center)?;
        Ok(TrustRegionModel { center, radius: self.tr_radius, quad_coeffs, fit_points })
    }

    fn local_candidate(&mut self) -> Result<Vec<f64>, HyperoptError> {
        let model = self.fit_quadratic_tr()?;
        let step = maximize_in_ball(&model.quad_coeffs, self.space.len(), model.radius);
        let unit: Vec<f64> = model.center.iter().zip(&step).map(|(c, s)| (c + s).clamp(0.0, 1.0)).collect();
        self.tr = Some(model);
        Ok(round_integers(&self.space.point_from_unit(&unit), &self.space))
    }

    fn random_unit(&mut self) -> Vec<f64> {
        (0..self.space.len()).map(|_| self.rng.gen::<f64>()).collect()
    }

    fn upper_bound(&self, unit: &[f64]) -> f64 {
        self.unit_points
            .iter()
            .zip(&self.trials)
            .map(|(u, t)| t.value + self.lipschitz_k * euclid(u, unit) + self.noise_eps)
            .fold(f64::INFINITY, f64::min)
    }

    fn global_candidate(&mut self) -> Vec<f64> {
        let explore = self.rng.gen_bool(self.exploration_p);
        if self.trials.is_empty() || self.lipschitz_k == 0.0 || explore {
            let u = self.random_unit();
            return round_integers(&self.space.point_from_unit(&u), &self.space);
        }
        let target = self.best().map(|t| t.value).unwrap_or(f64::NEG_INFINITY);
        let mut fallback: Option<(f64, Vec<f64>)> = None;
        for _ in 0..MAX_EXPLOIT_DRAWS {
            let u = self.random_unit();
            let point = round_integers(&self.space.point_from_unit(&u), &self.space);
            let bound = self.upper_bound(&self.space.to_unit(&point));
            if bound >= target {
                return point;
            }
            if fallback.as_ref().is_none_or(|(b, _)| bound > *b) {
                fallback = Some((bound, point));
            }
        }
        debug!("no draw passed the Lipschitz test in {MAX_EXPLOIT_DRAWS} tries");
        fallback.expect("at least one draw").1
    }

    /// Runs `budget` ask/tell rounds against a local objective.
    pub fn optimize<F: FnMut(&[f64]) -> f64>(&mut self, budget: usize, mut objective: F) -> Result<Vec<TrialLogLine>, HyperoptError> {
        let mut log = Vec::with_capacity(budget);
        for _ in 0..budget {
            let p = self.ask()?;
            let v = objective(&p);
            self.tell(&p, v)?;
            log.push(self.log_line());
        }
        Ok(log)
    }

    /// Log entry for the most recent trial.
    pub fn log_line(&self) -> TrialLogLine {
        let last = self.trials.last().expect("log_line after a tell");
        TrialLogLine {
            seq: last.seq,
            point: last.point.clone(),
            value: last.value,
            best_so_far: self.best().map(|t| t.value).unwrap_or(last.value),
        }
    }
}

/// One line of the JSON-lines trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLogLine {
    pub seq: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub best_so_far: f64,
}

/// Maximizes `g.s + 0.5 s'Hs` (the non-constant part of the model) over `|s| <= radius`.
fn maximize_in_ball(coeffs: &[f64], d: usize, radius: f64) -> Vec<f64> {
    // minimize m(s) = G.s + 0.5 s'Bs with G = -g, B = -H
    let grad = DVector::from_iterator(d, (0..d).map(|i| -coeffs[1 + i]));
    let mut hess = DMatrix::zeros(d, d);
    let mut k = d + 1;
    for i in 0..d {
        for j in i..d {
            if i == j {
                hess[(i, i)] = -2.0 * coeffs[k];
            } else {
                hess[(i, j)] = -coeffs[k];
                hess[(j, i)] = -coeffs[k];
            }
            k += 1;
        }
    }
    let eig = SymmetricEigen::new(hess);
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let g_hat = q.transpose() * &grad;
    let step_for = |shift: f64| -> DVector<f64> {
        let coords = DVector::from_iterator(
            d,
            (0..d).map(|i| {
                let denom = lam[i] + shift;
                if denom.abs() < 1e-300 {
                    0.0
                } else {
                    -g_hat[i] / denom
                }
            }),
        );
        q * coords
    };

    let lam_min = lam.min();
    if lam_min > 0.0 {
        let s = step_for(0.0);
        if s.norm() <= radius {
            return s.iter().copied().collect();
        }
    }
    let lo0 = (-lam_min).max(0.0);
    let mut lo = lo0 + 1e-12 * (1.0 + lo0);
    if step_for(lo).norm() < radius {
        // hard case: walk along the lowest-curvature direction to the boundary
        let s = step_for(lo);
        let imin = lam.imin();
        let dir = q.column(imin).into_owned();
        let sd = s.dot(&dir);
        let tau = -sd + (sd * sd + radius * radius - s.norm_squared()).max(0.0).sqrt();
        return (s + dir * tau).iter().copied().collect();
    }
    let mut hi = lo0 + grad.norm() / radius + 1.0;
    while step_for(hi).norm() > radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if step_for(mid).norm() > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    step_for(hi).iter().copied().collect()
}

/// Objective evaluated at a point of a search space.
pub type Objective = fn(&SearchSpace, &[f64]) -> f64;

/// Analytic objectives for exercising the optimizer, evaluated on unit-cube coordinates.
pub fn builtin_objective(name: &str) -> Option<Objective> {
    match name {
        // -(u0 - 0.3)^2 - (u1 - 0.7)^2 - (u2 - 0.3)^2 - ...
        "quadratic" => Some(|space, p| {
            space
                .to_unit(p)
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    let c = if i % 2 == 0 { 0.3 } else { 0.7 };
                    -(u - c) * (u - c)
                })
                .sum()
        }),
        "sphere" => Some(|space, p| space.to_unit(p).iter().map(|u| -(u - 0.5) * (u - 0.5)).sum()),
        "rastrigin" => Some(|space, p| {
            space
                .to_unit(p)
                .iter()
                .map(|u| {
                    let x = 10.24 * u - 5.12 - 0.5;
                    -(x * x - 10.0 * (2.0 * std::f64::consts::PI * x).cos() + 10.0)
                })
                .sum()
        }),
        _ => None,
    }
}

pub const BUILTIN_OBJECTIVES: &[&str] = &["quadratic", "sphere", "rastrigin"];
