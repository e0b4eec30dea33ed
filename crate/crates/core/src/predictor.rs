//! Operator-side sample queue and the online ARMA forecaster.
//!
//! Every pose dimension is modeled independently as
//! `y(t) = c + Σ φ_j y(t - L_j) + Σ θ_m e(t - m) + e(t)`
//! on data centered at the newest sample of the fit window. The fit has two least-squares
//! stages: a long autoregression estimates the innovations `e`, then `φ`,
//! `θ` and `c` are regressed jointly on lagged data and lagged innovations.
//! The moving-average part is dropped (and the model flagged) when that
//! regression is singular, non-invertible, or less stable than the plain
//! autoregression.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::model::{canonicalize_quaternion, quat_dot, ModelError, Pose, Quat, StampedSample, Tick};

/// Relative eigenvalue cut-off of the scaled normal matrix.
const RANK_TOL: f64 = 1e-12;
/// Contiguous lags added to the first-stage regression that estimates
/// innovations.
const INNOVATION_ORDER: usize = 10;
/// Extra samples before the lag span used to warm up the innovation recursion.
const INNOVATION_WARMUP: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum PredictorError {
    #[error("window holds {have} samples, fit needs at least {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("horizon {h} exceeds the configured maximum {max}")]
    HorizonBound { h: u64, max: u64 },
    #[error("stale sample: tick {tick} is not newer than {newest}")]
    Stale { tick: Tick, newest: Tick },
    #[error("invalid predictor config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, PredictorError>;

/// Fixed-capacity history of operator samples.
///
/// Transmission does not discard history: the fit needs the full window.
/// Instead a cursor marks which samples have not been sent yet.
#[derive(Debug, Clone)]
pub struct SampleQueue {
    capacity: usize,
    buf: VecDeque<StampedSample>,
    unsent: usize,
}

impl SampleQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            capacity,
            buf: VecDeque::with_capacity(capacity),
            unsent: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn newest(&self) -> Option<&StampedSample> {
        self.buf.back()
    }

    pub fn push_sample(&mut self, s: StampedSample) -> Result<()> {
        if let Some(last) = self.buf.back() {
            if s.t_gen <= last.t_gen {
                return Err(PredictorError::Stale {
                    tick: s.t_gen,
                    newest: last.t_gen,
                });
            }
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(s);
        self.unsent = (self.unsent + 1).min(self.buf.len());
        Ok(())
    }

    /// Samples pushed since the previous call, oldest first.
    pub fn take_fresh(&mut self) -> Vec<StampedSample> {
        let start = self.buf.len() - self.unsent;
        self.unsent = 0;
        self.buf.range(start..).cloned().collect()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &StampedSample> + ExactSizeIterator {
        self.buf.iter()
    }

    /// Poses of the newest `n` samples (or all of them), oldest first.
    pub fn tail_poses(&self, n: usize) -> Vec<Pose> {
        let start = self.buf.len().saturating_sub(n);
        self.buf.range(start..).map(|s| s.pose).collect()
    }

    /// Poses of at most `n` samples generated no later than `t_gen`, oldest
    /// first.
    pub fn poses_until(&self, t_gen: Tick, n: usize) -> Vec<Pose> {
        let end = self.buf.partition_point(|s| s.t_gen <= t_gen);
        let start = end.saturating_sub(n);
        self.buf.range(start..end).map(|s| s.pose).collect()
    }

    /// Samples generated in `(after, until]`, oldest first.
    pub fn between(&self, after: Tick, until: Tick) -> impl Iterator<Item = &StampedSample> {
        let lo = self.buf.partition_point(|s| s.t_gen <= after);
        let hi = self.buf.partition_point(|s| s.t_gen <= until);
        self.buf.range(lo..hi.max(lo))
    }

    /// Generation tick of the oldest retained sample.
    pub fn oldest(&self) -> Option<Tick> {
        self.buf.front().map(|s| s.t_gen)
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.tail_poses(self.buf.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmaConfig {
    /// AR lags in samples, strictly increasing.
    pub lags: Vec<usize>,
    pub ma_order: usize,
    /// History kept for fitting.
    pub window_ms: u64,
    /// Largest forecast horizon accepted, in samples.
    pub max_horizon: u64,
}

impl Default for ArmaConfig {
    fn default() -> Self {
        Self {
            lags: vec![1, 20, 40, 60, 80, 100],
            ma_order: 2,
            window_ms: 1000,
            max_horizon: 1000,
        }
    }
}

impl ArmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lags.is_empty() {
            return Err(PredictorError::Config("lag set is empty".into()));
        }
        if self.lags[0] == 0 || self.lags.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PredictorError::Config(format!(
                "lags must be strictly increasing positive integers, got {:?}",
                self.lags
            )));
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        *self.lags.last().unwrap_or(&0)
    }

    pub fn min_window(&self) -> usize {
        self.max_lag() + self.ma_order + 10
    }

    pub fn ar_only(&self) -> Self {
        Self {
            ma_order: 0,
            ..self.clone()
        }
    }
}

/// Coefficients of one pose dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimModel {
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaModel {
    pub config: ArmaConfig,
    pub dims: Vec<DimModel>,
    /// Quaternion every window is sign-aligned to before regression.
    pub reference: Quat,
    /// Set when the moving-average part was dropped in some dimension.
    pub ma_fallback: bool,
    /// Aligned newest sample of the fit window; the data were centered here.
    pub center: [f64; 7],
}

fn align_rows(window: &[Pose], reference: &Quat) -> Vec<[f64; 7]> {
    window
        .iter()
        .map(|p| {
            let mut v = p.to_array();
            if quat_dot(reference, &p.orientation) < 0.0 {
                for c in &mut v[3..] {
                    *c = -*c;
                }
            }
            v
        })
        .collect()
}

/// Least squares through the normal equations with column scaling and an
/// eigenvalue-truncated pseudo-inverse. Returns coefficients and rank.
fn least_squares(xtx: &DMatrix<f64>, xty: &DVector<f64>) -> (DVector<f64>, usize) {
    let k = xtx.nrows();
    let scale = DVector::from_iterator(
        k,
        (0..k).map(|i| {
            let d = xtx[(i, i)].sqrt();
            if d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        }),
    );
    let a = DMatrix::from_fn(k, k, |i, j| xtx[(i, j)] * scale[i] * scale[j]);
    let b = xty.component_mul(&scale);
    let eig = SymmetricEigen::new(a);
    let top = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let mut coef = DVector::zeros(k);
    let mut rank = 0;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > RANK_TOL * top && lam > 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(i);
            coef += v * (v.dot(&b) / lam);
        }
    }
    (coef.component_mul(&scale), rank)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cross products of an intercept and shifted views `y[r - s]` of one
/// series over rows `r` in a fixed range. Index 0 is the intercept, index
/// `i + 1` the shift `shifts[i]`.
struct LagGram {
    shifts: Vec<usize>,
    m: DMatrix<f64>,
}

impl LagGram {
    /// `shifts` must be sorted and deduplicated, all `≤ rows.start`.
    fn new(y: &[f64], shifts: Vec<usize>, rows: std::ops::Range<usize>) -> Self {
        let k = shifts.len();
        let (s, e) = (rows.start, rows.end);
        let mut m = DMatrix::zeros(k + 1, k + 1);
        m[(0, 0)] = rows.len() as f64;
        let pos = |v: usize| shifts.binary_search(&v).ok();
        // walk from the largest shift down so that `(a+1, b+1)` is known
        // whenever it is one of ours; it then differs from `(a, b)` by one
        // row at each end
        for i in (0..k).rev() {
            let a = shifts[i];
            let next = pos(a + 1);
            m[(0, i + 1)] = match next {
                Some(ni) => m[(0, ni + 1)] - y[s - 1 - a] + y[e - 1 - a],
                None => y[s - a..e - a].iter().sum(),
            };
            for j in i..k {
                let b = shifts[j];
                let v = match (next, pos(b + 1)) {
                    (Some(ni), Some(nj)) => {
                        m[(ni + 1, nj + 1)] - y[s - 1 - a] * y[s - 1 - b] + y[e - 1 - a] * y[e - 1 - b]
                    }
                    _ => dot(&y[s - a..e - a], &y[s - b..e - b]),
                };
                m[(i + 1, j + 1)] = v;
            }
        }
        m.fill_lower_triangle_with_upper_triangle();
        Self { shifts, m }
    }

    fn index(&self, shift: usize) -> usize {
        1 + self.shifts.binary_search(&shift).expect("shift in the gram")
    }

    /// Drops row `r` from the sums.
    fn remove_row(&mut self, y: &[f64], r: usize) {
        let x: Vec<f64> = std::iter::once(1.0)
            .chain(self.shifts.iter().map(|&a| y[r - a]))
            .collect();
        for i in 0..x.len() {
            for j in 0..x.len() {
                self.m[(i, j)] -= x[i] * x[j];
            }
        }
    }
}

/// Regression of shift 0 on an intercept plus the given lags.
fn regress_lags(g: &LagGram, lags: &[usize]) -> (DVector<f64>, usize) {
    let idx: Vec<usize> = std::iter::once(0).chain(lags.iter().map(|&l| g.index(l))).collect();
    let t = g.index(0);
    let xtx = DMatrix::from_fn(idx.len(), idx.len(), |i, j| g.m[(idx[i], idx[j])]);
    let xty = DVector::from_iterator(idx.len(), idx.iter().map(|&i| g.m[(i, t)]));
    least_squares(&xtx, &xty)
}

/// Second stage: intercept, `lags` and `e(t - 1..=q)` over rows `rows`,
/// with `g` already restricted to those rows.
fn regress_arma(
    g: &LagGram,
    y: &[f64],
    e: &[f64],
    lags: &[usize],
    q: usize,
    rows: std::ops::Range<usize>,
) -> (DVector<f64>, usize) {
    let p = lags.len();
    let k = 1 + p + q;
    let (s, n) = (rows.start, rows.end);
    let ecol = |m: usize| &e[s - m..n - m];
    let ycol = |l: usize| &y[s - l..n - l];
    let idx: Vec<usize> = std::iter::once(0).chain(lags.iter().map(|&l| g.index(l))).collect();
    let t = g.index(0);
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for i in 0..=p {
        for j in 0..=p {
            xtx[(i, j)] = g.m[(idx[i], idx[j])];
        }
        xty[i] = g.m[(idx[i], t)];
    }
    for m in 1..=q {
        let c = p + m;
        xtx[(0, c)] = ecol(m).iter().sum();
        for (j, &l) in lags.iter().enumerate() {
            xtx[(1 + j, c)] = dot(ycol(l), ecol(m));
        }
        for m2 in m..=q {
            xtx[(c, p + m2)] = dot(ecol(m2), ecol(m));
        }
        xty[c] = dot(ycol(0), ecol(m));
    }
    xtx.fill_lower_triangle_with_upper_triangle();
    least_squares(&xtx, &xty)
}

fn ma_invertible(ma: &[f64]) -> bool {
    match ma {
        [] => true,
        [t1] => t1.abs() < 1.0,
        [t1, t2] => t2.abs() < 1.0 && t1 + t2 > -1.0 && t2 - t1 > -1.0,
        // higher orders: check the companion matrix spectral radius
        _ => {
            let n = ma.len();
            let comp = DMatrix::from_fn(n, n, |i, j| {
                if i == 0 {
                    -ma[j]
                } else if i == j + 1 {
                    1.0
                } else {
                    0.0
                }
            });
            comp.complex_eigenvalues().iter().all(|z| z.norm() < 1.0)
        }
    }
}

/// Tolerated root modulus, as log growth per sample: at most a factor of
/// two over the longest horizon.
fn max_log_growth(cfg: &ArmaConfig) -> f64 {
    std::f64::consts::LN_2 / cfg.max_horizon.max(1) as f64
}

/// Log of the dominant root modulus of `z(t) = Σ φ_j z(t - L_j)`, by power
/// iteration on the recursion itself.
fn log_spectral_radius(ar: &[f64], lags: &[usize]) -> f64 {
    const STEPS: usize = 1000;
    const BLOCK: usize = 100;
    let l_max = *lags.last().unwrap_or(&1);
    let mut z: Vec<f64> = (0..l_max + STEPS)
        .map(|k| if k < l_max { (k as f64 * 1.3).sin() + 0.5 } else { 0.0 })
        .collect();
    let mut log_norm = 0.0;
    let mut late = 0.0;
    for t in l_max..l_max + STEPS {
        z[t] = ar.iter().zip(lags).map(|(phi, &l)| phi * z[t - l]).sum();
        let step = t - l_max + 1;
        if step % BLOCK == 0 {
            let norm = z[t + 1 - l_max..=t].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return if norm == 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
            }
            for v in &mut z[t + 1 - l_max..=t] {
                *v /= norm;
            }
            log_norm += norm.ln();
            if step == STEPS / 2 {
                late = log_norm;
            }
        }
    }
    (log_norm - late) / (STEPS / 2) as f64
}

fn fit_dim(y: &[f64], cfg: &ArmaConfig) -> (DimModel, bool) {
    let lags = &cfg.lags;
    let p = lags.len();
    let l_max = cfg.max_lag();
    let n = y.len();
    let q = cfg.ma_order;
    if y.iter().all(|v| *v == 0.0) {
        let zero = DimModel {
            intercept: 0.0,
            ar: vec![0.0; p],
            ma: vec![0.0; q],
        };
        return (zero, false);
    }
    // one gram serves all stages; shift 0 is the target
    let mut long: Vec<usize> = (1..=INNOVATION_ORDER).chain(lags.iter().copied()).collect();
    long.sort();
    long.dedup();
    let shifts: Vec<usize> = std::iter::once(0).chain(long.iter().copied()).collect();
    let mut gram = LagGram::new(y, shifts, l_max..n);
    let (b1, rank1) = regress_lags(&gram, lags);
    let ar_only = DimModel {
        intercept: b1[0],
        ar: b1.iter().skip(1).cloned().collect(),
        ma: vec![0.0; q],
    };
    if q == 0 {
        return (ar_only, false);
    }
    // innovations come from a longer AR so that they approximate white noise
    let (bl, _) = regress_lags(&gram, &long);
    let mut e = vec![0.0; n];
    let out = &mut e[l_max..n];
    for (v, yt) in out.iter_mut().zip(&y[l_max..n]) {
        *v = yt - bl[0];
    }
    for (j, &l) in long.iter().enumerate() {
        let c = bl[1 + j];
        for (v, yl) in out.iter_mut().zip(&y[l_max - l..n - l]) {
            *v -= c * yl;
        }
    }
    for r in l_max..l_max + q {
        gram.remove_row(y, r);
    }
    let (b2, rank2) = regress_arma(&gram, y, &e, lags, q, (l_max + q)..n);
    let model = DimModel {
        intercept: b2[0],
        ar: b2.iter().skip(1).take(p).cloned().collect(),
        ma: b2.iter().skip(1 + p).cloned().collect(),
    };
    let usable = rank2 == rank1 + q && model.ma.iter().all(|c| c.is_finite()) && ma_invertible(&model.ma) && {
        let r = log_spectral_radius(&model.ar, lags);
        r <= max_log_growth(cfg) || r <= log_spectral_radius(&ar_only.ar, lags)
    };
    if usable {
        (model, false)
    } else {
        (ar_only, true)
    }
}

/// Fits one model per pose dimension on `window`, oldest sample first.
pub fn fit(window: &[Pose], cfg: &ArmaConfig) -> Result<ArmaModel> {
    cfg.validate()?;
    let need = cfg.min_window();
    if window.len() < need {
        return Err(PredictorError::InsufficientData {
            have: window.len(),
            need,
        });
    }
    let reference = window[0].orientation;
    let rows = align_rows(window, &reference);
    let last = rows[rows.len() - 1];
    let mut dims = Vec::with_capacity(7);
    let mut fallback = false;
    let mut y = vec![0.0; rows.len()];
    for d in 0..7 {
        for (yi, r) in y.iter_mut().zip(&rows) {
            *yi = r[d] - last[d];
        }
        let (m, fb) = fit_dim(&y, cfg);
        fallback |= fb;
        dims.push(m);
    }
    if fallback {
        log::debug!("ARMA fit fell back to AR-only in at least one dimension");
    }
    Ok(ArmaModel {
        config: cfg.clone(),
        dims,
        reference,
        ma_fallback: fallback,
        center: last,
    })
}

impl ArmaModel {
    /// Samples of the newest history that `forecast` reads.
    pub fn tail_len(&self) -> usize {
        self.config.max_lag() + self.config.ma_order + INNOVATION_WARMUP
    }

    fn check_horizon(&self, h: u64) -> Result<()> {
        if h > self.config.max_horizon {
            return Err(PredictorError::HorizonBound {
                h,
                max: self.config.max_horizon,
            });
        }
        Ok(())
    }

    /// Runs the forecast recursion `steps` samples ahead and returns the
    /// aligned 7-vector at every requested step (all must be ≤ `steps`).
    fn forecast_steps(&self, window: &[Pose], reads: &[u64]) -> Result<Vec<[f64; 7]>> {
        let l_max = self.config.max_lag();
        let q = self.config.ma_order;
        if window.len() < l_max + q + 1 {
            return Err(PredictorError::InsufficientData {
                have: window.len(),
                need: l_max + q + 1,
            });
        }
        let start = window.len().saturating_sub(self.tail_len());
        let rows = align_rows(&window[start..], &self.reference);
        let n = rows.len();
        let last = rows[n - 1];
        let horizon = reads.iter().copied().max().unwrap_or(0) as usize;
        let mut out = vec![last; reads.len()];
        if horizon == 0 {
            return Ok(out);
        }
        let mut y = vec![0.0; n + horizon];
        let mut e = vec![0.0; n + horizon];
        for (d, m) in self.dims.iter().enumerate() {
            for (yi, r) in y.iter_mut().zip(&rows) {
                *yi = r[d] - self.center[d];
            }
            let predict = |y: &[f64], e: &[f64], t: usize| {
                let mut v = m.intercept;
                for (phi, &l) in m.ar.iter().zip(&self.config.lags) {
                    v += phi * y[t - l];
                }
                for (k, theta) in m.ma.iter().enumerate() {
                    v += theta * e[t - k - 1];
                }
                v
            };
            // in-sample innovations; future innovations stay zero
            for t in 0..n {
                e[t] = if t >= l_max + q { y[t] - predict(&y, &e, t) } else { 0.0 };
            }
            for t in n..n + horizon {
                e[t] = 0.0;
                y[t] = predict(&y, &e, t);
            }
            for (o, &h) in out.iter_mut().zip(reads) {
                if h > 0 {
                    o[d] = y[n - 1 + h as usize] + self.center[d];
                }
            }
        }
        Ok(out)
    }

    fn to_pose(&self, v: [f64; 7], latest: &Pose) -> Pose {
        let position = [v[0], v[1], v[2]];
        let orientation = canonicalize_quaternion([v[3], v[4], v[5], v[6]]);
        match orientation {
            Ok(o) if position.iter().all(|c| c.is_finite()) => Pose {
                position,
                orientation: o,
            },
            _ => {
                log::warn!("forecast diverged, holding the latest sample");
                *latest
            }
        }
    }

    /// Pose `h` samples after the newest element of `window`.
    pub fn forecast(&self, window: &[Pose], h: u64) -> Result<Pose> {
        self.check_horizon(h)?;
        let latest = *window.last().ok_or(ModelError::EmptyWindow)?;
        if h == 0 {
            return Ok(latest);
        }
        let v = self.forecast_steps(window, &[h])?;
        Ok(self.to_pose(v[0], &latest))
    }

    /// Forecasts at two horizons from a single recursion.
    pub fn forecast_pair(&self, window: &[Pose], hc: u64, hr: u64) -> Result<(Pose, Pose)> {
        self.check_horizon(hc)?;
        self.check_horizon(hr)?;
        let latest = *window.last().ok_or(ModelError::EmptyWindow)?;
        if hc == 0 && hr == 0 {
            return Ok((latest, latest));
        }
        let v = self.forecast_steps(window, &[hc, hr])?;
        let pc = if hc == 0 { latest } else { self.to_pose(v[0], &latest) };
        let pr = if hr == 0 { latest } else { self.to_pose(v[1], &latest) };
        Ok((pc, pr))
    }
}

/// Incremental forecaster over one fitted model.
///
/// Samples are pushed as they arrive and the innovations are carried
/// forward, so a forecast only runs the horizon recursion. Data are centered
/// at the fit window's newest sample, which makes the recursion exactly the
/// fitted model.
#[derive(Debug, Clone)]
pub struct ArmaStream {
    model: ArmaModel,
    // coefficients transposed to one 7-vector per term
    intercept: [f64; 7],
    ar: Vec<[f64; 7]>,
    ma: Vec<[f64; 7]>,
    y: Vec<[f64; 7]>,
    e: Vec<[f64; 7]>,
    pushed: usize,
    latest: Option<Pose>,
    scratch_y: Vec<[f64; 7]>,
    scratch_e: Vec<[f64; 7]>,
}

fn transpose(dims: &[DimModel], f: impl Fn(&DimModel) -> &[f64], len: usize) -> Vec<[f64; 7]> {
    (0..len).map(|j| std::array::from_fn(|d| f(&dims[d])[j])).collect()
}

impl ArmaStream {
    pub fn new(model: ArmaModel) -> Self {
        let (p, q) = (model.config.lags.len(), model.config.ma_order);
        Self {
            intercept: std::array::from_fn(|d| model.dims[d].intercept),
            ar: transpose(&model.dims, |m| &m.ar, p),
            ma: transpose(&model.dims, |m| &m.ma, q),
            model,
            y: Vec::new(),
            e: Vec::new(),
            pushed: 0,
            latest: None,
            scratch_y: Vec::new(),
            scratch_e: Vec::new(),
        }
    }

    pub fn model(&self) -> &ArmaModel {
        &self.model
    }

    /// Samples pushed so far.
    pub fn len(&self) -> usize {
        self.pushed
    }

    pub fn is_empty(&self) -> bool {
        self.pushed == 0
    }

    pub fn push(&mut self, pose: &Pose) {
        let cfg = &self.model.config;
        let l_max = cfg.max_lag();
        let q = cfg.ma_order;
        let mut v = align_rows(std::slice::from_ref(pose), &self.model.reference)[0];
        for (c, m) in v.iter_mut().zip(&self.model.center) {
            *c -= m;
        }
        let t = self.y.len();
        let mut e = [0.0; 7];
        if self.pushed >= l_max + q {
            let p = self.predict(&self.y, &self.e, t, t);
            for d in 0..7 {
                e[d] = v[d] - p[d];
            }
        }
        self.y.push(v);
        self.e.push(e);
        self.pushed += 1;
        self.latest = Some(*pose);
        // keep the buffers bounded; the recursion only looks back l_max
        let keep = l_max.max(q) + 1;
        if self.y.len() > 4 * keep.max(256) {
            let cut = self.y.len() - keep;
            self.y.drain(..cut);
            self.e.drain(..cut);
        }
    }

    pub fn extend<'a>(&mut self, poses: impl IntoIterator<Item = &'a Pose>) {
        for p in poses {
            self.push(p);
        }
    }

    /// `(p̂_c at +hc, p̂_r at +hr)` samples after the newest pushed sample.
    pub fn forecast_pair(&mut self, hc: u64, hr: u64) -> Result<(Pose, Pose)> {
        self.model.check_horizon(hc)?;
        self.model.check_horizon(hr)?;
        let latest = self.latest.ok_or(ModelError::EmptyWindow)?;
        let l_max = self.model.config.max_lag();
        let q = self.model.config.ma_order;
        if hc == 0 && hr == 0 {
            return Ok((latest, latest));
        }
        if self.pushed < l_max + q + 1 {
            return Err(PredictorError::InsufficientData {
                have: self.pushed,
                need: l_max + q + 1,
            });
        }
        let horizon = hc.max(hr) as usize;
        let n = self.y.len();
        // future innovations are zero, so only the last q are carried
        let mut y = std::mem::take(&mut self.scratch_y);
        y.clear();
        y.extend_from_slice(&self.y[n - l_max..]);
        let mut e = std::mem::take(&mut self.scratch_e);
        e.clear();
        e.extend_from_slice(&self.e[n - q..]);
        e.resize(q + horizon, [0.0; 7]);
        for j in 0..horizon {
            let v = self.predict(&y, &e, l_max + j, q + j);
            y.push(v);
        }
        let read = |h: u64| -> [f64; 7] {
            let r = &y[l_max - 1 + h as usize];
            std::array::from_fn(|d| r[d] + self.model.center[d])
        };
        let pc = if hc == 0 {
            latest
        } else {
            self.model.to_pose(read(hc), &latest)
        };
        let pr = if hr == 0 {
            latest
        } else {
            self.model.to_pose(read(hr), &latest)
        };
        self.scratch_y = y;
        self.scratch_e = e;
        Ok((pc, pr))
    }

    /// One-step prediction of `y[ty]`, with `e[te]` the matching innovation
    /// slot.
    #[inline]
    fn predict(&self, y: &[[f64; 7]], e: &[[f64; 7]], ty: usize, te: usize) -> [f64; 7] {
        let mut v = self.intercept;
        for (phi, &l) in self.ar.iter().zip(&self.model.config.lags) {
            let row = &y[ty - l];
            for d in 0..7 {
                v[d] += phi[d] * row[d];
            }
        }
        for (k, theta) in self.ma.iter().enumerate() {
            let row = &e[te - k - 1];
            for d in 0..7 {
                v[d] += theta[d] * row[d];
            }
        }
        v
    }
}

/// Fits on `window` and forecasts `h` samples ahead.
pub fn forecast(window: &[Pose], cfg: &ArmaConfig, h: u64) -> Result<Pose> {
    if h == 0 {
        return window.last().copied().ok_or_else(|| ModelError::EmptyWindow.into());
    }
    fit(window, cfg)?.forecast(window, h)
}

/// One fit, two reads: `(p̂_c at +hc, p̂_r at +hr)`.
pub fn forecast_dual(window: &[Pose], cfg: &ArmaConfig, hc: u64, hr: u64) -> Result<(Pose, Pose)> {
    let model = fit(window, cfg)?;
    model.forecast_pair(window, hc, hr)
}

/// Same as [`forecast`] with the moving-average part removed.
pub fn forecast_ar_baseline(window: &[Pose], cfg: &ArmaConfig, h: u64) -> Result<Pose> {
    forecast(window, &cfg.ar_only(), h)
}
