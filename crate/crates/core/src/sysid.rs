//! Polynomial identification of the commanded-to-executed velocity map.
//!
//! Each executed body velocity component is a third-order polynomial of the
//! commanded components with no constant term:
//!
//! ```text
//! v_d = sum over 0 < i+j+l <= 3 of c[d][ijl] * a_x^i * a_y^j * a_theta^l
//! ```
//!
//! The 19 monomials are stored in graded order: all degree-1 terms, then
//! degree 2, then degree 3, and within a degree the exponent triples
//! `(i, j, l)` sorted descending lexicographically. [`MONOMIALS`] is the single
//! source of that ordering for fitting, prediction and the model file.

use std::io::Read;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_MONOMIALS: usize = 19;
pub const POLY_ORDER: u32 = 3;

/// Exponents `(i, j, l)` of `a_x^i a_y^j a_theta^l`, in storage order.
pub const MONOMIALS: [[u8; 3]; N_MONOMIALS] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [2, 0, 0],
    [1, 1, 0],
    [1, 0, 1],
    [0, 2, 0],
    [0, 1, 1],
    [0, 0, 2],
    [3, 0, 0],
    [2, 1, 0],
    [2, 0, 1],
    [1, 2, 0],
    [1, 1, 1],
    [1, 0, 2],
    [0, 3, 0],
    [0, 2, 1],
    [0, 1, 2],
    [0, 0, 3],
];

/// Body-velocity command `(a_x, a_y, a_theta)` in m/s, m/s, rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub a_x: f64,
    pub a_y: f64,
    pub a_theta: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        a_x: 0.0,
        a_y: 0.0,
        a_theta: 0.0,
    };

    pub fn new(a_x: f64, a_y: f64, a_theta: f64) -> Self {
        Self { a_x, a_y, a_theta }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a_x, self.a_y, self.a_theta]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-axis closed intervals for commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRanges {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

/// Commandable ranges of the robot: forward is faster than backward.
pub const ACTION_RANGES: ActionRanges = ActionRanges {
    lo: [-0.8, -0.7, -1.1],
    hi: [1.1, 0.7, 1.1],
};

impl ActionRanges {
    pub fn contains(&self, a: &Action) -> bool {
        a.to_array()
            .iter()
            .enumerate()
            .all(|(d, v)| *v >= self.lo[d] && *v <= self.hi[d])
    }

    pub fn clamp(&self, a: &Action) -> Action {
        let v = a.to_array();
        Action::from_array(std::array::from_fn(|d| v[d].clamp(self.lo[d], self.hi[d])))
    }

    /// Ranges further limited to `[-cap, cap]` on every axis.
    pub fn capped(&self, cap: f64) -> ActionRanges {
        ActionRanges {
            lo: self.lo.map(|l| l.max(-cap)),
            hi: self.hi.map(|h| h.min(cap)),
        }
    }

    pub fn midpoint(&self) -> [f64; 3] {
        std::array::from_fn(|d| 0.5 * (self.lo[d] + self.hi[d]))
    }

    pub fn half_width(&self) -> [f64; 3] {
        std::array::from_fn(|d| 0.5 * (self.hi[d] - self.lo[d]))
    }
}

/// Executed body velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyVelocity {
    pub v_x: f64,
    pub v_y: f64,
    pub v_theta: f64,
}

impl BodyVelocity {
    pub fn from_array(v: [f64; 3]) -> Self {
        Self {
            v_x: v[0],
            v_y: v[1],
            v_theta: v[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.v_x, self.v_y, self.v_theta]
    }

    pub fn planar_speed(&self) -> f64 {
        self.v_x.hypot(self.v_y)
    }
}

/// All 19 monomials of `a` in storage order; no constant term.
pub fn expand_features(a: &Action) -> Result<[f64; N_MONOMIALS]> {
    if !a.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite action {a:?}")));
    }
    Ok(features_unchecked(a))
}

fn features_unchecked(a: &Action) -> [f64; N_MONOMIALS] {
    let pows = |v: f64| [1.0, v, v * v, v * v * v];
    let (px, py, pt) = (pows(a.a_x), pows(a.a_y), pows(a.a_theta));
    MONOMIALS.map(|[i, j, l]| px[i as usize] * py[j as usize] * pt[l as usize])
}

/// Coefficients of the velocity polynomial, one row per output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub coeffs: [[f64; N_MONOMIALS]; 3],
}

impl VelocityModel {
    pub fn zeros() -> Self {
        Self {
            coeffs: [[0.0; N_MONOMIALS]; 3],
        }
    }

    /// `v = a`: only the linear self-terms are one.
    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for d in 0..3 {
            m.coeffs[d][d] = 1.0;
        }
        m
    }

    /// Ground-truth model used for synthetic identification data: mild
    /// cross-coupling, saturation at the range ends, and a forward/backward
    /// asymmetry in `v_x`.
    pub fn reference_asymmetric() -> Self {
        let mut m = Self::zeros();
        let idx = |e: [u8; 3]| MONOMIALS.iter().position(|m| *m == e).unwrap();
        // v_x: forward faster than backward.
        m.coeffs[0][idx([1, 0, 0])] = 0.92;
        m.coeffs[0][idx([2, 0, 0])] = 0.07;
        m.coeffs[0][idx([3, 0, 0])] = -0.04;
        m.coeffs[0][idx([1, 0, 2])] = -0.05;
        m.coeffs[0][idx([0, 2, 0])] = -0.02;
        // v_y: lateral is the slowest direction.
        m.coeffs[1][idx([0, 1, 0])] = 0.88;
        m.coeffs[1][idx([0, 3, 0])] = -0.06;
        m.coeffs[1][idx([1, 1, 0])] = -0.03;
        m.coeffs[1][idx([0, 0, 1])] = 0.01;
        // v_theta
        m.coeffs[2][idx([0, 0, 1])] = 0.95;
        m.coeffs[2][idx([0, 0, 3])] = -0.05;
        m.coeffs[2][idx([1, 0, 1])] = -0.02;
        m.coeffs[2][idx([0, 1, 0])] = -0.01;
        m
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|c| c.is_finite())
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &VelocityModel, beta: f64) -> VelocityModel {
        let mut out = Self::zeros();
        for d in 0..3 {
            for k in 0..N_MONOMIALS {
                out.coeffs[d][k] = alpha * self.coeffs[d][k] + beta * other.coeffs[d][k];
            }
        }
        out
    }

    pub fn predict(&self, a: &Action) -> Result<BodyVelocity> {
        let phi = expand_features(a)?;
        Ok(self.predict_features(&phi))
    }

    /// Prediction without the finiteness check, for the simulator's inner loop.
    pub(crate) fn predict_unchecked(&self, a: &Action) -> BodyVelocity {
        self.predict_features(&features_unchecked(a))
    }

    fn predict_features(&self, phi: &[f64; N_MONOMIALS]) -> BodyVelocity {
        BodyVelocity::from_array(std::array::from_fn(|d| {
            self.coeffs[d].iter().zip(phi).map(|(c, f)| c * f).sum()
        }))
    }

    pub fn to_json_string(&self) -> String {
        let wire = ModelFile {
            order: POLY_ORDER,
            monomials: MONOMIALS.map(|m| m.map(u32::from)).to_vec(),
            coeffs: self.coeffs.iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_string_pretty(&wire).expect("model serialization is infallible")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let wire: ModelFile = serde_json::from_str(s)?;
        if wire.order != POLY_ORDER {
            return Err(Error::InvalidInput(format!(
                "model order {} unsupported, expected {POLY_ORDER}",
                wire.order
            )));
        }
        let expected: Vec<[u32; 3]> = MONOMIALS.iter().map(|m| m.map(u32::from)).collect();
        if wire.monomials != expected {
            return Err(Error::InvalidInput(
                "monomial list does not match the graded (i, j, l)-descending ordering".into(),
            ));
        }
        if wire.coeffs.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "expected 3 coefficient rows, found {}",
                wire.coeffs.len()
            )));
        }
        let mut model = Self::zeros();
        for (d, row) in wire.coeffs.iter().enumerate() {
            if row.len() != N_MONOMIALS {
                return Err(Error::InvalidInput(format!(
                    "coefficient row {d} has {} entries, expected {N_MONOMIALS}",
                    row.len()
                )));
            }
            model.coeffs[d].copy_from_slice(row);
        }
        if !model.is_finite() {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    order: u32,
    monomials: Vec<[u32; 3]>,
    coeffs: Vec<Vec<f64>>,
}

/// Commanded/executed velocity pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentificationDataset {
    pub samples: Vec<(Action, BodyVelocity)>,
}

pub const DATASET_COLUMNS: [&str; 6] = ["a_x", "a_y", "a_theta", "v_x", "v_y", "v_theta"];

impl IdentificationDataset {
    /// Parses the `a_x,a_y,a_theta,v_x,v_y,v_theta` CSV format. Columns are
    /// located by header name, so their order is free.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut cols = [0usize; 6];
        for (k, name) in DATASET_COLUMNS.iter().enumerate() {
            cols[k] = headers.iter().position(|h| h == *name).ok_or_else(|| {
                Error::InvalidInput(format!("dataset CSV is missing column `{name}`"))
            })?;
        }
        let mut samples = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let mut vals = [0.0; 6];
            for (k, &c) in cols.iter().enumerate() {
                let field = record.get(c).ok_or_else(|| {
                    Error::InvalidInput(format!("row {}: missing `{}`", row + 1, DATASET_COLUMNS[k]))
                })?;
                vals[k] = field.parse::<f64>().map_err(|e| {
                    Error::InvalidInput(format!(
                        "row {}: `{}` = {field:?}: {e}",
                        row + 1,
                        DATASET_COLUMNS[k]
                    ))
                })?;
                if !vals[k].is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "row {}: `{}` is not finite",
                        row + 1,
                        DATASET_COLUMNS[k]
                    )));
                }
            }
            samples.push((
                Action::new(vals[0], vals[1], vals[2]),
                BodyVelocity::from_array([vals[3], vals[4], vals[5]]),
            ));
        }
        Ok(Self { samples })
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        Self::from_csv_reader(s.as_bytes())
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(DATASET_COLUMNS).expect("in-memory write");
        for (a, v) in &self.samples {
            let row = [a.a_x, a.a_y, a.a_theta, v.v_x, v.v_y, v.v_theta].map(|x| x.to_string());
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

/// Fit summary: per-dimension root-mean-square residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResiduals {
    pub rms: [f64; 3],
}

/// Per-dimension least squares via Householder QR of the feature matrix.
pub fn fit(data: &IdentificationDataset) -> Result<VelocityModel> {
    let n = data.samples.len();
    if n < N_MONOMIALS {
        return Err(Error::DegenerateData(format!(
            "{n} samples cannot determine {N_MONOMIALS} coefficients per dimension"
        )));
    }
    let mut a = Array2::<f64>::zeros((n, N_MONOMIALS));
    let mut b = Array2::<f64>::zeros((n, 3));
    for (r, (cmd, vel)) in data.samples.iter().enumerate() {
        let phi = expand_features(cmd)?;
        if !vel.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {r}: non-finite velocity")));
        }
        for (k, f) in phi.iter().enumerate() {
            a[[r, k]] = *f;
        }
        for (d, v) in vel.to_array().iter().enumerate() {
            b[[r, d]] = *v;
        }
    }
    let x = householder_least_squares(a, b)?;
    let mut model = VelocityModel::zeros();
    for d in 0..3 {
        for k in 0..N_MONOMIALS {
            model.coeffs[d][k] = x[[k, d]];
        }
    }
    Ok(model)
}

/// Solves `min ||A X - B||` column by column. `A` must have full column rank.
fn householder_least_squares(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>> {
    let (m, n) = a.dim();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    let rank_tol = 1e-10 * scale * (m as f64).sqrt();
    for k in 0..n {
        let norm = (k..m).map(|i| a[[i, k]] * a[[i, k]]).sum::<f64>().sqrt();
        if norm <= rank_tol {
            let [i, j, l] = MONOMIALS[k];
            return Err(Error::DegenerateData(format!(
                "feature matrix is rank deficient: column {k} (a_x^{i} a_y^{j} a_theta^{l}) \
                 is linearly dependent on earlier monomials over this grid"
            )));
        }
        let alpha = if a[[k, k]] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let dot: f64 = (k..m).map(|i| v[i - k] * a[[i, j]]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    a[[i, j]] -= f * v[i - k];
                }
            }
            for j in 0..b.ncols() {
                let dot: f64 = (k..m).map(|i| v[i - k] * b[[i, j]]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    b[[i, j]] -= f * v[i - k];
                }
            }
        }
    }
    let mut x = Array2::<f64>::zeros((n, b.ncols()));
    for j in 0..b.ncols() {
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|c| a[[k, c]] * x[[c, j]]).sum();
            x[[k, j]] = (b[[k, j]] - s) / a[[k, k]];
        }
    }
    Ok(x)
}

/// Root-mean-square residual of `model` on `data`, per output dimension.
pub fn residuals(model: &VelocityModel, data: &IdentificationDataset) -> Result<FitResiduals> {
    if data.samples.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut sse = [0.0; 3];
    for (a, v) in &data.samples {
        let p = model.predict(a)?.to_array();
        for d in 0..3 {
            let r = v.to_array()[d] - p[d];
            sse[d] += r * r;
        }
    }
    let n = data.samples.len() as f64;
    Ok(FitResiduals {
        rms: sse.map(|s| (s / n).sqrt()),
    })
}

/// Cartesian grid of linearly spaced commands, endpoints included. The first
/// axis varies slowest.
pub fn make_grid(ranges: &ActionRanges, counts: [usize; 3]) -> Result<Vec<Action>> {
    for d in 0..3 {
        let (lo, hi) = (ranges.lo[d], ranges.hi[d]);
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidInput(format!(
                "axis {d}: range [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        if counts[d] < 2 {
            return Err(Error::InvalidInput(format!(
                "axis {d}: count {} must be at least 2",
                counts[d]
            )));
        }
    }
    let axis = |d: usize| -> Vec<f64> {
        let (lo, hi, n) = (ranges.lo[d], ranges.hi[d], counts[d]);
        (0..n)
            .map(|k| {
                if k + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                }
            })
            .collect()
    };
    let (xs, ys, ts) = (axis(0), axis(1), axis(2));
    let mut grid = Vec::with_capacity(xs.len() * ys.len() * ts.len());
    for &x in &xs {
        for &y in &ys {
            for &t in &ts {
                grid.push(Action::new(x, y, t));
            }
        }
    }
    Ok(grid)
}

pub const DEFAULT_GRID_COUNTS: [usize; 3] = [9, 9, 9];

/// Evaluates `truth` on every grid point `repeats` times, adding i.i.d.
/// Gaussian noise of `noise_sigma` to each executed component.
pub fn synthesize_dataset(
    truth: &VelocityModel,
    grid: &[Action],
    noise_sigma: f64,
    repeats: usize,
    seed: u64,
) -> Result<IdentificationDataset> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let mut samples = Vec::with_capacity(grid.len() * repeats);
    for a in grid {
        let v = truth.predict(a)?.to_array();
        for _ in 0..repeats {
            let noisy = if noise_sigma > 0.0 {
                v.map(|c| c + noise.sample(&mut rng))
            } else {
                v
            };
            samples.push((*a, BodyVelocity::from_array(noisy)));
        }
    }
    Ok(IdentificationDataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_model(seed: u64) -> VelocityModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = VelocityModel::zeros();
        for row in m.coeffs.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.random_range(-1.0..1.0);
            }
        }
        m
    }

    // Direct evaluation of the polynomial from its exponent definition, kept
    // separate from the feature-expansion path.
    fn eval_direct(m: &VelocityModel, a: &Action) -> [f64; 3] {
        let mut out = [0.0; 3];
        for d in 0..3 {
            for i in 0..=3i32 {
                for j in 0..=3i32 {
                    for l in 0..=3i32 {
                        let deg = i + j + l;
                        if deg == 0 || deg > 3 {
                            continue;
                        }
                        let k = MONOMIALS
                            .iter()
                            .position(|e| *e == [i as u8, j as u8, l as u8])
                            .unwrap();
                        out[d] += m.coeffs[d][k]
                            * a.a_x.powi(i)
                            * a.a_y.powi(j)
                            * a.a_theta.powi(l);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn monomial_table_is_graded_and_complete() {
        assert_eq!(MONOMIALS.len(), 19);
        let degrees: Vec<u8> = MONOMIALS.iter().map(|m| m.iter().sum()).collect();
        assert!(degrees.windows(2).all(|w| w[0] <= w[1]));
        for w in MONOMIALS.windows(2) {
            let (d0, d1): (u8, u8) = (w[0].iter().sum(), w[1].iter().sum());
            if d0 == d1 {
                assert!(w[0] > w[1], "{:?} should precede {:?}", w[0], w[1]);
            }
        }
        let mut seen = std::collections::HashSet::new();
        assert!(MONOMIALS.iter().all(|m| seen.insert(*m)));
    }

    #[test]
    fn features_of_zero_and_one() {
        assert_eq!(expand_features(&Action::ZERO).unwrap(), [0.0; 19]);
        assert_eq!(expand_features(&Action::new(1.0, 1.0, 1.0)).unwrap(), [1.0; 19]);
    }

    #[test]
    fn features_reject_non_finite() {
        let err = expand_features(&Action::new(f64::NAN, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(expand_features(&Action::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn predict_zero_action_is_zero() {
        let m = random_model(3);
        assert_eq!(m.predict(&Action::ZERO).unwrap(), BodyVelocity::default());
    }

    #[test]
    fn predict_single_monomial() {
        let mut m = VelocityModel::zeros();
        m.coeffs[0][0] = 1.0;
        let v = m.predict(&Action::new(0.5, 0.2, -0.3)).unwrap();
        assert_eq!(v, BodyVelocity::from_array([0.5, 0.0, 0.0]));
    }

    #[test]
    fn noiseless_recovery_on_table_grid() {
        let truth = random_model(11);
        let grid = make_grid(&ACTION_RANGES, [9, 9, 9]).unwrap();
        let data = synthesize_dataset(&truth, &grid, 0.0, 1, 0).unwrap();
        let fitted = fit(&data).unwrap();
        for d in 0..3 {
            for k in 0..N_MONOMIALS {
                let (t, f) = (truth.coeffs[d][k], fitted.coeffs[d][k]);
                assert!((t - f).abs() <= 1e-8 * t.abs().max(1.0), "c[{d}][{k}]: {t} vs {f}");
            }
        }
        // Held-out off-grid point against the ground-truth polynomial.
        let a = Action::new(0.123, -0.456, 0.789);
        let direct = eval_direct(&truth, &a);
        let pred = fitted.predict(&a).unwrap().to_array();
        for d in 0..3 {
            assert!((direct[d] - pred[d]).abs() <= 1e-8 * direct[d].abs().max(1.0));
        }
    }

    #[test]
    fn noisy_fit_residual_bounded() {
        let truth = random_model(12);
        let grid = make_grid(&ACTION_RANGES, [9, 9, 9]).unwrap();
        let sigma = 0.01;
        let data = synthesize_dataset(&truth, &grid, sigma, 1, 5).unwrap();
        let fitted = fit(&data).unwrap();
        let res = residuals(&fitted, &data).unwrap();
        for r in res.rms {
            assert!(r <= 2.0 * sigma, "rms {r}");
        }
    }

    #[test]
    fn identity_target_recovers_linear_self_terms() {
        let grid = make_grid(&ACTION_RANGES, [5, 5, 5]).unwrap();
        let data = IdentificationDataset {
            samples: grid
                .iter()
                .map(|a| (*a, BodyVelocity::from_array(a.to_array())))
                .collect(),
        };
        let m = fit(&data).unwrap();
        for d in 0..3 {
            for k in 0..N_MONOMIALS {
                let want = if k == d { 1.0 } else { 0.0 };
                assert!((m.coeffs[d][k] - want).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn too_few_samples_is_degenerate() {
        let grid = make_grid(&ACTION_RANGES, [2, 2, 2]).unwrap();
        let data = synthesize_dataset(&VelocityModel::identity(), &grid, 0.0, 1, 0).unwrap();
        assert!(matches!(fit(&data), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn rank_deficiency_names_the_monomial() {
        // a_theta fixed at zero: every monomial involving a_theta vanishes.
        let mut samples = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let a = Action::new(-0.8 + 0.3 * i as f64, -0.7 + 0.25 * j as f64, 0.0);
                samples.push((a, BodyVelocity::from_array(a.to_array())));
            }
        }
        let err = fit(&IdentificationDataset { samples }).unwrap_err();
        match err {
            Error::DegenerateData(msg) => assert!(msg.contains("a_theta^1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grid_shapes() {
        let g = make_grid(&ACTION_RANGES, [5, 5, 5]).unwrap();
        assert_eq!(g.len(), 125);
        assert!(g.contains(&Action::new(-0.8, -0.7, -1.1)));
        assert!(g.contains(&Action::new(1.1, 0.7, 1.1)));
        let corners = make_grid(&ACTION_RANGES, [2, 2, 2]).unwrap();
        assert_eq!(corners.len(), 8);
        for a in &corners {
            for d in 0..3 {
                let v = a.to_array()[d];
                assert!(v == ACTION_RANGES.lo[d] || v == ACTION_RANGES.hi[d]);
            }
        }
    }

    #[test]
    fn grid_rejects_degenerate_ranges() {
        let mut r = ACTION_RANGES;
        r.lo[1] = 0.3;
        r.hi[1] = 0.3;
        assert!(make_grid(&r, [2, 2, 2]).is_err());
        assert!(make_grid(&ACTION_RANGES, [2, 1, 2]).is_err());
    }

    #[test]
    fn model_json_roundtrip_and_validation() {
        let m = VelocityModel::reference_asymmetric();
        let s = m.to_json_string();
        assert_eq!(VelocityModel::from_json_str(&s).unwrap(), m);
        let bad = s.replacen("\"order\": 3", "\"order\": 2", 1);
        assert!(VelocityModel::from_json_str(&bad).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["monomials"][0] = serde_json::json!([0, 1, 0]);
        v["monomials"][1] = serde_json::json!([1, 0, 0]);
        assert!(VelocityModel::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn csv_roundtrip_and_missing_column() {
        let grid = make_grid(&ACTION_RANGES, [3, 3, 3]).unwrap();
        let data = synthesize_dataset(&VelocityModel::reference_asymmetric(), &grid, 0.01, 1, 1)
            .unwrap();
        let parsed = IdentificationDataset::from_csv_str(&data.to_csv_string()).unwrap();
        assert_eq!(parsed, data);
        let err = IdentificationDataset::from_csv_str("a_x,a_y,a_theta,v_x,v_theta\n0,0,0,0,0\n")
            .unwrap_err();
        assert!(err.to_string().contains("v_y"), "{err}");
    }

    #[test]
    fn reference_model_is_asymmetric() {
        let m = VelocityModel::reference_asymmetric();
        let fwd = m.predict(&Action::new(0.8, 0.0, 0.0)).unwrap().v_x;
        let back = m.predict(&Action::new(-0.8, 0.0, 0.0)).unwrap().v_x;
        assert!(fwd > -back);
    }

    fn action_strategy() -> impl Strategy<Value = Action> {
        (-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5).prop_map(|(x, y, t)| Action::new(x, y, t))
    }

    proptest! {
        #[test]
        fn features_are_degree_graded(a in action_strategy(), t in -2.0f64..2.0) {
            let base = expand_features(&a).unwrap();
            let scaled = expand_features(&Action::new(a.a_x * t, a.a_y * t, a.a_theta * t)).unwrap();
            for (k, m) in MONOMIALS.iter().enumerate() {
                let deg = m.iter().map(|e| *e as i32).sum::<i32>();
                let want = base[k] * t.powi(deg);
                prop_assert!((scaled[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        #[test]
        fn predict_is_linear_in_coefficients(
            s1 in 0u64..1000, s2 in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
            a in action_strategy()
        ) {
            let (c1, c2) = (random_model(s1), random_model(s2));
            let lhs = c1.combine(alpha, &c2, beta).predict(&a).unwrap().to_array();
            let p1 = c1.predict(&a).unwrap().to_array();
            let p2 = c2.predict(&a).unwrap().to_array();
            for d in 0..3 {
                let rhs = alpha * p1[d] + beta * p2[d];
                prop_assert!((lhs[d] - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
            }
        }

        #[test]
        fn fit_roundtrip_recovers_truth(seed in 0u64..10_000, n in 4usize..7) {
            let truth = random_model(seed);
            let grid = make_grid(&ACTION_RANGES, [n, n, n]).unwrap();
            let data = synthesize_dataset(&truth, &grid, 0.0, 1, 0).unwrap();
            let fitted = fit(&data).unwrap();
            for d in 0..3 {
                for k in 0..N_MONOMIALS {
                    let (t, f) = (truth.coeffs[d][k], fitted.coeffs[d][k]);
                    prop_assert!((t - f).abs() <= 1e-6 * t.abs().max(1e-3));
                }
            }
        }

        #[test]
        fn fit_never_worse_than_zero_model(seed in 0u64..10_000, sigma in 0.0f64..0.5) {
            let grid = make_grid(&ACTION_RANGES, [4, 4, 4]).unwrap();
            let data = synthesize_dataset(&random_model(seed), &grid, sigma, 1, seed).unwrap();
            let fitted = residuals(&fit(&data).unwrap(), &data).unwrap();
            let zero = residuals(&VelocityModel::zeros(), &data).unwrap();
            for d in 0..3 {
                prop_assert!(fitted.rms[d] <= zero.rms[d] + 1e-12);
            }
        }
    }
}
