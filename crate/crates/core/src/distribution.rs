//! Histogram estimate of the residual distribution and the scores and
//! losses built on it.
//!
//! The CDF is the linear interpolation of cumulative bin counts and the PDF
//! is the piecewise-constant bin density, so inside every bin the PDF is
//! the exact derivative of the CDF.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BIN_COUNT: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistributionError {
    #[error("no finite residual to build a distribution from")]
    EmptyResidualSet,
    #[error("invalid histogram parameters: {0}")]
    InvalidParameters(String),
}

/// What `total` (the CDF denominator) counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Every finite residual, so `F(tau_max) < 1` when outliers exist.
    AllFinite,
    /// Only residuals strictly below `tau_max`.
    BelowTauMax,
}

/// Integer bin counts; partial accumulators merge exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramAccumulator {
    tau_max: f64,
    counts: Vec<u64>,
    finite: u64,
}

impl HistogramAccumulator {
    pub fn new(tau_max: f64, bin_count: usize) -> Result<Self, DistributionError> {
        if !(tau_max > 0.0) || !tau_max.is_finite() {
            return Err(DistributionError::InvalidParameters(format!(
                "tau_max must be positive, got {tau_max}"
            )));
        }
        if bin_count < 2 {
            return Err(DistributionError::InvalidParameters(format!(
                "need at least 2 bins, got {bin_count}"
            )));
        }
        Ok(Self {
            tau_max,
            counts: vec![0; bin_count],
            finite: 0,
        })
    }

    #[inline]
    pub fn add(&mut self, r: f64) {
        if !r.is_finite() {
            return;
        }
        self.finite += 1;
        if r < self.tau_max {
            let b = bin_index(r, self.tau_max, self.counts.len());
            self.counts[b] += 1;
        }
    }

    pub fn merge(mut self, other: &HistogramAccumulator) -> Self {
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.finite += other.finite;
        self
    }

    pub fn finish(
        self,
        normalization: Normalization,
    ) -> Result<ResidualHistogram, DistributionError> {
        let mut cumulative = Vec::with_capacity(self.counts.len());
        let mut acc = 0u64;
        for &c in &self.counts {
            acc += c;
            cumulative.push(acc);
        }
        let total = match normalization {
            Normalization::AllFinite => self.finite,
            Normalization::BelowTauMax => acc,
        };
        if total == 0 {
            return Err(DistributionError::EmptyResidualSet);
        }
        Ok(ResidualHistogram {
            tau_max: self.tau_max,
            counts: self.counts,
            cumulative,
            total,
        })
    }
}

#[inline]
fn bin_index(r: f64, tau_max: f64, bins: usize) -> usize {
    let pos = r * bins as f64 / tau_max;
    (pos.max(0.0) as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualHistogram {
    pub tau_max: f64,
    pub counts: Vec<u64>,
    pub cumulative: Vec<u64>,
    pub total: u64,
}

impl ResidualHistogram {
    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.tau_max / self.counts.len() as f64
    }

    /// Residuals strictly below `tau_max`.
    pub fn inliers(&self) -> u64 {
        *self.cumulative.last().unwrap_or(&0)
    }

    pub fn cdf_at(&self, r: f64) -> f64 {
        if !(r > 0.0) {
            return 0.0;
        }
        let total = self.total as f64;
        if r >= self.tau_max {
            return self.inliers() as f64 / total;
        }
        let bins = self.counts.len();
        let pos = r * bins as f64 / self.tau_max;
        let b = (pos as usize).min(bins - 1);
        let before = if b == 0 { 0 } else { self.cumulative[b - 1] };
        let frac = (pos - b as f64).clamp(0.0, 1.0);
        (before as f64 + self.counts[b] as f64 * frac) / total
    }

    pub fn pdf_at(&self, r: f64) -> f64 {
        if !(r >= 0.0) || r >= self.tau_max {
            return 0.0;
        }
        let b = bin_index(r, self.tau_max, self.counts.len());
        self.counts[b] as f64 / (self.total as f64 * self.bin_width())
    }
}

pub fn build_histogram(
    residuals: &[f64],
    tau_max: f64,
    bin_count: usize,
) -> Result<ResidualHistogram, DistributionError> {
    build_histogram_with(residuals, tau_max, bin_count, Normalization::AllFinite)
}

pub fn build_histogram_with(
    residuals: &[f64],
    tau_max: f64,
    bin_count: usize,
    normalization: Normalization,
) -> Result<ResidualHistogram, DistributionError> {
    let mut acc = HistogramAccumulator::new(tau_max, bin_count)?;
    for &r in residuals {
        acc.add(r);
    }
    acc.finish(normalization)
}

/// Same result as [`build_histogram_with`], counted in parallel chunks.
pub fn build_histogram_parallel(
    residuals: &[f64],
    tau_max: f64,
    bin_count: usize,
    normalization: Normalization,
) -> Result<ResidualHistogram, DistributionError> {
    let empty = HistogramAccumulator::new(tau_max, bin_count)?;
    let acc = residuals
        .par_chunks(4096)
        .map(|chunk| {
            let mut a = empty.clone();
            for &r in chunk {
                a.add(r);
            }
            a
        })
        .reduce(|| empty.clone(), |a, b| a.merge(&b));
    acc.finish(normalization)
}

/// Number of residuals strictly below `tau`.
pub fn binary_score(residuals: &[f64], tau: f64) -> u64 {
    residuals.iter().filter(|&&r| r < tau).count() as u64
}

/// Threshold grid `tau_i = (i / T) * tau_max` for `i = 0..=T`.
pub fn threshold_grid(tau_max: f64, steps: u32) -> Vec<f64> {
    (0..=steps)
        .map(|i| i as f64 / steps as f64 * tau_max)
        .collect()
}

/// Sum of inlier counts over the threshold grid, exact.
pub fn marginalized_score(residuals: &[f64], tau_max: f64, steps: u32) -> u64 {
    let mut sorted: Vec<f64> = residuals.iter().copied().filter(|r| !r.is_nan()).collect();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    marginalized_score_sorted(&sorted, tau_max, steps)
}

/// As [`marginalized_score`] for residuals already sorted ascending.
pub fn marginalized_score_sorted(sorted: &[f64], tau_max: f64, steps: u32) -> u64 {
    if steps == 0 {
        return 0;
    }
    threshold_grid(tau_max, steps)
        .iter()
        .map(|&tau| sorted.partition_point(|&r| r < tau) as u64)
        .sum()
}

/// Sum of inlier counts over an explicit threshold list.
pub fn grid_score(residuals: &[f64], grid: &[f64]) -> u64 {
    let mut sorted: Vec<f64> = residuals.iter().copied().filter(|r| !r.is_nan()).collect();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    grid.iter()
        .map(|&tau| sorted.partition_point(|&r| r < tau) as u64)
        .sum()
}

/// Forward value and dL/dr of the surrogate loss for one residual, with the
/// histogram held fixed.
#[inline]
pub fn mba_term(h: &ResidualHistogram, r: f64) -> (f64, f64) {
    if !(r < h.tau_max) {
        return (0.0, 0.0);
    }
    let n = h.total as f64;
    (-h.cdf_at(r) / n, -h.pdf_at(r) / n)
}

/// Descent form of [`mba_term`] used by the optimizer: value
/// `-(F(tau_max) - F(r)) / |R|` and derivative `+p(r) / |R|`. Same gradient
/// magnitude and truncation, with the sign that lowers residuals, and the
/// value is continuous at `tau_max`.
#[inline]
pub fn mba_descent_term(h: &ResidualHistogram, r: f64) -> (f64, f64) {
    if !(r < h.tau_max) {
        return (0.0, 0.0);
    }
    let n = h.total as f64;
    let top = h.inliers() as f64 / n;
    (-(top - h.cdf_at(r)) / n, h.pdf_at(r) / n)
}

/// [`mba_descent_term`] with the per-bin quantities precomputed, for
/// evaluating many residuals against one histogram.
#[derive(Debug, Clone)]
pub struct DescentTable {
    tau_max: f64,
    bins_per_unit: f64,
    top: f64,
    before: Vec<f64>,
    slope: Vec<f64>,
    density: Vec<f64>,
}

impl DescentTable {
    pub fn new(h: &ResidualHistogram) -> Self {
        let n = h.total as f64;
        let nn = n * n;
        let width = h.bin_width();
        let before = (0..h.counts.len())
            .map(|b| {
                if b == 0 {
                    0.0
                } else {
                    h.cumulative[b - 1] as f64 / nn
                }
            })
            .collect();
        Self {
            tau_max: h.tau_max,
            bins_per_unit: h.counts.len() as f64 / h.tau_max,
            top: h.inliers() as f64 / nn,
            before,
            slope: h.counts.iter().map(|&c| c as f64 / nn).collect(),
            density: h.counts.iter().map(|&c| c as f64 / (nn * width)).collect(),
        }
    }

    #[inline]
    pub fn term(&self, r: f64) -> (f64, f64) {
        if !(r < self.tau_max) {
            return (0.0, 0.0);
        }
        if !(r > 0.0) {
            return (-self.top, if r == 0.0 { self.density[0] } else { 0.0 });
        }
        let pos = r * self.bins_per_unit;
        let b = (pos as usize).min(self.before.len() - 1);
        let frac = (pos - b as f64).clamp(0.0, 1.0);
        (
            self.before[b] + self.slope[b] * frac - self.top,
            self.density[b],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// `L = -(1/|R|) sum F(r_k) [r_k < tau_max]` with gradient `-(1/|R|) p(r_k)`.
pub fn mba_loss(residuals: &[f64], h: &ResidualHistogram) -> LossWithGradient {
    let mut loss = 0.0;
    let gradient = residuals
        .iter()
        .map(|&r| {
            let (l, g) = mba_term(h, r);
            loss += l;
            g
        })
        .collect();
    LossWithGradient { loss, gradient }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustKind {
    SoftL1,
    Cauchy,
    Tukey,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mba,
    SoftL1,
    Cauchy,
    Tukey,
    L2,
}

impl LossKind {
    pub fn baseline(self) -> Option<RobustKind> {
        match self {
            LossKind::Mba => None,
            LossKind::SoftL1 => Some(RobustKind::SoftL1),
            LossKind::Cauchy => Some(RobustKind::Cauchy),
            LossKind::Tukey => Some(RobustKind::Tukey),
            LossKind::L2 => Some(RobustKind::L2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mba => "mba",
            LossKind::SoftL1 => "soft_l1",
            LossKind::Cauchy => "cauchy",
            LossKind::Tukey => "tukey",
            LossKind::L2 => "l2",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "mba" => LossKind::Mba,
            "soft_l1" => LossKind::SoftL1,
            "cauchy" => LossKind::Cauchy,
            "tukey" => LossKind::Tukey,
            "l2" => LossKind::L2,
            other => return Err(format!("unknown loss kind `{other}`")),
        })
    }
}

/// Classic robust loss `rho(r)` and its derivative.
pub fn robust_loss_baseline(r: f64, kind: RobustKind, scale: f64) -> (f64, f64) {
    let s2 = scale * scale;
    let u = r / scale;
    match kind {
        RobustKind::L2 => (r * r, 2.0 * r),
        RobustKind::SoftL1 => {
            let root = (1.0 + u * u).sqrt();
            (2.0 * s2 * (root - 1.0), 2.0 * r / root)
        }
        RobustKind::Cauchy => {
            let q = 1.0 + u * u;
            (s2 * q.ln(), 2.0 * r / q)
        }
        RobustKind::Tukey => {
            if r.abs() <= scale {
                let w = 1.0 - u * u;
                (s2 / 6.0 * (1.0 - w * w * w), r * w * w)
            } else {
                (s2 / 6.0, 0.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FIVE: [f64; 5] = [1.0, 3.0, 5.0, 7.0, 19.0];

    #[test]
    fn binning_examples() {
        let h = build_histogram(&[0.0, 0.0, 0.0], 20.0, 100).unwrap();
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.total, 3);

        let h = build_histogram(&FIVE, 20.0, 100).unwrap();
        for b in [5, 15, 25, 35, 95] {
            assert_eq!(h.counts[b], 1, "bin {b}");
        }
        assert_eq!(h.counts.iter().sum::<u64>(), 5);
        assert_eq!(h.total, 5);

        let h = build_histogram(&[25.0, 30.0], 20.0, 100).unwrap();
        assert!(h.counts.iter().all(|&c| c == 0));
        assert_eq!(h.total, 2);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert_eq!(
            build_histogram(&[f64::INFINITY], 20.0, 100),
            Err(DistributionError::EmptyResidualSet)
        );
        assert_eq!(
            build_histogram(&[], 20.0, 100),
            Err(DistributionError::EmptyResidualSet)
        );
        assert!(build_histogram(&[1.0], 0.0, 100).is_err());
        assert!(build_histogram(&[1.0], 20.0, 1).is_err());
        let h = build_histogram(&[1.0, f64::INFINITY], 20.0, 100).unwrap();
        assert_eq!(h.total, 1);
    }

    #[test]
    fn cdf_and_pdf_examples() {
        let h = build_histogram(&FIVE, 20.0, 100).unwrap();
        assert!((h.cdf_at(4.0) - 0.4).abs() < 1e-15);
        assert_eq!(h.cdf_at(0.0), 0.0);
        assert_eq!(h.cdf_at(20.0), 1.0);
        assert_eq!(h.cdf_at(100.0), 1.0);
        assert!((h.pdf_at(1.05) - 1.0).abs() < 1e-12);
        assert_eq!(h.pdf_at(20.0), 0.0);
        assert_eq!(h.pdf_at(25.0), 0.0);

        let uniform: Vec<f64> = (0..100).map(|b| b as f64 * 0.2 + 0.1).collect();
        let h = build_histogram(&uniform, 20.0, 100).unwrap();
        for k in 0..200 {
            let r = k as f64 * 0.1 + 0.01;
            assert!((h.pdf_at(r) - 1.0 / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn below_tau_normalization() {
        let h =
            build_histogram_with(&[1.0, 2.0, 50.0], 20.0, 100, Normalization::BelowTauMax).unwrap();
        assert_eq!(h.total, 2);
        assert_eq!(h.cdf_at(20.0), 1.0);
        assert_eq!(
            build_histogram_with(&[50.0], 20.0, 100, Normalization::BelowTauMax),
            Err(DistributionError::EmptyResidualSet)
        );
    }

    #[test]
    fn scores() {
        assert_eq!(binary_score(&[1.0, 3.0, 5.0], 4.0), 2);
        assert_eq!(binary_score(&FIVE, 0.0), 0);
        assert_eq!(binary_score(&FIVE, 20.0), 5);
        assert_eq!(marginalized_score(&[], 20.0, 100), 0);
        assert_eq!(marginalized_score(&[0.0; 5], 20.0, 100), 500);
        // Double-sum oracle.
        let brute: u64 = threshold_grid(20.0, 100)
            .iter()
            .map(|&t| FIVE.iter().filter(|&&r| r < t).count() as u64)
            .sum();
        assert_eq!(marginalized_score(&FIVE, 20.0, 100), brute);
        // T = 1 reduces to counting at tau_max.
        assert_eq!(
            marginalized_score(&FIVE, 10.0, 1),
            binary_score(&FIVE, 10.0)
        );
    }

    #[test]
    fn mba_loss_examples() {
        let h = build_histogram(&[25.0], 20.0, 100).unwrap();
        let l = mba_loss(&[25.0], &h);
        assert_eq!(l.loss, 0.0);
        assert_eq!(l.gradient[0].to_bits(), 0.0f64.to_bits());

        let h = build_histogram(&FIVE, 20.0, 100).unwrap();
        let l = mba_loss(&FIVE, &h);
        // Oracle: interpolate the cumulative count by hand for each residual.
        let manual_cdf = |r: f64| {
            let below = FIVE
                .iter()
                .filter(|&&x| x < (r / 0.2).floor() * 0.2)
                .count() as f64;
            let in_bin = FIVE
                .iter()
                .filter(|&&x| ((x / 0.2).floor() - (r / 0.2).floor()).abs() < 0.5)
                .count() as f64;
            (below + in_bin * (r / 0.2 - (r / 0.2).floor())) / 5.0
        };
        let expected = -FIVE.iter().map(|&r| manual_cdf(r)).sum::<f64>() / 5.0;
        assert!(
            (l.loss - expected).abs() < 1e-12,
            "{} vs {expected}",
            l.loss
        );
    }

    #[test]
    fn mba_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rs: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..30.0)).collect();
        let h = build_histogram(&rs, 20.0, 100).unwrap();
        let w = h.bin_width();
        for &r in rs.iter().take(200) {
            let b = (r / w).floor();
            if r >= 20.0 || h.counts[b as usize] == 0 {
                continue;
            }
            let frac = r / w - b;
            if !(0.01..0.99).contains(&frac) {
                continue;
            }
            let hh = 1e-4;
            let fd = (mba_term(&h, r + hh).0 - mba_term(&h, r - hh).0) / (2.0 * hh);
            let g = mba_term(&h, r).1;
            assert!((fd - g).abs() <= 1e-4 * g.abs(), "{fd} vs {g}");
            let fd = (mba_descent_term(&h, r + hh).0 - mba_descent_term(&h, r - hh).0) / (2.0 * hh);
            let g = mba_descent_term(&h, r).1;
            assert!((fd - g).abs() <= 1e-4 * g.abs(), "{fd} vs {g}");
        }
    }

    #[test]
    fn descent_term_mirrors_the_surrogate() {
        let h = build_histogram(&FIVE, 20.0, 100).unwrap();
        for r in [0.5, 3.1, 7.0, 19.9] {
            let (lit, desc) = (mba_term(&h, r), mba_descent_term(&h, r));
            assert_eq!(desc.1, -lit.1);
            // Offset by the constant -F(tau_max) / |R| below the threshold.
            let top = h.inliers() as f64 / h.total as f64 / h.total as f64;
            assert!((desc.0 - (-top - lit.0)).abs() < 1e-15);
        }
        assert_eq!(mba_descent_term(&h, 20.0), (0.0, 0.0));
        // Continuous at the threshold.
        assert!(mba_descent_term(&h, 20.0 - 1e-12).0.abs() < 1e-12);
    }

    #[test]
    fn explicit_grid_matches_uniform_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rs: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..3.0)).collect();
        assert_eq!(
            grid_score(&rs, &threshold_grid(2.0, 17)),
            marginalized_score(&rs, 2.0, 17)
        );
        assert_eq!(grid_score(&[0.5, 1.5, 2.5], &[1.0, 2.0, 3.0]), 1 + 2 + 3);
        assert_eq!(grid_score(&rs, &[]), 0);
    }

    #[test]
    fn descent_table_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rs: Vec<f64> = (0..5000).map(|_| rng.random_range(0.0..30.0)).collect();
        for norm in [Normalization::AllFinite, Normalization::BelowTauMax] {
            let h = build_histogram_with(&rs, 20.0, 100, norm).unwrap();
            let table = DescentTable::new(&h);
            let probes = rs.iter().copied().chain([
                0.0,
                20.0,
                25.0,
                -1.0,
                f64::INFINITY,
                f64::NAN,
                19.999_999,
            ]);
            for r in probes {
                let (a, b) = (mba_descent_term(&h, r), table.term(r));
                assert!(
                    (a.0 - b.0).abs() <= 1e-12 * (1.0 + a.0.abs()) / h.total as f64,
                    "value at {r}"
                );
                assert!((a.1 - b.1).abs() <= 1e-12 * a.1.abs(), "slope at {r}");
            }
        }
    }

    #[test]
    fn robust_baselines() {
        for kind in [
            RobustKind::SoftL1,
            RobustKind::Cauchy,
            RobustKind::Tukey,
            RobustKind::L2,
        ] {
            assert_eq!(robust_loss_baseline(0.0, kind, 2.0), (0.0, 0.0));
            for r in [0.3, 1.1, 1.9, 4.0] {
                let h = 1e-6;
                let fd = (robust_loss_baseline(r + h, kind, 2.0).0
                    - robust_loss_baseline(r - h, kind, 2.0).0)
                    / (2.0 * h);
                let g = robust_loss_baseline(r, kind, 2.0).1;
                assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "{kind:?} at {r}");
            }
        }
        assert_eq!(robust_loss_baseline(3.0, RobustKind::L2, 1.0), (9.0, 6.0));
        assert_eq!(
            robust_loss_baseline(5.0, RobustKind::Tukey, 2.0),
            (4.0 / 6.0, 0.0)
        );
    }
}
