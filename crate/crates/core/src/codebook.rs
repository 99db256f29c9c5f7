//! Scalar codebooks: K-means++ fitting, value -> symbol encoding, symbol ->
//! value decoding and ranked nearest-centroid search.
//!
//! Centroids are kept sorted ascending and strictly distinct, so a symbol id
//! doubles as the rank of its centroid. Nearest-centroid search is a binary
//! search over that order; ties go to the smaller centroid.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::SymbolicTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest codebook size; symbol ids must fit in a `u16`.
pub const MAX_SYMBOLS: usize = 65_535;

/// Index into a codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Symbol(pub u16);

impl Symbol {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CodebookKind {
    /// Shared by input pixels, feature maps, products and partial sums.
    Activation,
    ConvFilter,
    FcFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    centroids: Vec<f64>,
    kind: CodebookKind,
}

impl Codebook {
    /// Sorts the centroids and merges exact duplicates.
    pub fn new(mut centroids: Vec<f64>, kind: CodebookKind) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::InvalidArgument(
                "codebook needs at least one centroid".into(),
            ));
        }
        if let Some(bad) = centroids.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite centroid {bad}")));
        }
        centroids.sort_by(f64::total_cmp);
        centroids.dedup();
        if centroids.len() > MAX_SYMBOLS {
            return Err(Error::InvalidArgument(format!(
                "codebook of {} centroids exceeds the {MAX_SYMBOLS} symbol limit",
                centroids.len()
            )));
        }
        // -0.0 and 0.0 dedup together; keep the canonical zero.
        for c in &mut centroids {
            if *c == 0.0 {
                *c = 0.0;
            }
        }
        Ok(Self { centroids, kind })
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    /// Number of symbols K.
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Symbol of the centroid nearest to `value`; ties go to the smaller
    /// centroid.
    pub fn encode(&self, value: f64) -> Symbol {
        let c = &self.centroids;
        let i = c.partition_point(|&x| x < value);
        if i == 0 {
            return Symbol(0);
        }
        if i == c.len() {
            return Symbol((c.len() - 1) as u16);
        }
        let below = (value - c[i - 1]).abs();
        let above = (c[i] - value).abs();
        if above < below {
            Symbol(i as u16)
        } else {
            Symbol((i - 1) as u16)
        }
    }

    pub fn decode(&self, s: Symbol) -> Result<f64> {
        self.centroids
            .get(s.id())
            .copied()
            .ok_or(Error::SymbolOutOfRange {
                table: format!("{:?} codebook", self.kind),
                id: s.0 as u32,
                limit: self.centroids.len() as u32,
            })
    }

    /// Decode without the range check; panics on an invalid id.
    #[inline]
    pub fn value(&self, s: Symbol) -> f64 {
        self.centroids[s.id()]
    }

    pub fn encode_tensor(&self, t: &Tensor) -> SymbolicTensor {
        let symbols = t.data().iter().map(|&v| self.encode(v as f64)).collect();
        SymbolicTensor::from_parts(t.shape().to_vec(), symbols)
    }

    pub fn decode_tensor(&self, st: &SymbolicTensor) -> Result<Tensor> {
        let data = st
            .symbols()
            .iter()
            .map(|&s| self.decode(s).map(|v| v as f32))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(st.shape().to_vec(), data)
    }

    /// The `k` symbols closest to `value`, nearest first. Equal distances
    /// rank the smaller centroid first, consistent with [`Codebook::encode`].
    pub fn nearest_k(&self, value: f64, k: usize) -> Result<Vec<Symbol>> {
        let c = &self.centroids;
        if k > c.len() {
            return Err(Error::InvalidArgument(format!(
                "nearest_k: k = {k} exceeds codebook size {}",
                c.len()
            )));
        }
        let mut hi = c.partition_point(|&x| x < value);
        let mut lo = hi; // candidates are c[lo - 1] (going down) and c[hi] (going up)
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let take_low = match (lo > 0, hi < c.len()) {
                (true, true) => (value - c[lo - 1]).abs() <= (c[hi] - value).abs(),
                (true, false) => true,
                (false, true) => false,
                (false, false) => break,
            };
            if take_low {
                lo -= 1;
                out.push(Symbol(lo as u16));
            } else {
                out.push(Symbol(hi as u16));
                hi += 1;
            }
        }
        Ok(out)
    }

    /// Largest distance between adjacent centroids (0 for K = 1).
    pub fn max_gap(&self) -> f64 {
        self.centroids
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Symbol whose centroid is exactly 0, if any.
    pub fn zero_symbol(&self) -> Option<Symbol> {
        self.centroids
            .binary_search_by(|c| c.total_cmp(&0.0))
            .ok()
            .map(|i| Symbol(i as u16))
    }

    /// The integers `-radius..=radius`. Any sum or product of centroids that
    /// stays inside the range is itself a centroid, so lookups over this
    /// codebook are exact.
    pub fn integers(radius: u16, kind: CodebookKind) -> Result<Self> {
        let r = radius as i64;
        Self::new((-r..=r).map(|v| v as f64).collect(), kind)
    }

    /// Guarantees an exact zero centroid by moving the centroid nearest to 0
    /// onto it. K is unchanged.
    pub fn with_zero(mut self) -> Self {
        if self.zero_symbol().is_none() {
            let s = self.encode(0.0);
            self.centroids[s.id()] = 0.0;
        }
        self
    }
}

/// Sorted, de-duplicated sample values with multiplicities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedSamples {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSamples {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::from_pairs(values.into_iter().map(|v| (v, 1.0)))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut pairs: Vec<(f64, f64)> = pairs.into_iter().collect();
        if let Some((v, w)) = pairs
            .iter()
            .find(|(v, w)| !v.is_finite() || !w.is_finite() || *w < 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid weighted sample ({v}, {w})"
            )));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Self::default();
        for (v, w) in pairs {
            if w == 0.0 {
                continue;
            }
            let v = if v == 0.0 { 0.0 } else { v };
            match out.values.last() {
                Some(&last) if last == v => *out.weights.last_mut().unwrap() += w,
                _ => {
                    out.values.push(v);
                    out.weights.push(w);
                }
            }
        }
        Ok(out)
    }

    /// Union of two sample sets.
    pub fn merge(&self, other: &WeightedSamples) -> WeightedSamples {
        let pairs = self
            .values
            .iter()
            .zip(&self.weights)
            .chain(other.values.iter().zip(&other.weights))
            .map(|(&v, &w)| (v, w));
        Self::from_pairs(pairs).expect("both inputs already validated")
    }

    pub fn distinct(&self) -> usize {
        self.values.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted within-cluster sum of squares against a sorted codebook.
    pub fn sse(&self, cb: &Codebook) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(&v, &w)| {
                let d = v - cb.value(cb.encode(v));
                w * d * d
            })
            .sum()
    }
}

/// Outcome of a K-means fit.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub requested_k: usize,
    /// Set when the data had fewer distinct values than `requested_k`.
    pub reduced: bool,
    pub iterations: usize,
    pub sse: f64,
}

/// Prefix sums of w, w*x and w*x^2 over sorted samples.
struct Moments {
    w: Vec<f64>,
    wx: Vec<f64>,
    wxx: Vec<f64>,
}

impl Moments {
    fn new(s: &WeightedSamples) -> Self {
        let n = s.values.len();
        let (mut w, mut wx, mut wxx) = (
            Vec::with_capacity(n + 1),
            Vec::with_capacity(n + 1),
            Vec::with_capacity(n + 1),
        );
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        w.push(a);
        wx.push(b);
        wxx.push(c);
        for (&x, &wt) in s.values.iter().zip(&s.weights) {
            a += wt;
            b += wt * x;
            c += wt * x * x;
            w.push(a);
            wx.push(b);
            wxx.push(c);
        }
        Self { w, wx, wxx }
    }

    fn weight(&self, lo: usize, hi: usize) -> f64 {
        self.w[hi] - self.w[lo]
    }

    fn sum(&self, lo: usize, hi: usize) -> f64 {
        self.wx[hi] - self.wx[lo]
    }

    /// Sum of w * (x - c)^2 over [lo, hi), clamped at 0 against rounding.
    fn sq_dist(&self, lo: usize, hi: usize, c: f64) -> f64 {
        let v = (self.wxx[hi] - self.wxx[lo]) - 2.0 * c * self.sum(lo, hi)
            + c * c * self.weight(lo, hi);
        v.max(0.0)
    }
}

/// Index of the first sample assigned to the upper of two adjacent centres
/// (ties at the midpoint go to the lower one).
fn split_point(values: &[f64], lower: f64, upper: f64) -> usize {
    // same comparison as `Codebook::encode`, so fitting and encoding agree
    values.partition_point(|&x| (x - lower).abs() <= (upper - x).abs())
}

/// Per-cluster [lo, hi) index ranges for sorted centres.
fn assignment(values: &[f64], centres: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(centres.len() + 1);
    bounds.push(0);
    for w in centres.windows(2) {
        bounds.push(split_point(values, w[0], w[1]));
    }
    bounds.push(values.len());
    bounds
}

/// K-means++ seeding over weighted 1-D samples.
///
/// Each step samples a new centre with probability proportional to weight
/// times squared distance to the nearest existing centre. Because both the
/// samples and the centres are sorted, the distance mass of every gap between
/// centres comes from prefix sums, and the draw inside a gap is a binary
/// search over its cumulative mass.
fn seed_plus_plus(s: &WeightedSamples, m: &Moments, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = s.values.len();
    let total = m.weight(0, n);
    let u = rng.gen::<f64>() * total;
    let first = m.w[1..].partition_point(|&cw| cw <= u).min(n - 1);
    let mut centres = vec![s.values[first]];

    while centres.len() < k {
        let bounds = assignment(&s.values, &centres);
        let masses: Vec<f64> = (0..centres.len())
            .map(|j| m.sq_dist(bounds[j], bounds[j + 1], centres[j]))
            .collect();
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.gen::<f64>() * total;
        let mut cluster = masses.len() - 1;
        for (j, &mass) in masses.iter().enumerate() {
            if u < mass {
                cluster = j;
                break;
            }
            u -= mass;
        }
        let (lo, hi) = (bounds[cluster], bounds[cluster + 1]);
        let c = centres[cluster];
        // smallest idx in [lo, hi) with cumulative mass over [lo, idx] > u
        let (mut a, mut b) = (lo, hi);
        while a < b {
            let mid = a + (b - a) / 2;
            if m.sq_dist(lo, mid + 1, c) > u {
                b = mid;
            } else {
                a = mid + 1;
            }
        }
        let mut pick = a.min(hi - 1);
        if s.values[pick] == c {
            // rounding landed on the centre itself; take the farthest point
            pick = if (s.values[lo] - c).abs() >= (s.values[hi - 1] - c).abs() {
                lo
            } else {
                hi - 1
            };
        }
        let v = s.values[pick];
        let at = centres.partition_point(|&x| x < v);
        if centres.get(at) == Some(&v) {
            break;
        }
        centres.insert(at, v);
    }
    centres
}

/// Fits a K-centroid scalar codebook with K-means++ seeding followed by
/// Lloyd iterations until the assignment stops changing or `max_iters` is
/// reached. Deterministic for a fixed seed.
pub fn kmeans_fit(
    samples: &[f64],
    k: usize,
    seed: u64,
    max_iters: usize,
    kind: CodebookKind,
) -> Result<KMeansFit> {
    if samples.len() < k {
        return Err(Error::InvalidArgument(format!(
            "kmeans: {} samples for {k} clusters",
            samples.len()
        )));
    }
    let weighted = WeightedSamples::from_values(samples.iter().copied())?;
    kmeans_fit_weighted(&weighted, k, seed, max_iters, kind)
}

pub fn kmeans_fit_weighted(
    samples: &WeightedSamples,
    k: usize,
    seed: u64,
    max_iters: usize,
    kind: CodebookKind,
) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "kmeans: K must be >= 2, got {k}"
        )));
    }
    if k > MAX_SYMBOLS {
        return Err(Error::InvalidArgument(format!(
            "kmeans: K = {k} exceeds {MAX_SYMBOLS}"
        )));
    }
    if samples.distinct() == 0 {
        return Err(Error::InvalidArgument("kmeans: no samples".into()));
    }
    if samples.distinct() <= k {
        let codebook = Codebook::new(samples.values.clone(), kind)?;
        return Ok(KMeansFit {
            reduced: samples.distinct() < k,
            requested_k: k,
            iterations: 0,
            sse: 0.0,
            codebook,
        });
    }

    let moments = Moments::new(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = seed_plus_plus(samples, &moments, k, &mut rng);

    let mut bounds = assignment(&samples.values, &centres);
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for j in 0..centres.len() {
            let (lo, hi) = (bounds[j], bounds[j + 1]);
            let w = moments.weight(lo, hi);
            if w > 0.0 {
                centres[j] = moments.sum(lo, hi) / w;
            }
        }
        centres.sort_by(f64::total_cmp);
        let next = assignment(&samples.values, &centres);
        if next == bounds {
            break;
        }
        bounds = next;
    }

    let codebook = Codebook::new(centres, kind)?;
    let sse = samples.sse(&codebook);
    Ok(KMeansFit {
        reduced: codebook.len() < k,
        requested_k: k,
        iterations,
        sse,
        codebook,
    })
}
