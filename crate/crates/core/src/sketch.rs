//! Streaming tail-latency estimation.
//!
//! Latencies are mapped to geometric buckets and counted in a count-min
//! sketch keyed by bucket index. The sliding window is a ring of sub-sketches,
//! each holding one cohort of `ref_count / S` samples; the oldest cohort is
//! dropped whole when the ring is full. A quantile is answered by a cumulative
//! scan over bucket point queries.

use std::collections::VecDeque;

use thiserror::Error;

use crate::engine::{SimRng, SimTime};

const MERSENNE_61: u64 = (1u64 << 61) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SketchError {
    #[error("sketch width and depth must be positive")]
    EmptySketch,
    #[error("bucket range must satisfy 0 < min < max and factor > 1")]
    BadBuckets,
    #[error("window must hold at least one sample per sub-sketch")]
    BadWindow,
}

/// Count-min sketch over `u64` keys with pairwise-independent row hashes.
#[derive(Clone, Debug)]
pub struct CountMinSketch {
    width: usize,
    depth: usize,
    counters: Vec<u64>,
    seeds: Vec<(u64, u64)>,
    total: u64,
}

fn mul_mod_61(a: u64, b: u64) -> u64 {
    let prod = a as u128 * b as u128;
    let lo = (prod as u64) & MERSENNE_61;
    let hi = (prod >> 61) as u64;
    let s = lo + hi;
    if s >= MERSENNE_61 {
        s - MERSENNE_61
    } else {
        s
    }
}

impl CountMinSketch {
    pub fn new(width: usize, depth: usize, rng: &mut SimRng) -> Result<Self, SketchError> {
        if width == 0 || depth == 0 {
            return Err(SketchError::EmptySketch);
        }
        let seeds = (0..depth)
            .map(|_| {
                let a = 1 + rng.below(MERSENNE_61 - 1);
                let b = rng.below(MERSENNE_61);
                (a, b)
            })
            .collect();
        Ok(Self::with_seeds(width, seeds))
    }

    /// Build a sketch sharing the hash family of `seeds`; sketches with the
    /// same seeds can be queried key-for-key against each other.
    pub fn with_seeds(width: usize, seeds: Vec<(u64, u64)>) -> Self {
        let depth = seeds.len();
        CountMinSketch {
            width,
            depth,
            counters: vec![0; width * depth],
            seeds,
            total: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn seeds(&self) -> &[(u64, u64)] {
        &self.seeds
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Additive error bound factor `e / w`.
    pub fn epsilon(&self) -> f64 {
        std::f64::consts::E / self.width as f64
    }

    /// Failure probability `e^-d`.
    pub fn delta(&self) -> f64 {
        (-(self.depth as f64)).exp()
    }

    fn column(&self, row: usize, key: u64) -> usize {
        let (a, b) = self.seeds[row];
        let x = key % MERSENNE_61;
        let h = (mul_mod_61(a, x) + b) % MERSENNE_61;
        (h % self.width as u64) as usize
    }

    pub fn add(&mut self, key: u64, count: u64) {
        for row in 0..self.depth {
            let col = self.column(row, key);
            self.counters[row * self.width + col] += count;
        }
        self.total += count;
    }

    /// Estimated count for `key`; never below the true count.
    pub fn point_query(&self, key: u64) -> u64 {
        (0..self.depth)
            .map(|row| self.counters[row * self.width + self.column(row, key)])
            .min()
            .unwrap_or(0)
    }

    pub fn clear(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }
}

/// Geometric latency bins over `[min, max]`.
#[derive(Clone, Debug)]
pub struct LogBuckets {
    edges: Vec<f64>,
    factor: f64,
}

impl LogBuckets {
    pub fn new(min: SimTime, max: SimTime, factor: f64) -> Result<Self, SketchError> {
        if min.as_nanos() == 0 || max <= min || factor.partial_cmp(&1.0) != Some(std::cmp::Ordering::Greater) {
            return Err(SketchError::BadBuckets);
        }
        let mut edges = vec![min.as_nanos() as f64];
        let top = max.as_nanos() as f64;
        while *edges.last().expect("nonempty") < top {
            let next = edges.last().expect("nonempty") * factor;
            edges.push(next);
        }
        Ok(LogBuckets { edges, factor })
    }

    /// 100 ns to 10 ms with factor 1.1.
    pub fn standard() -> Self {
        LogBuckets::new(SimTime(100), SimTime::from_millis(10), 1.1).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    /// Bucket for a latency, clamping out-of-range values to the ends.
    pub fn index(&self, v: SimTime) -> usize {
        let x = v.as_nanos() as f64;
        let above = self.edges.partition_point(|&e| e <= x);
        above.saturating_sub(1).min(self.len() - 1)
    }

    pub fn lower_edge(&self, i: usize) -> f64 {
        self.edges[i]
    }

    pub fn upper_edge(&self, i: usize) -> f64 {
        self.edges[i + 1]
    }

    /// Upper edge rounded up to whole nanoseconds.
    pub fn upper_edge_time(&self, i: usize) -> SimTime {
        SimTime(self.edges[i + 1].ceil() as u64)
    }
}

/// A latency observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatencySample {
    pub value: SimTime,
    pub recorded_at: SimTime,
}

/// Knobs for [`TailEstimator`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailEstimatorConfig {
    pub ref_count: usize,
    pub sub_sketches: usize,
    pub width: usize,
    pub depth: usize,
    pub min_latency: SimTime,
    pub max_latency: SimTime,
    pub factor: f64,
}

impl Default for TailEstimatorConfig {
    fn default() -> Self {
        TailEstimatorConfig {
            ref_count: 10_000,
            sub_sketches: 10,
            width: 256,
            depth: 4,
            min_latency: SimTime(100),
            max_latency: SimTime::from_millis(10),
            factor: 1.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Cohort {
    sketch: CountMinSketch,
    count: usize,
}

/// Sliding-window p99 estimator backed by count-min sketches.
#[derive(Clone, Debug)]
pub struct TailEstimator {
    cfg: TailEstimatorConfig,
    buckets: LogBuckets,
    seeds: Vec<(u64, u64)>,
    cohorts: VecDeque<Cohort>,
    quota: usize,
    total_in_window: usize,
}

impl TailEstimator {
    pub fn new(cfg: TailEstimatorConfig, rng: &mut SimRng) -> Result<Self, SketchError> {
        if cfg.sub_sketches == 0 || cfg.ref_count < cfg.sub_sketches {
            return Err(SketchError::BadWindow);
        }
        let buckets = LogBuckets::new(cfg.min_latency, cfg.max_latency, cfg.factor)?;
        let proto = CountMinSketch::new(cfg.width, cfg.depth, rng)?;
        Ok(TailEstimator {
            quota: cfg.ref_count / cfg.sub_sketches,
            cfg,
            buckets,
            seeds: proto.seeds().to_vec(),
            cohorts: VecDeque::new(),
            total_in_window: 0,
        })
    }

    pub fn with_defaults(rng: &mut SimRng) -> Self {
        Self::new(TailEstimatorConfig::default(), rng).expect("default config is valid")
    }

    pub fn buckets(&self) -> &LogBuckets {
        &self.buckets
    }

    pub fn config(&self) -> &TailEstimatorConfig {
        &self.cfg
    }

    pub fn total_in_window(&self) -> usize {
        self.total_in_window
    }

    pub fn record(&mut self, sample: LatencySample) {
        let needs_new = self.cohorts.back().is_none_or(|c| c.count >= self.quota);
        if needs_new {
            if self.cohorts.len() == self.cfg.sub_sketches {
                let old = self.cohorts.pop_front().expect("full ring");
                self.total_in_window -= old.count;
            }
            self.cohorts.push_back(Cohort {
                sketch: CountMinSketch::with_seeds(self.cfg.width, self.seeds.clone()),
                count: 0,
            });
        }
        let bucket = self.buckets.index(sample.value) as u64;
        let newest = self.cohorts.back_mut().expect("cohort exists");
        newest.sketch.add(bucket, 1);
        newest.count += 1;
        self.total_in_window += 1;
    }

    /// Estimated count of samples in bucket `i` across the window.
    pub fn bucket_count(&self, i: usize) -> u64 {
        self.cohorts
            .iter()
            .map(|c| c.sketch.point_query(i as u64))
            .sum()
    }

    /// Estimated `q`-quantile as the upper edge of the first bucket whose
    /// cumulative count reaches `ceil(q * n)`. `None` if the window is empty.
    pub fn quantile(&self, q: f64) -> Option<SimTime> {
        if self.total_in_window == 0 {
            return None;
        }
        let need = ((q * self.total_in_window as f64).ceil() as u64).max(1);
        let mut acc = 0u64;
        for i in 0..self.buckets.len() {
            acc += self.bucket_count(i);
            if acc >= need {
                return Some(self.buckets.upper_edge_time(i));
            }
        }
        Some(self.buckets.upper_edge_time(self.buckets.len() - 1))
    }

    pub fn current_p99(&self) -> Option<SimTime> {
        self.quantile(0.99)
    }

    pub fn clear(&mut self) {
        self.cohorts.clear();
        self.total_in_window = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ns: u64) -> LatencySample {
        LatencySample {
            value: SimTime(ns),
            recorded_at: SimTime::ZERO,
        }
    }

    fn exact_p99(v: &mut [u64]) -> u64 {
        v.sort_unstable();
        let k = ((0.99 * v.len() as f64).ceil() as usize).max(1);
        v[k - 1]
    }

    #[test]
    fn standard_buckets_cover_range() {
        let b = LogBuckets::standard();
        assert!((120..=122).contains(&b.len()), "{}", b.len());
        assert_eq!(b.index(SimTime(1)), 0);
        assert_eq!(b.index(SimTime(100)), 0);
        assert_eq!(b.index(SimTime(u64::MAX)), b.len() - 1);
        assert!(b.upper_edge(b.len() - 1) >= 1e7);
    }

    #[test]
    fn cm_never_undercounts() {
        let mut rng = SimRng::new(1);
        let mut cm = CountMinSketch::new(16, 3, &mut rng).unwrap();
        let mut truth = [0u64; 200];
        for i in 0..5000u64 {
            let k = (i * 7919) % 200;
            cm.add(k, 1);
            truth[k as usize] += 1;
        }
        for (k, &t) in truth.iter().enumerate() {
            assert!(cm.point_query(k as u64) >= t);
        }
        assert!((cm.delta() - (-3f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn window_capacity_enforced() {
        let mut rng = SimRng::new(2);
        let mut est = TailEstimator::with_defaults(&mut rng);
        for i in 0..10_001 {
            est.record(sample(1000 + i));
        }
        assert!(est.total_in_window() <= 10_000);
        assert_eq!(est.total_in_window(), 9_001);
    }

    #[test]
    fn below_min_clamps_to_first_bucket() {
        let mut rng = SimRng::new(3);
        let mut est = TailEstimator::with_defaults(&mut rng);
        est.record(sample(5));
        assert!(est.bucket_count(0) >= 1);
        assert_eq!(est.current_p99(), Some(est.buckets().upper_edge_time(0)));
    }

    #[test]
    fn repeated_value_counts_twice() {
        let mut rng = SimRng::new(4);
        let mut est = TailEstimator::with_defaults(&mut rng);
        est.record(sample(2_000));
        est.record(sample(2_000));
        let b = est.buckets().index(SimTime(2_000));
        assert!(est.bucket_count(b) >= 2);
    }

    #[test]
    fn empty_window_has_no_estimate() {
        let mut rng = SimRng::new(5);
        let est = TailEstimator::with_defaults(&mut rng);
        assert_eq!(est.current_p99(), None);
    }

    #[test]
    fn degenerate_distribution() {
        let mut rng = SimRng::new(6);
        let mut est = TailEstimator::with_defaults(&mut rng);
        for _ in 0..10_000 {
            est.record(sample(1_300));
        }
        let b = est.buckets().index(SimTime(1_300));
        assert_eq!(est.current_p99(), Some(est.buckets().upper_edge_time(b)));
    }

    #[test]
    fn bimodal_matches_sorted_oracle() {
        let mut rng = SimRng::new(7);
        let mut est = TailEstimator::with_defaults(&mut rng);
        let mut all = vec![1_000; 9_000];
        all.extend(std::iter::repeat_n(100_000, 1_000));
        for &v in &all {
            est.record(sample(v));
        }
        let exact = exact_p99(&mut all);
        assert_eq!(exact, 100_000);
        let b = est.buckets().index(SimTime(exact));
        assert_eq!(est.current_p99(), Some(est.buckets().upper_edge_time(b)));
    }

    #[test]
    fn uniform_within_one_bucket() {
        let mut rng = SimRng::new(8);
        let mut est = TailEstimator::with_defaults(&mut rng);
        let mut all: Vec<u64> = (1..=10_000u64).map(|us| us * 1_000).collect();
        for &v in &all {
            est.record(sample(v));
        }
        let exact = exact_p99(&mut all);
        assert_eq!(exact, 9_900_000);
        let got = est.current_p99().unwrap().as_nanos() as f64;
        let ratio = got / exact as f64;
        assert!((1.0 / 1.1..=1.1).contains(&ratio), "ratio {ratio}");
        // 9901 us lands in the same bucket as the exact value
        assert_eq!(
            est.buckets().index(SimTime(exact)),
            est.buckets().index(SimTime(9_901_000))
        );
    }

    #[test]
    fn larger_sample_never_lowers_estimate() {
        let mut rng = SimRng::new(9);
        let mut est = TailEstimator::with_defaults(&mut rng);
        let mut r = SimRng::new(10);
        for _ in 0..3_000 {
            est.record(sample(500 + r.below(20_000)));
        }
        for _ in 0..200 {
            let before = est.current_p99().unwrap();
            est.record(sample(before.as_nanos() + 1 + r.below(50_000)));
            assert!(est.current_p99().unwrap() >= before);
        }
    }
}
