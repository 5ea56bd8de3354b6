//! Second-order correlation histograms and TCSPC decay histograms built
//! from photon streams.
//!
//! The correlator counts every A-B pair within the delay window (both
//! signs), normalized by rate_A * rate_B * bin_width * T so uncorrelated
//! light sits at 1. A sliding two-pointer sweep keeps it linear in the
//! stream size; an O(N^2) oracle with identical binning guards it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emitter::{Channel, PhotonStream};

#[derive(Debug, Error)]
pub enum CorrelationError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("stream too large for the brute-force correlator: {n} events > {max}")]
    SizeGuard { n: usize, max: usize },
}

/// Normalized two-channel correlation histogram, symmetric about zero
/// delay. Bin j covers ((j - 1/2) dt, (j + 1/2) dt] around tau = j dt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct G2Histogram {
    pub bin_width: f64,
    /// Bins run from -n_side..=n_side.
    pub n_side: usize,
    pub counts: Vec<u64>,
    /// rate_A * rate_B * bin_width * T
    pub normalization: f64,
    pub g2: Vec<f64>,
    /// Poisson standard error per bin, in normalized units.
    pub sigma: Vec<f64>,
    pub duration: f64,
    pub rate_a: f64,
    pub rate_b: f64,
}

impl G2Histogram {
    pub fn tau_centers(&self) -> Vec<f64> {
        let n = self.n_side as i64;
        (-n..=n).map(|j| j as f64 * self.bin_width).collect()
    }

    /// Value of the tau = 0 bin.
    pub fn central_bin(&self) -> f64 {
        self.g2[self.n_side]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization > 0.0
    }
}

/// Delay histogram of photons after their preceding excitation trigger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayHistogram {
    pub bin_width: f64,
    pub period: f64,
    pub counts: Vec<u64>,
    pub total_triggers: usize,
    pub total_photons: u64,
}

impl DecayHistogram {
    pub fn delay_centers(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|i| (i as f64 + 0.5) * self.bin_width)
            .collect()
    }
}

#[inline]
fn bin_index(tau: f64, bin_width: f64) -> i64 {
    (tau / bin_width).round() as i64
}

fn split_channels(stream: &PhotonStream) -> Result<(Vec<f64>, Vec<f64>), CorrelationError> {
    let a = stream.times_by_channel(Channel::A);
    let b = stream.times_by_channel(Channel::B);
    if a.len() < 2 || b.len() < 2 {
        return Err(CorrelationError::InsufficientData(format!(
            "need >= 2 events per channel, got A: {}, B: {}",
            a.len(),
            b.len()
        )));
    }
    Ok((a, b))
}

fn validate_window(bin_width: f64, window: f64) -> Result<(), CorrelationError> {
    if !(bin_width > 0.0) {
        return Err(CorrelationError::Domain("bin_width must be > 0".into()));
    }
    if window < 10.0 * bin_width {
        return Err(CorrelationError::Domain(format!(
            "window {window} must be >= 10 * bin_width {bin_width}"
        )));
    }
    Ok(())
}

fn histogram_from_counts(
    counts: Vec<u64>,
    n_side: usize,
    bin_width: f64,
    n_a: usize,
    n_b: usize,
    duration: f64,
) -> G2Histogram {
    let rate_a = n_a as f64 / duration;
    let rate_b = n_b as f64 / duration;
    let norm = rate_a * rate_b * bin_width * duration;
    let g2: Vec<f64> = counts.iter().map(|&c| c as f64 / norm).collect();
    let sigma: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64).sqrt().max(1.0) / norm)
        .collect();
    G2Histogram {
        bin_width,
        n_side,
        counts,
        normalization: norm,
        g2,
        sigma,
        duration,
        rate_a,
        rate_b,
    }
}

/// Multi-start (all-pairs-in-window) correlation of the two channels.
pub fn g2_histogram(
    stream: &PhotonStream,
    bin_width: f64,
    window: f64,
) -> Result<G2Histogram, CorrelationError> {
    validate_window(bin_width, window)?;
    let (a, b) = split_channels(stream)?;
    let n_side = (window / bin_width).round() as usize;
    let reach = (n_side as f64 + 0.5) * bin_width;
    let mut counts = vec![0u64; 2 * n_side + 1];
    let mut lo = 0usize;
    for &ta in &a {
        while lo < b.len() && b[lo] < ta - reach {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j] <= ta + reach {
            let idx = bin_index(b[j] - ta, bin_width);
            if idx.unsigned_abs() as usize <= n_side {
                counts[(idx + n_side as i64) as usize] += 1;
            }
            j += 1;
        }
    }
    Ok(histogram_from_counts(
        counts,
        n_side,
        bin_width,
        a.len(),
        b.len(),
        stream.duration(),
    ))
}

/// Block-partitioned variant: splits channel A by time blocks with a
/// window of overlap read from channel B; exact same counts for any
/// block count.
pub fn g2_histogram_blocked(
    stream: &PhotonStream,
    bin_width: f64,
    window: f64,
    blocks: usize,
) -> Result<G2Histogram, CorrelationError> {
    validate_window(bin_width, window)?;
    if blocks == 0 {
        return Err(CorrelationError::Domain("blocks must be >= 1".into()));
    }
    let (a, b) = split_channels(stream)?;
    let n_side = (window / bin_width).round() as usize;
    let reach = (n_side as f64 + 0.5) * bin_width;
    let duration = stream.duration();
    let edge = |i: usize| duration * i as f64 / blocks as f64;
    let mut counts = vec![0u64; 2 * n_side + 1];
    for blk in 0..blocks {
        let (t0, t1) = (edge(blk), edge(blk + 1));
        // A events in [t0, t1); B events within reach of the block.
        let a_lo = a.partition_point(|&t| t < t0);
        let a_hi = a.partition_point(|&t| t < t1);
        let b_lo = b.partition_point(|&t| t < t0 - reach);
        for &ta in &a[a_lo..a_hi] {
            let mut j = b_lo + b[b_lo..].partition_point(|&t| t < ta - reach);
            while j < b.len() && b[j] <= ta + reach {
                let idx = bin_index(b[j] - ta, bin_width);
                if idx.unsigned_abs() as usize <= n_side {
                    counts[(idx + n_side as i64) as usize] += 1;
                }
                j += 1;
            }
        }
    }
    Ok(histogram_from_counts(
        counts,
        n_side,
        bin_width,
        a.len(),
        b.len(),
        duration,
    ))
}

const BRUTE_FORCE_MAX: usize = 100_000;

/// O(N^2) correlator with identical binning; counts match `g2_histogram`
/// bit for bit.
pub fn brute_force_g2(
    stream: &PhotonStream,
    bin_width: f64,
    window: f64,
) -> Result<G2Histogram, CorrelationError> {
    validate_window(bin_width, window)?;
    if stream.events.len() > BRUTE_FORCE_MAX {
        return Err(CorrelationError::SizeGuard {
            n: stream.events.len(),
            max: BRUTE_FORCE_MAX,
        });
    }
    let (a, b) = split_channels(stream)?;
    let n_side = (window / bin_width).round() as usize;
    let mut counts = vec![0u64; 2 * n_side + 1];
    for &ta in &a {
        for &tb in &b {
            let idx = bin_index(tb - ta, bin_width);
            if idx.unsigned_abs() as usize <= n_side {
                counts[(idx + n_side as i64) as usize] += 1;
            }
        }
    }
    Ok(histogram_from_counts(
        counts,
        n_side,
        bin_width,
        a.len(),
        b.len(),
        stream.duration(),
    ))
}

/// Histogram of photon delays after the preceding trigger.
pub fn decay_histogram(
    stream: &PhotonStream,
    triggers: &[f64],
    bin_width: f64,
) -> Result<DecayHistogram, CorrelationError> {
    if triggers.is_empty() {
        return Err(CorrelationError::Domain("no triggers supplied".into()));
    }
    if !(bin_width > 0.0) {
        return Err(CorrelationError::Domain("bin_width must be > 0".into()));
    }
    let period = if triggers.len() >= 2 {
        triggers[1] - triggers[0]
    } else {
        stream.duration() - triggers[0]
    };
    if !(period > 0.0) {
        return Err(CorrelationError::Domain(
            "trigger spacing must be positive".into(),
        ));
    }
    let n_bins = (period / bin_width).ceil() as usize;
    let mut counts = vec![0u64; n_bins.max(1)];
    let mut total = 0u64;
    for e in &stream.events {
        let i = triggers.partition_point(|&t| t <= e.time);
        if i == 0 {
            continue; // photon before the first trigger
        }
        let delay = e.time - triggers[i - 1];
        if delay < 0.0 || delay >= period {
            continue;
        }
        let b = (delay / bin_width) as usize;
        if b < counts.len() {
            counts[b] += 1;
            total += 1;
        }
    }
    Ok(DecayHistogram {
        bin_width,
        period,
        counts,
        total_triggers: triggers.len(),
        total_photons: total,
    })
}

/// Decay histogram using the stream's own recorded pulse train.
pub fn decay_histogram_from_stream(
    stream: &PhotonStream,
    bin_width: f64,
) -> Result<DecayHistogram, CorrelationError> {
    let train = stream.triggers.ok_or_else(|| {
        CorrelationError::Domain("stream carries no pulse train; run a pulsed simulation".into())
    })?;
    let triggers: Vec<f64> = train.times().collect();
    decay_histogram(stream, &triggers, bin_width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emitter::{
        analytic_g2, nv_bulk_model, simulate_cw, simulate_pulsed, DetectionModel, EmitterModel,
        Excitation, PhotonEvent, PulseTrain, TruthRecord,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poisson_pair_stream(rate: f64, duration: f64, seed: u64) -> PhotonStream {
        // Two independent Poisson channels of equal rate.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events = Vec::new();
        for ch in [Channel::A, Channel::B] {
            let mut t = 0.0;
            loop {
                t += -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln() / rate;
                if t > duration {
                    break;
                }
                events.push(PhotonEvent { time: t, channel: ch });
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        PhotonStream {
            events,
            triggers: None,
            truth: TruthRecord {
                emitter: nv_bulk_model(),
                detection: DetectionModel::default(),
                excitation: Excitation::Cw { pump_mw: 0.0 },
                duration,
                seed,
            },
        }
    }

    #[test]
    fn uncorrelated_streams_normalize_to_one() {
        let s = poisson_pair_stream(1.0e4, 100.0, 21);
        let h = g2_histogram(&s, 1e-6, 5e-5).unwrap();
        for (i, (&g, &sig)) in h.g2.iter().zip(&h.sigma).enumerate() {
            assert!(
                (g - 1.0).abs() < 3.0 * sig,
                "bin {i}: g2 {g} sigma {sig}"
            );
        }
    }

    #[test]
    fn brute_force_matches_fast_correlator_exactly() {
        for seed in 0..10u64 {
            let rate = 2.0e3 + 500.0 * seed as f64;
            let s = poisson_pair_stream(rate, 2.0, seed);
            let bin = 5e-6;
            let win = 2e-4;
            let fast = g2_histogram(&s, bin, win).unwrap();
            let brute = brute_force_g2(&s, bin, win).unwrap();
            assert_eq!(fast.counts, brute.counts, "seed {seed}");
        }
    }

    #[test]
    fn blocked_correlator_is_exact_for_any_block_count() {
        let s = poisson_pair_stream(5.0e3, 2.0, 77);
        let bin = 5e-6;
        let win = 1e-4;
        let reference = g2_histogram(&s, bin, win).unwrap();
        for blocks in [1, 2, 3, 7, 16] {
            let blocked = g2_histogram_blocked(&s, bin, win, blocks).unwrap();
            assert_eq!(reference.counts, blocked.counts, "blocks {blocks}");
        }
    }

    #[test]
    fn reversed_channels_mirror_histogram() {
        let mut s = poisson_pair_stream(3.0e3, 1.0, 5);
        let fast = brute_force_g2(&s, 1e-5, 2e-4).unwrap();
        for e in &mut s.events {
            e.channel = match e.channel {
                Channel::A => Channel::B,
                Channel::B => Channel::A,
            };
        }
        let swapped = brute_force_g2(&s, 1e-5, 2e-4).unwrap();
        let n = fast.counts.len();
        for i in 0..n {
            assert_eq!(fast.counts[i], swapped.counts[n - 1 - i]);
        }
        assert_eq!(
            fast.counts.iter().sum::<u64>(),
            swapped.counts.iter().sum::<u64>()
        );
    }

    #[test]
    fn empty_channel_is_insufficient_data() {
        let mut s = poisson_pair_stream(1.0e3, 0.5, 3);
        s.events.retain(|e| e.channel == Channel::A);
        assert!(matches!(
            g2_histogram(&s, 1e-6, 1e-4),
            Err(CorrelationError::InsufficientData(_))
        ));
    }

    #[test]
    fn window_precondition_enforced() {
        let s = poisson_pair_stream(1.0e3, 0.5, 3);
        assert!(g2_histogram(&s, 1e-5, 5e-5).is_err());
    }

    #[test]
    fn size_guard_on_brute_force() {
        let s = poisson_pair_stream(2.0e5, 1.0, 9);
        assert!(s.events.len() > BRUTE_FORCE_MAX);
        assert!(matches!(
            brute_force_g2(&s, 1e-6, 1e-4),
            Err(CorrelationError::SizeGuard { .. })
        ));
    }

    #[test]
    fn emitter_stream_antibunches() {
        let m = nv_bulk_model();
        let d = DetectionModel::default();
        let s = simulate_cw(&m, &d, 2.0, 0.3, 29).unwrap();
        let h = g2_histogram(&s, 1e-9, 1.0e-7).unwrap();
        assert!(
            h.central_bin() < 0.1,
            "central bin {} should be near zero",
            h.central_bin()
        );
    }

    #[test]
    fn emitter_histogram_matches_analytic_g2_within_3_sigma() {
        let m = nv_bulk_model();
        let d = DetectionModel::default();
        let pump = 2.0;
        let s = simulate_cw(&m, &d, pump, 1.0, 101).unwrap();
        let bin = 1e-9;
        let h = g2_histogram(&s, bin, 5e-8).unwrap();
        let curve = analytic_g2(&m, pump).unwrap();
        let taus = h.tau_centers();
        let mut worst = 0.0f64;
        for (i, &tau) in taus.iter().enumerate() {
            let model = curve.bin_average(tau - bin / 2.0, tau + bin / 2.0);
            let sigma = (model.max(1e-3) * h.normalization).sqrt() / h.normalization;
            let z = (h.g2[i] - model).abs() / sigma;
            worst = worst.max(z);
            assert!(z < 3.0, "bin {i} tau {tau:.2e}: z = {z:.2}");
        }
        assert!(worst > 0.0);
    }

    #[test]
    fn background_mixing_raises_central_bin() {
        // g2(0) of signal + background = 1 - rho^2 for a perfect emitter.
        let m = nv_bulk_model();
        let pump = 2.0;
        let signal_rate = m.steady_count_rate(pump, 1.0);
        let rho = 0.8;
        let bg_rate = signal_rate * (1.0 - rho) / rho;
        let d = DetectionModel {
            background_rate: bg_rate,
            ..Default::default()
        };
        let s = simulate_cw(&m, &d, pump, 1.5, 55).unwrap();
        let h = g2_histogram(&s, 1e-9, 5e-8).unwrap();
        let expect = 1.0 - rho * rho;
        let sigma = h.sigma[h.n_side];
        assert!(
            (h.central_bin() - expect).abs() < 3.0 * sigma.max(0.01),
            "central {} vs {}",
            h.central_bin(),
            expect
        );
    }

    #[test]
    fn decay_histogram_photons_at_triggers() {
        let triggers: Vec<f64> = (0..100).map(|k| k as f64 * 1e-7).collect();
        let events: Vec<PhotonEvent> = triggers
            .iter()
            .map(|&t| PhotonEvent {
                time: t + 1e-12,
                channel: Channel::A,
            })
            .collect();
        let s = PhotonStream {
            events,
            triggers: Some(PulseTrain {
                period: 1e-7,
                count: 100,
            }),
            truth: TruthRecord {
                emitter: nv_bulk_model(),
                detection: DetectionModel::default(),
                excitation: Excitation::Pulsed {
                    rep_rate_hz: 1e7,
                    excitation_prob: 1.0,
                },
                duration: 1e-5,
                seed: 0,
            },
        };
        let h = decay_histogram(&s, &triggers, 1e-9).unwrap();
        assert_eq!(h.counts[0], 100);
        assert_eq!(h.counts.iter().sum::<u64>(), 100);
    }

    #[test]
    fn decay_histogram_counts_equal_span_photons() {
        let m = nv_bulk_model();
        let d = DetectionModel::default();
        let s = simulate_pulsed(&m, &d, 1.08e7, 0.9, 0.01, 31).unwrap();
        let h = decay_histogram_from_stream(&s, 1e-9).unwrap();
        let train = s.triggers.unwrap();
        let span_end = train.count as f64 * train.period;
        let in_span = s.events.iter().filter(|e| e.time < span_end && e.time >= 0.0).count();
        assert_eq!(h.counts.iter().sum::<u64>(), in_span as u64);
    }

    #[test]
    fn background_only_decay_is_flat() {
        let m = nv_bulk_model();
        let d = DetectionModel {
            efficiency: 0.0,
            background_rate: 5.0e5,
            timing_jitter_sigma: 0.0,
        };
        let s = simulate_pulsed(&m, &d, 1.0e7, 0.9, 0.05, 41).unwrap();
        let h = decay_histogram_from_stream(&s, 5e-9).unwrap();
        // Chi-square against the uniform expectation at the 1% level.
        let n: u64 = h.counts.iter().sum();
        let k = h.counts.len() as f64;
        let mu = n as f64 / k;
        let chi2: f64 = h.counts.iter().map(|&c| (c as f64 - mu).powi(2) / mu).sum();
        // 99th percentile of chi2 with ~k dof, normal approximation.
        let dof = k - 1.0;
        let bound = dof + 2.33 * (2.0 * dof).sqrt();
        assert!(chi2 < bound, "chi2 {chi2:.1} vs bound {bound:.1}");
    }

    #[test]
    fn no_triggers_is_domain_error() {
        let s = poisson_pair_stream(1e3, 0.1, 1);
        assert!(matches!(
            decay_histogram(&s, &[], 1e-9),
            Err(CorrelationError::Domain(_))
        ));
    }

    #[test]
    fn time_rescaling_preserves_normalized_g2() {
        let s = poisson_pair_stream(2.0e3, 1.0, 61);
        let h1 = g2_histogram(&s, 1e-5, 2e-4).unwrap();
        let c = 3.0;
        let mut scaled = s.clone();
        for e in &mut scaled.events {
            e.time *= c;
        }
        scaled.truth.duration *= c;
        let h2 = g2_histogram(&scaled, 1e-5 * c, 2e-4 * c).unwrap();
        assert_eq!(h1.counts, h2.counts);
        for (a, b) in h1.g2.iter().zip(&h2.g2) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
