//! Kinetic Monte Carlo of a three-level emitter (ground, excited,
//! metastable) under CW or pulsed excitation, plus the rate-equation
//! autocorrelation used as the statistical oracle.
//!
//! Every random stream is keyed by (master seed, stream id) through a
//! counter-based generator, so trajectories are reproducible bit-for-bit
//! and independent streams can be generated in any order and merged
//! deterministically (stable by time, ties broken by stream id).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmitterError {
    #[error("invalid emitter model: {0}")]
    InvalidModel(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Rates of the three-level system, 1/s. The Purcell multiplier scales
/// the radiative channel only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterModel {
    pub radiative_rate: f64,
    pub nonradiative_rate: f64,
    pub shelving_rate: f64,
    pub deshelving_rate: f64,
    pub pump_rate_per_mw: f64,
    pub purcell_factor: f64,
}

impl EmitterModel {
    pub fn validate(&self) -> Result<(), EmitterError> {
        let rates = [
            ("radiative_rate", self.radiative_rate),
            ("nonradiative_rate", self.nonradiative_rate),
            ("shelving_rate", self.shelving_rate),
            ("deshelving_rate", self.deshelving_rate),
            ("pump_rate_per_mw", self.pump_rate_per_mw),
            ("purcell_factor", self.purcell_factor),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(EmitterError::InvalidModel(format!(
                    "{name} must be >= 0 and finite, got {v}"
                )));
            }
        }
        if self.radiative_rate <= 0.0 {
            return Err(EmitterError::InvalidModel(
                "radiative_rate must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Effective radiative rate including the Purcell multiplier.
    pub fn radiative_eff(&self) -> f64 {
        self.purcell_factor * self.radiative_rate
    }

    /// Total excited-state decay rate (all channels).
    pub fn excited_total(&self) -> f64 {
        self.radiative_eff() + self.nonradiative_rate + self.shelving_rate
    }

    /// Excited-state lifetime.
    pub fn lifetime(&self) -> f64 {
        1.0 / self.excited_total()
    }

    pub fn with_purcell(mut self, f: f64) -> Self {
        self.purcell_factor = f;
        self
    }

    /// Steady-state excited population under pump rate `r` (1/s).
    pub fn excited_steady_state(&self, r: f64) -> f64 {
        let ke = self.excited_total();
        let kisc = self.shelving_rate;
        let km = self.deshelving_rate;
        if r <= 0.0 {
            return 0.0;
        }
        // From the 3x3 rate matrix null space.
        let shelf = if km > 0.0 { kisc / km } else { 0.0 };
        r / (r * (1.0 + shelf) + ke)
    }

    /// Detected steady-state count rate at pump power `pump_mw` and
    /// detection efficiency `eta`.
    pub fn steady_count_rate(&self, pump_mw: f64, eta: f64) -> f64 {
        let r = pump_mw * self.pump_rate_per_mw;
        eta * self.radiative_eff() * self.excited_steady_state(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    pub efficiency: f64,
    pub background_rate: f64,
    pub timing_jitter_sigma: f64,
}

impl Default for DetectionModel {
    fn default() -> Self {
        DetectionModel {
            efficiency: 1.0,
            background_rate: 0.0,
            timing_jitter_sigma: 0.0,
        }
    }
}

impl DetectionModel {
    pub fn validate(&self) -> Result<(), EmitterError> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(EmitterError::InvalidModel(format!(
                "efficiency must be in [0,1], got {}",
                self.efficiency
            )));
        }
        if self.background_rate < 0.0 || self.timing_jitter_sigma < 0.0 {
            return Err(EmitterError::InvalidModel(
                "background_rate and timing_jitter_sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    A,
    B,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhotonEvent {
    pub time: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Excitation {
    Cw { pump_mw: f64 },
    Pulsed { rep_rate_hz: f64, excitation_prob: f64 },
}

/// Periodic pulse train recorded with pulsed streams.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PulseTrain {
    pub period: f64,
    pub count: usize,
}

impl PulseTrain {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(move |k| k as f64 * self.period)
    }
}

/// Ground-truth record carried with each synthetic stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub emitter: EmitterModel,
    pub detection: DetectionModel,
    pub excitation: Excitation,
    pub duration: f64,
    pub seed: u64,
}

/// Time-ordered detection events with channel tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhotonStream {
    pub events: Vec<PhotonEvent>,
    pub triggers: Option<PulseTrain>,
    pub truth: TruthRecord,
}

impl PhotonStream {
    pub fn times_by_channel(&self, ch: Channel) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.channel == ch)
            .map(|e| e.time)
            .collect()
    }

    pub fn duration(&self) -> f64 {
        self.truth.duration
    }

    /// Merge two streams (e.g. signal plus an independent emitter),
    /// keeping event order deterministic.
    pub fn merged_with(mut self, other: &PhotonStream) -> PhotonStream {
        self.events.extend_from_slice(&other.events);
        self.events.sort_by(|a, b| a.time.total_cmp(&b.time));
        self
    }
}

fn stream_rng(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream_id.to_le_bytes());
    key[16] = 0x9e;
    key[17] = 0x37;
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    Ground,
    Excited,
    Metastable,
}

fn exp_wait(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen::<f64>();
    let u = if u <= 0.0 { f64::MIN_POSITIVE } else { u };
    -u.ln() / rate
}

struct Detector<'a> {
    det: &'a DetectionModel,
    normal: Option<Normal<f64>>,
}

impl<'a> Detector<'a> {
    fn new(det: &'a DetectionModel) -> Self {
        let normal = if det.timing_jitter_sigma > 0.0 {
            Some(Normal::new(0.0, det.timing_jitter_sigma).unwrap())
        } else {
            None
        };
        Detector { det, normal }
    }

    /// Detection filter: efficiency thinning, jitter, splitter coin.
    fn register(&self, rng: &mut ChaCha8Rng, t: f64, out: &mut Vec<PhotonEvent>) {
        if self.det.efficiency < 1.0 && rng.gen::<f64>() >= self.det.efficiency {
            return;
        }
        let t = match &self.normal {
            Some(n) => t + n.sample(rng),
            None => t,
        };
        let channel = if rng.gen::<bool>() { Channel::A } else { Channel::B };
        out.push(PhotonEvent { time: t, channel });
    }
}

fn background_events(
    det: &DetectionModel,
    duration: f64,
    seed: u64,
) -> Vec<PhotonEvent> {
    if det.background_rate <= 0.0 {
        return Vec::new();
    }
    let mut rng = stream_rng(seed, 1);
    let mean = det.background_rate * duration;
    let n = Poisson::new(mean)
        .map(|p| p.sample(&mut rng) as usize)
        .unwrap_or(0);
    // Background photons always register; only jitter applies.
    let bg_det = DetectionModel {
        efficiency: 1.0,
        ..*det
    };
    let detector = Detector::new(&bg_det);
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen::<f64>() * duration;
        detector.register(&mut rng, t, &mut events);
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    events
}

fn finish_stream(
    mut signal: Vec<PhotonEvent>,
    background: Vec<PhotonEvent>,
    truth: TruthRecord,
    triggers: Option<PulseTrain>,
) -> PhotonStream {
    signal.sort_by(|a, b| a.time.total_cmp(&b.time));
    // Deterministic merge: signal stream wins ties.
    let mut events = Vec::with_capacity(signal.len() + background.len());
    let mut bi = background.into_iter().peekable();
    for s in signal {
        while let Some(b) = bi.peek() {
            if b.time < s.time {
                let b = *b;
                bi.next();
                events.push(b);
            } else {
                break;
            }
        }
        events.push(s);
    }
    events.extend(bi);
    PhotonStream {
        events,
        triggers,
        truth,
    }
}

/// Exact-event kinetic Monte Carlo under continuous pumping.
pub fn simulate_cw(
    model: &EmitterModel,
    det: &DetectionModel,
    pump_mw: f64,
    duration: f64,
    seed: u64,
) -> Result<PhotonStream, EmitterError> {
    model.validate()?;
    det.validate()?;
    if !(duration > 0.0) {
        return Err(EmitterError::Domain(format!(
            "duration must be > 0, got {duration}"
        )));
    }
    if pump_mw < 0.0 {
        return Err(EmitterError::Domain(format!(
            "pump power must be >= 0, got {pump_mw}"
        )));
    }
    let r = pump_mw * model.pump_rate_per_mw;
    let expected = model.steady_count_rate(pump_mw, det.efficiency) * duration;
    if expected < 1e4 {
        log::warn!(
            "cw stream expects only {expected:.0} events; statistics will be weak below 1e4"
        );
    }

    let k_rad = model.radiative_eff();
    let k_e = model.excited_total();
    let k_m = model.deshelving_rate;
    let mut rng = stream_rng(seed, 0);
    let detector = Detector::new(det);
    let mut events = Vec::new();
    let mut t = 0.0f64;
    let mut state = State::Ground;
    loop {
        match state {
            State::Ground => {
                if r <= 0.0 {
                    break;
                }
                t += exp_wait(&mut rng, r);
                if t > duration {
                    break;
                }
                state = State::Excited;
            }
            State::Excited => {
                t += exp_wait(&mut rng, k_e);
                if t > duration {
                    break;
                }
                let u = rng.gen::<f64>() * k_e;
                if u < k_rad {
                    detector.register(&mut rng, t, &mut events);
                    state = State::Ground;
                } else if u < k_rad + model.nonradiative_rate {
                    state = State::Ground;
                } else {
                    state = State::Metastable;
                }
            }
            State::Metastable => {
                if k_m <= 0.0 {
                    break;
                }
                t += exp_wait(&mut rng, k_m);
                if t > duration {
                    break;
                }
                state = State::Ground;
            }
        }
    }

    let background = background_events(det, duration, seed);
    Ok(finish_stream(
        events,
        background,
        TruthRecord {
            emitter: *model,
            detection: *det,
            excitation: Excitation::Cw { pump_mw },
            duration,
            seed,
        },
        None,
    ))
}

/// Pulsed excitation: instantaneous promotion to the excited state with
/// probability `excitation_prob` at each trigger, free decay in between.
/// Trigger times are recorded for TCSPC histogramming.
pub fn simulate_pulsed(
    model: &EmitterModel,
    det: &DetectionModel,
    rep_rate_hz: f64,
    excitation_prob: f64,
    duration: f64,
    seed: u64,
) -> Result<PhotonStream, EmitterError> {
    model.validate()?;
    det.validate()?;
    if !(duration > 0.0) {
        return Err(EmitterError::Domain(format!(
            "duration must be > 0, got {duration}"
        )));
    }
    if !(rep_rate_hz > 0.0) {
        return Err(EmitterError::Domain("rep_rate must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&excitation_prob) {
        return Err(EmitterError::Domain(format!(
            "excitation_prob must be in [0,1], got {excitation_prob}"
        )));
    }
    if rep_rate_hz * model.lifetime() >= 0.5 {
        log::warn!(
            "pulse period {:.2e}s is under two lifetimes ({:.2e}s); decays will pile up",
            1.0 / rep_rate_hz,
            model.lifetime()
        );
    }

    let period = 1.0 / rep_rate_hz;
    let count = (duration / period).floor() as usize;
    let k_rad = model.radiative_eff();
    let k_e = model.excited_total();
    let k_m = model.deshelving_rate;
    let mut rng = stream_rng(seed, 0);
    let detector = Detector::new(det);
    let mut events = Vec::new();
    let mut state = State::Ground;
    let mut t = 0.0f64;
    for k in 0..count {
        let t_pulse = k as f64 * period;
        if t < t_pulse {
            t = t_pulse;
        }
        if state == State::Ground && excitation_prob > 0.0 && rng.gen::<f64>() < excitation_prob {
            state = State::Excited;
        }
        // Free decay until the next trigger (or end of run).
        let t_next = (k + 1) as f64 * period;
        loop {
            match state {
                State::Ground => break,
                State::Excited => {
                    let dt = exp_wait(&mut rng, k_e);
                    if t + dt >= t_next {
                        // Transition lands after the window: advance and
                        // resume in the next window with the same state.
                        if t + dt >= duration {
                            t = duration;
                        }
                        // Memorylessness lets us redraw next window.
                        break;
                    }
                    t += dt;
                    let u = rng.gen::<f64>() * k_e;
                    if u < k_rad {
                        detector.register(&mut rng, t, &mut events);
                        state = State::Ground;
                    } else if u < k_rad + model.nonradiative_rate {
                        state = State::Ground;
                    } else {
                        state = State::Metastable;
                    }
                }
                State::Metastable => {
                    if k_m <= 0.0 {
                        break;
                    }
                    let dt = exp_wait(&mut rng, k_m);
                    if t + dt >= t_next {
                        break;
                    }
                    t += dt;
                    state = State::Ground;
                }
            }
        }
    }

    let background = background_events(det, duration, seed);
    Ok(finish_stream(
        events,
        background,
        TruthRecord {
            emitter: *model,
            detection: *det,
            excitation: Excitation::Pulsed {
                rep_rate_hz,
                excitation_prob,
            },
            duration,
            seed,
        },
        Some(PulseTrain { period, count }),
    ))
}

/// Rate-equation autocorrelation g2(tau) = p_e(tau | ground at 0) / p_e(inf)
/// in the closed form 1 - (1+a) e^{-|tau|/tau1} + a e^{-|tau|/tau2}.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct G2Curve {
    pub tau1: f64,
    pub tau2: f64,
    pub bunching_amplitude: f64,
    pub excited_steady_state: f64,
    /// Set when the pump is zero and the two-level limit form is returned.
    pub degenerate: bool,
}

impl G2Curve {
    pub fn eval(&self, tau: f64) -> f64 {
        let t = tau.abs();
        let a = self.bunching_amplitude;
        1.0 - (1.0 + a) * (-t / self.tau1).exp() + a * (-t / self.tau2).exp()
    }

    /// Average of the curve over [lo, hi] (analytic integral of the
    /// exponentials); the interval may straddle zero.
    pub fn bin_average(&self, lo: f64, hi: f64) -> f64 {
        assert!(hi > lo);
        if lo < 0.0 && hi > 0.0 {
            let w1 = -lo / (hi - lo);
            let w2 = hi / (hi - lo);
            return w1 * self.bin_average(lo, 0.0) + w2 * self.bin_average(0.0, hi);
        }
        let (lo, hi) = if hi <= 0.0 { (-hi, -lo) } else { (lo, hi) };
        let a = self.bunching_amplitude;
        let span = hi - lo;
        let int_exp = |tau: f64| -> f64 {
            // integral of e^{-t/tau} over [lo, hi]
            tau * ((-lo / tau).exp() - (-hi / tau).exp())
        };
        1.0 - (1.0 + a) * int_exp(self.tau1) / span + a * int_exp(self.tau2) / span
    }
}

/// Eigen-decomposition of the 3x3 rate matrix for the closed-form g2.
/// A zero pump yields the defined two-level limit with `degenerate` set.
pub fn analytic_g2(model: &EmitterModel, pump_mw: f64) -> Result<G2Curve, EmitterError> {
    model.validate()?;
    let r = pump_mw * model.pump_rate_per_mw;
    let ke = model.excited_total();
    let kg = model.radiative_eff() + model.nonradiative_rate; // excited -> ground
    let kisc = model.shelving_rate;
    let km = model.deshelving_rate;

    if r <= 0.0 {
        return Ok(G2Curve {
            tau1: 1.0 / ke,
            tau2: f64::INFINITY,
            bunching_amplitude: 0.0,
            excited_steady_state: 0.0,
            degenerate: true,
        });
    }

    // M = [[-r, kg, km], [r, -ke, 0], [0, kisc, -km]]; eigenvalues are 0
    // and the roots of l^2 - s l + q with s = tr(M), q = sum of principal
    // 2x2 minors.
    let s = -(r + ke + km);
    let q = (r * ke - r * kg) + r * km + ke * km;
    let disc = s * s - 4.0 * q;
    if disc <= 0.0 {
        // Oscillatory or critically damped: not reachable with physical
        // NV parameters; report the two-level form.
        return Ok(G2Curve {
            tau1: 1.0 / ke,
            tau2: f64::INFINITY,
            bunching_amplitude: 0.0,
            excited_steady_state: model.excited_steady_state(r),
            degenerate: true,
        });
    }
    let root = disc.sqrt();
    let l1 = 0.5 * (s - root); // faster (more negative)
    let l2 = 0.5 * (s + root);

    let p_inf = model.excited_steady_state(r);
    // p_e(t) = p_inf + c1 e^{l1 t} + c2 e^{l2 t}, p_e(0) = 0, p_e'(0) = r.
    // c1 + c2 = -p_inf; c1 l1 + c2 l2 = r.
    let c2 = (r + p_inf * l1) / (l2 - l1);
    let c1 = -p_inf - c2;
    let a = c2 / p_inf;
    debug_assert!((c1 / p_inf + 1.0 + a).abs() < 1e-9);
    Ok(G2Curve {
        tau1: -1.0 / l1,
        tau2: -1.0 / l2,
        bunching_amplitude: a,
        excited_steady_state: p_inf,
        degenerate: false,
    })
}

/// A bulk-like NV parameter set: 16.7 ns lifetime with a weak shelving
/// channel and a ~300 ns metastable state.
pub fn nv_bulk_model() -> EmitterModel {
    EmitterModel {
        radiative_rate: 5.4880e7,
        nonradiative_rate: 0.0,
        shelving_rate: 5.0e6,
        deshelving_rate: 3.3e6,
        pump_rate_per_mw: 1.5e7,
        purcell_factor: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_level(tau_ns: f64) -> EmitterModel {
        EmitterModel {
            radiative_rate: 1.0 / (tau_ns * 1e-9),
            nonradiative_rate: 0.0,
            shelving_rate: 0.0,
            deshelving_rate: 0.0,
            pump_rate_per_mw: 5.0e7,
            purcell_factor: 1.0,
        }
    }

    #[test]
    fn lifetime_matches_rates() {
        let m = nv_bulk_model();
        let tau = m.lifetime();
        assert!((tau - 16.7e-9).abs() / 16.7e-9 < 1e-3, "tau = {tau}");
    }

    #[test]
    fn seed_determinism_bitwise() {
        let m = nv_bulk_model();
        let d = DetectionModel::default();
        let a = simulate_cw(&m, &d, 1.0, 1e-3, 42).unwrap();
        let b = simulate_cw(&m, &d, 1.0, 1e-3, 42).unwrap();
        assert_eq!(a.events.len(), b.events.len());
        for (x, y) in a.events.iter().zip(&b.events) {
            assert_eq!(x.time.to_bits(), y.time.to_bits());
            assert_eq!(x.channel, y.channel);
        }
        let c = simulate_cw(&m, &d, 1.0, 1e-3, 43).unwrap();
        assert_ne!(
            a.events.first().map(|e| e.time.to_bits()),
            c.events.first().map(|e| e.time.to_bits())
        );
    }

    #[test]
    fn two_level_saturation_rate() {
        // eta = 1, no background, pump >> 1/tau: rate -> (1/tau) * R/(R + 1/tau).
        let m = two_level(10.0);
        let d = DetectionModel::default();
        let pump_mw = 40.0; // R = 2e9 >> 1e8
        let duration = 5e-3;
        let s = simulate_cw(&m, &d, pump_mw, duration, 7).unwrap();
        let r = pump_mw * m.pump_rate_per_mw;
        let k = m.excited_total();
        let expected = k * r / (r + k) * duration;
        let n = s.events.len() as f64;
        let sigma = expected.sqrt();
        assert!(
            (n - expected).abs() < 3.0 * sigma,
            "n {n} vs expected {expected} +- {sigma}"
        );
    }

    #[test]
    fn zero_efficiency_leaves_only_background() {
        let m = nv_bulk_model();
        let d = DetectionModel {
            efficiency: 0.0,
            background_rate: 2.0e5,
            timing_jitter_sigma: 0.0,
        };
        let duration = 0.05;
        let s = simulate_cw(&m, &d, 1.0, duration, 11).unwrap();
        let n = s.events.len() as f64;
        let mean = d.background_rate * duration;
        assert!((n - mean).abs() < 3.0 * mean.sqrt());
        // Poisson dispersion: split into 50 blocks, index of dispersion ~ 1.
        let blocks = 50;
        let mut counts = vec![0f64; blocks];
        for e in &s.events {
            let b = ((e.time / duration) * blocks as f64) as usize;
            counts[b.min(blocks - 1)] += 1.0;
        }
        let mu = counts.iter().sum::<f64>() / blocks as f64;
        let var = counts.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / (blocks - 1) as f64;
        let iod = var / mu;
        // Var(IoD) ~ 2/(blocks-1) under Poisson.
        let sigma = (2.0 / (blocks as f64 - 1.0)).sqrt();
        assert!((iod - 1.0).abs() < 3.0 * sigma, "index of dispersion {iod}");
    }

    #[test]
    fn three_level_rate_matches_steady_state() {
        let m = nv_bulk_model();
        let d = DetectionModel::default();
        let pump = 2.0;
        let duration = 0.02;
        let s = simulate_cw(&m, &d, pump, duration, 5).unwrap();
        let expected = m.steady_count_rate(pump, 1.0) * duration;
        let n = s.events.len() as f64;
        assert!(
            (n - expected).abs() < 3.0 * expected.sqrt(),
            "n {n} vs {expected}"
        );
    }

    #[test]
    fn zero_pump_gives_empty_stream() {
        let m = nv_bulk_model();
        let d = DetectionModel::default();
        let s = simulate_cw(&m, &d, 0.0, 1.0, 3).unwrap();
        assert!(s.events.is_empty());
    }

    #[test]
    fn bad_duration_is_domain_error() {
        let m = nv_bulk_model();
        let d = DetectionModel::default();
        assert!(simulate_cw(&m, &d, 1.0, 0.0, 3).is_err());
        assert!(simulate_pulsed(&m, &d, 1e7, 0.5, -1.0, 3).is_err());
        assert!(simulate_pulsed(&m, &d, 1e7, 1.5, 1.0, 3).is_err());
    }

    #[test]
    fn pulsed_zero_probability_only_background() {
        let m = nv_bulk_model();
        let d = DetectionModel {
            background_rate: 1e4,
            ..Default::default()
        };
        let s = simulate_pulsed(&m, &d, 1.08e7, 0.0, 0.01, 9).unwrap();
        let mean = d.background_rate * 0.01;
        assert!((s.events.len() as f64 - mean).abs() < 3.0 * mean.sqrt());
        assert!(s.triggers.is_some());
    }

    #[test]
    fn pulsed_two_level_at_most_one_photon_per_pulse() {
        let m = two_level(16.7);
        let d = DetectionModel::default();
        let s = simulate_pulsed(&m, &d, 1.08e7, 1.0, 0.005, 13).unwrap();
        let train = s.triggers.unwrap();
        let mut per_pulse = vec![0usize; train.count];
        for e in &s.events {
            let k = (e.time / train.period).floor() as usize;
            per_pulse[k.min(train.count - 1)] += 1;
        }
        assert!(per_pulse.iter().all(|&c| c <= 1));
        // With p = 1 and eta = 1 nearly every pulse yields one photon.
        let frac = s.events.len() as f64 / train.count as f64;
        assert!(frac > 0.99, "photon fraction {frac}");
    }

    #[test]
    fn pulsed_decay_recovers_lifetime() {
        // Histogram delays after triggers; the log-slope gives tau.
        let tau_ns = 5.65;
        let m = two_level(tau_ns);
        let d = DetectionModel::default();
        let s = simulate_pulsed(&m, &d, 1.08e7, 1.0, 0.02, 17).unwrap();
        let train = s.triggers.unwrap();
        let bin = 1e-9;
        let nbins = 40;
        let mut hist = vec![0f64; nbins];
        for e in &s.events {
            let k = (e.time / train.period).floor();
            let delay = e.time - k * train.period;
            let b = (delay / bin) as usize;
            if b < nbins {
                hist[b] += 1.0;
            }
        }
        // Least-squares slope of ln(counts) over well-populated bins.
        let pts: Vec<(f64, f64)> = hist
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 25.0)
            .map(|(i, &c)| ((i as f64 + 0.5) * bin, c.ln()))
            .collect();
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let tau_fit = -1.0 / slope;
        let rel = (tau_fit - tau_ns * 1e-9).abs() / (tau_ns * 1e-9);
        assert!(rel < 0.02, "tau {tau_fit:.3e} vs {} ({:.1}%)", tau_ns * 1e-9, rel * 100.0);
    }

    #[test]
    fn analytic_g2_boundary_values() {
        let m = nv_bulk_model();
        let g = analytic_g2(&m, 1.0).unwrap();
        assert!(g.eval(0.0).abs() < 1e-12, "g2(0) = {}", g.eval(0.0));
        assert!((g.eval(1.0) - 1.0).abs() < 1e-12);
        assert!(!g.degenerate);
    }

    #[test]
    fn analytic_g2_bunching_shoulder_at_strong_pump() {
        let m = nv_bulk_model();
        let g = analytic_g2(&m, 10.0).unwrap();
        // Scan the matrix-exponential-derived closed form on a grid.
        let mut max = 0.0f64;
        for i in 1..4000 {
            let tau = i as f64 * 1e-9;
            max = max.max(g.eval(tau));
        }
        assert!(max > 1.0, "no bunching shoulder, max {max}");
    }

    #[test]
    fn analytic_g2_zero_pump_limit() {
        let m = nv_bulk_model();
        let g = analytic_g2(&m, 0.0).unwrap();
        assert!(g.degenerate);
        let tau = m.lifetime();
        assert!((g.eval(tau) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn purcell_rescales_lifetime_exactly() {
        let m = nv_bulk_model();
        for x in [0.5, 2.0, 6.6] {
            let mx = m.with_purcell(x);
            let predicted =
                1.0 / (x * m.radiative_rate + m.nonradiative_rate + m.shelving_rate);
            assert!((mx.lifetime() - predicted).abs() / predicted < 1e-12);
        }
    }

    #[test]
    fn bin_average_matches_quadrature() {
        let m = nv_bulk_model();
        let g = analytic_g2(&m, 3.0).unwrap();
        for (lo, hi) in [(0.0, 2e-9), (5e-9, 8e-9), (-1e-9, 1e-9), (-4e-9, -2e-9)] {
            let n = 20000;
            let mut s = 0.0;
            for i in 0..n {
                let t = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
                s += g.eval(t);
            }
            let quad = s / n as f64;
            let ana = g.bin_average(lo, hi);
            assert!(
                (quad - ana).abs() < 1e-6,
                "bin [{lo},{hi}]: {ana} vs {quad}"
            );
        }
    }
}
