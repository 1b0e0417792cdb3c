//! Real-to-virtual (R2V) and virtual-to-real (V2R) data links.
//!
//! R2V carries GTS pose samples into the virtual domain through three
//! sampled stages (ingest, simulator advancement, virtual sensing) and never
//! drops. V2R carries SUT commands to the actuator through the programmable
//! perturbation injector (fixed delay, jitter, loss) followed by the base
//! transport latency.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::timebase::{ms_to_ns, TimestampNs};

#[derive(Debug, Error, PartialEq)]
pub enum LinkConfigError {
    #[error("{0}: parameters must be finite")]
    NonFinite(&'static str),
    #[error("{0}: negative value")]
    Negative(&'static str),
    #[error("truncation bounds out of order (min {min} > max {max})")]
    Bounds { min: f64, max: f64 },
    #[error("loss probability {0} outside [0, 1]")]
    LossProbability(f64),
    #[error("sample period must be positive")]
    SamplePeriod,
}

/// Latency distribution of one pipeline stage, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageLatencyModel {
    Constant { value_ms: f64 },
    /// Normal distribution resampled until it falls in `[min_ms, max_ms]`.
    GaussianTruncated { mean_ms: f64, sigma_ms: f64, min_ms: f64, max_ms: Option<f64> },
    /// `exp(N(mu, sigma))` with `mu`, `sigma` in log-milliseconds.
    Lognormal { mu: f64, sigma: f64 },
}

impl StageLatencyModel {
    pub fn constant(value_ms: f64) -> Self {
        StageLatencyModel::Constant { value_ms }
    }

    pub fn gaussian(mean_ms: f64, sigma_ms: f64) -> Self {
        StageLatencyModel::GaussianTruncated { mean_ms, sigma_ms, min_ms: 0.0, max_ms: None }
    }

    /// Lognormal with the given arithmetic mean and standard deviation.
    pub fn lognormal_from_moments(mean_ms: f64, std_ms: f64) -> Self {
        let s2 = (1.0 + (std_ms / mean_ms).powi(2)).ln();
        StageLatencyModel::Lognormal { mu: mean_ms.ln() - s2 / 2.0, sigma: s2.sqrt() }
    }

    pub fn validate(&self) -> Result<(), LinkConfigError> {
        match *self {
            StageLatencyModel::Constant { value_ms } => {
                if !value_ms.is_finite() {
                    return Err(LinkConfigError::NonFinite("constant"));
                }
                if value_ms < 0.0 {
                    return Err(LinkConfigError::Negative("constant"));
                }
            }
            StageLatencyModel::GaussianTruncated { mean_ms, sigma_ms, min_ms, max_ms } => {
                if !(mean_ms.is_finite() && sigma_ms.is_finite() && min_ms.is_finite()) {
                    return Err(LinkConfigError::NonFinite("gaussian_truncated"));
                }
                if sigma_ms < 0.0 || min_ms < 0.0 {
                    return Err(LinkConfigError::Negative("gaussian_truncated"));
                }
                if let Some(max) = max_ms {
                    if !max.is_finite() {
                        return Err(LinkConfigError::NonFinite("gaussian_truncated"));
                    }
                    if max < min_ms {
                        return Err(LinkConfigError::Bounds { min: min_ms, max });
                    }
                }
            }
            StageLatencyModel::Lognormal { mu, sigma } => {
                if !(mu.is_finite() && sigma.is_finite()) {
                    return Err(LinkConfigError::NonFinite("lognormal"));
                }
                if sigma < 0.0 {
                    return Err(LinkConfigError::Negative("lognormal"));
                }
            }
        }
        Ok(())
    }

    /// Draw one duration in milliseconds; always `>= 0`.
    pub fn sample_ms<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            StageLatencyModel::Constant { value_ms } => value_ms,
            StageLatencyModel::GaussianTruncated { mean_ms, sigma_ms, min_ms, max_ms } => {
                let hi = max_ms.unwrap_or(f64::INFINITY);
                if sigma_ms == 0.0 {
                    return mean_ms.clamp(min_ms, hi);
                }
                let n = Normal::new(mean_ms, sigma_ms).expect("validated sigma");
                for _ in 0..1000 {
                    let x = n.sample(rng);
                    if x >= min_ms && x <= hi {
                        return x;
                    }
                }
                mean_ms.clamp(min_ms, hi)
            }
            StageLatencyModel::Lognormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated sigma").sample(rng)
            }
        }
    }

    pub fn sample_ns<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        ms_to_ns(self.sample_ms(rng))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct R2vConfig {
    pub ingest: StageLatencyModel,
    pub adv: StageLatencyModel,
    pub sense: StageLatencyModel,
    /// GTS sample period.
    pub sample_period_ms: f64,
}

impl R2vConfig {
    /// Stage distributions matched to the characterized platform: ingest and
    /// sense near-Gaussian, advancement long-tailed.
    pub fn characterized() -> Self {
        Self {
            ingest: StageLatencyModel::gaussian(0.26, 0.11),
            adv: StageLatencyModel::lognormal_from_moments(28.68, 23.22),
            sense: StageLatencyModel::gaussian(7.64, 2.66),
            sample_period_ms: 20.0,
        }
    }

    pub fn constant(ingest: f64, adv: f64, sense: f64) -> Self {
        Self {
            ingest: StageLatencyModel::constant(ingest),
            adv: StageLatencyModel::constant(adv),
            sense: StageLatencyModel::constant(sense),
            sample_period_ms: 20.0,
        }
    }

    pub fn validate(&self) -> Result<(), LinkConfigError> {
        self.ingest.validate()?;
        self.adv.validate()?;
        self.sense.validate()?;
        if !(self.sample_period_ms.is_finite() && self.sample_period_ms > 0.0) {
            return Err(LinkConfigError::SamplePeriod);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub fixed_delay_ms: f64,
    pub jitter: Option<StageLatencyModel>,
    pub loss_probability: f64,
    #[serde(default)]
    pub reorder_allowed: bool,
}

impl PerturbationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn delay(fixed_delay_ms: f64) -> Self {
        Self { fixed_delay_ms, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LinkConfigError> {
        if !self.fixed_delay_ms.is_finite() {
            return Err(LinkConfigError::NonFinite("fixed_delay_ms"));
        }
        if self.fixed_delay_ms < 0.0 {
            return Err(LinkConfigError::Negative("fixed_delay_ms"));
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(LinkConfigError::LossProbability(self.loss_probability));
        }
        if let Some(j) = &self.jitter {
            j.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct V2rConfig {
    pub base_latency: StageLatencyModel,
    pub perturbation: PerturbationConfig,
}

impl V2rConfig {
    pub fn characterized() -> Self {
        Self { base_latency: StageLatencyModel::gaussian(8.58, 1.2), perturbation: PerturbationConfig::none() }
    }

    pub fn validate(&self) -> Result<(), LinkConfigError> {
        self.base_latency.validate()?;
        self.perturbation.validate()
    }
}

/// Stage boundary times of one R2V transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct R2vSchedule {
    pub ingest_start: TimestampNs,
    pub ingest_done: TimestampNs,
    pub adv_done: TimestampNs,
    pub sense_done: TimestampNs,
}

impl R2vSchedule {
    pub fn delivery(&self) -> TimestampNs {
        self.sense_done
    }
}

#[derive(Debug, Clone)]
pub struct R2vLink {
    cfg: R2vConfig,
    ingest: RngStream,
    adv: RngStream,
    sense: RngStream,
}

impl R2vLink {
    pub fn new(cfg: R2vConfig, seed: u64) -> Result<Self, LinkConfigError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            ingest: RngStream::new(seed, "r2v.ingest"),
            adv: RngStream::new(seed, "r2v.adv"),
            sense: RngStream::new(seed, "r2v.sense"),
        })
    }

    pub fn config(&self) -> &R2vConfig {
        &self.cfg
    }

    pub fn transmit(&mut self, t_now: TimestampNs) -> R2vSchedule {
        let ingest_done = t_now + self.cfg.ingest.sample_ns(&mut self.ingest);
        let adv_done = ingest_done + self.cfg.adv.sample_ns(&mut self.adv);
        let sense_done = adv_done + self.cfg.sense.sample_ns(&mut self.sense);
        R2vSchedule { ingest_start: t_now, ingest_done, adv_done, sense_done }
    }
}

/// Outcome of the perturbation stage for one command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbed {
    Deliver { t: TimestampNs, fixed_ns: u64, jitter_ns: u64, fifo_wait_ns: u64 },
    Drop,
}

#[derive(Debug, Clone)]
pub struct PerturbationInjector {
    cfg: PerturbationConfig,
    loss: RngStream,
    jitter: RngStream,
    last_out: TimestampNs,
}

impl PerturbationInjector {
    pub fn new(cfg: PerturbationConfig, seed: u64) -> Result<Self, LinkConfigError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            loss: RngStream::new(seed, "perturb.loss"),
            jitter: RngStream::new(seed, "perturb.jitter"),
            last_out: TimestampNs::ZERO,
        })
    }

    pub fn config(&self) -> &PerturbationConfig {
        &self.cfg
    }

    pub fn perturb(&mut self, t_now: TimestampNs) -> Perturbed {
        // One loss draw per command regardless of the configured probability
        // keeps the jitter stream aligned across loss settings.
        let u: f64 = self.loss.random();
        let jitter_ns = self.cfg.jitter.as_ref().map_or(0, |j| j.sample_ns(&mut self.jitter));
        if u < self.cfg.loss_probability {
            return Perturbed::Drop;
        }
        let fixed_ns = ms_to_ns(self.cfg.fixed_delay_ms);
        let mut t = t_now + fixed_ns + jitter_ns;
        let mut fifo_wait_ns = 0;
        if !self.cfg.reorder_allowed && t < self.last_out {
            fifo_wait_ns = self.last_out.0 - t.0;
            t = self.last_out;
        }
        self.last_out = self.last_out.max(t);
        Perturbed::Deliver { t, fixed_ns, jitter_ns, fifo_wait_ns }
    }
}

/// Timing of one V2R transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum V2rOutcome {
    Delivered {
        perturb_in: TimestampNs,
        perturb_out: TimestampNs,
        deliver: TimestampNs,
        fixed_ns: u64,
        jitter_ns: u64,
        base_ns: u64,
        /// Hold time added to keep delivery order equal to send order.
        fifo_wait_ns: u64,
    },
    Dropped { perturb_in: TimestampNs },
}

/// Delivery accounting for the conservation check.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
pub struct V2rLink {
    base: StageLatencyModel,
    base_rng: RngStream,
    injector: PerturbationInjector,
    last_deliver: TimestampNs,
    counters: LinkCounters,
}

impl V2rLink {
    pub fn new(cfg: V2rConfig, seed: u64) -> Result<Self, LinkConfigError> {
        cfg.validate()?;
        Ok(Self {
            base: cfg.base_latency,
            base_rng: RngStream::new(seed, "v2r.base"),
            injector: PerturbationInjector::new(cfg.perturbation, seed)?,
            last_deliver: TimestampNs::ZERO,
            counters: LinkCounters::default(),
        })
    }

    pub fn counters(&self) -> LinkCounters {
        self.counters
    }

    /// Send a command entering the link at `t_now`.
    pub fn transmit(&mut self, t_now: TimestampNs) -> V2rOutcome {
        self.counters.sent += 1;
        let base_ns = self.base.sample_ns(&mut self.base_rng);
        match self.injector.perturb(t_now) {
            Perturbed::Drop => {
                self.counters.dropped += 1;
                V2rOutcome::Dropped { perturb_in: t_now }
            }
            Perturbed::Deliver { t, fixed_ns, jitter_ns, mut fifo_wait_ns } => {
                let mut deliver = t + base_ns;
                if !self.injector.cfg.reorder_allowed && deliver < self.last_deliver {
                    fifo_wait_ns += self.last_deliver.0 - deliver.0;
                    deliver = self.last_deliver;
                }
                self.last_deliver = self.last_deliver.max(deliver);
                self.counters.delivered += 1;
                V2rOutcome::Delivered {
                    perturb_in: t_now,
                    perturb_out: t,
                    deliver,
                    fixed_ns,
                    jitter_ns,
                    base_ns,
                    fifo_wait_ns,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_cv(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt() / m)
    }

    #[test]
    fn constant_r2v_reproduces_mean_chain() {
        let mut link = R2vLink::new(R2vConfig::constant(0.26, 28.68, 7.64), 1).unwrap();
        let s = link.transmit(TimestampNs(1_000));
        assert_eq!(s.delivery().0 - 1_000, 36_580_000);
        assert_eq!(s.ingest_done.0 - 1_000, 260_000);
        assert_eq!(s.adv_done.0 - s.ingest_done.0, 28_680_000);
        assert_eq!(s.sense_done.0 - s.adv_done.0, 7_640_000);
    }

    #[test]
    fn zero_r2v_delivers_immediately() {
        let mut link = R2vLink::new(R2vConfig::constant(0.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(link.transmit(TimestampNs(77)).delivery(), TimestampNs(77));
    }

    #[test]
    fn lognormal_moments_solved() {
        let StageLatencyModel::Lognormal { mu, sigma } = StageLatencyModel::lognormal_from_moments(28.68, 23.22) else {
            unreachable!()
        };
        let mean = (mu + sigma * sigma / 2.0).exp();
        let var = ((sigma * sigma).exp() - 1.0) * (2.0 * mu + sigma * sigma).exp();
        assert!((mean - 28.68).abs() < 1e-9);
        assert!((var.sqrt() - 23.22).abs() < 1e-9);
    }

    #[test]
    fn default_adv_is_long_tailed() {
        let cfg = R2vConfig::characterized();
        let mut rng = RngStream::new(2024, "r2v.adv");
        let xs: Vec<f64> = (0..2000).map(|_| cfg.adv.sample_ns(&mut rng) as f64 * 1e-6).collect();
        let (m, cv) = sample_cv(&xs);
        assert!((m - 28.68).abs() <= 0.1 * 28.68, "mean {m}");
        assert!((0.6..=1.0).contains(&cv), "cv {cv}");
    }

    #[test]
    fn default_v2r_base_is_stable() {
        let cfg = V2rConfig::characterized();
        let mut link = V2rLink::new(cfg, 9).unwrap();
        let mut xs = Vec::new();
        for k in 0..2000u64 {
            if let V2rOutcome::Delivered { perturb_in, deliver, .. } = link.transmit(TimestampNs(k * 20_000_000)) {
                xs.push((deliver.0 - perturb_in.0) as f64 * 1e-6);
            }
        }
        let (m, cv) = sample_cv(&xs);
        assert!((m - 8.58).abs() < 0.2, "mean {m}");
        assert!((0.1..=0.2).contains(&cv), "cv {cv}");
    }

    #[test]
    fn passthrough_and_fixed_delay() {
        let mut p = PerturbationInjector::new(PerturbationConfig::none(), 1).unwrap();
        assert!(matches!(p.perturb(TimestampNs(5)), Perturbed::Deliver { t: TimestampNs(5), .. }));
        let mut p = PerturbationInjector::new(PerturbationConfig::delay(40.0), 1).unwrap();
        assert!(matches!(p.perturb(TimestampNs(5)), Perturbed::Deliver { t: TimestampNs(40_000_005), .. }));
    }

    #[test]
    fn certain_loss_always_drops() {
        let cfg = PerturbationConfig { loss_probability: 1.0, ..PerturbationConfig::none() };
        let mut p = PerturbationInjector::new(cfg, 1).unwrap();
        for k in 0..1000 {
            assert_eq!(p.perturb(TimestampNs(k)), Perturbed::Drop);
        }
    }

    #[test]
    fn v2r_delay_adds_to_base() {
        let cfg = V2rConfig { base_latency: StageLatencyModel::constant(8.58), perturbation: PerturbationConfig::none() };
        let mut link = V2rLink::new(cfg.clone(), 1).unwrap();
        let V2rOutcome::Delivered { deliver, .. } = link.transmit(TimestampNs(0)) else { panic!() };
        assert_eq!(deliver.0, 8_580_000);
        let cfg = V2rConfig { perturbation: PerturbationConfig::delay(40.0), ..cfg };
        let mut link = V2rLink::new(cfg, 1).unwrap();
        let V2rOutcome::Delivered { deliver, .. } = link.transmit(TimestampNs(0)) else { panic!() };
        assert_eq!(deliver.0, 48_580_000);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PerturbationConfig { loss_probability: 1.5, ..Default::default() }.validate().is_err());
        assert!(PerturbationConfig::delay(-1.0).validate().is_err());
        let bad = StageLatencyModel::GaussianTruncated { mean_ms: 1.0, sigma_ms: 1.0, min_ms: 2.0, max_ms: Some(1.0) };
        assert!(bad.validate().is_err());
        assert!(StageLatencyModel::constant(-0.1).validate().is_err());
    }

    #[test]
    fn config_json_shape() {
        let json = serde_json::to_string(&StageLatencyModel::gaussian(8.58, 1.2)).unwrap();
        assert_eq!(json, r#"{"distribution":"gaussian_truncated","mean_ms":8.58,"sigma_ms":1.2,"min_ms":0.0,"max_ms":null}"#);
        let back: StageLatencyModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, StageLatencyModel::gaussian(8.58, 1.2));
    }

    proptest! {
        #[test]
        fn fifo_conservation_and_aperture(
            seed in 0u64..500,
            loss in 0.0f64..0.5,
            fixed in 0.0f64..80.0,
            jitter_sigma in 0.0f64..30.0,
        ) {
            let cfg = V2rConfig {
                base_latency: StageLatencyModel::gaussian(8.58, 1.2),
                perturbation: PerturbationConfig {
                    fixed_delay_ms: fixed,
                    jitter: Some(StageLatencyModel::gaussian(5.0, jitter_sigma)),
                    loss_probability: loss,
                    reorder_allowed: false,
                },
            };
            let mut link = V2rLink::new(cfg, seed).unwrap();
            let mut last = TimestampNs::ZERO;
            let mut delivered = 0;
            let mut dropped = 0;
            for k in 0..300u64 {
                match link.transmit(TimestampNs(k * 7_000_000)) {
                    V2rOutcome::Delivered { perturb_in, deliver, fixed_ns, jitter_ns, base_ns, fifo_wait_ns, .. } => {
                        prop_assert!(deliver >= last);
                        last = deliver;
                        prop_assert_eq!(deliver.0 - perturb_in.0, fixed_ns + jitter_ns + base_ns + fifo_wait_ns);
                        delivered += 1;
                    }
                    V2rOutcome::Dropped { .. } => dropped += 1,
                }
            }
            let c = link.counters();
            prop_assert_eq!(c.sent, 300);
            prop_assert_eq!(c.sent, c.delivered + c.dropped);
            prop_assert_eq!((c.delivered, c.dropped), (delivered, dropped));
        }

        #[test]
        fn samples_never_negative(seed in 0u64..1000, mean in -5.0f64..5.0, sigma in 0.0f64..10.0) {
            let mut rng = RngStream::new(seed, "t");
            let models = [
                StageLatencyModel::gaussian(mean, sigma),
                StageLatencyModel::Lognormal { mu: mean, sigma: sigma / 5.0 },
                StageLatencyModel::constant(mean.abs()),
            ];
            for m in &models {
                for _ in 0..20 {
                    prop_assert!(m.sample_ms(&mut rng) >= 0.0);
                }
            }
        }
    }
}
