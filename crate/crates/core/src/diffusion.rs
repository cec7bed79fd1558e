//! Noise schedule, forward process, guided DDPM/DDIM sampling and DDIM
//! inversion.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionHook, AttentionRecord, Denoiser, StepInfo};
use crate::error::{Error, Result};
use crate::rng::{self, Domain, StreamId};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

/// Linear β schedule with cumulative products `ᾱ_t = Π_{i≤t} (1 − β_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Whether `x_T` is close to an isotropic Gaussian.
    pub fn reaches_noise(&self) -> bool {
        self.alpha_bar(self.steps()) < 0.05
    }
}

/// `x_t = √ᾱ_t x_0 + √(1 − ᾱ_t) w`.
pub fn q_sample(x0: &Tensor, t: usize, w: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(w, |x, n| a * x + b * n)
}

/// DDPM posterior mean `(x_t − β_t / √(1 − ᾱ_t) · ε̂) / √(1 − β_t)`.
pub fn posterior_mu(x_t: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    let beta = schedule.beta(t);
    let c = (beta / (1.0 - schedule.alpha_bar(t)).sqrt()) as f32;
    let inv = (1.0 / (1.0 - beta).sqrt()) as f32;
    x_t.zip_map(eps, |x, e| (x - c * e) * inv)
}

/// Classifier-free combination `ε_null + s (ε_cond − ε_null)`; `s = 1` and
/// `s = 0` return the corresponding prediction exactly.
pub fn guide(eps_cond: &Tensor, eps_null: &Tensor, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_null.clone());
    }
    let s = scale as f32;
    eps_null.zip_map(eps_cond, |n, c| n + s * (c - n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub guidance: f64,
    /// Number of denoising steps; DDIM may subsample the schedule, DDPM uses
    /// every step.
    pub steps: usize,
    /// Clamp the per-step predicted `x_0` to `[−1, 1]`.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerMode::Ddim,
            guidance: 3.0,
            steps: 50,
            clip_x0: true,
        }
    }
}

impl SamplerConfig {
    pub fn ddim(steps: usize, guidance: f64) -> Self {
        SamplerConfig {
            steps,
            guidance,
            ..SamplerConfig::default()
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(format!("guidance {} must be >= 0", self.guidance)));
        }
        if self.steps > schedule.steps() {
            return Err(Error::Config(format!(
                "{} sampling steps exceed the {}-step schedule",
                self.steps,
                schedule.steps()
            )));
        }
        if self.mode == SamplerMode::Ddpm && self.steps != schedule.steps() {
            return Err(Error::Config("DDPM sampling must visit every timestep".into()));
        }
        Ok(())
    }
}

/// Where a sampling run starts.
#[derive(Debug, Clone)]
pub enum Start {
    /// `z_T` drawn from the seed's latent stream.
    Seed(u64),
    /// A given latent (e.g. from inversion); the seed still drives DDPM noise.
    Latent { latent: Tensor, seed: u64 },
}

impl Start {
    pub fn seed(&self) -> u64 {
        match self {
            Start::Seed(s) | Start::Latent { seed: s, .. } => *s,
        }
    }
}

pub struct SampleOutput {
    pub image: Tensor,
    pub latent: Tensor,
    pub records: Vec<AttentionRecord>,
}

/// Guided sampler over one trained denoiser.
pub struct Sampler<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub config: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Denoiser, schedule: &'a NoiseSchedule, config: SamplerConfig) -> Result<Self> {
        config.validate(schedule)?;
        Ok(Sampler {
            model,
            schedule,
            config,
        })
    }

    /// Timesteps visited, first (noisiest) to last.
    pub fn plan(&self) -> Vec<StepInfo> {
        timestep_plan(self.schedule.steps(), self.config.steps)
    }

    pub fn initial_latent(&self, start: &Start) -> Result<Tensor> {
        match start {
            Start::Seed(seed) => Ok(rng::gaussian(
                *seed,
                StreamId::new(Domain::Latent, 0),
                &self.model.config().image_shape(),
            )),
            Start::Latent { latent, .. } => {
                if latent.shape() != self.model.config().image_shape() {
                    return Err(Error::dim("sample", format!("latent {:?}", latent.shape())));
                }
                Ok(latent.clone())
            }
        }
    }

    /// Guided noise estimate; only the conditional forward sees the hook and
    /// contributes records.
    pub fn guided_eps(
        &self,
        z: &Tensor,
        step: StepInfo,
        cond: &TokenSequence,
        hook: Option<&mut dyn AttentionHook<f32>>,
        record: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let s = self.config.guidance;
        let null = TokenSequence::null();
        if s == 0.0 {
            let eps = self.model.predict_noise_only(z, step.t, &null, None, step)?;
            return Ok((eps, Vec::new()));
        }
        let (eps_c, records) = if record {
            self.model.predict_noise(z, step.t, cond, hook, step)?
        } else {
            (self.model.predict_noise_only(z, step.t, cond, hook, step)?, Vec::new())
        };
        if s == 1.0 {
            return Ok((eps_c, records));
        }
        let eps_n = self.model.predict_noise_only(z, step.t, &null, None, step)?;
        Ok((guide(&eps_c, &eps_n, s)?, records))
    }

    /// One reverse step from `z` at `plan[k]`.
    pub fn advance(&self, z: &Tensor, eps: &Tensor, plan: &[StepInfo], k: usize, seed: u64) -> Result<Tensor> {
        let t = plan[k].t;
        let t_prev = plan.get(k + 1).map_or(0, |s| s.t);
        match self.config.mode {
            SamplerMode::Ddim => ddim_step(self.schedule, z, eps, t, t_prev, self.config.clip_x0),
            SamplerMode::Ddpm => {
                let mu = if self.config.clip_x0 {
                    posterior_mu(z, t, &clipped_eps(self.schedule, z, eps, t)?, self.schedule)?
                } else {
                    posterior_mu(z, t, eps, self.schedule)?
                };
                if t == 1 {
                    return Ok(mu);
                }
                let ab = self.schedule.alpha_bar(t);
                let ab_prev = self.schedule.alpha_bar(t - 1);
                let var = (1.0 - ab_prev) / (1.0 - ab) * self.schedule.beta(t);
                let sigma = var.sqrt() as f32;
                let noise: Tensor = rng::gaussian(
                    seed,
                    StreamId::new(Domain::StepNoise, k as u64),
                    z.shape(),
                );
                mu.zip_map(&noise, |m, n| m + sigma * n)
            }
        }
    }

    pub fn sample(
        &self,
        tokens: &TokenSequence,
        start: &Start,
        mut hook: Option<&mut (dyn AttentionHook<f32> + '_)>,
        record: bool,
    ) -> Result<SampleOutput> {
        let latent = self.initial_latent(start)?;
        let plan = self.plan();
        let mut z = latent.clone();
        let mut records = Vec::new();
        for k in 0..plan.len() {
            let h: Option<&mut dyn AttentionHook<f32>> = match hook {
                Some(ref mut h) => Some(&mut **h),
                None => None,
            };
            let (eps, recs) = self.guided_eps(&z, plan[k], tokens, h, record)?;
            records.extend(recs);
            z = self.advance(&z, &eps, &plan, k, start.seed())?;
        }
        Ok(SampleOutput {
            image: z.map(|v| v.clamp(-1.0, 1.0)),
            latent,
            records,
        })
    }

    /// Runs the deterministic DDIM recursion forward in time, `x_0 → x_T`.
    pub fn invert(&self, x0: &Tensor, tokens: &TokenSequence) -> Result<Tensor> {
        if self.config.mode != SamplerMode::Ddim {
            return Err(Error::Config("inversion requires DDIM mode".into()));
        }
        let plan = self.plan();
        let mut x = x0.clone();
        for k in (0..plan.len()).rev() {
            let t_to = plan[k].t;
            let t_from = plan.get(k + 1).map_or(0, |s| s.t);
            let (eps, _) = self.guided_eps(&x, plan[k], tokens, None, false)?;
            x = ddim_step(self.schedule, &x, &eps, t_from, t_to, false)?;
        }
        Ok(x)
    }
}

/// Noise estimate consistent with the `[−1, 1]`-clamped `x_0` prediction;
/// equals `eps` wherever the prediction is already in range.
fn clipped_eps(schedule: &NoiseSchedule, z: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    z.zip_map(eps, |zv, e| {
        let x0 = (zv - b * e) / a;
        if (-1.0..=1.0).contains(&x0) {
            e
        } else {
            (zv - a * x0.clamp(-1.0, 1.0)) / b
        }
    })
}

/// Evenly spaced timesteps from `t_max` down, `count` of them.
pub fn timestep_plan(t_max: usize, count: usize) -> Vec<StepInfo> {
    (0..count)
        .map(|i| StepInfo {
            t: t_max - i * t_max / count,
            index: i,
            count,
        })
        .collect()
}

/// Deterministic DDIM move of `x` from timestep `t_from` to `t_to` (either
/// direction) with noise estimate `eps`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x: &Tensor,
    eps: &Tensor,
    t_from: usize,
    t_to: usize,
    clip_x0: bool,
) -> Result<Tensor> {
    let ab_from = schedule.alpha_bar(t_from);
    let ab_to = schedule.alpha_bar(t_to);
    let (sa, sb) = (ab_from.sqrt() as f32, (1.0 - ab_from).sqrt() as f32);
    let (ta, tb) = (ab_to.sqrt() as f32, (1.0 - ab_to).sqrt() as f32);
    x.zip_map(eps, |xv, e| {
        let mut x0 = (xv - sb * e) / sa;
        if clip_x0 {
            x0 = x0.clamp(-1.0, 1.0);
        }
        ta * x0 + tb * e
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipped_eps_implies_clamped_prediction() {
        let s = ScheduleConfig::default().build().unwrap();
        let t = 60;
        let ab = s.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        // x0 predictions 0.5 (in range) and 3.0 (clamped to 1).
        let eps = Tensor::from_rows(&[&[0.3, -0.7]]);
        let z = Tensor::from_rows(&[&[(a * 0.5 + b * 0.3) as f64, (a * 3.0 - b * 0.7) as f64]]);
        let e = clipped_eps(&s, &z, &eps, t).unwrap();
        assert_eq!(e.data()[0], eps.data()[0]);
        let x0 = (z.data()[1] - b * e.data()[1]) / a;
        assert!((x0 - 1.0).abs() < 1e-4, "{x0}");
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
    }

    #[test]
    fn cumulative_product_matches_reference() {
        // numpy: prod(1 - linspace(1e-4, 0.02, 100))
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(100) - 0.363_563_248_055_492_2).abs() < 1e-6);
        assert!(!s.reaches_noise());
        // prod(1 - linspace(1e-3, 0.2, 100))
        let d = ScheduleConfig::default().build().unwrap();
        assert!((d.alpha_bar(100) - 2.039_008_975_564_078e-5).abs() < 1e-9);
        assert!(d.reaches_noise());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for (n, a, b) in [(100, 1e-4, 0.02), (10, 0.5, 0.9), (7, 0.1, 0.1)] {
            let s = make_schedule(n, a, b).unwrap();
            for t in 1..=n {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn q_sample_without_noise_scales_x0() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = Tensor::from_rows(&[&[0.5, -1.0]]);
        let xt = q_sample(&x0, 10, &Tensor::zeros(&[1, 2]), &s).unwrap();
        let a = s.alpha_bar(10).sqrt() as f32;
        assert_eq!(xt.data(), &[0.5 * a, -a]);
        assert!(q_sample(&x0, 0, &Tensor::zeros(&[1, 2]), &s).is_err());
        assert!(q_sample(&x0, 101, &Tensor::zeros(&[1, 2]), &s).is_err());
    }

    #[test]
    fn posterior_mean_without_noise_estimate() {
        let s = ScheduleConfig::default().build().unwrap();
        let x = Tensor::from_rows(&[&[1.0, -0.25]]);
        let mu = posterior_mu(&x, 40, &Tensor::zeros(&[1, 2]), &s).unwrap();
        let inv = (1.0 / (1.0 - s.beta(40)).sqrt()) as f32;
        assert_eq!(mu.data(), &[inv, -0.25 * inv]);
    }

    #[test]
    fn plan_is_strictly_decreasing() {
        for steps in [1, 7, 25, 50, 100] {
            let p = timestep_plan(100, steps);
            assert_eq!(p[0].t, 100);
            assert!(p.windows(2).all(|w| w[0].t > w[1].t));
            assert!(p.last().unwrap().t >= 1);
        }
    }

    #[test]
    fn guidance_extremes_are_exact() {
        let c = Tensor::from_rows(&[&[0.3, -0.7, 1.1]]);
        let n = Tensor::from_rows(&[&[-0.2, 0.4, 0.9]]);
        assert!(guide(&c, &n, 1.0).unwrap().bit_eq(&c));
        assert!(guide(&c, &n, 0.0).unwrap().bit_eq(&n));
    }
}
