//! Noise-prediction training on procedural scenes with null-prompt dropout,
//! and held-out evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::controller::{extract_mask, MaskOptions};
use crate::dataset::{self, Scene};
use crate::denoiser::{AttentionRecord, Denoiser, DenoiserConfig, StepInfo};
use crate::diffusion::{q_sample, timestep_plan, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{Domain, Rng, StreamId};
use crate::tensor::{AdamConfig, Gradients, Tape, Tensor};
use crate::text::{TokenSequence, Vocabulary};

/// Scene seeds with the top bit set are reserved for evaluation.
pub const EVAL_SEED_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the prompt with the null sequence.
    pub p_drop: f64,
    pub seed: u64,
    pub init_seed: u64,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub checkpoint: PathBuf,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 32,
            lr: 2e-4,
            p_drop: 0.1,
            seed: 0,
            init_seed: 0,
            log_every: 50,
            eval_every: 0,
            checkpoint_every: 500,
            checkpoint: PathBuf::from("checkpoints/model.atnf"),
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop {} not in [0, 1)", self.p_drop)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.model.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Draws for one example of one optimizer step.
#[derive(Debug, Clone)]
pub struct Draw {
    pub scene_seed: u64,
    pub t: usize,
    pub drop_prompt: bool,
    pub noise: Tensor,
}

/// The deterministic composition of batch `step`.
pub fn batch_draws(cfg: &TrainConfig, step: u64, image_shape: &[usize], t_max: usize) -> Vec<Draw> {
    let mut rng = Rng::new(cfg.seed, StreamId::new(Domain::Training, step));
    (0..cfg.batch_size)
        .map(|_| {
            let scene_seed = rng.next_u64() >> 1;
            let t = 1 + rng.below(t_max);
            let drop_prompt = rng.uniform() < cfg.p_drop;
            let noise = rng.normal_tensor(image_shape);
            Draw {
                scene_seed,
                t,
                drop_prompt,
                noise,
            }
        })
        .collect()
}

/// Mean squared error between `ε̂(q_sample(x0, t, w))` and `w`, with its
/// gradients.
pub fn example_loss(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    tokens: &TokenSequence,
    t: usize,
    noise: &Tensor,
) -> Result<(f64, Gradients<f32>)> {
    let xt = q_sample(x0, t, noise, schedule)?;
    let mut tape = Tape::new();
    let z = tape.constant(xt);
    let text = model.embed_tokens(&mut tape, tokens)?;
    let eps = model.forward(&mut tape, z, t, text, None, StepInfo::single(t), None)?;
    let w = tape.constant(noise.clone());
    let d = tape.sub(eps, w)?;
    let sq = tape.mul(d, d)?;
    let loss = tape.mean(sq);
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

pub struct Trainer {
    model: Denoiser,
    schedule: NoiseSchedule,
    vocabulary: Vocabulary,
    config: TrainConfig,
    step: u64,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vocabulary = Vocabulary::default();
        if config.model.vocab_size != vocabulary.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the {}-word vocabulary",
                config.model.vocab_size,
                vocabulary.len()
            )));
        }
        Ok(Trainer {
            model: Denoiser::new(config.model.clone(), config.init_seed)?,
            schedule: config.schedule.build()?,
            vocabulary,
            config,
            step: 0,
            losses: Vec::new(),
        })
    }

    /// Continues from a checkpoint that carries training state.
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let state = ck
            .train
            .ok_or_else(|| Error::Config("checkpoint has no training state".into()))?;
        if ck.model.config() != &state.config.model {
            return Err(Error::Config("checkpoint network differs from its training config".into()));
        }
        Ok(Trainer {
            schedule: ck.schedule.build()?,
            model: ck.model,
            vocabulary: ck.vocabulary,
            config: state.config,
            step: state.step,
            losses: state.losses,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            schedule: self.config.schedule,
            vocabulary: self.vocabulary.clone(),
            train: Some(TrainState {
                config: self.config.clone(),
                step: self.step,
                losses: self.losses.clone(),
            }),
        }
    }

    /// One optimizer step; returns the batch-mean loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let shape = self.model.config().image_shape();
        let draws = batch_draws(&self.config, self.step, &shape, self.schedule.steps());
        let model = &self.model;
        let schedule = &self.schedule;
        let vocab = &self.vocabulary;
        let results = parallel::try_map_indexed(draws.len(), |i| {
            let d = &draws[i];
            let sample = dataset::gen_scene(d.scene_seed);
            let tokens = if d.drop_prompt {
                TokenSequence::null()
            } else {
                vocab.tokenize(&sample.prompt)?
            };
            example_loss(model, schedule, &sample.image, &tokens, d.t, &d.noise)
        })?;
        let scale = 1.0 / draws.len() as f32;
        let mut total = 0.0;
        self.model.params_mut().zero_grad();
        for (loss, grads) in &results {
            total += loss;
            self.model.params_mut().accumulate(grads, scale)?;
        }
        let loss = total / draws.len() as f64;
        if !loss.is_finite() {
            self.dump_diagnostics(&draws);
            return Err(Error::Numeric { op: "training loss" });
        }
        self.model.params_mut().adam_step(&self.config.adam())?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    fn dump_diagnostics(&self, draws: &[Draw]) {
        #[derive(Serialize)]
        struct Dump<'a> {
            step: u64,
            examples: Vec<(u64, usize, bool)>,
            recent_losses: &'a [f64],
        }
        let dump = Dump {
            step: self.step,
            examples: draws.iter().map(|d| (d.scene_seed, d.t, d.drop_prompt)).collect(),
            recent_losses: &self.losses[self.losses.len().saturating_sub(20)..],
        };
        let json = serde_json::to_string_pretty(&dump).expect("dump serializes");
        log::error!("non-finite loss at step {}: {json}", self.step);
        let path = self.config.checkpoint.with_extension("nan.json");
        if let Err(e) = crate::image_io::write_atomic(&path, json.as_bytes()) {
            log::error!("could not write diagnostics: {e}");
        }
    }

    /// Trains until `config.steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, f64) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let loss = self.train_step()?;
            on_step(self, loss)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    /// Mean noise-prediction MSE over the held-out draws.
    pub mse: f64,
    pub iou_shape: f64,
    pub iou_article: f64,
    /// Fraction of samples where the shape token localizes better than the
    /// article.
    pub shape_wins: f64,
    pub per_sample: Vec<SampleScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub seed: u64,
    pub iou_shape: f64,
    pub iou_article: f64,
}

/// Number of noised views per image used for attention statistics.
pub const PROBE_STEPS: usize = 10;

/// Attention maps of `x0` under its prompt, observed along a noising
/// trajectory that mirrors a `PROBE_STEPS`-step sampling plan.
pub fn probe_attention(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    tokens: &TokenSequence,
    seed: u64,
) -> Result<(Vec<AttentionRecord>, f64)> {
    let plan = timestep_plan(schedule.steps(), PROBE_STEPS);
    let mut records = Vec::new();
    let mut mse = 0.0;
    for step in plan {
        let w: Tensor = crate::rng::gaussian(
            seed,
            StreamId::new(Domain::Eval, step.index as u64),
            x0.shape(),
        );
        let xt = q_sample(x0, step.t, &w, schedule)?;
        let (eps, recs) = model.predict_noise(&xt, step.t, tokens, None, step)?;
        mse += eps.sub(&w)?.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        records.extend(recs);
    }
    Ok((records, mse / PROBE_STEPS as f64))
}

/// Peak signal-to-noise ratio in dB between images in `[−1, 1]`
/// (peak-to-peak range 2). Infinite for identical images.
pub fn psnr(reference: &Tensor, other: &Tensor) -> Result<f64> {
    if reference.shape() != other.shape() {
        return Err(Error::dim(
            "psnr",
            format!("{:?} vs {:?}", reference.shape(), other.shape()),
        ));
    }
    let mse = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / reference.len().max(1) as f64;
    Ok(10.0 * (4.0 / mse).log10())
}

/// Held-out MSE and attention localization on `n` evaluation scenes.
pub fn evaluate(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    n: usize,
    options: &MaskOptions,
) -> Result<EvalMetrics> {
    let size = model.config().image_size;
    let scores = parallel::try_map_indexed(n, |i| -> Result<(SampleScore, f64)> {
        let seed = EVAL_SEED_BASE + i as u64;
        let s = dataset::gen_scene(seed);
        let tokens = vocab.tokenize(&s.prompt)?;
        let (records, mse) = probe_attention(model, schedule, &s.image, &tokens, seed)?;
        let shape = extract_mask(&records, Scene::SHAPE_TOKEN, options, size)?;
        let article = extract_mask(&records, Scene::ARTICLE_TOKEN, options, size)?;
        Ok((
            SampleScore {
                seed,
                iou_shape: shape.iou(&s.mask)?,
                iou_article: article.iou(&s.mask)?,
            },
            mse,
        ))
    })?;
    let k = n.max(1) as f64;
    let mse = scores.iter().map(|s| s.1).sum::<f64>() / k;
    let per_sample: Vec<SampleScore> = scores.into_iter().map(|s| s.0).collect();
    Ok(EvalMetrics {
        samples: n,
        mse,
        iou_shape: per_sample.iter().map(|s| s.iou_shape).sum::<f64>() / k,
        iou_article: per_sample.iter().map(|s| s.iou_article).sum::<f64>() / k,
        shape_wins: per_sample.iter().filter(|s| s.iou_shape > s.iou_article).count() as f64 / k,
        per_sample,
    })
}
