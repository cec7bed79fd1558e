//! Synchronous generation and editing on one shared checkpoint.

use serde::{Deserialize, Serialize};

use atnf_core::checkpoint::Checkpoint;
use atnf_core::controller::{run_p2p, token_heatmap, EditSpec, Session};
use atnf_core::dataset;
use atnf_core::denoiser::{AttentionKind, AttentionRecord};
use atnf_core::diffusion::{NoiseSchedule, Sampler, SamplerConfig, Start};
use atnf_core::text::{TokenSequence, Vocabulary};
use atnf_core::trainer::psnr;
use atnf_core::{Error, Result, Tensor};

/// Where a session's starting latent comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Seed,
    /// DDIM inversion of the procedural dataset image with this seed.
    Inversion { dataset_seed: u64 },
}

/// Everything needed to regenerate a session's source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub origin: Origin,
}

pub struct Generated {
    pub session: Session,
    pub tokens: TokenSequence,
    pub image: Tensor,
    pub records: Vec<AttentionRecord>,
    /// Inverted dataset image and reconstruction PSNR, for inversion sessions.
    pub inversion: Option<(Tensor, f64)>,
}

pub struct EditOutcome {
    pub source: Tensor,
    pub edited: Tensor,
    pub l2_to_source: f64,
}

/// Which attention sites feed a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteFilter {
    All,
    Cross,
    Hybrid,
}

pub struct Heatmap {
    /// Mean attention of the token, `[r, r]`.
    pub values: Tensor,
    /// Mean attention summed over every column, `[r, r]`.
    pub column_total: Tensor,
}

pub struct Engine {
    checkpoint: Checkpoint,
    schedule: NoiseSchedule,
    fingerprint: String,
}

impl Engine {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let schedule = checkpoint.schedule.build()?;
        let fingerprint = checkpoint.fingerprint();
        Ok(Engine {
            checkpoint,
            schedule,
            fingerprint,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.checkpoint.vocabulary
    }

    pub fn max_steps(&self) -> usize {
        self.schedule.steps()
    }

    fn sampler(&self, config: SamplerConfig) -> Result<Sampler<'_>> {
        if !config.guidance.is_finite() {
            return Err(Error::field("/guidance", "must be finite"));
        }
        if config.steps == 0 {
            return Err(Error::field("/steps", "must be at least 1"));
        }
        Sampler::new(&self.checkpoint.model, &self.schedule, config)
    }

    fn image_shape(&self) -> Vec<usize> {
        let c = self.checkpoint.model.config();
        vec![c.in_channels, c.image_size, c.image_size]
    }

    pub fn generate(&self, spec: &SessionSpec) -> Result<Generated> {
        let tokens = self.vocabulary().tokenize(&spec.prompt)?;
        let sampler = self.sampler(SamplerConfig::ddim(spec.steps, spec.guidance))?;
        let (start, original) = match spec.origin {
            Origin::Seed => (Start::Seed(spec.seed), None),
            Origin::Inversion { dataset_seed } => {
                let x0 = dataset::gen_scene(dataset_seed).image;
                if x0.shape() != self.image_shape().as_slice() {
                    return Err(Error::Config(
                        "dataset images do not match the checkpoint resolution".into(),
                    ));
                }
                let latent = sampler.invert(&x0, &tokens)?;
                (
                    Start::Latent {
                        latent,
                        seed: spec.seed,
                    },
                    Some(x0),
                )
            }
        };
        let latent = match &start {
            Start::Latent { latent, .. } => Some(latent.data().to_vec()),
            Start::Seed(_) => None,
        };
        let session = Session {
            prompt: spec.prompt.clone(),
            seed: spec.seed,
            steps: spec.steps,
            guidance: spec.guidance,
            checkpoint: self.fingerprint.clone(),
            latent,
        };
        let out = self
            .sampler(session.sampler_config())?
            .sample(&tokens, &start, None, true)?;
        let inversion = match original {
            Some(x0) => {
                let p = psnr(&x0, &out.image)?;
                Some((x0, p))
            }
            None => None,
        };
        Ok(Generated {
            session,
            tokens,
            image: out.image,
            records: out.records,
            inversion,
        })
    }

    /// Replays the session's source trajectory against the edit.
    pub fn edit(&self, session: &Session, spec: &EditSpec) -> Result<EditOutcome> {
        let source = self.vocabulary().tokenize(&session.prompt)?;
        let compiled = spec.compile(self.vocabulary(), &source)?;
        let sampler = self.sampler(session.sampler_config())?;
        let start = session.start(&self.image_shape())?;
        let out = run_p2p(&sampler, &source, &compiled, &start)?;
        let l2 = out.edited.l2_distance(&out.source)? as f64;
        Ok(EditOutcome {
            source: out.source,
            edited: out.edited,
            l2_to_source: l2,
        })
    }
}

/// Step-, layer- and head-averaged map of one token. `None` when no site of
/// the requested kind exists at `resolution`.
pub fn heatmap(
    records: &[AttentionRecord],
    token: usize,
    resolution: usize,
    filter: SiteFilter,
) -> Result<Option<Heatmap>> {
    let picked: Vec<AttentionRecord> = records
        .iter()
        .filter(|r| match filter {
            SiteFilter::All => true,
            SiteFilter::Cross => r.kind == AttentionKind::Cross,
            SiteFilter::Hybrid => r.kind == AttentionKind::Hybrid,
        })
        .filter(|r| r.resolution == resolution)
        .cloned()
        .collect();
    let Some(columns) = picked.first().map(|r| r.map.cols()) else {
        return Ok(None);
    };
    let Some(values) = token_heatmap(&picked, token, resolution, 0.0)? else {
        return Ok(None);
    };
    let mut total = Tensor::zeros(values.shape());
    for c in 0..columns {
        if let Some(m) = token_heatmap(&picked, c, resolution, 0.0)? {
            total = total.zip_map(&m, |a, b| a + b)?;
        }
    }
    Ok(Some(Heatmap {
        values,
        column_total: total,
    }))
}
