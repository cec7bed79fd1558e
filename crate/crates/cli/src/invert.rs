use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use atnf_core::controller::Session;
use atnf_core::dataset;
use atnf_core::diffusion::{Sampler, SamplerConfig, Start};
use atnf_core::image_io::{load_png, quantize, save_png};
use atnf_core::trainer::psnr;

use crate::common::{emit, ensure_dir, load_checkpoint, write_json, DEFAULT_CHECKPOINT};
use crate::error::{usage, CliResult};
use crate::header;

#[derive(Args)]
pub struct InvertArgs {
    /// RGB PNG at the model resolution.
    #[arg(long, conflicts_with = "dataset_seed")]
    pub image: Option<PathBuf>,
    /// Invert the procedural dataset image with this seed instead.
    #[arg(long)]
    pub dataset_seed: Option<u64>,
    /// Defaults to the dataset caption with `--dataset-seed`.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(a: InvertArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (x0, origin, caption) = match (&a.image, a.dataset_seed) {
        (Some(p), _) => (load_png(p)?, p.display().to_string(), None),
        (None, Some(s)) => {
            let sample = dataset::gen_scene(s);
            (sample.image, format!("dataset seed {s}"), Some(sample.prompt))
        }
        (None, None) => return Err(usage("give --image or --dataset-seed")),
    };
    let prompt = a
        .prompt
        .or(caption)
        .ok_or_else(|| usage("--prompt is required with --image"))?;
    let c = ck.model.config();
    let shape = [c.in_channels, c.image_size, c.image_size];
    if x0.shape() != shape {
        return Err(usage(format!("image is {:?}, the model expects {shape:?}", x0.shape())));
    }
    let fingerprint = ck.fingerprint();
    header::print(
        "invert",
        &[
            ("checkpoint", format!("{} ({fingerprint})", a.checkpoint.display())),
            ("image", origin),
            ("prompt", prompt.clone()),
            ("steps", a.steps.to_string()),
            ("guidance", a.guidance.to_string()),
        ],
    );
    let tokens = ck.vocabulary.tokenize(&prompt)?;
    let schedule = ck.schedule.build()?;
    let sampler = Sampler::new(&ck.model, &schedule, SamplerConfig::ddim(a.steps, a.guidance))?;
    let latent = sampler.invert(&x0, &tokens)?;
    let seed = a.dataset_seed.unwrap_or(0);
    let session = Session {
        prompt,
        seed,
        steps: a.steps,
        guidance: a.guidance,
        checkpoint: fingerprint,
        latent: Some(latent.data().to_vec()),
    };
    let replay = Sampler::new(&ck.model, &schedule, session.sampler_config())?;
    let recon = replay
        .sample(
            &tokens,
            &Start::Latent {
                latent: latent.clone(),
                seed,
            },
            None,
            false,
        )?
        .image;
    // Scored on the 8-bit image actually written, so it can be recomputed
    // from the output files.
    let recon = quantize(&recon)?;
    let p = psnr(&x0, &recon)?;
    let dir = ensure_dir(&a.out_dir)?;
    save_png(&dir.join("reconstruction.png"), &recon)?;
    write_json(&dir.join("latent.json"), &json!({ "shape": latent.shape(), "data": latent.data() }))?;
    write_json(&dir.join("session.json"), &session)?;
    let metrics = json!({ "psnr": if p.is_finite() { json!(p) } else { json!("inf") } });
    write_json(&dir.join("metrics.json"), &metrics)?;
    emit(&metrics);
    Ok(())
}
