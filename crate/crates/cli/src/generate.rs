use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use atnf_core::controller::Session;
use atnf_core::diffusion::{Sampler, SamplerConfig, Start};
use atnf_core::image_io::save_png;

use crate::common::{emit, ensure_parent, load_checkpoint, write_json, DEFAULT_CHECKPOINT};
use crate::error::CliResult;
use crate::header;

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    pub checkpoint: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Session file; defaults to the output path with a `.session.json` suffix.
    #[arg(long)]
    pub session: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 3.0)]
    pub guidance: f64,
}

pub fn run(a: GenerateArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let fingerprint = ck.fingerprint();
    header::print(
        "generate",
        &[
            ("checkpoint", format!("{} ({fingerprint})", a.checkpoint.display())),
            ("prompt", a.prompt.clone()),
            ("seed", a.seed.to_string()),
            ("steps", a.steps.to_string()),
            ("guidance", a.guidance.to_string()),
        ],
    );
    let tokens = ck.vocabulary.tokenize(&a.prompt)?;
    let schedule = ck.schedule.build()?;
    let sampler = Sampler::new(&ck.model, &schedule, SamplerConfig::ddim(a.steps, a.guidance))?;
    let out = sampler.sample(&tokens, &Start::Seed(a.seed), None, false)?;
    ensure_parent(&a.out)?;
    save_png(&a.out, &out.image)?;
    let session_path = a
        .session
        .unwrap_or_else(|| a.out.with_extension("session.json"));
    let session = Session {
        prompt: a.prompt,
        seed: a.seed,
        steps: a.steps,
        guidance: a.guidance,
        checkpoint: fingerprint,
        latent: None,
    };
    write_json(&session_path, &session)?;
    emit(&json!({ "image": a.out, "session": session_path }));
    Ok(())
}
