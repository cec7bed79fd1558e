use std::path::PathBuf;

use clap::Args;
use serde_json::json;

use atnf_core::controller::{min_max_normalize, token_heatmap, MaskOptions};
use atnf_core::diffusion::Sampler;
use atnf_core::image_io::{gray_png_bytes, write_atomic};
use atnf_core::trainer::evaluate;
use atnf_core::Tensor;

use crate::common::{
    check_session, emit, ensure_dir, load_checkpoint, read_session, resolve_token, write_json,
    DEFAULT_CHECKPOINT,
};
use crate::edit::sanitize;
use crate::error::{usage, CliResult};
use crate::header;

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    pub checkpoint: PathBuf,
    /// Held-out scenes to score.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = MaskOptions::default().resolution)]
    pub resolution: usize,
    #[arg(long, default_value_t = MaskOptions::default().skip_fraction)]
    pub skip_fraction: f64,
    #[arg(long, default_value_t = MaskOptions::default().threshold)]
    pub threshold: f64,
    /// Metrics JSON file, in addition to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_eval(a: EvalArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let opts = MaskOptions {
        resolution: a.resolution,
        skip_fraction: a.skip_fraction,
        threshold: a.threshold,
    };
    header::print(
        "eval",
        &[
            ("checkpoint", format!("{} ({})", a.checkpoint.display(), ck.fingerprint())),
            ("samples", a.samples.to_string()),
            ("mask", serde_json::to_string(&opts).expect("serializable")),
        ],
    );
    let schedule = ck.schedule.build()?;
    let m = evaluate(&ck.model, &schedule, &ck.vocabulary, a.samples, &opts)?;
    if let Some(p) = &a.out {
        write_json(p, &m)?;
    }
    emit(&m);
    Ok(())
}

#[derive(Args)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    pub checkpoint: PathBuf,
    /// Token word or index; repeatable. Every real token by default.
    #[arg(long)]
    pub token: Vec<String>,
    /// Sampling step index; repeatable. Every step by default.
    #[arg(long)]
    pub step: Vec<usize>,
    #[arg(long, default_value_t = MaskOptions::default().resolution)]
    pub resolution: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run_attn_dump(a: AttnDumpArgs) -> CliResult {
    let session = read_session(&a.session)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    check_session(&session, &ck, &a.checkpoint)?;
    let tokens = ck.vocabulary.tokenize(&session.prompt)?;
    let words = ck.vocabulary.token_words(&tokens);
    let picked: Vec<usize> = if a.token.is_empty() {
        (0..words.len()).collect()
    } else {
        a.token
            .iter()
            .map(|t| resolve_token(&ck.vocabulary, &tokens, t))
            .collect::<CliResult<_>>()?
    };
    let steps: Vec<usize> = if a.step.is_empty() {
        (0..session.steps).collect()
    } else {
        a.step.clone()
    };
    if let Some(bad) = steps.iter().find(|&&k| k >= session.steps) {
        return Err(usage(format!("step {bad} is beyond the {}-step session", session.steps)));
    }
    header::print(
        "attn-dump",
        &[
            ("checkpoint", format!("{} ({})", a.checkpoint.display(), session.checkpoint)),
            ("prompt", session.prompt.clone()),
            ("seed", session.seed.to_string()),
            ("steps", session.steps.to_string()),
            ("guidance", session.guidance.to_string()),
            ("resolution", a.resolution.to_string()),
        ],
    );
    let schedule = ck.schedule.build()?;
    let sampler = Sampler::new(
        &ck.model,
        &schedule,
        session.sampler_config(),
    )?;
    let c = ck.model.config();
    let start = session.start(&[c.in_channels, c.image_size, c.image_size])?;
    let out = sampler.sample(&tokens, &start, None, true)?;
    let dir = ensure_dir(&a.out_dir)?;
    let mut files = Vec::new();
    for &k in &steps {
        let at_step: Vec<_> = out
            .records
            .iter()
            .filter(|r| r.step_index == k)
            .cloned()
            .collect();
        for &j in &picked {
            let Some(h) = token_heatmap(&at_step, j, a.resolution, 0.0)? else {
                return Err(usage(format!("no attention at resolution {}", a.resolution)));
            };
            let shown = min_max_normalize(&h).unwrap_or_else(|| Tensor::zeros(h.shape()));
            let name = format!("token{j:02}_{}_step{k:03}.png", sanitize(&words[j]));
            write_atomic(&dir.join(&name), &gray_png_bytes(&shown)?)?;
            files.push(name);
        }
    }
    emit(&json!({ "tokens": picked, "steps": steps, "files": files.len() }));
    Ok(())
}
