use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use atnf_core::checkpoint::Checkpoint;
use atnf_core::controller::{
    blend_with_mask, extract_mask, min_max_normalize, run_p2p, token_heatmap, EditSpec, MaskOptions,
    P2pOutput, Session,
};
use atnf_core::diffusion::{NoiseSchedule, Sampler};
use atnf_core::image_io::{gray_png_bytes, save_png, write_atomic};
use atnf_core::mask::Mask;
use atnf_core::text::TokenSequence;
use atnf_core::Tensor;

use crate::common::{
    check_session, emit, ensure_dir, load_checkpoint, parse_assignment, parse_list, read_session,
    resolve_token, write_json, DEFAULT_CHECKPOINT,
};
use crate::error::{usage, CliResult};
use crate::header;

#[derive(Args)]
pub struct EditArgs {
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    pub checkpoint: PathBuf,
    /// Edit specification as JSON, or `@path` to read it from a file.
    #[arg(long, conflicts_with_all = ["swap", "refine", "reweight"])]
    pub edit_json: Option<String>,
    /// Word swap towards `--target`.
    #[arg(long, conflicts_with_all = ["refine", "reweight"])]
    pub swap: bool,
    /// Phrase refinement towards `--target`.
    #[arg(long, conflicts_with = "reweight")]
    pub refine: bool,
    /// Fader `WORD=C` on the session prompt; repeatable.
    #[arg(long, value_name = "WORD=C")]
    pub reweight: Vec<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// Fraction of steps with injection.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Per-token injection fraction `WORD=TAU` over the session prompt; repeatable.
    #[arg(long = "token-tau", value_name = "WORD=TAU")]
    pub token_tau: Vec<String>,
    /// Restrict the edit to the attention mask of this source word.
    #[arg(long, value_name = "WORD")]
    pub blend: Option<String>,
    #[arg(long, default_value_t = MaskOptions::default().threshold)]
    pub mask_threshold: f64,
    /// Also write a normalized attention heatmap per source token.
    #[arg(long)]
    pub heatmaps: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

struct Loaded {
    ck: Checkpoint,
    schedule: NoiseSchedule,
    session: Session,
    tokens: TokenSequence,
}

fn load(session: &Path, checkpoint: &Path) -> CliResult<Loaded> {
    let session = read_session(session)?;
    let ck = load_checkpoint(checkpoint)?;
    check_session(&session, &ck, checkpoint)?;
    let schedule = ck.schedule.build()?;
    let tokens = ck.vocabulary.tokenize(&session.prompt)?;
    Ok(Loaded {
        ck,
        schedule,
        session,
        tokens,
    })
}

impl Loaded {
    fn run(&self, spec: &EditSpec) -> CliResult<P2pOutput> {
        let compiled = spec.compile(&self.ck.vocabulary, &self.tokens)?;
        let sampler = Sampler::new(
            &self.ck.model,
            &self.schedule,
            self.session.sampler_config(),
        )?;
        let c = self.ck.model.config();
        let start = self.session.start(&[c.in_channels, c.image_size, c.image_size])?;
        Ok(run_p2p(&sampler, &self.tokens, &compiled, &start)?)
    }

    fn header(&self, command: &str, checkpoint: &Path, spec: &str) {
        header::print(
            command,
            &[
                ("checkpoint", format!("{} ({})", checkpoint.display(), self.session.checkpoint)),
                ("prompt", self.session.prompt.clone()),
                ("seed", self.session.seed.to_string()),
                ("steps", self.session.steps.to_string()),
                ("guidance", self.session.guidance.to_string()),
                ("edit", spec.to_string()),
            ],
        );
    }
}

fn token_taus(l: &Loaded, pairs: &[String]) -> CliResult<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        let (w, tau) = parse_assignment(p)?;
        out.insert(resolve_token(&l.ck.vocabulary, &l.tokens, &w)?, tau);
    }
    Ok(out)
}

fn build_spec(a: &EditArgs, l: &Loaded) -> CliResult<EditSpec> {
    if let Some(j) = &a.edit_json {
        let text = match j.strip_prefix('@') {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| atnf_core::Error::io(path, e))?,
            None => j.clone(),
        };
        return Ok(EditSpec::from_json(&text)?);
    }
    if !a.reweight.is_empty() {
        let mut weights = BTreeMap::new();
        for r in &a.reweight {
            let (w, c) = parse_assignment(r)?;
            weights.insert(resolve_token(&l.ck.vocabulary, &l.tokens, &w)?, c);
        }
        return Ok(EditSpec::Reweight {
            target_prompt: l.session.prompt.clone(),
            weights,
        });
    }
    let target = a
        .target
        .clone()
        .ok_or_else(|| usage("--swap and --refine need --target"))?;
    let per_token_tau = token_taus(l, &a.token_tau)?;
    if a.swap {
        Ok(EditSpec::Swap {
            target_prompt: target,
            tau: a.tau,
            per_token_tau,
        })
    } else if a.refine {
        Ok(EditSpec::Refine {
            target_prompt: target,
            tau: a.tau,
            per_token_tau,
        })
    } else {
        Err(usage("choose one of --edit-json, --swap, --refine or --reweight"))
    }
}

#[derive(Serialize)]
struct EditMetrics {
    l2_to_source: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    blend: Option<BlendMetrics>,
}

#[derive(Serialize)]
struct BlendMetrics {
    token: usize,
    mask_area: usize,
    l2_to_source: f64,
    outside_mask_l2: f64,
}

fn outside_l2(a: &Tensor, b: &Tensor, mask: &Mask) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut s = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    let i = (ch * h + y) * w + x;
                    s += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
                }
            }
        }
    }
    s.sqrt()
}

fn mask_tensor(m: &Mask) -> Tensor {
    let data = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(vec![m.height(), m.width()], data).expect("mask shape")
}

pub fn run_edit(a: EditArgs) -> CliResult {
    let l = load(&a.session, &a.checkpoint)?;
    let spec = build_spec(&a, &l)?;
    l.header("edit", &a.checkpoint, &spec.to_json());
    let out = l.run(&spec)?;
    let dir = ensure_dir(&a.out_dir)?;
    save_png(&dir.join("source.png"), &out.source)?;
    save_png(&dir.join("edited.png"), &out.edited)?;
    let mut metrics = EditMetrics {
        l2_to_source: out.edited.l2_distance(&out.source)? as f64,
        blend: None,
    };
    if let Some(word) = &a.blend {
        let token = resolve_token(&l.ck.vocabulary, &l.tokens, word)?;
        let opts = MaskOptions {
            threshold: a.mask_threshold,
            ..MaskOptions::default()
        };
        let size = l.ck.model.config().image_size;
        let mask = extract_mask(&out.source_records, token, &opts, size)?;
        let blended = blend_with_mask(&out.source, &out.edited, &mask)?;
        write_atomic(&dir.join("mask.png"), &gray_png_bytes(&mask_tensor(&mask))?)?;
        save_png(&dir.join("blended.png"), &blended)?;
        metrics.blend = Some(BlendMetrics {
            token,
            mask_area: mask.area(),
            l2_to_source: blended.l2_distance(&out.source)? as f64,
            outside_mask_l2: outside_l2(&blended, &out.source, &mask),
        });
    }
    if a.heatmaps {
        let res = MaskOptions::default().resolution;
        for (j, w) in l.ck.vocabulary.token_words(&l.tokens).iter().enumerate() {
            if let Some(h) = token_heatmap(&out.source_records, j, res, 0.0)? {
                let shown = min_max_normalize(&h).unwrap_or_else(|| Tensor::zeros(h.shape()));
                write_atomic(
                    &dir.join(format!("heatmap_{j:02}_{}.png", sanitize(w))),
                    &gray_png_bytes(&shown)?,
                )?;
            }
        }
    }
    write_json(&dir.join("edit.json"), &spec)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    emit(&metrics);
    Ok(())
}

pub fn sanitize(word: &str) -> String {
    word.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub session: PathBuf,
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Comma-separated injection fractions.
    #[arg(long, default_value = "0,0.25,0.5,0.75,1.0")]
    pub taus: String,
    /// Use phrase refinement instead of word swap.
    #[arg(long)]
    pub refine: bool,
    /// Contact sheet PNG: the source, then one image per τ, left to right.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON; defaults to the sheet path with a `.json` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepPoint {
    tau: f64,
    l2_to_source: f64,
}

/// Images side by side with a 2-pixel white gutter.
pub fn contact_sheet(images: &[Tensor]) -> CliResult<Tensor> {
    let s = images
        .first()
        .ok_or_else(|| usage("nothing to lay out"))?
        .shape()
        .to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let gap = 2;
    let width = images.len() * w + (images.len() - 1) * gap;
    let mut sheet = Tensor::full(&[c, h, width], 1.0);
    for (k, img) in images.iter().enumerate() {
        let x0 = k * (w + gap);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    sheet.data_mut()[(ch * h + y) * width + x0 + x] = img.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(sheet)
}

pub fn run_sweep(a: SweepArgs) -> CliResult {
    let l = load(&a.session, &a.checkpoint)?;
    let taus = parse_list(&a.taus)?;
    if taus.is_empty() {
        return Err(usage("--taus is empty"));
    }
    l.header(
        "sweep-tau",
        &a.checkpoint,
        &format!("{} {:?} taus {:?}", if a.refine { "refine" } else { "swap" }, a.target, taus),
    );
    let mut images = Vec::new();
    let mut points = Vec::new();
    for &tau in &taus {
        let spec = if a.refine {
            EditSpec::Refine {
                target_prompt: a.target.clone(),
                tau,
                per_token_tau: BTreeMap::new(),
            }
        } else {
            EditSpec::Swap {
                target_prompt: a.target.clone(),
                tau,
                per_token_tau: BTreeMap::new(),
            }
        };
        let out = l.run(&spec)?;
        if images.is_empty() {
            images.push(out.source.clone());
        }
        points.push(SweepPoint {
            tau,
            l2_to_source: out.edited.l2_distance(&out.source)? as f64,
        });
        images.push(out.edited);
    }
    crate::common::ensure_parent(&a.out)?;
    save_png(&a.out, &contact_sheet(&images)?)?;
    let metrics_path = a.metrics.unwrap_or_else(|| a.out.with_extension("json"));
    write_json(&metrics_path, &points)?;
    emit(&points);
    Ok(())
}
