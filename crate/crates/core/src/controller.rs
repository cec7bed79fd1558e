//! Prompt-to-prompt editing: lockstep source/target sampling with attention
//! injection, the three edit functions, attention-derived masks and blending.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionHook, AttentionRecord, HookAction, Site, StepInfo};
use crate::diffusion::{Sampler, SamplerConfig, Start};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;
use crate::text::{self, AlignmentMap, ColumnMap, ColumnSource, TokenSequence, Vocabulary};

pub const FADER_MIN: f64 = -2.0;
pub const FADER_MAX: f64 = 2.0;

/// Canonical edit request. Token indices refer to the source prompt for
/// `per_token_tau` and to the (shared) prompt for `weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", try_from = "RawSpec")]
pub enum EditSpec {
    Swap {
        target_prompt: String,
        tau: f64,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        per_token_tau: BTreeMap<usize, f64>,
    },
    Refine {
        target_prompt: String,
        tau: f64,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        per_token_tau: BTreeMap<usize, f64>,
    },
    Reweight {
        target_prompt: String,
        weights: BTreeMap<usize, f64>,
    },
}

/// Flat wire form; every field optional so that errors can name the field.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    #[serde(rename = "type")]
    kind: String,
    target_prompt: String,
    tau: Option<f64>,
    per_token_tau: Option<BTreeMap<String, f64>>,
    weights: Option<BTreeMap<String, f64>>,
}

fn index_map(field: &str, raw: Option<BTreeMap<String, f64>>) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (k, v) in raw.unwrap_or_default() {
        let i = k
            .parse::<usize>()
            .map_err(|_| Error::field(format!("/{field}/{k}"), "key must be a token index"))?;
        out.insert(i, v);
    }
    Ok(out)
}

impl TryFrom<RawSpec> for EditSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<EditSpec> {
        let unused = |field: &str, mode: &str| {
            Error::field(format!("/{field}"), format!("not used by {mode} edits"))
        };
        match raw.kind.as_str() {
            "swap" | "refine" => {
                if raw.weights.is_some() {
                    return Err(unused("weights", &raw.kind));
                }
                let tau = raw.tau.unwrap_or(1.0);
                let per_token_tau = index_map("per_token_tau", raw.per_token_tau)?;
                let target_prompt = raw.target_prompt;
                Ok(if raw.kind == "swap" {
                    EditSpec::Swap {
                        target_prompt,
                        tau,
                        per_token_tau,
                    }
                } else {
                    EditSpec::Refine {
                        target_prompt,
                        tau,
                        per_token_tau,
                    }
                })
            }
            "reweight" => {
                if raw.tau.is_some() {
                    return Err(unused("tau", "reweight"));
                }
                if raw.per_token_tau.is_some() {
                    return Err(unused("per_token_tau", "reweight"));
                }
                let Some(weights) = raw.weights else {
                    return Err(Error::field("/weights", "required for reweight edits"));
                };
                Ok(EditSpec::Reweight {
                    target_prompt: raw.target_prompt,
                    weights: index_map("weights", Some(weights))?,
                })
            }
            other => Err(Error::field(
                "/type",
                format!("unknown edit type {other:?}; expected swap, refine or reweight"),
            )),
        }
    }
}

impl EditSpec {
    /// Parses the canonical JSON; errors carry the JSON pointer of the
    /// offending field.
    pub fn from_json(json: &str) -> Result<EditSpec> {
        let de = &mut serde_json::Deserializer::from_str(json);
        let raw: RawSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." {
                String::new()
            } else {
                format!("/{}", path.replace('.', "/"))
            };
            Error::field(pointer, e.into_inner().to_string())
        })?;
        EditSpec::try_from(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("edit spec serializes")
    }

    pub fn target_prompt(&self) -> &str {
        match self {
            EditSpec::Swap { target_prompt, .. }
            | EditSpec::Refine { target_prompt, .. }
            | EditSpec::Reweight { target_prompt, .. } => target_prompt,
        }
    }

    /// Resolves the spec against a source prompt. Fails before any sampling.
    pub fn compile(&self, vocab: &Vocabulary, source: &TokenSequence) -> Result<CompiledEdit> {
        let target = vocab
            .tokenize(self.target_prompt())
            .map_err(|e| Error::field("/target_prompt", e.to_string()))?;
        let kind = match self {
            EditSpec::Swap {
                tau, per_token_tau, ..
            } => EditKind::Inject {
                columns: text::swap_columns(source, &target),
                taus: TauSchedule::new(*tau, per_token_tau, source)?,
            },
            EditSpec::Refine {
                tau, per_token_tau, ..
            } => EditKind::Inject {
                columns: ColumnMap::from_alignment(&text::align(source, &target)),
                taus: TauSchedule::new(*tau, per_token_tau, source)?,
            },
            EditSpec::Reweight { weights, .. } => {
                if target != *source {
                    return Err(Error::field(
                        "/target_prompt",
                        "re-weighting keeps the prompt; target must equal the source",
                    ));
                }
                let mut scales = Vec::with_capacity(weights.len());
                for (&j, &c) in weights {
                    if j >= source.len() {
                        return Err(Error::field(
                            format!("/weights/{j}"),
                            format!("token index {j} beyond the {}-token prompt", source.len()),
                        ));
                    }
                    if !c.is_finite() {
                        return Err(Error::field(format!("/weights/{j}"), "scale must be finite"));
                    }
                    scales.push((j, clamp_fader(c)));
                }
                EditKind::Reweight { scales }
            }
        };
        Ok(CompiledEdit { target, kind })
    }
}

/// Clamps a fader value into `[−2, 2]`, warning when it moves.
pub fn clamp_fader(c: f64) -> f64 {
    let clamped = c.clamp(FADER_MIN, FADER_MAX);
    if clamped != c {
        log::warn!("fader value {c} clamped to {clamped}");
    }
    clamped
}

/// Injection fractions: a global `τ` with per-source-token overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct TauSchedule {
    global: f64,
    per_token: BTreeMap<usize, f64>,
}

fn check_fraction(field: String, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::field(field, format!("{v} is not a fraction in [0, 1]")))
    }
}

impl TauSchedule {
    pub fn uniform(tau: f64) -> Result<Self> {
        Ok(TauSchedule {
            global: check_fraction("/tau".into(), tau)?,
            per_token: BTreeMap::new(),
        })
    }

    fn new(tau: f64, per_token: &BTreeMap<usize, f64>, source: &TokenSequence) -> Result<Self> {
        let mut s = Self::uniform(tau)?;
        for (&i, &v) in per_token {
            let field = format!("/per_token_tau/{i}");
            if i >= source.len() {
                return Err(Error::field(
                    field,
                    format!("token index {i} beyond the {}-token source prompt", source.len()),
                ));
            }
            s.per_token.insert(i, check_fraction(field, v)?);
        }
        Ok(s)
    }

    pub fn tau_for(&self, source_token: usize) -> f64 {
        self.per_token.get(&source_token).copied().unwrap_or(self.global)
    }

    /// Source maps are injected during the first `τ` fraction of the steps.
    pub fn injects(&self, source_token: usize, step: StepInfo) -> bool {
        injection_active(self.tau_for(source_token), step)
    }
}

pub fn injection_active(tau: f64, step: StepInfo) -> bool {
    (step.index as f64) < tau * step.count as f64
}

#[derive(Debug, Clone, PartialEq)]
pub enum EditKind {
    Inject { columns: ColumnMap, taus: TauSchedule },
    Reweight { scales: Vec<(usize, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledEdit {
    pub target: TokenSequence,
    pub kind: EditKind,
}

fn check_pair(source: &Tensor, target: &Tensor) -> Result<()> {
    if source.shape() != target.shape() || source.shape().len() != 2 {
        return Err(Error::Contract(format!(
            "attention maps {:?} and {:?} do not reconcile",
            source.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Column-wise injection: each target column either keeps the target's own
/// map or takes the source column(s) named by `columns`, while that source
/// token's injection window is open.
pub fn edit_columns(
    source: &Tensor,
    target: &Tensor,
    columns: &ColumnMap,
    step: StepInfo,
    taus: &TauSchedule,
) -> Result<Tensor> {
    check_pair(source, target)?;
    let (rows, cols) = (target.rows(), target.cols());
    if columns.columns.len() != cols {
        return Err(Error::Contract(format!(
            "column map covers {} columns of a {cols}-column map",
            columns.columns.len()
        )));
    }
    let mut out = target.clone();
    for (j, col) in columns.columns.iter().enumerate() {
        let Some(lead) = col.lead() else { continue };
        if !taus.injects(lead, step) {
            continue;
        }
        let from: &[usize] = match col {
            ColumnSource::Source(i) => std::slice::from_ref(i),
            ColumnSource::Average(v) => v,
            ColumnSource::Own => unreachable!(),
        };
        if let Some(bad) = from.iter().find(|&&i| i >= cols) {
            return Err(Error::Contract(format!("source column {bad} out of range")));
        }
        let inv = 1.0 / from.len() as f32;
        let src = source.data();
        let dst = out.data_mut();
        for r in 0..rows {
            dst[r * cols + j] = if from.len() == 1 {
                src[r * cols + from[0]]
            } else {
                from.iter().map(|&i| src[r * cols + i]).sum::<f32>() * inv
            };
        }
    }
    Ok(out)
}

/// Word swap: the source map while the injection window is open, the target's
/// own afterwards. `columns` reconciles differing token layouts.
pub fn edit_swap(
    source: &Tensor,
    target: &Tensor,
    columns: &ColumnMap,
    step: StepInfo,
    taus: &TauSchedule,
) -> Result<Tensor> {
    edit_columns(source, target, columns, step, taus)
}

/// Phrase refinement: aligned columns come from the source, new tokens keep
/// the target's own columns.
pub fn edit_refine(
    source: &Tensor,
    target: &Tensor,
    alignment: &AlignmentMap,
    step: StepInfo,
    taus: &TauSchedule,
) -> Result<Tensor> {
    check_pair(source, target)?;
    if let Some(bad) = alignment.entries().iter().flatten().find(|&&i| i >= source.cols()) {
        return Err(Error::Contract(format!("alignment index {bad} out of range")));
    }
    edit_columns(source, target, &ColumnMap::from_alignment(alignment), step, taus)
}

/// Scales the listed token columns by their fader values; no renormalization.
pub fn edit_reweight(map: &Tensor, scales: &[(usize, f64)]) -> Result<Tensor> {
    let (rows, cols) = (map.rows(), map.cols());
    let mut out = map.clone();
    for &(j, c) in scales {
        if j >= cols {
            return Err(Error::Contract(format!("token column {j} out of range")));
        }
        if c == 1.0 {
            continue;
        }
        let c = c as f32;
        let d = out.data_mut();
        for r in 0..rows {
            d[r * cols + j] *= c;
        }
    }
    Ok(out)
}

/// Hook on the target trajectory that substitutes edited source maps.
struct InjectionHook<'a> {
    source: &'a [AttentionRecord],
    edit: &'a EditKind,
}

impl AttentionHook<f32> for InjectionHook<'_> {
    fn attend(&mut self, site: &Site, map: &Tensor) -> Result<HookAction<f32>> {
        let src = self
            .source
            .iter()
            .find(|r| r.layer == site.layer && r.head == site.head)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "no source map for layer {} head {}",
                    site.layer, site.head
                ))
            })?;
        match self.edit {
            EditKind::Inject { columns, taus } => {
                let any = columns
                    .columns
                    .iter()
                    .filter_map(ColumnSource::lead)
                    .any(|lead| taus.injects(lead, site.step));
                if !any {
                    return Ok(HookAction::Observe);
                }
                Ok(HookAction::Replace(edit_columns(
                    &src.map, map, columns, site.step, taus,
                )?))
            }
            EditKind::Reweight { scales } => Ok(HookAction::Replace(edit_reweight(&src.map, scales)?)),
        }
    }
}

pub struct P2pOutput {
    pub source: Tensor,
    pub edited: Tensor,
    pub latent: Tensor,
    /// Conditional-forward maps of the source trajectory, all steps.
    pub source_records: Vec<AttentionRecord>,
}

/// Runs source and target trajectories in lockstep from the same latent. At
/// every step the source's conditional forward captures its maps, and the
/// target's conditional forward replaces its own with the edited ones.
pub fn run_p2p(
    sampler: &Sampler<'_>,
    source: &TokenSequence,
    edit: &CompiledEdit,
    start: &Start,
) -> Result<P2pOutput> {
    let latent = sampler.initial_latent(start)?;
    let plan = sampler.plan();
    let (mut zs, mut zt) = (latent.clone(), latent.clone());
    let mut all = Vec::with_capacity(plan.len() * sampler.model.maps_per_forward());
    for k in 0..plan.len() {
        let step = plan[k];
        let (eps_s, recs) = sampler.guided_eps(&zs, step, source, None, true)?;
        let mut hook = InjectionHook {
            source: &recs,
            edit: &edit.kind,
        };
        let (eps_t, _) = sampler.guided_eps(&zt, step, &edit.target, Some(&mut hook), false)?;
        zs = sampler.advance(&zs, &eps_s, &plan, k, start.seed())?;
        zt = sampler.advance(&zt, &eps_t, &plan, k, start.seed())?;
        all.extend(recs);
    }
    Ok(P2pOutput {
        source: zs.map(|v| v.clamp(-1.0, 1.0)),
        edited: zt.map(|v| v.clamp(-1.0, 1.0)),
        latent,
        source_records: all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub resolution: usize,
    /// Leading fraction of the steps left out of the average.
    pub skip_fraction: f64,
    pub threshold: f64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            resolution: 16,
            skip_fraction: 0.2,
            threshold: 0.3,
        }
    }
}

/// Mean attention of one token over heads, layers and steps at one
/// resolution, as an `[r, r]` map. `None` when no record qualifies.
pub fn token_heatmap(
    records: &[AttentionRecord],
    token: usize,
    resolution: usize,
    skip_fraction: f64,
) -> Result<Option<Tensor>> {
    let Some(last) = records.iter().map(|r| r.step_index).max() else {
        return Ok(None);
    };
    let first = (skip_fraction * (last + 1) as f64).floor() as usize;
    let p = resolution * resolution;
    let mut acc = vec![0.0f64; p];
    let mut n = 0usize;
    for r in records
        .iter()
        .filter(|r| r.resolution == resolution && r.step_index >= first)
    {
        if token >= r.map.cols() || r.map.rows() != p {
            return Err(Error::Contract(format!(
                "token {token} not in a {:?} map",
                r.map.shape()
            )));
        }
        for (i, a) in acc.iter_mut().enumerate() {
            *a += r.map.get2(i, token) as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let data = acc.into_iter().map(|v| (v / n as f64) as f32).collect();
    Ok(Some(Tensor::from_vec(vec![resolution, resolution], data)?))
}

/// Rescales to `[0, 1]`; `None` for a constant map.
pub fn min_max_normalize(map: &Tensor) -> Option<Tensor> {
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi - lo > 1e-12) {
        return None;
    }
    Some(map.map(|v| (v - lo) / (hi - lo)))
}

/// Bilinear resize of an `[h, w]` map with half-pixel centres and edge
/// clamping.
pub fn resize_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (map.rows(), map.cols());
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            let v = |yy: usize, xx: usize| map.get2(yy, xx) as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Tensor::from_vec(vec![out_h, out_w], data).expect("resized map")
}

/// Thresholded, upsampled attention mask of one token. A degenerate
/// (constant or absent) map gives an empty mask.
pub fn extract_mask(
    records: &[AttentionRecord],
    token: usize,
    options: &MaskOptions,
    image_size: usize,
) -> Result<Mask> {
    let heat = token_heatmap(records, token, options.resolution, options.skip_fraction)?;
    let Some(norm) = heat.as_ref().and_then(min_max_normalize) else {
        log::warn!("attention map of token {token} is degenerate; mask is empty");
        return Ok(Mask::empty(image_size, image_size));
    };
    let up = resize_bilinear(&norm, image_size, image_size);
    let thr = options.threshold as f32;
    Ok(Mask::from_fn(image_size, image_size, |x, y| {
        up.get2(y, x) >= thr
    }))
}

/// `mask · edited + (1 − mask) · source`, pixelwise over all channels.
pub fn blend_with_mask(source: &Tensor, edited: &Tensor, mask: &Mask) -> Result<Tensor> {
    if source.shape() != edited.shape() {
        return Err(Error::dim(
            "blend",
            format!("{:?} vs {:?}", source.shape(), edited.shape()),
        ));
    }
    let s = source.shape();
    if s.len() != 3 || s[1] != mask.height() || s[2] != mask.width() {
        return Err(Error::dim(
            "blend",
            format!("image {s:?} vs mask {}x{}", mask.width(), mask.height()),
        ));
    }
    let p = s[1] * s[2];
    let bits = mask.bits();
    let data = source
        .data()
        .iter()
        .zip(edited.data())
        .enumerate()
        .map(|(i, (&a, &b))| if bits[i % p] { b } else { a })
        .collect();
    Tensor::from_vec(s.to_vec(), data)
}

/// Immutable record of a source generation, sufficient to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    /// Fingerprint of the checkpoint the session was generated with.
    pub checkpoint: String,
    /// Starting latent when it does not come from the seed (inversion).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f32>>,
}

impl Session {
    /// DDIM settings that replay this session. Sessions starting from a
    /// given latent retrace the unclamped inversion recursion.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            clip_x0: self.latent.is_none(),
            ..SamplerConfig::ddim(self.steps, self.guidance)
        }
    }

    pub fn start(&self, image_shape: &[usize]) -> Result<Start> {
        Ok(match &self.latent {
            None => Start::Seed(self.seed),
            Some(v) => Start::Latent {
                latent: Tensor::from_vec(image_shape.to_vec(), v.clone())?,
                seed: self.seed,
            },
        })
    }
}
