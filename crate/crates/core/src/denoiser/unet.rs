use super::attention::{AttentionCall, AttentionHook, AttentionKind, AttentionParams, AttentionRecord, StepInfo};
use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::rng::{Domain, Rng, StreamId};
use crate::tensor::{ParamId, ParameterStore, Scalar, Tape, Tensor, Var};
use crate::text::TokenSequence;

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    temb: Linear,
    norm2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    skip: Option<Linear>,
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<AttentionParams>,
}

#[derive(Debug, Clone)]
struct Layout {
    text_table: ParamId,
    time1: Linear,
    time2: Linear,
    conv_in: (ParamId, ParamId),
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: Option<AttentionParams>,
    mid2: ResBlock,
    up: Vec<Level>,
    norm_out: (ParamId, ParamId),
    conv_out: (ParamId, ParamId),
    attention: Vec<LayerInfo>,
}

/// Static description of one attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    pub layer: usize,
    pub kind: AttentionKind,
    pub resolution: usize,
}

/// Noise-prediction U-Net together with its parameters.
#[derive(Clone)]
pub struct Denoiser<F: Scalar = f32> {
    config: DenoiserConfig,
    params: ParameterStore<F>,
    layout: Layout,
}

struct Builder<'a, F: Scalar> {
    store: ParameterStore<F>,
    rng: Option<&'a mut Rng>,
}

enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `sqrt(1 / fan_in)`.
    FanIn(usize),
    Normal(f64),
}

impl<F: Scalar> Builder<'_, F> {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = match (init, self.rng.as_deref_mut()) {
            (Init::Zeros, _) | (_, None) => Tensor::zeros(shape),
            (Init::Ones, _) => Tensor::ones(shape),
            (Init::FanIn(fan), Some(rng)) => rng
                .normal_tensor::<F>(shape)
                .scale(F::lit((1.0 / fan as f64).sqrt())),
            (Init::Normal(std), Some(rng)) => rng.normal_tensor::<F>(shape).scale(F::lit(std)),
        };
        self.store.insert(name, t)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.tensor(&format!("{name}.gamma"), &[c], Init::Ones)?,
            self.tensor(&format!("{name}.beta"), &[c], Init::Zeros)?,
        ))
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, zero: bool) -> Result<(ParamId, ParamId)> {
        let init = if zero { Init::Zeros } else { Init::FanIn(ci * 9) };
        Ok((
            self.tensor(&format!("{name}.weight"), &[co, ci, 3, 3], init)?,
            self.tensor(&format!("{name}.bias"), &[co], Init::Zeros)?,
        ))
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, zero: bool) -> Result<Linear> {
        let init = if zero { Init::Zeros } else { Init::FanIn(i) };
        Ok(Linear {
            w: self.tensor(&format!("{name}.weight"), &[o, i], init)?,
            b: self.tensor(&format!("{name}.bias"), &[o, 1], Init::Zeros)?,
        })
    }

    fn res_block(&mut self, name: &str, ci: usize, co: usize, temb: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), ci)?,
            conv1: self.conv(&format!("{name}.conv1"), ci, co, false)?,
            temb: self.linear(&format!("{name}.temb"), temb, co, false)?,
            norm2: self.norm(&format!("{name}.norm2"), co)?,
            conv2: self.conv(&format!("{name}.conv2"), co, co, true)?,
            skip: if ci == co {
                None
            } else {
                Some(self.linear(&format!("{name}.skip"), ci, co, false)?)
            },
        })
    }

    fn attention(
        &mut self,
        name: &str,
        cfg: &DenoiserConfig,
        c: usize,
        info: LayerInfo,
    ) -> Result<AttentionParams> {
        let inner = cfg.heads * cfg.head_dim;
        let norm = self.norm(&format!("{name}.norm"), c)?;
        let q = self.tensor(&format!("{name}.to_q"), &[inner, c], Init::FanIn(c))?;
        let (k_self, v_self) = match info.kind {
            AttentionKind::Hybrid => (
                Some(self.tensor(&format!("{name}.to_k_self"), &[inner, c], Init::FanIn(c))?),
                Some(self.tensor(&format!("{name}.to_v_self"), &[inner, c], Init::FanIn(c))?),
            ),
            AttentionKind::Cross => (None, None),
        };
        let td = cfg.text_dim;
        let k_text = self.tensor(&format!("{name}.to_k_text"), &[inner, td], Init::FanIn(td))?;
        let v_text = self.tensor(&format!("{name}.to_v_text"), &[inner, td], Init::FanIn(td))?;
        let out_w = self.tensor(&format!("{name}.to_out.weight"), &[c, inner], Init::Zeros)?;
        let out_b = self.tensor(&format!("{name}.to_out.bias"), &[c], Init::Zeros)?;
        Ok(AttentionParams {
            layer: info.layer,
            kind: info.kind,
            resolution: info.resolution,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            groups: cfg.norm_groups,
            norm_g: norm.0,
            norm_b: norm.1,
            q,
            k_self,
            v_self,
            k_text,
            v_text,
            out_w,
            out_b,
        })
    }
}

fn build_layout<F: Scalar>(cfg: &DenoiserConfig, rng: Option<&mut Rng>) -> Result<(ParameterStore<F>, Layout)> {
    cfg.validate()?;
    let mut b = Builder {
        store: ParameterStore::new(),
        rng,
    };
    let chans = cfg.level_channels();
    let res = cfg.resolutions();
    let temb_hidden = 2 * cfg.time_dim;
    let mut attention = Vec::new();
    let mut next_site = |kind, resolution| {
        let info = LayerInfo {
            layer: attention.len(),
            kind,
            resolution,
        };
        attention.push(info);
        info
    };

    let text_table = b.tensor("text.embedding", &[cfg.vocab_size, cfg.text_dim], Init::Normal(1.0))?;
    let time1 = b.linear("time.linear1", cfg.time_dim, temb_hidden, false)?;
    let time2 = b.linear("time.linear2", temb_hidden, temb_hidden, false)?;
    let conv_in = b.conv("conv_in", cfg.in_channels, chans[0], false)?;

    let mut down = Vec::new();
    let mut prev = chans[0];
    for (i, (&c, &r)) in chans.iter().zip(&res).enumerate() {
        let resb = b.res_block(&format!("down.{i}.res"), prev, c, temb_hidden)?;
        let attn = if cfg.attention_resolutions.contains(&r) {
            let info = next_site(AttentionKind::Hybrid, r);
            Some(b.attention(&format!("down.{i}.attn"), cfg, c, info)?)
        } else {
            None
        };
        down.push(Level { res: resb, attn });
        prev = c;
    }

    let bottom = *res.last().expect("validated non-empty");
    let c_last = *chans.last().expect("validated non-empty");
    let mid1 = b.res_block("mid.res1", c_last, c_last, temb_hidden)?;
    let mid_attn = if cfg.attention_resolutions.contains(&bottom) {
        let info = next_site(AttentionKind::Cross, bottom);
        Some(b.attention("mid.attn", cfg, c_last, info)?)
    } else {
        None
    };
    let mid2 = b.res_block("mid.res2", c_last, c_last, temb_hidden)?;

    let mut up = Vec::new();
    let mut prev = c_last;
    for i in (0..chans.len()).rev() {
        let (c, r) = (chans[i], res[i]);
        let resb = b.res_block(&format!("up.{i}.res"), prev + c, c, temb_hidden)?;
        let attn = if cfg.attention_resolutions.contains(&r) {
            let info = next_site(AttentionKind::Hybrid, r);
            Some(b.attention(&format!("up.{i}.attn"), cfg, c, info)?)
        } else {
            None
        };
        up.push(Level { res: resb, attn });
        prev = c;
    }
    let norm_out = b.norm("norm_out", chans[0])?;
    let conv_out = b.conv("conv_out", chans[0], cfg.in_channels, true)?;

    Ok((
        b.store,
        Layout {
            text_table,
            time1,
            time2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
            attention,
        },
    ))
}

/// Sinusoidal embedding of a timestep, `[dim, 1]`.
pub(crate) fn timestep_embedding<F: Scalar>(t: usize, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = vec![F::zero(); dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[k] = F::lit(arg.sin());
        data[half + k] = F::lit(arg.cos());
    }
    Tensor::from_vec(vec![dim, 1], data).expect("dim values")
}

impl<F: Scalar> Denoiser<F> {
    /// Freshly initialised network.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed, StreamId::new(Domain::Init, 0));
        let (params, layout) = build_layout(&config, Some(&mut rng))?;
        Ok(Denoiser {
            config,
            params,
            layout,
        })
    }

    /// Network with zero-valued parameters, for filling from a checkpoint.
    pub fn empty(config: DenoiserConfig) -> Result<Self> {
        let (params, layout) = build_layout(&config, None)?;
        Ok(Denoiser {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<F> {
        &mut self.params
    }

    /// Attention sites in forward order.
    pub fn attention_layers(&self) -> &[LayerInfo] {
        &self.layout.attention
    }

    /// Number of maps a single forward hands to the hook.
    pub fn maps_per_forward(&self) -> usize {
        self.layout.attention.len() * self.config.heads
    }

    pub fn text_table(&self) -> &Tensor<F> {
        self.params.value(self.layout.text_table)
    }

    fn linear(&self, tape: &mut Tape<F>, l: &Linear, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(w, x)?;
        tape.add(y, b)
    }

    fn res_block(&self, tape: &mut Tape<F>, rb: &ResBlock, x: Var, temb: Var) -> Result<Var> {
        let groups = self.config.norm_groups;
        let p = &self.params;
        let (g1, b1) = (tape.param(p, rb.norm1.0), tape.param(p, rb.norm1.1));
        let h = tape.group_norm(x, g1, b1, groups)?;
        let h = tape.silu(h);
        let (w1, c1) = (tape.param(p, rb.conv1.0), tape.param(p, rb.conv1.1));
        let h = tape.conv2d(h, w1, c1)?;
        let tproj = self.linear(tape, &rb.temb, temb)?;
        let h = tape.add_channel(h, tproj)?;
        let (g2, b2) = (tape.param(p, rb.norm2.0), tape.param(p, rb.norm2.1));
        let h = tape.group_norm(h, g2, b2, groups)?;
        let h = tape.silu(h);
        let (w2, c2) = (tape.param(p, rb.conv2.0), tape.param(p, rb.conv2.1));
        let h = tape.conv2d(h, w2, c2)?;
        let skip = match &rb.skip {
            None => x,
            Some(l) => {
                let s = tape.shape(x).to_vec();
                let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
                let w = tape.param(p, l.w);
                let b = tape.param(p, l.b);
                let y = tape.matmul(w, flat)?;
                let y = tape.add_channel(y, b)?;
                let co = tape.shape(y)[0];
                tape.reshape(y, &[co, s[1], s[2]])?
            }
        };
        tape.add(h, skip)
    }

    /// Embedded prompt rows `[L, text_dim]` on the tape.
    pub fn embed_tokens(&self, tape: &mut Tape<F>, tokens: &TokenSequence) -> Result<Var> {
        let table = tape.param(&self.params, self.layout.text_table);
        tape.gather_rows(table, tokens.ids())
    }

    /// Full U-Net forward on the tape. Every attention site calls `hook` once
    /// per head; when `records` is given, the pre-hook maps are appended to it
    /// in forward order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        z: Var,
        t: usize,
        text: Var,
        hook: Option<&mut dyn AttentionHook<F>>,
        step: StepInfo,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if tape.shape(z) != cfg.image_shape() {
            return Err(Error::dim(
                "predict_noise",
                format!("latent {:?}, expected {:?}", tape.shape(z), cfg.image_shape()),
            ));
        }
        let mut call = AttentionCall { hook, step, records };
        let lay = &self.layout;
        let p = &self.params;

        let temb = tape.constant(timestep_embedding(t, cfg.time_dim));
        let temb = self.linear(tape, &lay.time1, temb)?;
        let temb = tape.silu(temb);
        let temb = self.linear(tape, &lay.time2, temb)?;
        let temb = tape.silu(temb);

        let (wi, bi) = (tape.param(p, lay.conv_in.0), tape.param(p, lay.conv_in.1));
        let mut h = tape.conv2d(z, wi, bi)?;
        let mut skips = Vec::with_capacity(lay.down.len());
        for (i, level) in lay.down.iter().enumerate() {
            if i > 0 {
                h = tape.downsample2(h)?;
            }
            h = self.res_block(tape, &level.res, h, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(tape, p, h, text, &mut call)?;
            }
            skips.push(h);
        }
        h = self.res_block(tape, &lay.mid1, h, temb)?;
        if let Some(a) = &lay.mid_attn {
            h = a.forward(tape, p, h, text, &mut call)?;
        }
        h = self.res_block(tape, &lay.mid2, h, temb)?;
        let levels = lay.up.len();
        for (k, level) in lay.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat_dim0(&[h, skip])?;
            h = self.res_block(tape, &level.res, h, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(tape, p, h, text, &mut call)?;
            }
            if k + 1 < levels {
                h = tape.upsample2(h)?;
            }
        }
        let (go, bo) = (tape.param(p, lay.norm_out.0), tape.param(p, lay.norm_out.1));
        h = tape.group_norm(h, go, bo, cfg.norm_groups)?;
        h = tape.silu(h);
        let (wo, co) = (tape.param(p, lay.conv_out.0), tape.param(p, lay.conv_out.1));
        let out = tape.conv2d(h, wo, co)?;
        tape.value(out).check_finite("predict_noise")?;
        Ok(out)
    }

    /// Inference forward: predicted noise and the captured attention maps.
    pub fn predict_noise(
        &self,
        z: &Tensor<F>,
        t: usize,
        tokens: &TokenSequence,
        hook: Option<&mut dyn AttentionHook<F>>,
        step: StepInfo,
    ) -> Result<(Tensor<F>, Vec<AttentionRecord>)> {
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let text = self.embed_tokens(&mut tape, tokens)?;
        let mut records = Vec::with_capacity(self.maps_per_forward());
        let out = self.forward(&mut tape, zv, t, text, hook, step, Some(&mut records))?;
        Ok((tape.value(out).clone(), records))
    }

    /// Like [`Self::predict_noise`] without capturing maps.
    pub fn predict_noise_only(
        &self,
        z: &Tensor<F>,
        t: usize,
        tokens: &TokenSequence,
        hook: Option<&mut dyn AttentionHook<F>>,
        step: StepInfo,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let text = self.embed_tokens(&mut tape, tokens)?;
        let out = self.forward(&mut tape, zv, t, text, hook, step, None)?;
        Ok(tape.value(out).clone())
    }
}
