//! Cross-attention and hybrid attention with a capture/override hook.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParameterStore, Scalar, Tape, Tensor, Var};

/// Which sampling step a forward pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Diffusion timestep `t` in `[1, T]`.
    pub t: usize,
    /// Position in the sampling loop; 0 is the first (noisiest) step.
    pub index: usize,
    /// Total number of steps in the loop.
    pub count: usize,
}

impl StepInfo {
    pub fn single(t: usize) -> Self {
        StepInfo {
            t,
            index: 0,
            count: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Keys and values come from the prompt only.
    Cross,
    /// Self-attention whose key/value set is extended with the prompt tokens.
    Hybrid,
}

/// One attention site invocation, handed to the hook once per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub layer: usize,
    pub kind: AttentionKind,
    pub resolution: usize,
    pub head: usize,
    pub step: StepInfo,
}

pub enum HookAction<F> {
    Observe,
    /// Use this map (same shape as the observed one) in place of the computed
    /// one. Values still come from the current prompt.
    Replace(Tensor<F>),
}

/// Observer/editor of the `pixels × tokens` attention maps.
///
/// In hybrid layers only the token columns are exposed; the spatial columns
/// always pass through unchanged.
pub trait AttentionHook<F: Scalar> {
    fn attend(&mut self, site: &Site, map: &Tensor<F>) -> Result<HookAction<F>>;
}

/// Leaves every map untouched.
pub struct IdentityHook;

impl<F: Scalar> AttentionHook<F> for IdentityHook {
    fn attend(&mut self, _site: &Site, map: &Tensor<F>) -> Result<HookAction<F>> {
        Ok(HookAction::Replace(map.clone()))
    }
}

impl<F: Scalar, H: FnMut(&Site, &Tensor<F>) -> Result<HookAction<F>>> AttentionHook<F> for H {
    fn attend(&mut self, site: &Site, map: &Tensor<F>) -> Result<HookAction<F>> {
        self(site, map)
    }
}

/// A captured attention map `M`, `(h·w) × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub kind: AttentionKind,
    pub resolution: usize,
    pub head: usize,
    pub t: usize,
    pub step_index: usize,
    pub map: Tensor<f32>,
    /// Per-row attention mass on the spatial columns; empty for cross sites.
    pub spatial_mass: Vec<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionParams {
    pub layer: usize,
    pub kind: AttentionKind,
    pub resolution: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub q: ParamId,
    pub k_self: Option<ParamId>,
    pub v_self: Option<ParamId>,
    pub k_text: ParamId,
    pub v_text: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub(crate) struct AttentionCall<'a, 'h, F: Scalar> {
    pub hook: Option<&'a mut (dyn AttentionHook<F> + 'h)>,
    pub step: StepInfo,
    pub records: Option<&'a mut Vec<AttentionRecord>>,
}

impl AttentionParams {
    /// `x`: `[C, H, W]` features, `text`: `[L, D]` embedded prompt. Returns
    /// `x + attention(x)`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        x: Var,
        text: Var,
        call: &mut AttentionCall<'_, '_, F>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let p = h * w;
        let tokens = tape.shape(text)[0];

        let g = tape.param(store, self.norm_g);
        let b = tape.param(store, self.norm_b);
        let n = tape.group_norm(x, g, b, self.groups)?;
        let n = tape.reshape(n, &[c, p])?;

        let wq = tape.param(store, self.q);
        let qt = tape.matmul(wq, n)?;
        let wk = tape.param(store, self.k_text);
        let wv = tape.param(store, self.v_text);
        let kt_text = tape.matmul_t(wk, text, false, true)?;
        let vt_text = tape.matmul_t(wv, text, false, true)?;
        let (kt, vt, spatial) = match self.kind {
            AttentionKind::Cross => (kt_text, vt_text, 0),
            AttentionKind::Hybrid => {
                let ks = self.k_self.expect("hybrid layer has spatial keys");
                let vs = self.v_self.expect("hybrid layer has spatial values");
                let wks = tape.param(store, ks);
                let wvs = tape.param(store, vs);
                let kt_self = tape.matmul(wks, n)?;
                let vt_self = tape.matmul(wvs, n)?;
                let kt = tape.concat_cols(&[kt_self, kt_text])?;
                let vt = tape.concat_cols(&[vt_self, vt_text])?;
                (kt, vt, p)
            }
        };

        let scale = F::lit(1.0 / (self.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let d0 = head * self.head_dim;
            let q = tape.slice_dim0(qt, d0, self.head_dim)?;
            let k = tape.slice_dim0(kt, d0, self.head_dim)?;
            let v = tape.slice_dim0(vt, d0, self.head_dim)?;
            let scores = tape.matmul_t(q, k, true, false)?;
            let scores = tape.scale(scores, scale);
            let m = tape.softmax_rows(scores)?;
            let m = self.apply_hook(tape, m, spatial, tokens, head, call)?;
            heads.push(tape.matmul_t(v, m, false, true)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_dim0(&heads)?
        };
        let wo = tape.param(store, self.out_w);
        let bo = tape.param(store, self.out_b);
        let y = tape.matmul(wo, o)?;
        let y = tape.add_channel(y, bo)?;
        let y = tape.reshape(y, &[c, h, w])?;
        tape.add(x, y)
    }

    fn apply_hook<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        m: Var,
        spatial: usize,
        tokens: usize,
        head: usize,
        call: &mut AttentionCall<'_, '_, F>,
    ) -> Result<Var> {
        if call.hook.is_none() && call.records.is_none() {
            return Ok(m);
        }
        let text_map = if spatial == 0 {
            tape.value(m).clone()
        } else {
            tape.value(m).slice_cols(spatial, tokens)
        };
        let site = Site {
            layer: self.layer,
            kind: self.kind,
            resolution: self.resolution,
            head,
            step: call.step,
        };
        if let Some(records) = call.records.as_deref_mut() {
            let full = tape.value(m);
            let spatial_mass = (0..full.rows())
                .map(|r| (0..spatial).map(|j| num_traits::ToPrimitive::to_f64(&full.get2(r, j)).unwrap_or(f64::NAN)).sum::<f64>() as f32)
                .collect();
            records.push(AttentionRecord {
                layer: self.layer,
                kind: self.kind,
                resolution: self.resolution,
                head,
                t: call.step.t,
                step_index: call.step.index,
                map: text_map.cast(),
                spatial_mass,
            });
        }
        let Some(hook) = call.hook.as_deref_mut() else {
            return Ok(m);
        };
        match hook.attend(&site, &text_map)? {
            HookAction::Observe => Ok(m),
            HookAction::Replace(new_map) => {
                if new_map.shape() != text_map.shape() {
                    return Err(Error::HookShape {
                        expected: text_map.shape().to_vec(),
                        got: new_map.shape().to_vec(),
                    });
                }
                let replaced = tape.constant(new_map);
                if spatial == 0 {
                    Ok(replaced)
                } else {
                    let self_cols = tape.slice_cols(m, 0, spatial)?;
                    tape.concat_cols(&[self_cols, replaced])
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One pixel with features `[1, −1]`, a two-token prompt embedded as
    /// `[1]` and `[0]`, unit projections.
    fn hand_layer(kind: AttentionKind) -> (ParameterStore<f64>, AttentionParams) {
        let mut s = ParameterStore::new();
        let mut put = |n: &str, t: Tensor<f64>| s.insert(n, t).unwrap();
        let norm_g = put("g", Tensor::ones(&[2]));
        let norm_b = put("b", Tensor::zeros(&[2]));
        let q = put("q", Tensor::from_rows(&[&[1.0, 0.0]]));
        let k_text = put("kt", Tensor::from_rows(&[&[1.0]]));
        let v_text = put("vt", Tensor::from_rows(&[&[1.0]]));
        let (k_self, v_self) = match kind {
            AttentionKind::Cross => (None, None),
            AttentionKind::Hybrid => (
                Some(put("ks", Tensor::from_rows(&[&[0.0, 0.0]]))),
                Some(put("vs", Tensor::from_rows(&[&[0.0, 0.0]]))),
            ),
        };
        let out_w = put("ow", Tensor::from_rows(&[&[1.0], &[1.0]]));
        let out_b = put("ob", Tensor::zeros(&[2]));
        let params = AttentionParams {
            layer: 0,
            kind,
            resolution: 1,
            heads: 1,
            head_dim: 1,
            groups: 1,
            norm_g,
            norm_b,
            q,
            k_self,
            v_self,
            k_text,
            v_text,
            out_w,
            out_b,
        };
        (s, params)
    }

    fn run(
        kind: AttentionKind,
        hook: Option<&mut dyn AttentionHook<f64>>,
    ) -> (Tensor<f64>, Vec<AttentionRecord>) {
        let (store, layer) = hand_layer(kind);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(vec![2, 1, 1], vec![1.0, -1.0]).unwrap());
        let text = tape.constant(Tensor::from_rows(&[&[1.0], &[0.0]]));
        let mut records = Vec::new();
        let mut call = AttentionCall {
            hook,
            step: StepInfo::single(1),
            records: Some(&mut records),
        };
        let y = layer.forward(&mut tape, &store, x, text, &mut call).unwrap();
        (tape.value(y).clone(), records)
    }

    #[test]
    fn cross_attention_matches_hand_computation() {
        let (y, recs) = run(AttentionKind::Cross, None);
        // normalized features are [1, −1]/√(1 + 1e-5); softmax of [q, 0]
        let q = 1.0 / (1.0f64 + 1e-5).sqrt();
        let m0 = 1.0 / (1.0 + (-q).exp());
        assert!((m0 - 0.731_058_6).abs() < 1e-5);
        assert_eq!(recs.len(), 1);
        assert!((recs[0].map.get2(0, 0) as f64 - m0).abs() < 1e-6);
        assert!((recs[0].map.get2(0, 1) as f64 - (1.0 - m0)).abs() < 1e-6);
        assert!((y.data()[0] - (1.0 + m0)).abs() < 1e-12);
        assert!((y.data()[1] - (-1.0 + m0)).abs() < 1e-12);
    }

    #[test]
    fn replaced_map_drives_the_output() {
        let mut hook = |_: &Site, _: &Tensor<f64>| {
            Ok(HookAction::Replace(Tensor::from_rows(&[&[0.0, 1.0]])))
        };
        let (y, recs) = run(AttentionKind::Cross, Some(&mut hook));
        // all weight on the zero-valued token: no update
        assert_eq!(y.data(), &[1.0, -1.0]);
        // records hold the pre-hook map
        assert!(recs[0].map.get2(0, 0) > 0.7);
    }

    #[test]
    fn hybrid_hook_sees_only_token_columns() {
        let mut seen = Vec::new();
        let mut hook = |site: &Site, m: &Tensor<f64>| {
            seen.push((site.kind, m.shape().to_vec()));
            Ok(HookAction::Observe)
        };
        let (_, recs) = run(AttentionKind::Hybrid, Some(&mut hook));
        assert_eq!(seen, vec![(AttentionKind::Hybrid, vec![1, 2])]);
        // spatial column takes part of the mass, so token columns sum below 1
        let s: f32 = recs[0].map.row(0).iter().sum();
        assert!(s < 1.0 && s > 0.0);
    }

    #[test]
    fn wrong_shape_replacement_is_rejected() {
        let (store, layer) = hand_layer(AttentionKind::Cross);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(vec![2, 1, 1], vec![1.0, -1.0]).unwrap());
        let text = tape.constant(Tensor::from_rows(&[&[1.0], &[0.0]]));
        let mut hook = |_: &Site, _: &Tensor<f64>| Ok(HookAction::Replace(Tensor::zeros(&[1, 3])));
        let mut call = AttentionCall {
            hook: Some(&mut hook),
            step: StepInfo::single(1),
            records: None,
        };
        let r = layer.forward(&mut tape, &store, x, text, &mut call);
        assert!(matches!(r, Err(Error::HookShape { .. })));
    }
}
