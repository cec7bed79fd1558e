mod common;

use std::collections::BTreeMap;

use atnf_core::controller::{run_p2p, EditSpec};
use atnf_core::denoiser::{AttentionKind, HookAction, IdentityHook, Site, StepInfo};
use atnf_core::diffusion::{q_sample, ScheduleConfig, Sampler, SamplerConfig, SamplerMode, Start};
use atnf_core::rng::{gaussian, Domain, StreamId};
use atnf_core::tensor::gradcheck;
use atnf_core::tensor::Tape;
use atnf_core::text::Vocabulary;
use atnf_core::{Error, Tensor};

use common::random_net;

const PROMPT: &str = "a big red square on a white background";

fn latent() -> Tensor {
    gaussian(5, StreamId::new(Domain::Latent, 0), &[3, 8, 8])
}

#[test]
fn prediction_is_deterministic_and_records_every_site() {
    let net = random_net::<f32>(1);
    let v = Vocabulary::default();
    let tok = v.tokenize(PROMPT).unwrap();
    let (a, ra) = net.predict_noise(&latent(), 30, &tok, None, StepInfo::single(30)).unwrap();
    let (b, rb) = net.predict_noise(&latent(), 30, &tok, None, StepInfo::single(30)).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), net.maps_per_forward());
    for r in &ra {
        assert_eq!(r.map.shape(), &[r.resolution * r.resolution, 12]);
        for row in 0..r.map.rows() {
            let s: f32 = r.map.row(row).iter().sum();
            match r.kind {
                AttentionKind::Cross => assert!((s - 1.0).abs() < 1e-5),
                AttentionKind::Hybrid => assert!(s <= 1.0 + 1e-5),
            }
        }
    }
}

#[test]
fn identity_hook_is_bit_equivalent() {
    let net = random_net::<f32>(2);
    let tok = Vocabulary::default().tokenize(PROMPT).unwrap();
    let plain = net.predict_noise_only(&latent(), 10, &tok, None, StepInfo::single(10)).unwrap();
    let mut id = IdentityHook;
    let hooked = net
        .predict_noise_only(&latent(), 10, &tok, Some(&mut id), StepInfo::single(10))
        .unwrap();
    assert!(plain.bit_eq(&hooked));
}

#[test]
fn prompt_and_hook_change_the_prediction() {
    let net = random_net::<f32>(3);
    let v = Vocabulary::default();
    let a = v.tokenize(PROMPT).unwrap();
    let b = v.tokenize("a small blue circle on a black background").unwrap();
    let st = StepInfo::single(10);
    let pa = net.predict_noise_only(&latent(), 10, &a, None, st).unwrap();
    let pb = net.predict_noise_only(&latent(), 10, &b, None, st).unwrap();
    assert!(!pa.bit_eq(&pb));
    let mut flatten = |_: &Site, m: &Tensor| Ok(HookAction::Replace(Tensor::full(m.shape(), 1.0 / 12.0)));
    let pc = net.predict_noise_only(&latent(), 10, &a, Some(&mut flatten), st).unwrap();
    assert!(!pa.bit_eq(&pc));
}

#[test]
fn bad_hook_shape_and_latent_are_errors() {
    let net = random_net::<f32>(4);
    let tok = Vocabulary::default().tokenize(PROMPT).unwrap();
    let mut bad = |_: &Site, _: &Tensor| Ok(HookAction::Replace(Tensor::zeros(&[1, 1])));
    let r = net.predict_noise_only(&latent(), 10, &tok, Some(&mut bad), StepInfo::single(10));
    assert!(matches!(r, Err(Error::HookShape { .. })));
    let r = net.predict_noise_only(&Tensor::zeros(&[3, 4, 4]), 10, &tok, None, StepInfo::single(10));
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    let mut net = random_net::<f64>(6);
    let tok = Vocabulary::default().tokenize(PROMPT).unwrap();
    let z: Tensor<f64> = gaussian(7, StreamId(0), &[3, 8, 8]);
    let target: Tensor<f64> = gaussian(8, StreamId(0), &[3, 8, 8]);
    let snapshot = net.clone();
    let f = move |tape: &mut Tape<f64>, store: &atnf_core::tensor::ParameterStore<f64>| {
        let mut n = snapshot.clone();
        *n.params_mut() = store.clone();
        let zv = tape.constant(z.clone());
        let text = n.embed_tokens(tape, &tok)?;
        let out = n.forward(tape, zv, 20, text, None, StepInfo::single(20), None)?;
        let w = tape.constant(target.clone());
        let d = tape.sub(out, w)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.mean(sq))
    };
    let report = gradcheck::check("denoiser", net.params_mut(), &f, 3).unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

fn sampler_parts() -> (atnf_core::denoiser::Denoiser, atnf_core::diffusion::NoiseSchedule) {
    (random_net::<f32>(9), ScheduleConfig::default().build().unwrap())
}

#[test]
fn ddim_sampling_is_deterministic_and_prompt_sensitive() {
    let (net, sch) = sampler_parts();
    let s = Sampler::new(&net, &sch, SamplerConfig::ddim(10, 3.0)).unwrap();
    let v = Vocabulary::default();
    let a = v.tokenize(PROMPT).unwrap();
    let b = v.tokenize("a small blue circle on a black background").unwrap();
    let x1 = s.sample(&a, &Start::Seed(1), None, true).unwrap();
    let x2 = s.sample(&a, &Start::Seed(1), None, true).unwrap();
    assert!(x1.image.bit_eq(&x2.image));
    assert_eq!(x1.records.len(), 10 * net.maps_per_forward());
    let y = s.sample(&b, &Start::Seed(1), None, false).unwrap();
    assert!(!x1.image.bit_eq(&y.image));
    assert!(y.records.is_empty());
    assert!(x1.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn ddpm_uses_every_step_and_is_seeded() {
    let (net, sch) = sampler_parts();
    let cfg = SamplerConfig {
        mode: SamplerMode::Ddpm,
        steps: 100,
        guidance: 1.0,
        clip_x0: true,
    };
    let s = Sampler::new(&net, &sch, cfg).unwrap();
    let tok = Vocabulary::default().tokenize(PROMPT).unwrap();
    let a = s.sample(&tok, &Start::Seed(3), None, false).unwrap();
    let b = s.sample(&tok, &Start::Seed(3), None, false).unwrap();
    let c = s.sample(&tok, &Start::Seed(4), None, false).unwrap();
    assert!(a.image.bit_eq(&b.image));
    assert!(!a.image.bit_eq(&c.image));
    assert!(Sampler::new(&net, &sch, SamplerConfig { steps: 50, ..cfg }).is_err());
}

#[test]
fn subsampled_ddim_approaches_full_step_result() {
    let (net, sch) = sampler_parts();
    let tok = Vocabulary::default().tokenize(PROMPT).unwrap();
    let run = |steps| {
        let cfg = SamplerConfig {
            clip_x0: false,
            ..SamplerConfig::ddim(steps, 1.0)
        };
        let s = Sampler::new(&net, &sch, cfg).unwrap();
        s.sample(&tok, &Start::Seed(11), None, false).unwrap().image
    };
    let full = run(100);
    let d25 = run(25).l2_distance(&full).unwrap();
    let d50 = run(50).l2_distance(&full).unwrap();
    assert!(d50 < d25, "{d50} vs {d25}");
}

#[test]
fn inversion_with_no_steps_is_identity_and_round_trips_analytically() {
    let (net, sch) = sampler_parts();
    let tok = Vocabulary::default().tokenize(PROMPT).unwrap();
    let x0: Tensor = gaussian(1, StreamId(3), &[3, 8, 8]).map(|v: f32| (v * 0.3).clamp(-1.0, 1.0));
    let zero = Sampler::new(&net, &sch, SamplerConfig::ddim(0, 1.0)).unwrap();
    assert!(zero.invert(&x0, &tok).unwrap().bit_eq(&x0));
    let cfg = SamplerConfig {
        clip_x0: false,
        ..SamplerConfig::ddim(20, 1.0)
    };
    // Zero-initialised output layer: the noise estimate is identically zero,
    // so inversion followed by sampling is exact up to rounding.
    let flat = atnf_core::denoiser::Denoiser::new(atnf_core::denoiser::DenoiserConfig::tiny(), 0).unwrap();
    let s = Sampler::new(&flat, &sch, cfg).unwrap();
    let z = s.invert(&x0, &tok).unwrap();
    let back = s
        .sample(&tok, &Start::Latent { latent: z, seed: 0 }, None, false)
        .unwrap()
        .image;
    let err = back.l2_distance(&x0).unwrap() as f64 / (x0.len() as f64).sqrt();
    assert!(err < 1e-4, "rms {err}");
}

#[test]
fn forward_process_endpoint_is_nearly_gaussian() {
    let sch = ScheduleConfig::default().build().unwrap();
    let x0 = Tensor::full(&[1, 4000], 1.0);
    let w: Tensor = gaussian(2, StreamId::new(Domain::ForwardNoise, 0), &[1, 4000]);
    let xt = q_sample(&x0, 100, &w, &sch).unwrap();
    let mean = xt.mean() as f64;
    let var = xt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 4000.0;
    assert!(mean.abs() < 0.06 && (var - 1.0).abs() < 0.08, "{mean} {var}");
}

fn swap(target: &str, tau: f64) -> EditSpec {
    EditSpec::Swap {
        target_prompt: target.into(),
        tau,
        per_token_tau: BTreeMap::new(),
    }
}

#[test]
fn identity_edits_reproduce_the_source() {
    let (net, sch) = sampler_parts();
    let s = Sampler::new(&net, &sch, SamplerConfig::ddim(8, 3.0)).unwrap();
    let v = Vocabulary::default();
    let src = v.tokenize(PROMPT).unwrap();
    let mut weights = BTreeMap::new();
    weights.insert(2, 1.0);
    let specs = [
        swap(PROMPT, 1.0),
        EditSpec::Refine {
            target_prompt: PROMPT.into(),
            tau: 1.0,
            per_token_tau: BTreeMap::new(),
        },
        EditSpec::Reweight {
            target_prompt: PROMPT.into(),
            weights,
        },
    ];
    for spec in specs {
        let edit = spec.compile(&v, &src).unwrap();
        let out = run_p2p(&s, &src, &edit, &Start::Seed(21)).unwrap();
        assert!(out.edited.bit_eq(&out.source), "{spec:?}");
        let plain = s.sample(&src, &Start::Seed(21), None, false).unwrap();
        assert!(out.source.bit_eq(&plain.image));
    }
}

#[test]
fn zero_tau_swap_is_plain_regeneration() {
    let (net, sch) = sampler_parts();
    let s = Sampler::new(&net, &sch, SamplerConfig::ddim(8, 3.0)).unwrap();
    let v = Vocabulary::default();
    let src = v.tokenize(PROMPT).unwrap();
    let target = "a big blue square on a white background";
    let edit = swap(target, 0.0).compile(&v, &src).unwrap();
    let out = run_p2p(&s, &src, &edit, &Start::Seed(22)).unwrap();
    let plain = s.sample(&v.tokenize(target).unwrap(), &Start::Seed(22), None, false).unwrap();
    assert!(out.edited.bit_eq(&plain.image));
    let injected = run_p2p(&s, &src, &swap(target, 1.0).compile(&v, &src).unwrap(), &Start::Seed(22)).unwrap();
    assert!(!injected.edited.bit_eq(&plain.image));
}

#[test]
fn reweight_changes_output_when_not_identity() {
    let (net, sch) = sampler_parts();
    let s = Sampler::new(&net, &sch, SamplerConfig::ddim(8, 3.0)).unwrap();
    let v = Vocabulary::default();
    let src = v.tokenize(PROMPT).unwrap();
    let mut weights = BTreeMap::new();
    weights.insert(2, -2.0);
    let edit = EditSpec::Reweight {
        target_prompt: PROMPT.into(),
        weights,
    }
    .compile(&v, &src)
    .unwrap();
    let out = run_p2p(&s, &src, &edit, &Start::Seed(23)).unwrap();
    assert!(!out.edited.bit_eq(&out.source));
}
