use std::path::Path;

use atnf_core::checkpoint::Checkpoint;
use atnf_core::controller::MaskOptions;
use atnf_core::trainer::{evaluate, TrainConfig, Trainer};

use crate::error::CliResult;
use crate::header;

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub resume: bool,
    pub steps: Option<u64>,
}

pub fn run(args: TrainArgs<'_>) -> CliResult {
    let mut config = TrainConfig::load(args.config)?;
    if let Some(s) = args.steps {
        config.steps = s;
    }
    let mut trainer = if args.resume && config.checkpoint.exists() {
        let ck = Checkpoint::load_expecting(&config.checkpoint, &config.model)?;
        let mut t = Trainer::resume(ck)?;
        if t.config().steps != config.steps {
            log::info!("extending run to {} steps", config.steps);
        }
        let mut c = t.config().clone();
        c.steps = config.steps;
        t = Trainer::resume(Checkpoint {
            train: Some(atnf_core::checkpoint::TrainState {
                config: c,
                step: t.step(),
                losses: t.losses().to_vec(),
            }),
            ..t.checkpoint()
        })?;
        t
    } else {
        Trainer::new(config.clone())?
    };
    header::print("train", &[("config", toml_string(trainer.config())), ("seed", trainer.config().seed.to_string()), ("start_step", trainer.step().to_string())]);

    let started = std::time::Instant::now();
    let mut window = Vec::new();
    let cfg = trainer.config().clone();
    trainer.run(|t, loss| {
        window.push(loss);
        let step = t.step();
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            eprintln!(
                "step {step:>6}  loss {mean:.5}  elapsed {:.0}s",
                started.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            t.checkpoint().save(&cfg.checkpoint)?;
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let m = evaluate(t.model(), t.schedule(), &Default::default(), 20, &MaskOptions::default())?;
            eprintln!(
                "eval  {step:>6}  mse {:.4}  iou shape {:.3} article {:.3}  wins {:.2}",
                m.mse, m.iou_shape, m.iou_article, m.shape_wins
            );
        }
        Ok(())
    })?;
    let ck = trainer.checkpoint();
    ck.save(&cfg.checkpoint)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": cfg.checkpoint,
            "fingerprint": ck.fingerprint(),
            "steps": trainer.step(),
            "final_loss": trainer.losses().last(),
        })
    );
    Ok(())
}

fn toml_string(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).unwrap_or_default().replace('\n', "; ")
}
