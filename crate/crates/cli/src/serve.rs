use std::path::PathBuf;
use std::time::Duration;

use clap::Args;

use atnf_service::ServiceConfig;

use crate::common::{load_checkpoint, DEFAULT_CHECKPOINT};
use crate::error::{usage, CliResult};
use crate::header;

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    pub checkpoint: PathBuf,
    /// Bind address; overrides `ATNF_ADDR`.
    #[arg(long)]
    pub addr: Option<String>,
    /// Sampler worker count; overrides `ATNF_WORKERS`.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Append sessions to this JSONL file and replay it on startup.
    #[arg(long)]
    pub persist: Option<PathBuf>,
    /// Per-request timeout; overrides `ATNF_TIMEOUT_SECS`.
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Allowed browser origin; overrides `ATNF_CORS_ORIGIN`.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

pub fn run(a: ServeArgs) -> CliResult {
    let mut cfg = ServiceConfig::from_env()?;
    if let Some(addr) = a.addr {
        cfg.addr = addr
            .parse()
            .map_err(|_| usage(format!("--addr {addr:?} is not a socket address")))?;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(t) = a.timeout_secs {
        cfg.timeout = Duration::try_from_secs_f64(t).map_err(|_| usage(format!("--timeout-secs {t} out of range")))?;
    }
    cfg.persist = a.persist;
    if a.cors_origin.is_some() {
        cfg.cors_origin = a.cors_origin;
    }
    cfg.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    header::print(
        "serve",
        &[
            ("checkpoint", format!("{} ({})", a.checkpoint.display(), ck.fingerprint())),
            ("addr", cfg.addr.to_string()),
            ("workers", cfg.workers.to_string()),
            ("timeout_secs", cfg.timeout.as_secs_f64().to_string()),
            ("persist", format!("{:?}", cfg.persist)),
        ],
    );
    Ok(atnf_service::serve_blocking(ck, cfg)?)
}
