//! Tiny end-to-end pipeline run on a small configuration.

use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use crate::checks;
use rfsep::eval::{evaluate, EvalReport};
use rfsep::loss::ZeroReferencePolicy;
use rfsep::model::{checkpoint, Model, ModelConfig};
use rfsep::training::{build_mixtures, mean_loss, MixtureConfig, TrainConfig, Trainer};
use rfsep::waveforms::{generate_library, InterpulseConfig, IntrapulseKind, Library};

pub const STEPS: usize = 50;
const RECORDS_PER_KIND: usize = 2;
const RECORD_LEN: usize = 100_000;
const MIXTURES: usize = 2;
const LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Serialize)]
struct SmokeSummary<'a> {
    seed: u64,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    step_losses: &'a [f64],
    eval: &'a EvalReport,
}

fn mixture_config(model: &ModelConfig) -> MixtureConfig {
    MixtureConfig {
        window_len: model.window_len,
        level_dbfs: (-20.0, -10.0),
        snr_db: Some((20.0, 30.0)),
        ..MixtureConfig::default()
    }
}

pub fn run(out_dir: &Path, seed: u64, steps: usize) -> anyhow::Result<()> {
    checks::output_dir(out_dir)?;
    if steps == 0 {
        return Err(checks::UsageError("--steps must be positive".into()).into());
    }

    let kinds = [IntrapulseKind::Frank, IntrapulseKind::Costas];
    let lib_dirs: Vec<_> = kinds.iter().map(|k| out_dir.join("library").join(k.name())).collect();
    for (i, (kind, dir)) in kinds.iter().zip(&lib_dirs).enumerate() {
        generate_library(*kind, RECORDS_PER_KIND, RECORD_LEN, seed.wrapping_add(i as u64), &InterpulseConfig::default(), dir)
            .context("stage synth")?;
    }
    let lib = Library::open_many(&lib_dirs).context("stage synth")?;

    let model_config = ModelConfig {
        init_seed: seed,
        ..ModelConfig::tiny()
    };
    let mixture = mixture_config(&model_config);
    let batch = build_mixtures(&lib, MIXTURES, &mixture, seed).context("stage mix")?;

    let train_config = TrainConfig {
        batch_size: MIXTURES,
        seed,
        mixture,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Model::new(model_config)?, train_config).context("stage train")?;
    let initial_loss = mean_loss(&trainer.model, &batch, ZeroReferencePolicy::Skip).context("stage train")?;
    let mut step_losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        step_losses.push(trainer.train_step(&batch, LEARNING_RATE).context("stage train")?.loss);
    }
    let final_loss = mean_loss(&trainer.model, &batch, ZeroReferencePolicy::Skip).context("stage train")?;
    log::info!("loss {initial_loss:.4} -> {final_loss:.4} after {steps} steps");
    if final_loss.is_nan() || final_loss >= initial_loss {
        return Err(rfsep::Error::Numeric(format!("loss did not decrease: {initial_loss} -> {final_loss}")))
            .context("stage train");
    }

    let report = evaluate(&trainer.model, &batch).context("stage eval")?;
    checkpoint::save(&trainer.model, &out_dir.join("smoke.ckpt")).context("stage eval")?;
    let summary = SmokeSummary {
        seed,
        steps,
        initial_loss,
        final_loss,
        step_losses: &step_losses,
        eval: &report,
    };
    let path = out_dir.join("smoke.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    println!("smoke ok: loss {initial_loss:.6} -> {final_loss:.6}, mean SD-SDR {:.2} dB", report.mean_sd_sdr);
    Ok(())
}
