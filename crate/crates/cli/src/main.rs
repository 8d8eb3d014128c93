//! `rfsep`: synthesize signal libraries, train and evaluate the separator,
//! separate recorded mixtures and render spectrograms.

mod checks;
mod smoke;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use checks::UsageError;
use rfsep::eval::{emit_spectrogram_image, evaluate, separate_long, EvalReport};
use rfsep::loss::{upit, Permutation, ZeroReferencePolicy};
use rfsep::model::{checkpoint, Model, ModelConfig};
use rfsep::signal::{read_f32_file, write_f32_file, RECORD_LEN};
use rfsep::tf_transform::StftConfig;
use rfsep::training::{build_test_set, EpochRecord, History, MixtureConfig, MixtureSample, TrainConfig, Trainer};
use rfsep::waveforms::{generate_library, InterpulseConfig, IntrapulseKind, Library};

#[derive(Debug, Parser)]
#[command(name = "rfsep", version, about = "Single-channel separation of two overlapping RF signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a library of signals of one intrapulse modulation.
    Synth(SynthArgs),
    /// Train a separator on one or more libraries.
    Train(TrainArgs),
    /// Score a checkpoint on a deterministic test set.
    Eval(EvalArgs),
    /// Separate a raw signal file into two sources.
    Separate(SeparateArgs),
    /// Render the spectrogram of a raw signal file as a PNG.
    Plot(PlotArgs),
    /// Tiny end-to-end run: synth, mix, train, evaluate.
    Smoke(SmokeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// frank, p1, costas, p3, barker or linear_chirp.
    #[arg(long, value_parser = parse_kind)]
    kind: IntrapulseKind,
    #[arg(long)]
    count: usize,
    /// Samples per record.
    #[arg(long, default_value_t = RECORD_LEN)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long = "train-lib", required = true, num_args = 1..)]
    train_libs: Vec<PathBuf>,
    /// Libraries for the simulated test loss.
    #[arg(long = "test-lib", num_args = 1..)]
    test_libs: Vec<PathBuf>,
    /// Libraries for a second ("real") test loss column.
    #[arg(long = "real-lib", num_args = 1..)]
    real_libs: Vec<PathBuf>,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Per-epoch loss history (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overrides both the training seed and the initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    /// Consecutive windows per test mixture.
    #[arg(long, default_value_t = 1)]
    test_windows: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "test-lib", required = true, num_args = 1..)]
    test_libs: Vec<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// Directory for spectrograms of the first few test mixtures.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Consecutive windows per test mixture.
    #[arg(long, default_value_t = 3)]
    windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON whose `train.mixture` section sets levels and noise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write spectrograms of the input and both outputs.
    #[arg(long)]
    plots: bool,
    /// Two ground-truth files; enables channel-swap reporting.
    #[arg(long, num_args = 2)]
    truths: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    window_len: usize,
    #[arg(long, default_value_t = 256)]
    hop: usize,
    #[arg(long, default_value_t = 1)]
    zoom: usize,
}

#[derive(Debug, Args)]
struct SmokeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = smoke::STEPS)]
    steps: usize,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn parse_kind(s: &str) -> Result<IntrapulseKind, String> {
    IntrapulseKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            let names: Vec<_> = IntrapulseKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown kind `{s}` (expected one of {})", names.join(", "))
        })
}

fn read_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(rfsep::Error::from)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    checks::ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    checks::output_dir(&args.out_dir)?;
    if args.count == 0 || args.length == 0 {
        return Err(UsageError("--count and --length must be positive".into()).into());
    }
    let manifest = generate_library(
        args.kind,
        args.count,
        args.length,
        args.seed,
        &InterpulseConfig::default(),
        &args.out_dir,
    )?;
    println!(
        "wrote {} {} records of {} samples to {}",
        manifest.entries.len(),
        args.kind.name(),
        args.length,
        args.out_dir.display()
    );
    Ok(())
}

fn write_history(path: &Path, epochs: &[EpochRecord]) -> anyhow::Result<()> {
    let csv = History { epochs: epochs.to_vec() }.to_csv();
    std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    checks::library_dirs(&args.train_libs)?;
    checks::library_dirs(&args.test_libs)?;
    checks::library_dirs(&args.real_libs)?;
    checks::output_file(&args.out_checkpoint)?;
    if let Some(log) = &args.log {
        checks::output_file(log)?;
    }
    if let Some(c) = &args.config {
        checks::input_file(c)?;
    }
    if args.test_windows == 0 {
        return Err(UsageError("--test-windows must be positive".into()).into());
    }

    let RunConfig { mut model, mut train } = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        train.seed = seed;
        model.init_seed = seed;
    }
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(p) = args.pairs_per_epoch {
        train.pairs_per_epoch = p;
    }
    // Training chunks always match the model input.
    train.mixture.window_len = model.window_len;

    let lib = Library::open_many(&args.train_libs)?;
    let test_set = |dirs: &[PathBuf]| -> anyhow::Result<Option<Vec<MixtureSample>>> {
        if dirs.is_empty() {
            return Ok(None);
        }
        Ok(Some(build_test_set(&Library::open_many(dirs)?, &train.mixture, args.test_windows, train.seed)?))
    };
    let test_sim = test_set(&args.test_libs)?;
    let test_real = test_set(&args.real_libs)?;

    let model = Model::new(model)?;
    log::info!("model has {} parameters", model.count_params());
    let mut trainer = Trainer::new(model, train)?;
    checks::ensure_parent(&args.out_checkpoint)?;
    if let Some(log) = &args.log {
        checks::ensure_parent(log)?;
    }

    let mut seen = Vec::new();
    let mut first_error: Option<anyhow::Error> = None;
    let history = trainer.train(&lib, test_sim.as_deref(), test_real.as_deref(), |record, model| {
        seen.push(record.clone());
        let saved = checkpoint::save(model, &args.out_checkpoint)
            .map_err(anyhow::Error::from)
            .and_then(|_| args.log.as_deref().map_or(Ok(()), |p| write_history(p, &seen)));
        if let Err(e) = saved {
            first_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = first_error {
        return Err(e.context("saving training progress"));
    }
    checkpoint::save(&trainer.model, &args.out_checkpoint)?;
    if let Some(log) = &args.log {
        write_history(log, &history.epochs)?;
    }
    match history.epochs.last() {
        Some(r) => println!("trained {} epochs, final train loss {:.4}", history.epochs.len(), r.train_loss),
        None => println!("no epochs requested; saved the initial model"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    checkpoint: &'a Path,
    model: &'a ModelConfig,
    mixture: &'a MixtureConfig,
    windows: usize,
    seed: u64,
}

const PLOTTED_SAMPLES: usize = 4;

fn plot_sample(model: &Model, sample: &MixtureSample, dir: &Path, index: usize) -> anyhow::Result<()> {
    let stft = *model.stft().config();
    let estimates = separate_long(model, &sample.mixture)?;
    let path = |name: String| dir.join(format!("sample{index:02}_{name}.png"));
    emit_spectrogram_image(&sample.mixture, stft, 1, &path("mixture".into()))?;
    for c in 0..2 {
        emit_spectrogram_image(&sample.truths[c], stft, 1, &path(format!("truth{c}")))?;
        emit_spectrogram_image(&estimates[c], stft, 1, &path(format!("estimate{c}")))?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    checks::input_file(&args.checkpoint)?;
    checks::library_dirs(&args.test_libs)?;
    checks::output_file(&args.report)?;
    if let Some(p) = &args.plots {
        checks::output_dir(p)?;
    }
    if let Some(c) = &args.config {
        checks::input_file(c)?;
    }
    if args.windows == 0 {
        return Err(UsageError("--windows must be positive".into()).into());
    }

    let model = checkpoint::load(&args.checkpoint)?;
    let mut mixture = read_config(args.config.as_deref())?.train.mixture;
    mixture.window_len = model.config.window_len;
    let lib = Library::open_many(&args.test_libs)?;
    let samples = build_test_set(&lib, &mixture, args.windows, args.seed)?;
    let report = evaluate(&model, &samples)?;
    write_json(
        &args.report,
        &EvalOutput {
            report: &report,
            checkpoint: &args.checkpoint,
            model: &model.config,
            mixture: &mixture,
            windows: args.windows,
            seed: args.seed,
        },
    )?;
    if let Some(dir) = &args.plots {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, s) in samples.iter().take(PLOTTED_SAMPLES).enumerate() {
            plot_sample(&model, s, dir, i)?;
        }
    }
    println!(
        "mean SD-SDR {:.2} dB over {} windows, swap rate {:.3} ({} boundaries)",
        report.mean_sd_sdr, report.count, report.swap_rate, report.boundaries
    );
    Ok(())
}

/// Best permutation of every window with a non-silent reference, in window order.
fn window_permutations(estimates: &[Vec<f64>; 2], truths: &[Vec<f64>; 2], w: usize) -> anyhow::Result<Vec<(usize, Permutation)>> {
    let mut out = Vec::new();
    for (k, start) in (0..truths[0].len()).step_by(w).enumerate() {
        let end = (start + w).min(truths[0].len());
        let t = [&truths[0][start..end], &truths[1][start..end]];
        let e = [&estimates[0][start..end], &estimates[1][start..end]];
        match upit(t, e, ZeroReferencePolicy::Skip) {
            Ok(o) => out.push((k, o.permutation)),
            Err(rfsep::Error::ZeroReference) => log::debug!("window {k}: silent references"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn separate(args: SeparateArgs) -> anyhow::Result<()> {
    checks::input_file(&args.checkpoint)?;
    checks::input_file(&args.input)?;
    args.truths.iter().try_for_each(|t| checks::input_file(t))?;
    checks::output_dir(&args.out_dir)?;

    let model = checkpoint::load(&args.checkpoint)?;
    let mixture = read_f32_file(&args.input)?;
    let truths = match args.truths.as_slice() {
        [a, b] => {
            let t = [read_f32_file(a)?, read_f32_file(b)?];
            if t.iter().any(|x| x.len() != mixture.len()) {
                bail!(rfsep::Error::Dimension(format!(
                    "truth lengths {} and {} differ from the input length {}",
                    t[0].len(),
                    t[1].len(),
                    mixture.len()
                )));
            }
            Some(t)
        }
        _ => None,
    };

    let estimates = separate_long(&model, &mixture)?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for (c, est) in estimates.iter().enumerate() {
        write_f32_file(&args.out_dir.join(format!("source{c}.f32")), est)?;
    }
    if args.plots {
        let stft = *model.stft().config();
        emit_spectrogram_image(&mixture, stft, 1, &args.out_dir.join("mixture.png"))?;
        for (c, est) in estimates.iter().enumerate() {
            emit_spectrogram_image(est, stft, 1, &args.out_dir.join(format!("source{c}.png")))?;
        }
    }
    println!(
        "separated {} samples ({} windows) into {}",
        mixture.len(),
        mixture.len().div_ceil(model.config.window_len),
        args.out_dir.display()
    );

    if let Some(truths) = truths {
        let perms = window_permutations(&estimates, &truths, model.config.window_len)?;
        let mut swaps = 0;
        for pair in perms.windows(2) {
            if pair[0].1 != pair[1].1 {
                swaps += 1;
                log::warn!("channel swap between windows {} and {}", pair[0].0, pair[1].0);
            }
        }
        println!("{swaps} channel swaps over {} window boundaries", perms.len().saturating_sub(1));
    }
    Ok(())
}

fn plot(args: PlotArgs) -> anyhow::Result<()> {
    checks::input_file(&args.input)?;
    checks::output_file(&args.out)?;
    let stft = StftConfig::new(args.window_len, args.hop);
    stft.validate().map_err(|e| UsageError(e.to_string()))?;
    if args.zoom == 0 {
        return Err(UsageError("--zoom must be at least 1".into()).into());
    }
    let x = read_f32_file(&args.input)?;
    checks::ensure_parent(&args.out)?;
    emit_spectrogram_image(&x, stft, args.zoom, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Separate(a) => separate(a),
        Command::Plot(a) => plot(a),
        Command::Smoke(a) => smoke::run(&a.out_dir, a.seed, a.steps),
    }
}

/// 1 for bad arguments, 3 for numeric failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<rfsep::Error>() {
            return match e {
                rfsep::Error::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_by_name() {
        for k in IntrapulseKind::ALL {
            assert_eq!(parse_kind(k.name()).unwrap(), k);
        }
        assert!(parse_kind("lfm").is_err());
    }

    #[test]
    fn exit_codes_follow_the_error_class() {
        let numeric = anyhow::Error::from(rfsep::Error::Numeric("nan".into())).context("stage train");
        assert_eq!(exit_code(&numeric), 3);
        let data = anyhow::Error::from(rfsep::Error::Parameter("x".into()));
        assert_eq!(exit_code(&data), 2);
        assert_eq!(exit_code(&UsageError("bad".into()).into()), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }

    #[test]
    fn partial_config_files_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn windows_are_scored_independently() {
        let w = 4;
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 1.9).cos()).collect();
        let truths = [a.clone(), b.clone()];
        let mut est = [a, b];
        for i in 4..8 {
            let (x, y) = (est[0][i], est[1][i]);
            est[0][i] = y;
            est[1][i] = x;
        }
        let perms: Vec<_> = window_permutations(&est, &truths, w).unwrap().into_iter().map(|p| p.1).collect();
        assert_eq!(perms, [Permutation::Identity, Permutation::Swap, Permutation::Identity]);
    }

    #[test]
    fn command_line_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
