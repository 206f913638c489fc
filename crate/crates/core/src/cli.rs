//! Command-line entry point.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{ConditioningMode, EncoderKind, SegModel};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{load_manifest, load_slice, save_prediction, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::phantom::{generate_cohort, generate_mutation, MutationKind, PhantomParams};
use crate::report::{dice_table, zero_shot_table, ResultRow};
use crate::train::{ablate, effective_crop, evaluate, predict_slice, zero_shot_eval, EvalOptions, TrainData, Trainer};

#[derive(Debug, Parser)]
#[command(name = "unicon", version, about = "Age- and location-conditioned slice segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML config file; sections are optional and keys must be unique.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long, short, env = "UNICON_OUTPUT_DIR", default_value = "unicon_out")]
    pub output_dir: PathBuf,
    /// Config override, `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a base train/test cohort and the three mutation cohorts.
    GenPhantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trains the configured model; evaluates on `test_manifest` when given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-age Dice of one or more checkpoints on `test_manifest`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Dice of checkpoints on unseen cohorts, without fine-tuning.
    ZeroShot {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Trains and evaluates one model per conditioning mode.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes, e.g. `none,consa+hdsc`.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes predicted masks for every slice of `test_manifest`.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint")]
        checkpoint: Option<PathBuf>,
    },
}

fn toml_path_list(paths: &[PathBuf]) -> String {
    let items: Vec<String> = paths
        .iter()
        .map(|p| toml::Value::String(p.display().to_string()).to_string())
        .collect();
    format!("[{}]", items.join(","))
}

/// Folds command-specific flags into the override list so the resolved config records them.
fn resolve(common: &Common, mut extra: Vec<String>) -> Result<Config> {
    let mut overrides = common.overrides.clone();
    overrides.append(&mut extra);
    Config::load(common.config.as_deref(), &overrides)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is not set (use --set {key}=PATH)")))
}

pub fn model_label(kind: EncoderKind, mode: ConditioningMode) -> String {
    let base = match kind {
        EncoderKind::CnnRes2 => "Res2UNet",
        EncoderKind::CnnPlain => "UNet",
    };
    match mode {
        ConditioningMode::None => base.to_string(),
        m => format!("{base} + {m}"),
    }
}

fn eval_options(cfg: &Config, model: &SegModel, manifest: &DatasetManifest) -> Result<EvalOptions> {
    let (h, w) = manifest
        .volumes
        .iter()
        .map(|v| (v.dims.height, v.dims.width))
        .fold((usize::MAX, usize::MAX), |a, b| (a.0.min(b.0), a.1.min(b.1)));
    Ok(EvalOptions {
        crop: effective_crop(model, cfg.crop_size, h, w)?,
        overlap: cfg.tile_overlap,
        batch_size: cfg.batch_size,
    })
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    if paths.is_empty() {
        return Err(Error::Config("no checkpoint given (use --checkpoint)".into()));
    }
    paths.iter().map(|p| Checkpoint::load(p)).collect()
}

fn gen_phantom(common: &Common, seed: Option<u64>) -> Result<()> {
    let cfg = resolve(common, seed.map(|s| format!("seed={s}")).into_iter().collect())?;
    let out = &common.output_dir;
    let params = PhantomParams {
        depth: cfg.phantom_depth,
        height: cfg.phantom_height,
        width: cfg.phantom_width,
        noise_sigma: cfg.noise_sigma,
        annotated_fraction: cfg.annotated_fraction,
    };
    let (train, test) = generate_cohort(out, &params, cfg.volumes_per_age, cfg.seed)?;
    let mut n = train.volumes.len() + test.volumes.len();
    for kind in MutationKind::ALL {
        n += generate_mutation(out, &params, cfg.volumes_per_age, cfg.seed, kind)?.volumes.len();
    }
    cfg.write_resolved(out)?;
    println!("wrote {n} volumes under {}", out.display());
    Ok(())
}

fn train_cmd(common: &Common, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = resolve(common, seed.map(|s| format!("seed={s}")).into_iter().collect())?;
    let out = &common.output_dir;
    let manifest = load_manifest(require(&cfg.train_manifest, "train_manifest")?)?;
    if manifest.split != Split::Train {
        return Err(Error::Manifest(format!("{} is not a train split", manifest.name)));
    }
    let data = TrainData::load(&manifest, cfg.val_fraction, cfg.seed)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            cfg = ckpt.config.clone();
            Trainer::resume(&ckpt, data)?
        }
        None => Trainer::new(&cfg, cfg.model().build()?, data)?,
    };
    cfg.write_resolved(out)?;
    trainer.run()?;
    trainer.save(out)?;
    let last = trainer.log().last().copied();
    if let Some(r) = last {
        println!("step {} loss {:.6}", r.step, r.loss);
    }
    if let Some(test) = &cfg.test_manifest {
        let test = load_manifest(test)?;
        let model = trainer.model();
        let report = evaluate(&test, model, &trainer.eval_options())?;
        let table = dice_table(&[ResultRow {
            model: model_label(cfg.encoder_kind, model.mode()),
            params: model.num_params(),
            report: report.by_age,
        }])?;
        table.write(out, "report")?;
        print!("{}", table.to_text());
    }
    Ok(())
}

fn eval_cmd(common: &Common, checkpoints: &[PathBuf]) -> Result<()> {
    let extra = if checkpoints.is_empty() {
        vec![]
    } else {
        vec![format!("checkpoints={}", toml_path_list(checkpoints))]
    };
    let cfg = resolve(common, extra)?;
    let test = load_manifest(require(&cfg.test_manifest, "test_manifest")?)?;
    let mut rows = Vec::new();
    for ckpt in load_checkpoints(&cfg.checkpoints)? {
        let model = ckpt.build_model()?;
        let opts = eval_options(&ckpt.config, &model, &test)?;
        let report = evaluate(&test, &model, &opts)?;
        rows.push(ResultRow {
            model: model_label(ckpt.config.encoder_kind, model.mode()),
            params: model.num_params(),
            report: report.by_age,
        });
    }
    let out = &common.output_dir;
    cfg.write_resolved(out)?;
    let table = dice_table(&rows)?;
    table.write(out, "report")?;
    print!("{}", table.to_text());
    Ok(())
}

fn zero_shot_cmd(common: &Common, checkpoints: &[PathBuf]) -> Result<()> {
    let extra = if checkpoints.is_empty() {
        vec![]
    } else {
        vec![format!("checkpoints={}", toml_path_list(checkpoints))]
    };
    let cfg = resolve(common, extra)?;
    if cfg.unseen_manifests.is_empty() {
        return Err(Error::Config("unseen_manifests is empty".into()));
    }
    let unseen = cfg
        .unseen_manifests
        .iter()
        .map(|p| load_manifest(p))
        .collect::<Result<Vec<_>>>()?;
    let combined = DatasetManifest {
        name: "unseen".into(),
        split: Split::Test,
        volumes: unseen.into_iter().flat_map(|m| m.volumes).collect(),
    };
    let mut rows = Vec::new();
    for ckpt in load_checkpoints(&cfg.checkpoints)? {
        let model = ckpt.build_model()?;
        let opts = eval_options(&ckpt.config, &model, &combined)?;
        let report = zero_shot_eval(&ckpt, &combined, &opts)?;
        rows.push((model_label(ckpt.config.encoder_kind, model.mode()), report));
    }
    let out = &common.output_dir;
    cfg.write_resolved(out)?;
    let table = zero_shot_table(&rows)?;
    table.write(out, "zero_shot")?;
    print!("{}", table.to_text());
    Ok(())
}

fn ablate_cmd(common: &Common, modes: &[String], seed: Option<u64>) -> Result<()> {
    let mut extra: Vec<String> = seed.map(|s| format!("seed={s}")).into_iter().collect();
    if !modes.is_empty() {
        let parsed = modes
            .iter()
            .map(|m| m.parse::<ConditioningMode>())
            .collect::<Result<Vec<_>>>()?;
        let list: Vec<String> = parsed.iter().map(|m| format!("\"{m}\"")).collect();
        extra.push(format!("modes=[{}]", list.join(",")));
    }
    let cfg = resolve(common, extra)?;
    let out = &common.output_dir;
    cfg.write_resolved(out)?;
    let train = load_manifest(require(&cfg.train_manifest, "train_manifest")?)?;
    let test = load_manifest(require(&cfg.test_manifest, "test_manifest")?)?;
    let rows = ablate(&train, &test, &cfg.modes, &cfg, Some(out))?;
    let rows: Vec<ResultRow> = rows
        .into_iter()
        .map(|r| ResultRow {
            model: model_label(cfg.encoder_kind, r.mode),
            params: r.params,
            report: r.report,
        })
        .collect();
    let table = dice_table(&rows)?;
    table.write(out, "ablation")?;
    print!("{}", table.to_text());
    Ok(())
}

fn predict_cmd(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let extra = checkpoint
        .map(|p| vec![format!("checkpoints={}", toml_path_list(&[p.to_path_buf()]))])
        .unwrap_or_default();
    let cfg = resolve(common, extra)?;
    let ckpt = load_checkpoints(&cfg.checkpoints)?.swap_remove(0);
    let manifest = load_manifest(require(&cfg.test_manifest, "test_manifest")?)?;
    let model = ckpt.build_model()?;
    let opts = eval_options(&ckpt.config, &model, &manifest)?;
    let out = &common.output_dir;
    cfg.write_resolved(out)?;
    let dir = out.join("predictions");
    let mut n = 0;
    for rec in &manifest.volumes {
        for z in 0..rec.dims.depth {
            let image = load_slice(rec, z)?;
            let mask = predict_slice(&model, rec, z, &image, &opts, &mut |_| {})?;
            save_prediction(&rec.volume_id, z, &mask, &dir)?;
            n += 1;
        }
    }
    println!("wrote {n} masks under {}", dir.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenPhantom { common, seed } => gen_phantom(common, *seed),
        Command::Train { common, seed, resume } => train_cmd(common, *seed, resume.as_deref()),
        Command::Eval { common, checkpoints } => eval_cmd(common, checkpoints),
        Command::ZeroShot { common, checkpoints } => zero_shot_cmd(common, checkpoints),
        Command::Ablate { common, modes, seed } => ablate_cmd(common, modes, *seed),
        Command::Predict { common, checkpoint } => predict_cmd(common, checkpoint.as_deref()),
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for any other failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
