//! Command-line front end. `dispatch` maps argv to an exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attack::{run_attack, write_trace_csv, AttackKind};
use crate::checkpoint::{file_digest, load_checkpoint, save_checkpoint, CheckpointMeta, Stage};
use crate::data::{load_image, save_image, DatasetHandle};
use crate::eval::{
    curves, measure_point, read_rd_csv, write_rd_csv, AblationVariant, Condition, RDPoint,
};
use crate::io::write_atomic;
use crate::train::{finetune, pretrain, train_teacher, LogRow};
use crate::{Codec, Config, Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "robust-nic", version, about = "Robust learned image compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, e.g. `--set train.alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rate-distortion training from random weights.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage I: gradient-regularised teacher from a pre-trained checkpoint.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage II: adversarial finetuning with the teacher's rate prior.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Attack one image; writes the adversarial image and the trace.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `psnr` or `bpp`.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Measure R-D points for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `clean`, `psnr_attack`, `bpp_attack` or `all`.
        #[arg(long, default_value = "all")]
        condition: String,
        /// Model tag in the output; defaults to the checkpoint stage.
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune every ablation variant and measure each.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated subset of full,no_smooth,no_jacobian,no_bpp_grad.
        #[arg(long, default_value = "full,no_smooth,no_jacobian,no_bpp_grad")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split R-D CSVs into one series file per (model, condition).
    PlotData {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::ConfigParse(_) => EXIT_CONFIG,
        Error::Data(_)
        | Error::InvalidImage(_)
        | Error::NotDivisible { .. }
        | Error::CorruptCheckpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::Architecture(_) => EXIT_DATA,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Runs one command; never panics on bad input.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Config::load(common.config.as_deref(), &overrides)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    config_digest: Option<String>,
    seed: Option<u64>,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(
    path: &Path,
    command: &str,
    argv: &[OsString],
    config: Option<&Config>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), file_digest(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        command,
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        config_digest: config.map(Config::digest),
        seed: config.map(|c| c.seed),
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let mut text = serde_json::to_vec_pretty(&m)
        .map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?;
    text.push(b'\n');
    write_atomic(path, &text)
}

fn open_dataset(path: &Path, cfg: &Config) -> Result<DatasetHandle> {
    let ds = DatasetHandle::open(path, cfg.data.crop_size, cfg.seed)?;
    ds.check_crop(cfg.codec.downsampling_factor())?;
    Ok(ds)
}

fn progress(stage: &'static str) -> impl FnMut(&LogRow) {
    move |r| {
        eprintln!(
            "{stage} epoch {} step {} d_loss {:.6} r_loss {:.6} smooth {:.6} total {:.6} lr {:e}",
            r.epoch, r.step, r.d_loss, r.r_loss, r.smooth_loss, r.total, r.lr
        )
    }
}

fn load_model(path: &Path, cfg: &Config) -> Result<(Codec, CheckpointMeta)> {
    let (codec, meta) = load_checkpoint(path)?;
    if codec.config != cfg.codec {
        return Err(Error::Architecture(format!(
            "{} was trained with a different codec config",
            path.display()
        )));
    }
    Ok((codec, meta))
}

fn parse_conditions(s: &str) -> Result<Vec<Condition>> {
    if s == "all" {
        return Ok(Condition::ALL.to_vec());
    }
    s.split(',').map(|c| c.trim().parse()).collect()
}

fn run(command: Command, argv: &[OsString]) -> Result<()> {
    match command {
        Command::Pretrain {
            common,
            dataset,
            out,
            log,
        } => {
            let cfg = load_config(&common)?;
            let ds = open_dataset(&dataset, &cfg)?;
            let mut codec = Codec::new(cfg.codec.clone(), cfg.seed)?;
            let train_log = pretrain(&mut codec, &ds, &cfg.pretrain, cfg.seed, progress("pretrain"))?;
            let mut meta = CheckpointMeta::new(Stage::Pretrained, &cfg.codec, cfg.pretrain.lambda, cfg.seed);
            meta.epoch = cfg.pretrain.epochs;
            save_checkpoint(&out, &codec, &meta)?;
            let mut outputs = vec![out.as_path()];
            if let Some(l) = &log {
                train_log.write_csv(l)?;
                outputs.push(l);
            }
            write_manifest(&manifest_path(&out), "pretrain", argv, Some(&cfg), &[], &outputs)
        }
        Command::TrainTeacher {
            common,
            pretrained,
            dataset,
            out,
            log,
        } => {
            let cfg = load_config(&common)?;
            let ds = open_dataset(&dataset, &cfg)?;
            let (pre, _) = load_model(&pretrained, &cfg)?;
            let (teacher, train_log) = train_teacher(&pre, &ds, &cfg.train, cfg.seed, progress("teacher"))?;
            let mut meta = CheckpointMeta::new(Stage::Teacher, &cfg.codec, cfg.train.lambda, cfg.seed);
            meta.epoch = cfg.train.epochs;
            meta.alpha = Some(cfg.train.alpha);
            save_checkpoint(&out, &teacher, &meta)?;
            let mut outputs = vec![out.as_path()];
            if let Some(l) = &log {
                train_log.write_csv(l)?;
                outputs.push(l);
            }
            write_manifest(&manifest_path(&out), "train-teacher", argv, Some(&cfg), &[&pretrained], &outputs)
        }
        Command::Finetune {
            common,
            pretrained,
            teacher,
            dataset,
            out,
            log,
        } => {
            let cfg = load_config(&common)?;
            let ds = open_dataset(&dataset, &cfg)?;
            let (pre, _) = load_model(&pretrained, &cfg)?;
            let (tc, _) = load_model(&teacher, &cfg)?;
            let (model, train_log) = finetune(&pre, &tc, &ds, &cfg.train, cfg.seed, progress("finetune"))?;
            let mut meta = CheckpointMeta::new(Stage::Finetuned, &cfg.codec, cfg.train.lambda, cfg.seed);
            meta.epoch = cfg.train.epochs;
            meta.alpha = Some(cfg.train.alpha);
            meta.beta = Some(cfg.train.beta);
            save_checkpoint(&out, &model, &meta)?;
            let mut outputs = vec![out.as_path()];
            if let Some(l) = &log {
                train_log.write_csv(l)?;
                outputs.push(l);
            }
            write_manifest(
                &manifest_path(&out),
                "finetune",
                argv,
                Some(&cfg),
                &[&pretrained, &teacher],
                &outputs,
            )
        }
        Command::Attack {
            common,
            checkpoint,
            image,
            kind,
            out_dir,
        } => {
            let cfg = load_config(&common)?;
            let kind = match kind.as_str() {
                "psnr" => AttackKind::Psnr,
                "bpp" => AttackKind::Bpp,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "--kind must be psnr or bpp, got `{other}`"
                    )))
                }
            };
            let (codec, _) = load_model(&checkpoint, &cfg)?;
            let x = load_image(&image)?;
            let acfg = cfg.attack(kind);
            let result = run_attack(&x, &codec, &acfg)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let adv = out_dir.join("adversarial.png");
            let trace = out_dir.join("trace.csv");
            let summary = out_dir.join("summary.csv");
            save_image(&adv, &result.adversarial_image)?;
            write_trace_csv(&trace, &result.trace)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "kind",
                "clean_bpp",
                "clean_psnr",
                "attacked_bpp",
                "attacked_psnr",
                "delta_bpp",
                "delta_psnr",
                "noise_power",
                "attack_digest",
            ])
            .and_then(|_| {
                w.write_record([
                    kind.to_string(),
                    result.clean.bpp.to_string(),
                    result.clean.psnr.to_string(),
                    result.attacked.bpp.to_string(),
                    result.attacked.psnr.to_string(),
                    result.delta_bpp.to_string(),
                    result.delta_psnr.to_string(),
                    result.final_noise_power.to_string(),
                    acfg.digest(),
                ])
            })
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
            write_atomic(&summary, &bytes)?;
            write_manifest(
                &out_dir.join("manifest.json"),
                "attack",
                argv,
                Some(&cfg),
                &[&checkpoint, &image],
                &[&adv, &trace, &summary],
            )
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            condition,
            tag,
            out,
        } => {
            let cfg = load_config(&common)?;
            let conditions = parse_conditions(&condition)?;
            let (codec, meta) = load_model(&checkpoint, &cfg)?;
            let ds = open_dataset(&dataset, &cfg)?;
            let images = ds.full_images(cfg.codec.downsampling_factor())?;
            let tag = tag.unwrap_or_else(|| meta.stage.as_str().to_string());
            let points = conditions
                .iter()
                .map(|&c| {
                    let acfg = c.attack_kind().map(|k| cfg.attack(k));
                    measure_point(&codec, &images, c, acfg.as_ref(), &tag, meta.lambda)
                })
                .collect::<Result<Vec<_>>>()?;
            write_rd_csv(&out, &points)?;
            write_manifest(&manifest_path(&out), "eval", argv, Some(&cfg), &[&checkpoint], &[&out])
        }
        Command::Ablate {
            common,
            pretrained,
            teacher,
            dataset,
            variants,
            out,
        } => {
            let cfg = load_config(&common)?;
            let variants = variants
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<Result<Vec<AblationVariant>>>()?;
            let (pre, _) = load_model(&pretrained, &cfg)?;
            let (tc, _) = load_model(&teacher, &cfg)?;
            let ds = open_dataset(&dataset, &cfg)?;
            let images = ds.full_images(cfg.codec.downsampling_factor())?;
            let table = crate::eval::run_ablation(
                &pre,
                &tc,
                &ds,
                &cfg.train,
                &variants,
                &images,
                &cfg.attack(AttackKind::Psnr),
                &cfg.attack(AttackKind::Bpp),
                cfg.seed,
            )?;
            write_atomic(&out, &table.to_csv()?)?;
            write_manifest(
                &manifest_path(&out),
                "ablate",
                argv,
                Some(&cfg),
                &[&pretrained, &teacher],
                &[&out],
            )
        }
        Command::PlotData { inputs, out_dir } => {
            let mut points: Vec<RDPoint> = Vec::new();
            for p in &inputs {
                points.extend(read_rd_csv(p)?);
            }
            let curves = curves(&points)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let mut written = Vec::new();
            for c in &curves {
                let first = &c.points()[0];
                let path = out_dir.join(format!("{}_{}.csv", sanitize(&first.model_tag), first.condition));
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["bpp", "psnr", "lambda"])
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                for p in c.points() {
                    w.write_record([p.bpp.to_string(), p.psnr.to_string(), p.lambda.to_string()])
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                }
                let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
                write_atomic(&path, &bytes)?;
                written.push(path);
            }
            let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let output_refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
            write_manifest(&out_dir.join("manifest.json"), "plot-data", argv, None, &input_refs, &output_refs)
        }
    }
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
