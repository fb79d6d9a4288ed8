use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppcm_core::blockcipher::{decrypt, encrypt, CipherParams, Stages};
use ppcm_core::convmixer::{
    evaluate, fit, load_checkpoint, metrics_csv_header, save_checkpoint, EncryptionMode, Model, RunConfig,
    TrainConfig, TrainScope,
};
use ppcm_core::dataset::{load_cifar10, Dataset, LabeledImages, Manifest, MANIFEST_FILE};
use ppcm_core::image::RasterImage;
use ppcm_core::keystream::{KeyFile, MasterKey};
use ppcm_core::parambudget::{self, BudgetQuery, Policy, SweepConfig};
use ppcm_core::tensor::NormMode;
use ppcm_core::Error;

mod exit {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const PARSE: u8 = 4;
    pub const KEY_MISMATCH: u8 = 5;
    pub const INVALID: u8 = 6;
    pub const DATA: u8 = 7;
    pub const SHAPE: u8 = 8;
}

#[derive(Parser)]
#[command(name = "ppcm", version, about = "Block-scrambled image classification with a learnable token permutation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a new key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// 64-bit seed (up to 16 hex digits) or a full 64-digit master key.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long, default_value_t = 4)]
        block: usize,
    },
    /// Scramble a PPM directory or a CIFAR-10 archive.
    Encrypt(CipherArgs),
    /// Undo `encrypt`.
    Decrypt(CipherArgs),
    /// Convert CIFAR-10 archives into a PPM directory.
    Import {
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resize: Option<usize>,
        /// Keep only the first N records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train a model and write metrics plus a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Required unless the config says `encryption=off`.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Encrypt the data with this key before evaluating.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, default_value = "on", requires = "key")]
        encryption: String,
    },
    /// Print one parameter count.
    Params(ParamsArgs),
    /// Write parameter counts over image sizes as CSV.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [32u64, 64, 128, 224])]
        sizes: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<u64>,
    },
}

#[derive(Args)]
struct CipherArgs {
    #[arg(long)]
    key: PathBuf,
    /// Must match the key file's block size when given.
    #[arg(long)]
    block: Option<usize>,
    /// A PPM directory with a manifest, or a CIFAR-10 archive file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbour resize applied to archive images before encryption.
    #[arg(long)]
    resize: Option<usize>,
    /// Block permutation only.
    #[arg(long)]
    perm_only: bool,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 224)]
    image_size: u64,
    #[arg(long, default_value_t = 16)]
    block: u64,
    #[arg(long, default_value_t = 512)]
    hidden: u64,
    #[arg(long, default_value_t = 16)]
    depth: u64,
    #[arg(long, default_value_t = 9)]
    kernel: u64,
    #[arg(long, default_value_t = 10)]
    classes: u64,
    /// ELE classifier size.
    #[arg(long)]
    classifier: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ppcm: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => exit::IO,
        Error::Parse(_) => exit::PARSE,
        Error::KeyMismatch(_) => exit::KEY_MISMATCH,
        Error::InvalidArgument(_) => exit::INVALID,
        Error::Data(_) => exit::DATA,
        Error::Shape(_) => exit::SHAPE,
    }
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> ppcm_core::Result<()> {
    match cmd {
        Command::Keygen { out, seed, block } => keygen(&out, seed.as_deref(), block),
        Command::Encrypt(a) => cipher(&a, true),
        Command::Decrypt(a) => cipher(&a, false),
        Command::Import { input, out, resize, limit } => import(&input, &out, resize, limit),
        Command::Train { config, data, test, key, out } => train(&config, &data, test.as_deref(), key.as_deref(), &out),
        Command::Eval { ckpt, data, key, encryption } => eval(&ckpt, &data, key.as_deref(), &encryption),
        Command::Params(p) => params(&p),
        Command::Sweep { sizes, policies, out, classifier } => sweep(&sizes, policies, out.as_deref(), classifier),
    }
}

fn parse_seed(seed: &str) -> ppcm_core::Result<MasterKey> {
    let s = seed.trim().trim_start_matches("0x");
    if s.len() == 64 {
        return s.parse();
    }
    if s.is_empty() || s.len() > 16 {
        return Err(Error::Parse(format!("seed must be 1-16 or 64 hex digits, got {} characters", s.len())));
    }
    let v = u64::from_str_radix(s, 16).map_err(|_| Error::Parse(format!("seed {seed:?} is not hexadecimal")))?;
    Ok(MasterKey::from_seed(v))
}

fn keygen(out: &Path, seed: Option<&str>, block: usize) -> ppcm_core::Result<()> {
    if block == 0 {
        return Err(Error::InvalidArgument("block size must be >= 1".into()));
    }
    let master = match seed {
        Some(s) => parse_seed(s)?,
        None => MasterKey::from_bytes(rand::random()),
    };
    KeyFile { master, block_size: block }.save(out).map_err(|e| match e {
        Error::Io(io) => io_context(out, io),
        other => other,
    })
}

fn load_key(path: &Path) -> ppcm_core::Result<KeyFile> {
    KeyFile::load(path).map_err(|e| match e {
        Error::Io(io) => io_context(path, io),
        other => other,
    })
}

fn cipher_params(key: &KeyFile, block: Option<usize>, stages: Stages) -> ppcm_core::Result<CipherParams> {
    if let Some(b) = block {
        if b != key.block_size {
            return Err(Error::KeyMismatch(format!("key was made for block size {}, got --block {b}", key.block_size)));
        }
    }
    Ok(CipherParams::new(key.block_size, key.secret_key()).with_stages(stages))
}

fn cipher(a: &CipherArgs, forward: bool) -> ppcm_core::Result<()> {
    let key = load_key(&a.key)?;
    let stages = if a.perm_only { Stages::PERMUTATION_ONLY } else { Stages::ALL };
    let params = cipher_params(&key, a.block, stages)?;
    let apply = |img: &RasterImage| if forward { encrypt(img, &params) } else { decrypt(img, &params) };

    if a.input.is_dir() {
        if a.resize.is_some() {
            return Err(Error::InvalidArgument("--resize applies to archive input only".into()));
        }
        let manifest = Manifest::load(&a.input, None)?;
        for (rel, _) in &manifest.entries {
            let img = RasterImage::load_ppm(a.input.join(rel))?;
            let dst = a.out.join(rel);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| io_context(parent, e))?;
            }
            apply(&img)?.save_ppm(&dst)?;
        }
        fs::create_dir_all(&a.out).map_err(|e| io_context(&a.out, e))?;
        fs::write(a.out.join(MANIFEST_FILE), manifest.to_text())?;
        eprintln!("{} {} images", if forward { "encrypted" } else { "decrypted" }, manifest.entries.len());
        return Ok(());
    }

    let mut set = load_cifar10(&a.input).map_err(|e| match e {
        Error::Io(io) => io_context(&a.input, io),
        other => other,
    })?;
    if let Some(side) = a.resize {
        set = set.resized(side)?;
    }
    let out = set.map_images(apply)?;
    out.save_dir(&a.out)?;
    eprintln!("{} {} images", if forward { "encrypted" } else { "decrypted" }, out.len());
    Ok(())
}

fn import(inputs: &[PathBuf], out: &Path, resize: Option<usize>, limit: Option<usize>) -> ppcm_core::Result<()> {
    let mut all = LabeledImages::default();
    for path in inputs {
        let set = load_cifar10(path).map_err(|e| match e {
            Error::Io(io) => io_context(path, io),
            other => other,
        })?;
        all.images.extend(set.images);
        all.labels.extend(set.labels);
    }
    if let Some(n) = limit {
        all = all.take(n);
    }
    if let Some(side) = resize {
        all = all.resized(side)?;
    }
    all.save_dir(out)?;
    eprintln!("imported {} images", all.len());
    Ok(())
}

fn load_images(dir: &Path, n_classes: usize, side: usize) -> ppcm_core::Result<LabeledImages> {
    if !dir.is_dir() {
        return Err(io_context(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let set = LabeledImages::load_dir(dir, Some(n_classes))?;
    if let Some(img) = set.images.iter().find(|i| i.width() != side || i.height() != side) {
        return Err(Error::Data(format!(
            "{}: found a {}x{} image, config expects {side}x{side}",
            dir.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(set)
}

fn stages_for(mode: EncryptionMode) -> Option<Stages> {
    match mode {
        EncryptionMode::Off => None,
        EncryptionMode::On => Some(Stages::ALL),
        EncryptionMode::PermOnly => Some(Stages::PERMUTATION_ONLY),
    }
}

fn train(config: &Path, data: &Path, test: Option<&Path>, key: Option<&Path>, out: &Path) -> ppcm_core::Result<()> {
    let run = RunConfig::load(config).map_err(|e| match e {
        Error::Io(io) => io_context(config, io),
        other => other,
    })?;
    let m = run.model;
    let cipher = match stages_for(run.encryption) {
        None => None,
        Some(stages) => {
            let path = key.ok_or_else(|| {
                Error::InvalidArgument(format!("encryption={} needs --key", run.encryption))
            })?;
            Some(cipher_params(&load_key(path)?, Some(m.patch), stages)?)
        }
    };
    let prepare = |dir: &Path| -> ppcm_core::Result<Dataset<f64>> {
        let set = load_images(dir, m.n_classes, m.image_size)?;
        let set = match &cipher {
            Some(p) => set.encrypted(p)?,
            None => set,
        };
        Dataset::from_images(&set)
    };
    let train_set = prepare(data)?;
    let test_set = test.map(prepare).transpose()?;

    fs::create_dir_all(out).map_err(|e| io_context(out, e))?;
    fs::write(out.join("run.cfg"), run.to_text())?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| io_context(&metrics_path, e))?;
    writeln!(metrics, "{}", metrics_csv_header())?;

    let mut model = Model::<f64>::build(&m, run.seed)?;
    eprintln!("training {} parameters on {} images", model.count_params(), train_set.len());
    let tc = TrainConfig {
        epochs: run.epochs,
        batch_size: run.batch_size,
        lr: run.lr,
        seed: run.seed,
        scope: TrainScope::All,
        norm_mode: NormMode::Train,
    };
    let mut write_err = None;
    fit(&mut model, &train_set, test_set.as_ref(), &tc, |e| {
        let row = e.csv_row();
        eprintln!("epoch {row}");
        if let Err(err) = writeln!(metrics, "{row}").and_then(|_| metrics.flush()) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(io_context(&metrics_path, err));
    }
    save_checkpoint(&model, out.join("model.ckpt"))?;
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, key: Option<&Path>, encryption: &str) -> ppcm_core::Result<()> {
    let mut model = load_checkpoint::<f64>(ckpt).map_err(|e| match e {
        Error::Io(io) => io_context(ckpt, io),
        other => other,
    })?;
    let cfg = *model.config();
    let mut set = load_images(data, cfg.n_classes, cfg.image_size)?;
    if let Some(k) = key {
        let mode: EncryptionMode = encryption.parse()?;
        if let Some(stages) = stages_for(mode) {
            set = set.encrypted(&cipher_params(&load_key(k)?, Some(cfg.patch), stages)?)?;
        }
    }
    let acc = evaluate(&mut model, &Dataset::from_images(&set)?, 64)?;
    println!("{acc}");
    Ok(())
}

fn params(p: &ParamsArgs) -> ppcm_core::Result<()> {
    let policy = parse_policy(&p.mode)?;
    let q = BudgetQuery {
        image_size: p.image_size,
        block_size: p.block,
        hidden: p.hidden,
        depth: p.depth,
        kernel: p.kernel,
        n_classes: p.classes,
        n_classifier: p.classifier,
        policy,
    };
    let n = parambudget::count(&q)?;
    if policy.is_ele() && p.classifier.is_none() {
        eprintln!("note: classifier size defaults to {} (approximate)", parambudget::DEFAULT_CLASSIFIER_PARAMS);
    }
    println!("{n}");
    Ok(())
}

/// Accepts the policy names plus `convmixer` as shorthand for the plain model.
fn parse_policy(s: &str) -> ppcm_core::Result<Policy> {
    match s {
        "convmixer" => Ok(Policy::ConvmixerPlain),
        other => other.parse().map_err(|_| {
            let names: Vec<&str> = Policy::ALL.iter().map(|p| p.name()).collect();
            Error::Parse(format!("unknown mode {other:?}; expected one of {}", names.join(", ")))
        }),
    }
}

fn sweep(sizes: &[u64], policies: Option<Vec<String>>, out: Option<&Path>, classifier: Option<u64>) -> ppcm_core::Result<()> {
    let policies: Vec<Policy> = match policies {
        Some(names) => names.iter().map(|n| parse_policy(n)).collect::<ppcm_core::Result<_>>()?,
        None => Policy::ALL.to_vec(),
    };
    let cfg = SweepConfig { n_classifier: classifier, ..SweepConfig::default() };
    let csv = parambudget::sweep_csv(&parambudget::sweep_image_sizes(sizes, &policies, &cfg)?);
    match out {
        Some(path) => fs::write(path, csv).map_err(|e| io_context(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}
