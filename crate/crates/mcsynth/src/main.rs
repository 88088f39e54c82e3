//! Command-line front end: dataset generation, autoencoder pretraining,
//! adversarial training, synthesis, evaluation, ablation sweeps, and a
//! sampling-speed benchmark. Every flag has a config-file equivalent (flat
//! `key = value` lines, keys are flag names with underscores); command-line
//! values override the file.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mcsynth::checkpoint;
use mcsynth::data::{
    assemble_roles, denormalize, load_manifest, load_split, normalize, save_dataset,
    DatasetManifest, Split, MANIFEST_VERSION,
};
use mcsynth::diffusion::{ancestral_sample_loop, build_schedule, randn4, reverse_sample_loop};
use mcsynth::metrics::{psnr_batch, ssim_batch, summarize, MetricSummary};
use mcsynth::networks::{Autoencoder, FmJoin, Generator, GeneratorConfig};
use mcsynth::nn::params::ParamStore;
use mcsynth::training::{
    mean_image_baseline, pretrain_autoencoder, Adam, TrainConfig, Trainer, EPOCH_CSV_HEADER,
};
use mcsynth::Error;

#[derive(Parser)]
#[command(name = "mcsynth", about = "Few-step adversarial diffusion for multi-contrast synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic co-registered multi-contrast phantom dataset.
    GenData(GenDataArgs),
    /// Pretrain the attention autoencoder on clean targets.
    TrainAe(TrainAeArgs),
    /// Train the adversarial few-step denoiser.
    Train(TrainArgs),
    /// Synthesize the target contrast for a dataset split.
    Synth(SynthArgs),
    /// Evaluate synthesis quality (PSNR/SSIM mean and std) on a split.
    Eval(EvalArgs),
    /// Train and compare ablation arms under a shared seed.
    Ablate(AblateArgs),
    /// Time few-step sampling against a many-step ancestral baseline.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image side length (>= 16).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Include a lesion class in a subset of phantoms.
    #[arg(long)]
    lesions: Option<bool>,
    /// Acquisition noise level.
    #[arg(long)]
    noise: Option<f64>,
    /// Index of the synthesis-target contrast (0..3).
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ArchArgs {
    /// Image side the network expects; defaults to the dataset's.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    num_scales: Option<usize>,
    #[arg(long)]
    attention_resolution: Option<usize>,
    #[arg(long)]
    time_embed_dim: Option<usize>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Feature-maximizer join: concat | add.
    #[arg(long)]
    fm_join: Option<String>,
}

impl ArchArgs {
    fn resolve(&self, f: &FileCfg, data_size: usize) -> anyhow::Result<GeneratorConfig> {
        let d = GeneratorConfig::default();
        let join = match pick(self.fm_join.clone(), f, "fm_join", "concat".into())?.as_str() {
            "concat" => FmJoin::Concat,
            "add" => FmJoin::Add,
            other => return Err(usage(format!("fm_join '{other}' is not concat|add"))),
        };
        let cfg = GeneratorConfig {
            image_size: pick(self.size, f, "size", data_size)?,
            base_channels: pick(self.base_channels, f, "base_channels", d.base_channels)?,
            num_scales: pick(self.num_scales, f, "num_scales", d.num_scales)?,
            attention_resolution: pick(
                self.attention_resolution,
                f,
                "attention_resolution",
                d.attention_resolution,
            )?,
            time_embed_dim: pick(self.time_embed_dim, f, "time_embed_dim", d.time_embed_dim)?,
            z_dim: pick(self.z_dim, f, "z_dim", d.z_dim)?,
            heads: pick(self.heads, f, "heads", d.heads)?,
            fm_join: join,
            ..d
        };
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ae_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    r1_gamma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the feature maximizer with a plain concat.
    #[arg(long)]
    no_fm: bool,
    /// Drop the attention-saliency supervision term.
    #[arg(long)]
    no_fa_loss: bool,
    /// Zero the multi-scale semantic guidance.
    #[arg(long)]
    no_multiscale: bool,
    /// Condition on a single contrast instead of two.
    #[arg(long)]
    single_contrast: bool,
    /// Pixel-loss-only training (no discriminator).
    #[arg(long)]
    no_adv: bool,
}

impl HyperArgs {
    fn resolve(&self, f: &FileCfg) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: pick(self.epochs, f, "epochs", d.epochs)?,
            ae_epochs: pick(self.ae_epochs, f, "ae_epochs", d.ae_epochs)?,
            lr: pick(self.lr, f, "lr", d.lr)?,
            beta1: pick(self.beta1, f, "beta1", d.beta1)?,
            beta2: pick(self.beta2, f, "beta2", d.beta2)?,
            t_max: pick(self.t_max, f, "t_max", d.t_max)?,
            beta_min: pick(self.beta_min, f, "beta_min", d.beta_min)?,
            beta_max: pick(self.beta_max, f, "beta_max", d.beta_max)?,
            lambda1: pick(self.lambda1, f, "lambda1", d.lambda1)?,
            lambda2: pick(self.lambda2, f, "lambda2", d.lambda2)?,
            r1_gamma: pick(self.r1_gamma, f, "r1_gamma", d.r1_gamma)?,
            batch_size: pick(self.batch_size, f, "batch_size", d.batch_size)?,
            seed: pick(self.seed, f, "seed", d.seed)?,
            no_fm: self.no_fm || pick(None, f, "no_fm", false)?,
            no_fa_loss: self.no_fa_loss || pick(None, f, "no_fa_loss", false)?,
            no_multiscale: self.no_multiscale || pick(None, f, "no_multiscale", false)?,
            single_contrast: self.single_contrast || pick(None, f, "single_contrast", false)?,
            no_adv: self.no_adv || pick(None, f, "no_adv", false)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainAeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a saved training state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Load a pretrained autoencoder instead of pretraining in-line.
    #[arg(long)]
    ae_ckpt: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Suppress per-epoch console rows (files are still written).
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// train | val | test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an 8-bit panel grid (condition | truth | synth | error).
    #[arg(long)]
    grid: Option<bool>,
    /// Cap on grid rows.
    #[arg(long)]
    grid_max: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional CSV destination; the table always prints.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma list from {full, no_multiscale, no_fm_no_fa, single_contrast, no_adv}.
    #[arg(long)]
    suite: Option<String>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained state to time; omitted means a freshly initialized network.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma list of chain lengths; the first is the reference.
    #[arg(long)]
    steps_compare: Option<String>,
    /// Images to average over (>= 1).
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    arch: ArchArgs,
}

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite(_) => EXIT_NUMERIC,
                Error::Io(_) | Error::Format(_) | Error::Json(_) => EXIT_IO,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenData(a) => run_gen_data(a),
        Cmd::TrainAe(a) => run_train_ae(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Synth(a) => run_synth(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Ablate(a) => run_ablate(a),
        Cmd::Bench(a) => run_bench(a),
    }
}

/// Flat `key = value` config file; `#` starts a comment.
struct FileCfg(HashMap<String, String>);

impl FileCfg {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut map = HashMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(Error::Io)
                .with_context(|| format!("reading config {}", p.display()))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    usage(format!("config line {} is not 'key = value': {line}", ln + 1))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config key {key} = '{raw}': {e}"))),
        }
    }
}

fn usage(msg: String) -> anyhow::Error {
    Error::Config(msg).into()
}

fn pick<T: FromStr>(cli: Option<T>, f: &FileCfg, key: &str, default: T) -> anyhow::Result<T>
where
    T::Err: Display,
{
    match cli {
        Some(v) => Ok(v),
        None => Ok(f.get(key)?.unwrap_or(default)),
    }
}

fn pick_req<T: FromStr>(cli: Option<T>, f: &FileCfg, key: &str) -> anyhow::Result<T>
where
    T::Err: Display,
{
    cli.or(f.get(key)?)
        .ok_or_else(|| usage(format!("missing required --{} (config key {key})", key.replace('_', "-"))))
}

fn run_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let f = FileCfg::load(a.config.as_deref())?;
    let out: PathBuf = pick_req(a.out, &f, "out")?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        n_train: pick(a.n_train, &f, "n_train", 200)?,
        n_val: pick(a.n_val, &f, "n_val", 20)?,
        n_test: pick(a.n_test, &f, "n_test", 20)?,
        image_size: pick(a.size, &f, "size", 64)?,
        seed: pick(a.seed, &f, "seed", 7)?,
        target_contrast: pick(a.target, &f, "target", 0)?,
        with_lesion: pick(a.lesions, &f, "lesions", true)?,
        noise_level: pick(a.noise, &f, "noise", 0.02)?,
    };
    save_dataset(&out, &manifest).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {}+{}+{} phantoms ({}x{}, 3 contrasts, target c{}) to {}",
        manifest.n_train,
        manifest.n_val,
        manifest.n_test,
        manifest.image_size,
        manifest.image_size,
        manifest.target_contrast + 1,
        out.display()
    );
    Ok(())
}

/// Normalized condition/target batches plus the raw [0,1] planes.
struct SplitData {
    y: Array4<f32>,
    x0: Array4<f32>,
    cond01: Array4<f32>,
    tgt01: Array4<f32>,
}

fn load_split_data(
    dir: &Path,
    m: &DatasetManifest,
    split: Split,
    single_contrast: bool,
) -> anyhow::Result<SplitData> {
    let images = load_split(dir, m, split)
        .with_context(|| format!("loading {} split from {}", split.blob_name(), dir.display()))?;
    let (cond01, tgt01) = assemble_roles(&images, m, single_contrast);
    Ok(SplitData { y: normalize(&cond01), x0: normalize(&tgt01), cond01, tgt01 })
}

fn run_train_ae(a: TrainAeArgs) -> anyhow::Result<()> {
    let f = FileCfg::load(a.config.as_deref())?;
    let data_dir: PathBuf = pick_req(a.data_dir, &f, "data_dir")?;
    let out: PathBuf = pick_req(a.out, &f, "out")?;
    let epochs = pick(a.epochs, &f, "epochs", TrainConfig::default().ae_epochs)?;
    let lr = pick(a.lr, &f, "lr", 1e-3)?;
    let batch_size = pick(a.batch_size, &f, "batch_size", 4)?;
    let seed = pick(a.seed, &f, "seed", 0)?;

    let manifest = load_manifest(&data_dir)?;
    let gen_cfg = a.arch.resolve(&f, manifest.image_size)?;
    gen_cfg.validate()?;
    let train = load_split_data(&data_dir, &manifest, Split::Train, false)?;
    let val = load_split_data(&data_dir, &manifest, Split::Val, false)?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ae = Autoencoder::new(&mut store, &mut rng, &gen_cfg)?;
    let mut opt = Adam::new(&store, lr, 0.9, 0.999);
    let losses = pretrain_autoencoder(&ae, &mut store, &mut opt, &train.x0, batch_size, epochs, seed)?;

    std::fs::create_dir_all(&out)?;
    let mut csv = String::from("epoch,l1\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{:.6}\n", i + 1, l));
    }
    std::fs::write(out.join("ae_log.csv"), csv)?;

    let recon_psnr = ae_recon_psnr(&ae, &store, &val.x0, &val.tgt01, batch_size)?;
    let path = out.join("ae.ckpt");
    save_ae(&path, &store, &gen_cfg, *losses.last().unwrap_or(&f64::NAN), recon_psnr)?;
    println!(
        "autoencoder: {} epochs, final L1 {:.5}, val recon PSNR {:.2} dB -> {}",
        epochs,
        losses.last().unwrap_or(&f64::NAN),
        recon_psnr,
        path.display()
    );
    Ok(())
}

fn save_ae(
    path: &Path,
    store: &ParamStore<f32>,
    gen_cfg: &GeneratorConfig,
    final_l1: f64,
    recon_psnr: f64,
) -> anyhow::Result<()> {
    let meta = serde_json::json!({
        "gen_cfg": gen_cfg,
        "final_l1": final_l1,
        "val_recon_psnr": recon_psnr,
    });
    checkpoint::save(path, "autoencoder", meta, &checkpoint::params_to_tensors(store))?;
    Ok(())
}

fn load_ae_into(trainer: &mut Trainer, path: &Path) -> anyhow::Result<()> {
    let (header, tensors) =
        checkpoint::load(path).with_context(|| format!("reading autoencoder {}", path.display()))?;
    if header.kind != "autoencoder" {
        return Err(Error::Format(format!("{} holds '{}', not an autoencoder", path.display(), header.kind)).into());
    }
    checkpoint::tensors_into_params(&tensors, &mut trainer.ae_store)
        .context("autoencoder checkpoint does not fit this architecture")?;
    Ok(())
}

fn ae_recon_psnr(
    ae: &Autoencoder,
    store: &ParamStore<f32>,
    x0_norm: &Array4<f32>,
    tgt01: &Array4<f32>,
    batch: usize,
) -> anyhow::Result<f64> {
    let n = x0_norm.dim().0;
    let mut vals = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let xb = x0_norm.slice(s![start..end, .., .., ..]).to_owned();
        let fwd = ae.forward(store, &xb)?;
        let rec01 = denormalize(&fwd.recon);
        let truth = tgt01.slice(s![start..end, .., .., ..]).to_owned();
        vals.extend(psnr_batch(&rec01, &truth, 1.0)?);
        start = end;
    }
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let f = FileCfg::load(a.config.as_deref())?;
    let data_dir: PathBuf = pick_req(a.data_dir, &f, "data_dir")?;
    let out: PathBuf = pick_req(a.out, &f, "out")?;
    let manifest = load_manifest(&data_dir)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Trainer::load_state(path)
                .with_context(|| format!("resuming from {}", path.display()))?;
            println!("resumed epoch {} step {} from {}", t.epoch, t.step, path.display());
            t
        }
        None => {
            let cfg = a.hyper.resolve(&f)?;
            let gen_cfg = a.arch.resolve(&f, manifest.image_size)?;
            Trainer::new(&cfg, &gen_cfg)?
        }
    };

    let single = trainer.cfg.single_contrast;
    let train = load_split_data(&data_dir, &manifest, Split::Train, single)?;
    let val = load_split_data(&data_dir, &manifest, Split::Val, single)?;
    if trainer.gen_cfg.image_size != manifest.image_size {
        return Err(usage(format!(
            "network expects {}px images, dataset is {}px",
            trainer.gen_cfg.image_size, manifest.image_size
        )));
    }

    if a.resume.is_none() && !trainer.cfg.no_fa_loss {
        match &a.ae_ckpt {
            Some(p) => load_ae_into(&mut trainer, p)?,
            None => {
                println!("pretraining autoencoder for {} epochs...", trainer.cfg.ae_epochs);
                pretrain_ae_inline(&mut trainer, &train.x0)?;
                std::fs::create_dir_all(&out)?;
                let psnr = ae_recon_psnr(
                    &trainer.autoencoder,
                    &trainer.ae_store,
                    &val.x0,
                    &val.tgt01,
                    trainer.cfg.batch_size,
                )?;
                save_ae(&out.join("ae.ckpt"), &trainer.ae_store, &trainer.gen_cfg, f64::NAN, psnr)?;
                println!("autoencoder val recon PSNR {psnr:.2} dB");
            }
        }
    } else if let Some(p) = &a.ae_ckpt {
        load_ae_into(&mut trainer, p)?;
    }

    let target_epochs = match pick(a.hyper.epochs, &f, "epochs", trainer.cfg.epochs)? {
        e if e < trainer.epoch => {
            return Err(usage(format!("--epochs {e} is below the resumed epoch {}", trainer.epoch)))
        }
        e => e,
    };

    if !a.quiet {
        println!("{EPOCH_CSV_HEADER}");
    }
    let logs = trainer.fit(&train.x0, &train.y, &val.x0, &val.y, target_epochs, Some(&out), a.quiet)?;

    let baseline = mean_image_baseline(&train.tgt01, &val.tgt01)?;
    let last = logs.last();
    let final_psnr = last.map_or(f64::NAN, |l| l.val_psnr);
    println!(
        "done: {} epochs, val PSNR {:.2} dB (mean-image baseline {:.2} dB, margin {:+.2}), val SSIM {:.4}",
        trainer.epoch,
        final_psnr,
        baseline,
        final_psnr - baseline,
        last.map_or(f64::NAN, |l| l.val_ssim),
    );
    Ok(())
}

fn pretrain_ae_inline(trainer: &mut Trainer, train_x0: &Array4<f32>) -> anyhow::Result<()> {
    let mut opt = Adam::new(&trainer.ae_store, trainer.cfg.lr, 0.9, 0.999);
    let losses = pretrain_autoencoder(
        &trainer.autoencoder,
        &mut trainer.ae_store,
        &mut opt,
        train_x0,
        trainer.cfg.batch_size,
        trainer.cfg.ae_epochs,
        trainer.cfg.seed,
    )?;
    println!(
        "autoencoder L1 {:.5} -> {:.5}",
        losses.first().unwrap_or(&f64::NAN),
        losses.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

/// Per-sample synthesis keyed by `seed + index`, so results do not depend on
/// batching.
fn synth_split(trainer: &Trainer, y: &Array4<f32>, seed: u64) -> anyhow::Result<Array4<f32>> {
    let (n, _, h, w) = y.dim();
    let c = trainer.gen_cfg.in_channels_target;
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let yi = y.slice(s![i..i + 1, .., .., ..]).to_owned();
        let xi = trainer.synthesize(&yi, seed.wrapping_add(i as u64))?;
        out.slice_mut(s![i..i + 1, .., .., ..]).assign(&xi);
    }
    Ok(out)
}

fn run_synth(a: SynthArgs) -> anyhow::Result<()> {
    let f = FileCfg::load(a.config.as_deref())?;
    let ckpt: PathBuf = pick_req(a.ckpt, &f, "ckpt")?;
    let data_dir: PathBuf = pick_req(a.data_dir, &f, "data_dir")?;
    let out: PathBuf = pick_req(a.out, &f, "out")?;
    let split: Split = pick(a.split.map(|s| s.parse()).transpose()?, &f, "split", Split::Test)?;
    let seed = pick(a.seed, &f, "seed", 0)?;
    let grid = pick(a.grid, &f, "grid", true)?;
    let grid_max = pick(a.grid_max, &f, "grid_max", 16)?;

    let trainer =
        Trainer::load_state(&ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let manifest = load_manifest(&data_dir)?;
    let data = load_split_data(&data_dir, &manifest, split, trainer.cfg.single_contrast)?;

    let synth_norm = synth_split(&trainer, &data.y, seed)?;
    let synth01 = mcsynth::data::clamp01(&denormalize(&synth_norm));

    std::fs::create_dir_all(&out)?;
    let blob = out.join(format!("synth_{}.f32", split.blob_name().trim_end_matches(".f32")));
    let mut bytes = Vec::with_capacity(synth01.len() * 4);
    for v in synth01.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&blob, &bytes)?;
    let (n, c, h, w) = synth01.dim();
    let sidecar = serde_json::json!({
        "shape": [n, c, h, w],
        "dtype": "f32le",
        "split": split.blob_name().trim_end_matches(".f32"),
        "seed": seed,
        "ckpt": ckpt.display().to_string(),
    });
    std::fs::write(blob.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;

    if grid {
        let gp = out.join(format!("grid_{}.png", split.blob_name().trim_end_matches(".f32")));
        write_grid(&gp, &data.cond01, &data.tgt01, &synth01, grid_max)?;
        println!("wrote {} and {}", blob.display(), gp.display());
    } else {
        println!("wrote {}", blob.display());
    }
    Ok(())
}

/// One row per sample: condition panels, truth, synthesis, and a 4x-amplified
/// absolute-error panel, separated by white gutters.
fn write_grid(
    path: &Path,
    cond01: &Array4<f32>,
    tgt01: &Array4<f32>,
    synth01: &Array4<f32>,
    max_rows: usize,
) -> anyhow::Result<()> {
    let (n, nc, h, w) = cond01.dim();
    let rows = n.min(max_rows.max(1));
    let panels = nc + 3;
    let pad = 2usize;
    let gw = panels * w + (panels + 1) * pad;
    let gh = rows * h + (rows + 1) * pad;
    let mut img = vec![255u8; gw * gh];
    let mut put = |px: usize, py: usize, v: f32| {
        img[py * gw + px] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    };
    for r in 0..rows {
        let y0 = pad + r * (h + pad);
        for p in 0..panels {
            let x0 = pad + p * (w + pad);
            for yy in 0..h {
                for xx in 0..w {
                    let v = if p < nc {
                        cond01[[r, p, yy, xx]]
                    } else if p == nc {
                        tgt01[[r, 0, yy, xx]]
                    } else if p == nc + 1 {
                        synth01[[r, 0, yy, xx]]
                    } else {
                        (synth01[[r, 0, yy, xx]] - tgt01[[r, 0, yy, xx]]).abs() * 4.0
                    };
                    put(x0 + xx, y0 + yy, v);
                }
            }
        }
    }
    let buf = image::GrayImage::from_raw(gw as u32, gh as u32, img)
        .expect("buffer sized from dimensions");
    buf.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn metric_table(psnr: &MetricSummary, ssim: &MetricSummary) -> String {
    format!(
        "metric  mean     std      n\npsnr    {:<8.4} {:<8.4} {}\nssim    {:<8.4} {:<8.4} {}",
        psnr.mean, psnr.std, psnr.n, ssim.mean, ssim.std, ssim.n
    )
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    let f = FileCfg::load(a.config.as_deref())?;
    let ckpt: PathBuf = pick_req(a.ckpt, &f, "ckpt")?;
    let data_dir: PathBuf = pick_req(a.data_dir, &f, "data_dir")?;
    let split: Split = pick(a.split.map(|s| s.parse()).transpose()?, &f, "split", Split::Test)?;
    let seed = pick(a.seed, &f, "seed", 0)?;

    let trainer =
        Trainer::load_state(&ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let manifest = load_manifest(&data_dir)?;
    let data = load_split_data(&data_dir, &manifest, split, trainer.cfg.single_contrast)?;

    let synth01 = mcsynth::data::clamp01(&denormalize(&synth_split(&trainer, &data.y, seed)?));
    let psnr = summarize(&psnr_batch(&synth01, &data.tgt01, 1.0)?);
    let ssim = summarize(&ssim_batch(&synth01, &data.tgt01, 1.0)?);

    println!(
        "split={} n={} seed={}\npsnr {:.2}±{:.2} dB  ssim {:.4}±{:.4}",
        split.blob_name().trim_end_matches(".f32"),
        psnr.n,
        seed,
        psnr.mean,
        psnr.std,
        ssim.mean,
        ssim.std
    );
    println!("{}", metric_table(&psnr, &ssim));
    if let Some(path) = pick(a.out, &f, "out", PathBuf::new()).ok().filter(|p| !p.as_os_str().is_empty()) {
        let csv = format!(
            "metric,mean,std,n\npsnr,{:.6},{:.6},{}\nssim,{:.6},{:.6},{}\n",
            psnr.mean, psnr.std, psnr.n, ssim.mean, ssim.std, ssim.n
        );
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

const ARM_NAMES: [&str; 5] = ["full", "no_multiscale", "no_fm_no_fa", "single_contrast", "no_adv"];

fn apply_arm(name: &str, cfg: &mut TrainConfig) -> anyhow::Result<()> {
    match name {
        "full" => {}
        "no_multiscale" => cfg.no_multiscale = true,
        "no_fm_no_fa" => {
            cfg.no_fm = true;
            cfg.no_fa_loss = true;
        }
        "single_contrast" => cfg.single_contrast = true,
        "no_adv" => cfg.no_adv = true,
        other => {
            return Err(usage(format!(
                "unknown ablation arm '{other}', expected one of {}",
                ARM_NAMES.join("|")
            )))
        }
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let f = FileCfg::load(a.config.as_deref())?;
    let data_dir: PathBuf = pick_req(a.data_dir, &f, "data_dir")?;
    let out: PathBuf = pick_req(a.out, &f, "out")?;
    let suite = pick(a.suite, &f, "suite", ARM_NAMES.join(","))?;
    let arms: Vec<String> = suite.split(',').map(|s| s.trim().to_string()).collect();
    let base_cfg = a.hyper.resolve(&f)?;
    for arm in &arms {
        apply_arm(arm, &mut base_cfg.clone())?; // validate names before any work
    }

    let manifest = load_manifest(&data_dir)?;
    let base_gen = a.arch.resolve(&f, manifest.image_size)?;
    std::fs::create_dir_all(&out)?;

    // One autoencoder serves every arm that keeps the attention term: it only
    // ever sees clean targets, which no ablation flag changes.
    let needs_ae = arms.iter().any(|arm| arm != "no_fm_no_fa") && !base_cfg.no_fa_loss;
    let mut ae_tensors = None;
    if needs_ae {
        let train = load_split_data(&data_dir, &manifest, Split::Train, false)?;
        let mut trainer = Trainer::new(&base_cfg, &base_gen)?;
        if !a.quiet {
            println!("pretraining shared autoencoder ({} epochs)...", base_cfg.ae_epochs);
        }
        pretrain_ae_inline(&mut trainer, &train.x0)?;
        save_ae(&out.join("ae.ckpt"), &trainer.ae_store, &base_gen, f64::NAN, f64::NAN)?;
        ae_tensors = Some(checkpoint::params_to_tensors(&trainer.ae_store));
    }

    let header = format!(
        "# seed={} shared across all arms; data={}; epochs={}; batch={}",
        base_cfg.seed,
        data_dir.display(),
        base_cfg.epochs,
        base_cfg.batch_size
    );
    println!("{header}");
    let mut csv = String::from("arm,psnr_mean,psnr_std,ssim_mean,ssim_std,n\n");
    let mut table = format!("{:<17} {:>14} {:>16}\n", "arm", "psnr(dB)", "ssim");
    for arm in &arms {
        let mut cfg = base_cfg.clone();
        apply_arm(arm, &mut cfg)?;
        let mut trainer = Trainer::new(&cfg, &base_gen)?;
        if !cfg.no_fa_loss {
            let tensors = ae_tensors.as_ref().expect("shared autoencoder exists for FA arms");
            checkpoint::tensors_into_params(tensors, &mut trainer.ae_store)?;
        }
        let train = load_split_data(&data_dir, &manifest, Split::Train, cfg.single_contrast)?;
        let val = load_split_data(&data_dir, &manifest, Split::Val, cfg.single_contrast)?;
        let arm_dir = out.join(arm);
        trainer.fit(&train.x0, &train.y, &val.x0, &val.y, cfg.epochs, Some(&arm_dir), true)?;
        let (psnrs, ssims) = trainer.validate_per_sample(&val.x0, &val.y)?;
        let (p, s) = (summarize(&psnrs), summarize(&ssims));
        if !a.quiet {
            println!("{arm}: psnr {:.2}±{:.2} ssim {:.4}±{:.4}", p.mean, p.std, s.mean, s.std);
        }
        csv.push_str(&format!(
            "{arm},{:.6},{:.6},{:.6},{:.6},{}\n",
            p.mean, p.std, s.mean, s.std, p.n
        ));
        table.push_str(&format!(
            "{:<17} {:>7.2}±{:<5.2} {:>9.4}±{:<6.4}\n",
            arm, p.mean, p.std, s.mean, s.std
        ));
    }
    std::fs::write(out.join("ablation.csv"), format!("{header}\n{csv}"))?;
    println!("{table}");
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn run_bench(a: BenchArgs) -> anyhow::Result<()> {
    let f = FileCfg::load(a.config.as_deref())?;
    let n = pick(a.n, &f, "n", 20)?;
    if n == 0 {
        return Err(usage("--n must be at least 1".into()));
    }
    let steps_raw = pick(a.steps_compare, &f, "steps_compare", "4,100".into())?;
    let mut steps = Vec::new();
    for part in steps_raw.split(',') {
        let t: usize = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("steps_compare entry '{part}' is not a positive integer")))?;
        if t == 0 {
            return Err(usage("steps_compare entries must be >= 1".into()));
        }
        steps.push(t);
    }

    // A trained state if given, otherwise a fresh network: step timing does
    // not depend on the weights.
    let (gen_cfg, store, generator, t_max, beta_min, beta_max) = match pick(
        a.ckpt,
        &f,
        "ckpt",
        PathBuf::new(),
    )
    .ok()
    .filter(|p| !p.as_os_str().is_empty())
    {
        Some(path) => {
            let t = Trainer::load_state(&path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            (t.gen_cfg.clone(), t.g_store, t.generator, t.cfg.t_max, t.cfg.beta_min, t.cfg.beta_max)
        }
        None => {
            let cfg = a.arch.resolve(&f, GeneratorConfig::default().image_size)?;
            cfg.validate()?;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let g = Generator::new(&mut store, &mut rng, &cfg)?;
            let d = TrainConfig::default();
            (cfg, store, g, d.t_max, d.beta_min, d.beta_max)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = randn4::<f32>((1, gen_cfg.in_channels_cond, gen_cfg.image_size, gen_cfg.image_size), &mut rng);
    let shape = (1, gen_cfg.in_channels_target, gen_cfg.image_size, gen_cfg.image_size);

    println!("steps  mean_ms    std_ms     ratio_vs_first  (n={n}, {}px)", gen_cfg.image_size);
    let mut first_mean = None;
    for &t_steps in &steps {
        let sched = build_schedule(t_steps, beta_min, beta_max)?;
        let mut times = Vec::with_capacity(n);
        for i in 0..n {
            let mut srng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let mut denoise = |x_t: &Array4<f32>, z: &ndarray::Array2<f32>, t: usize| {
                Ok(generator.forward(&store, x_t, &y, z, &[t])?.x0_hat)
            };
            let start = Instant::now();
            // The few-step sampler draws a latent per step; the many-step
            // baseline is the same recursion with the latent pinned to zero.
            if t_steps == t_max {
                reverse_sample_loop(&sched, shape, gen_cfg.z_dim, &mut denoise, &mut srng)?;
            } else {
                ancestral_sample_loop(&sched, shape, gen_cfg.z_dim, &mut denoise, &mut srng)?;
            }
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let m = summarize(&times);
        let ratio = first_mean.map_or(1.0, |fmean: f64| m.mean / fmean);
        if first_mean.is_none() {
            first_mean = Some(m.mean);
        }
        println!("{t_steps:<6} {:<10.2} {:<10.2} {ratio:.1}x", m.mean, m.std);
    }
    Ok(())
}
