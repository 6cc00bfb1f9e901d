use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use flowpose::body_model::BodyTemplate;
use flowpose::checkpoint::Checkpoint;
use flowpose::config::{Config, EncoderKind, Preset, RegressorKind};
use flowpose::datagen::{build_pose_pool, generate, read_dataset, write_dataset, FrameSequence, PosePool};
use flowpose::losses::Reduction;
use flowpose::trainer::{self, Variant};
use flowpose::Error;
use log::info;

#[derive(Parser)]
#[command(name = "flowpose", version, about = "Train and evaluate the two-stream video pose model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, eval and pose-pool files.
    GenData(Common),
    /// Adversarial training from scratch.
    Train(Common),
    /// Flow-loss refinement of a phase-1 checkpoint.
    Refine(WithCkpt),
    /// Print PA-MPJPE, MPJPE, PVE and Accel for a checkpoint.
    Evaluate(Evaluate),
    /// Train and evaluate the encoder/regressor and flow variants.
    Ablate(Common),
    /// Write per-sequence attention maps and per-head averages.
    DumpAttention(DumpAttention),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Output directory.
    #[arg(long, env = "FLOWPOSE_OUT", default_value = "flowpose-out")]
    out: PathBuf,
    /// Directory holding train.ds, eval.ds and pool.pp; defaults to `--out`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr_gen: Option<f64>,
    #[arg(long)]
    lr_disc: Option<f64>,
    #[arg(long)]
    lr_refine: Option<f64>,
    #[arg(long, value_parser = parse_encoder)]
    encoder: Option<EncoderKind>,
    #[arg(long, value_parser = parse_regressor)]
    regressor: Option<RegressorKind>,
    #[arg(long)]
    flow_feature: Option<bool>,
    #[arg(long)]
    flow_loss: Option<bool>,
    #[arg(long)]
    flow_weight: Option<f64>,
    #[arg(long, value_parser = parse_reduction)]
    reduction: Option<Reduction>,
    /// Progress line every N steps.
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args)]
struct WithCkpt {
    #[command(flatten)]
    common: Common,
    /// Defaults to the phase-1 checkpoint in `--out`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Load even if the checkpoint was written for another architecture.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    inner: WithCkpt,
    /// Evaluate on the training split instead of the held-out one.
    #[arg(long)]
    train_split: bool,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DumpAttention {
    #[command(flatten)]
    inner: WithCkpt,
    /// Number of held-out sequences to generate and encode.
    #[arg(short, long, default_value_t = 1000)]
    n: usize,
}

fn parse_encoder(s: &str) -> Result<EncoderKind, String> {
    match s {
        "transformer" => Ok(EncoderKind::Transformer),
        "gru" => Ok(EncoderKind::Gru),
        _ => Err(format!("unknown encoder `{s}` (transformer | gru)")),
    }
}

fn parse_regressor(s: &str) -> Result<RegressorKind, String> {
    match s {
        "transformer" => Ok(RegressorKind::Transformer),
        "hmr" => Ok(RegressorKind::Hmr),
        _ => Err(format!("unknown regressor `{s}` (transformer | hmr)")),
    }
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        _ => Err(format!("unknown reduction `{s}` (mean | sum)")),
    }
}

impl Common {
    fn config(&self) -> anyhow::Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => Config::preset(self.preset),
        };
        let t = &mut c.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.steps {
            t.steps_phase1 = v;
            t.steps_phase2 = v;
            t.ablation_steps_phase1 = v;
            t.ablation_steps_phase2 = v;
        }
        if let Some(v) = self.lr_gen {
            t.lr_gen = v;
        }
        if let Some(v) = self.lr_disc {
            t.lr_disc = v;
        }
        if let Some(v) = self.lr_refine {
            t.lr_refine = v;
        }
        if let Some(v) = self.flow_loss {
            t.flow_loss = v;
        }
        if let Some(v) = self.flow_weight {
            t.flow_weight = v;
        }
        if let Some(v) = self.reduction {
            t.reduction = v;
        }
        if let Some(v) = self.log_every {
            t.log_every = v;
        }
        if let Some(v) = self.encoder {
            c.model.encoder = v;
        }
        if let Some(v) = self.regressor {
            c.model.regressor = v;
        }
        if let Some(v) = self.flow_feature {
            c.model.flow_feature = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.out)
    }
}

struct Data {
    train: Vec<FrameSequence>,
    eval: Vec<FrameSequence>,
    pool: PosePool,
}

fn load_data(dir: &Path) -> anyhow::Result<Data> {
    let read = |name: &str| read_dataset(&dir.join(name)).with_context(|| format!("reading {}", dir.join(name).display()));
    Ok(Data {
        train: read("train.ds")?,
        eval: read("eval.ds")?,
        pool: PosePool::load(&dir.join("pool.pp")).with_context(|| format!("reading {}", dir.join("pool.pp").display()))?,
    })
}

fn gen_data(cfg: &Config, tpl: &BodyTemplate, out: &Path) -> anyhow::Result<Data> {
    std::fs::create_dir_all(out)?;
    let d = &cfg.data;
    let data = Data {
        train: generate(tpl, &d.gen, &d.train_seeds())?,
        eval: generate(tpl, &d.gen, &d.eval_seeds())?,
        pool: build_pose_pool(tpl, &d.pool_seeds(), &d.train_seeds(), d.gen.seq_len, d.gen.smoothness)?,
    };
    write_dataset(&out.join("train.ds"), &data.train)?;
    write_dataset(&out.join("eval.ds"), &data.eval)?;
    data.pool.save(&out.join("pool.pp"))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    info!("wrote {} train, {} eval and {} pool sequences to {}", data.train.len(), data.eval.len(), data.pool.len(), out.display());
    Ok(data)
}

fn load_ckpt(w: &WithCkpt, default: &str) -> anyhow::Result<Checkpoint> {
    let path = w.ckpt.clone().unwrap_or_else(|| w.common.out.join(default));
    // only an explicit config is checked against the checkpoint
    let expected = match &w.common.config {
        Some(_) => Some(w.common.config()?),
        None => None,
    };
    Checkpoint::load(&path, expected.as_ref(), w.force).with_context(|| format!("loading {}", path.display()))
}

fn write_log(path: &Path, log: &[trainer::StepLog]) -> anyhow::Result<()> {
    let mut text = String::from("step,total,l3d,l2d,smpl,adv,flow,disc\n");
    for s in log {
        text.push_str(&format!("{},{},{},{},{},{},{},{}\n", s.step, s.total, s.l3d, s.l2d, s.smpl, s.adv, s.flow, s.disc));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let tpl = BodyTemplate::toy();
    match cli.command {
        Command::GenData(c) => {
            gen_data(&c.config()?, &tpl, &c.out)?;
        }
        Command::Train(c) => {
            let cfg = c.config()?;
            let data = load_data(c.data_dir())?;
            std::fs::create_dir_all(&c.out)?;
            let out = trainer::train_phase1(&cfg, &tpl, &data.train, &data.pool)?;
            out.checkpoint.save(&c.out.join("phase1.ck"))?;
            write_log(&c.out.join("phase1_log.csv"), &out.log)?;
            println!("trained {} steps; checkpoint {}", out.log.len(), c.out.join("phase1.ck").display());
        }
        Command::Refine(w) => {
            let ck = load_ckpt(&w, "phase1.ck")?;
            let data = load_data(w.common.data_dir())?;
            let steps = w.common.steps.unwrap_or(ck.config.train.steps_phase2);
            let out = trainer::train_phase2_refine(&ck, &tpl, &data.train, steps)?;
            out.checkpoint.save(&w.common.out.join("refined.ck"))?;
            write_log(&w.common.out.join("refine_log.csv"), &out.log)?;
            println!("refined {} steps; checkpoint {}", out.log.len(), w.common.out.join("refined.ck").display());
        }
        Command::Evaluate(e) => {
            let ck = load_ckpt(&e.inner, "phase1.ck")?;
            let data = load_data(e.inner.common.data_dir())?;
            let split = if e.train_split { &data.train } else { &data.eval };
            let report = trainer::evaluate(&ck, &tpl, split)?;
            std::fs::create_dir_all(&e.inner.common.out)?;
            std::fs::write(e.inner.common.out.join("report.json"), report.to_json())?;
            if e.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.table("model"));
            }
        }
        Command::Ablate(c) => {
            let cfg = c.config()?;
            let data = load_data(c.data_dir())?;
            let variants: Vec<Variant> = Variant::ARCHITECTURE.iter().chain(&Variant::FLOW).copied().collect();
            let tables = trainer::run_ablation(&cfg, &variants, &tpl, &data.train, &data.eval, &data.pool)?;
            std::fs::create_dir_all(&c.out)?;
            std::fs::write(c.out.join("ablation.txt"), tables.format())?;
            std::fs::write(c.out.join("ablation.json"), serde_json::to_string_pretty(&tables)?)?;
            print!("{}", tables.format());
        }
        Command::DumpAttention(d) => {
            let ck = load_ckpt(&d.inner, "phase1.ck")?;
            let dc = &ck.config.data;
            let seeds: Vec<u64> = (0..d.n as u64).map(|i| dc.seed.wrapping_mul(1_000_003).wrapping_add(300_000 + i)).collect();
            let seqs = generate(&tpl, &dc.gen, &seeds)?;
            let dir = d.inner.common.out.join("attention");
            let summary = trainer::dump_attention(&ck, &tpl, &seqs, &dir)?;
            println!("wrote {} records and {} head summaries to {}", seqs.len(), summary.shape()[0], dir.display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Divergence { .. } => 2,
                Error::Format(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<flowpose::container::FormatError>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on usage errors, which is reserved for divergence
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
