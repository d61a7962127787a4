//! `dymos`: train toy models, sample with reference-frame modulation, run γ
//! sweeps and time the attention kernel.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dymos::analysis::export::{difference_csv, difference_pgm, frame_attention_csv, frame_attention_pgm, frame_pgm, write_atomic};
use dymos::analysis::{
    attention_difference, average_captures, gamma_sweep, mean_frame_attention, reference_attention_delta, t2v_attention,
};
use dymos::attention::bench::{run_bench, BenchConfig};
use dymos::attention::{AttentionCapture, CaptureMode};
use dymos::config::ExperimentConfig;
use dymos::model::{toy_decode, toy_encode, train_with_progress, ModelConfig, SpriteDataset, ToyDiT, TrainReport};
use dymos::modulation::{is_active, schedule_weight};
use dymos::sampler::{sample, sample_baseline};
use dymos::{BranchPolicy, Condition, Error, Frame, ScheduleKind, VideoLatent};

#[derive(Parser)]
#[command(name = "dymos", version, about = "Reference-frame attention modulation on a toy video flow model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference-conditioned model and its reference-free counterpart.
    Train(TrainArgs),
    /// Generate one video from a sprite reference frame.
    Sample(SampleArgs),
    /// Sample a γ grid over several seeds and export metrics and attention maps.
    Sweep(SweepArgs),
    /// Time fused-bias attention against unbiased attention.
    Bench(BenchArgs),
    /// Print the resolved configuration with every key documented.
    Config(ConfigArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config file. [default: none, built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=500`; repeatable. [default: none]
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Skip the reference-free counterpart. [default: false]
    #[arg(long)]
    i2v_only: bool,
}

#[derive(Args)]
struct SamplingFlags {
    /// Modulation strength γ. [default: 0.6]
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    /// Fraction of initial steps that are modulated. [default: 0.2]
    #[arg(long)]
    lambda: Option<f64>,
    /// Per-frame weight: uniform | linear | log. [default: uniform]
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    /// Which guidance branch is modulated: conditional_only | both_branches. [default: conditional_only]
    #[arg(long)]
    branch_policy: Option<BranchPolicy>,
    /// Euler steps N. [default: 20]
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance scale ω ≥ 1. [default: 3.5]
    #[arg(long)]
    guidance: Option<f64>,
    /// Noise seed. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Pin frame 0 to the reference latent after every step. [default: true]
    #[arg(long, value_name = "BOOL")]
    replace_ref: Option<bool>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: SamplingFlags,
    /// Weights written by `train`.
    #[arg(long, default_value = "runs/train/i2v.weights")]
    weights: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "runs/sample")]
    out: PathBuf,
    /// Condition class: 0 static, 1 moving.
    #[arg(long, default_value_t = 1)]
    class: usize,
    /// Seed of the sprite used as reference frame. [default: the noise seed]
    #[arg(long)]
    reference_seed: Option<u64>,
    /// Record frame attention of the conditional branch. [default: false]
    #[arg(long)]
    capture: bool,
    /// Use the sampler without any modulation code path. [default: false]
    #[arg(long)]
    no_modulation: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: SamplingFlags,
    /// Weights of the reference-conditioned model.
    #[arg(long, default_value = "runs/train/i2v.weights")]
    weights: PathBuf,
    /// Weights of the reference-free model; D(γ) is then measured against it. [default: none]
    #[arg(long)]
    t2v_weights: Option<PathBuf>,
    /// Comma-separated γ grid. [default: -2,-1,0,0.6,1]
    #[arg(long, allow_hyphen_values = true)]
    gammas: Option<String>,
    /// Comma-separated seeds. [default: 0,1,2,3,4,5,6,7]
    #[arg(long)]
    seeds: Option<String>,
    /// Result CSV; maps and per-seed metrics go next to it.
    #[arg(long, default_value = "runs/sweep/sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Token count S.
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Channels per head.
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    /// Frames the tokens are split into.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Timed calls per kernel.
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// γ of the timed bias.
    #[arg(long, default_value_t = 0.6, allow_hyphen_values = true)]
    gamma: f64,
}

#[derive(Args)]
struct ConfigArgs {
    #[command(flatten)]
    common: Common,
    /// Print JSON instead of the config file format. [default: false]
    #[arg(long)]
    json: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::SamplerDivergence { .. } | Error::TrainingDivergence { .. } => 3,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects SECTION.KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &SamplingFlags) -> Result<(), Error> {
    let m = &mut cfg.modulation;
    m.gamma = f.gamma.unwrap_or(m.gamma);
    m.lambda = f.lambda.unwrap_or(m.lambda);
    m.schedule = f.schedule.unwrap_or(m.schedule);
    m.branch_policy = f.branch_policy.unwrap_or(m.branch_policy);
    let s = &mut cfg.sampler;
    s.num_steps = f.steps.unwrap_or(s.num_steps);
    s.guidance_scale = f.guidance.unwrap_or(s.guidance_scale);
    s.seed = f.seed.unwrap_or(s.seed);
    s.replace_reference = f.replace_ref.unwrap_or(s.replace_reference);
    cfg.validate()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("--{what}: {p:?} is not a valid entry"))))
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn load_weights(config: ModelConfig, path: &Path) -> Result<ToyDiT<f32>, Error> {
    let f = fs::File::open(path).map_err(|e| Error::Config(format!("cannot open weights {}: {e}", path.display())))?;
    ToyDiT::read_weights(config, std::io::BufReader::new(f))
}

fn write_json_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), Error> {
    write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())
}

fn loss_csv(r: &TrainReport) -> String {
    let mut out = String::from("step,loss\n");
    for (s, l) in &r.losses {
        out.push_str(&format!("{s},{l}\n"));
    }
    out
}

fn cmd_train(a: &TrainArgs) -> Result<(), Error> {
    let cfg = load_config(&a.common)?;
    create_dir(&a.out)?;
    write_json_config(&a.out, &cfg)?;
    let dataset = SpriteDataset::<f32>::generate(cfg.dataset_config())?;
    let mut runs = vec![("i2v", cfg.model)];
    if !a.i2v_only {
        runs.push(("t2v", cfg.t2v_model_config()));
    }
    for (name, mc) in runs {
        let mut model = ToyDiT::<f32>::new(mc, cfg.model_seed)?;
        eprintln!("training {name}: {} parameters, {} tokens, {} steps", model.parameter_count(), mc.layout().token_count(), cfg.train.steps);
        let start = Instant::now();
        let report = train_with_progress(&mut model, &dataset, &cfg.train, |step, loss| {
            eprintln!("  {name} step {step} loss {loss:.5} ({:.0}s)", start.elapsed().as_secs_f64());
        })?;
        eprintln!("{name}: held-out loss {:.5} -> {:.5}", report.initial_eval_loss, report.final_eval_loss);
        let mut bytes = Vec::new();
        model.write_weights(&mut bytes)?;
        write_atomic(&a.out.join(format!("{name}.weights")), &bytes)?;
        write_atomic(&a.out.join(format!("{name}_loss.csv")), loss_csv(&report).as_bytes())?;
    }
    Ok(())
}

fn reference_latent(pixels: &Frame<f32>) -> Result<Frame<f32>, Error> {
    let v = VideoLatent::from_vec(1, pixels.height, pixels.width, pixels.channels, pixels.data.clone())?;
    Ok(toy_encode(&v).frame_owned(0))
}

fn cmd_sample(a: &SampleArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.common)?;
    apply_flags(&mut cfg, &a.flags)?;
    if a.class >= cfg.model.num_classes {
        return Err(Error::Config(format!("--class {} out of range for {} classes", a.class, cfg.model.num_classes)));
    }
    let model = load_weights(cfg.model, &a.weights)?;
    create_dir(&a.out)?;
    write_json_config(&a.out, &cfg)?;
    let (m, s) = (cfg.modulation, cfg.sampler);
    let mut sweep = cfg.sweep_config();
    sweep.cond = Condition::Class(a.class);
    let pixels: Frame<f32> = sweep.reference_pixels(a.reference_seed.unwrap_or(s.seed))?;
    let z_ref = reference_latent(&pixels)?;
    let cond = Condition::Class(a.class);

    let latent = if a.no_modulation {
        println!("modulation: compiled-out baseline sampler");
        sample_baseline(&model, &z_ref, cond, &s)?
    } else {
        let frames = cfg.model.frames;
        println!("modulation: gamma={} lambda={} schedule={} branch={}", m.gamma, m.lambda, m.schedule, m.branch_policy);
        for f in 1..frames {
            println!("phi[{f}] = {:.6}", schedule_weight(m.schedule, f, frames)?);
        }
        let active: Vec<String> = (1..=s.num_steps).filter(|&i| is_active(i, s.num_steps, m.lambda)).map(|i| i.to_string()).collect();
        println!("active steps: [{}] of {}", active.join(","), s.num_steps);
        let mut capture = AttentionCapture::new(cfg.model.layout(), CaptureMode::FrameAggregate);
        capture.set_enabled(a.capture);
        let out = sample(&model, &z_ref, cond, &s, &m, a.capture.then_some(&mut capture))?;
        for st in &out.steps {
            println!("step {}/{} t={:.4}->{:.4} {}", st.step, s.num_steps, st.t, st.t_next, if st.modulated { "modulated" } else { "plain" });
        }
        if a.capture {
            export_capture(&a.out, &capture, cfg.sweep.attention_window)?;
        }
        out.latent
    };

    let mut bytes = Vec::new();
    latent.write_stream(&mut bytes)?;
    write_atomic(&a.out.join("latent.dmlt"), &bytes)?;
    let video = toy_decode(&latent);
    for f in 0..video.frames() {
        write_atomic(&a.out.join(format!("frame_{f:03}.pgm")), &frame_pgm(&video, f))?;
    }
    println!(
        "wrote {} frames to {}; dd_proxy={:.5} ref_mse={:.3e}",
        video.frames(),
        a.out.display(),
        dymos::analysis::dynamic_degree_proxy(&video)?,
        dymos::analysis::reference_fidelity(&video, &pixels.data)?
    );
    Ok(())
}

fn export_capture(dir: &Path, capture: &AttentionCapture<f32>, window: f64) -> Result<(), Error> {
    let layout = *capture.layout();
    let mut steps: Vec<usize> = capture.records().iter().map(|r| r.step).collect();
    steps.dedup();
    let mut csv = String::from("step,query_frame,key_frame,attention\n");
    for step in steps {
        let mats = capture.records().iter().filter(|r| r.step == step).map(|r| r.frames(&layout)).collect::<Result<Vec<_>, _>>()?;
        let m = mean_frame_attention(&mats)?;
        for qf in 0..m.frames() {
            for kf in 0..m.frames() {
                csv.push_str(&format!("{step},{qf},{kf},{}\n", m.get(qf, kf)));
            }
        }
    }
    write_atomic(&dir.join("attention_steps.csv"), csv.as_bytes())?;
    let avg = average_captures(capture, window)?;
    write_atomic(&dir.join("attention_window.csv"), frame_attention_csv(&avg).as_bytes())?;
    write_atomic(&dir.join("attention_window.pgm"), frame_attention_pgm(&avg).as_bytes())
}

fn fmt_gamma(g: f64) -> String {
    format!("{g}").replace('-', "m")
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.common)?;
    apply_flags(&mut cfg, &a.flags)?;
    if let Some(g) = &a.gammas {
        cfg.sweep.gammas = parse_list(g, "gammas")?;
    }
    if let Some(s) = &a.seeds {
        cfg.sweep.seeds = parse_list(s, "seeds")?;
    }
    cfg.validate()?;
    let sweep_cfg = cfg.sweep_config();
    let model = load_weights(cfg.model, &a.weights)?;
    let comparator = match &a.t2v_weights {
        Some(p) => {
            let t2v = load_weights(cfg.t2v_model_config(), p)?;
            eprintln!("sampling reference-free comparator over {} seeds", sweep_cfg.seeds.len());
            Some(t2v_attention(&t2v, &sweep_cfg)?)
        }
        None => None,
    };
    eprintln!("sweeping {} gammas x {} seeds", sweep_cfg.gammas.len(), sweep_cfg.seeds.len());
    let result = gamma_sweep(&model, &sweep_cfg, comparator.as_ref())?;

    let dir = match a.out.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    write_json_config(&dir, &cfg)?;
    write_atomic(&a.out, result.to_csv().as_bytes())?;
    write_atomic(&dir.join("sweep_samples.csv"), result.samples_csv().as_bytes())?;
    write_atomic(&dir.join("comparator_attention.csv"), frame_attention_csv(&result.comparator).as_bytes())?;
    let mut delta_csv = String::from("gamma,query_frame,abs_ref_attention_delta\n");
    for r in &result.rows {
        let tag = fmt_gamma(r.gamma);
        let diff = attention_difference(&r.attention, &result.comparator)?;
        write_atomic(&dir.join(format!("attention_g{tag}.csv")), frame_attention_csv(&r.attention).as_bytes())?;
        write_atomic(&dir.join(format!("attention_g{tag}.pgm")), frame_attention_pgm(&r.attention).as_bytes())?;
        write_atomic(&dir.join(format!("difference_g{tag}.csv")), difference_csv(&diff).as_bytes())?;
        write_atomic(&dir.join(format!("difference_g{tag}.pgm")), difference_pgm(&diff).as_bytes())?;
        for (i, d) in reference_attention_delta(&r.attention, &result.comparator)?.iter().enumerate() {
            delta_csv.push_str(&format!("{},{},{d}\n", r.gamma, i + 1));
        }
        println!("gamma={:<6} dd_proxy={:.5} dd_median={:.5} ref_mse={:.3e} d_gamma={:.5}", r.gamma, r.dd_proxy, r.dd_median(), r.ref_mse, r.d_gamma);
    }
    write_atomic(&dir.join("reference_delta.csv"), delta_csv.as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Error> {
    let cfg = BenchConfig { size: a.size, heads: a.heads, head_dim: a.head_dim, frames: a.frames, iters: a.iters, gamma: a.gamma, seed: 0 };
    let report = run_bench::<f32>(&cfg)?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_config(a: &ConfigArgs) -> Result<(), Error> {
    let cfg = load_config(&a.common)?;
    if a.json {
        println!("{}", cfg.to_json());
    } else {
        print!("{}", cfg.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Config(a) => cmd_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
