use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use bitrl::backbone::{build_backbone, BackboneConfig, DenseBackbone};
use bitrl::checkpoint::{
    get_backbone, get_head, put_backbone, put_dense_backbone, Checkpoint, StoredBackbone,
};
use bitrl::envs::EnvId;
use bitrl::kernels::bench_matvec;
use bitrl::ppo::{evaluate, train_with, CriticMode, RunStatus, TrainConfig};
use bitrl::quant::{perturbation_between, QuantConfig, ScaleMode, Threshold};
use bitrl::report::{read_run, summarize, write_run, CHECKPOINT_FILE};
use bitrl::rng::RngStream;
use bitrl::theory::{run_suite, SuiteScale, SUITES};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ASSERTION: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "bitrl",
    version,
    about = "Ternary encoders with PPO-trained heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleFlag {
    Absmean,
    None,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a full-precision backbone checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = BackboneConfig::default().layers)]
        layers: usize,
        #[arg(long, default_value_t = BackboneConfig::default().d_model)]
        d_model: usize,
        #[arg(long, default_value_t = BackboneConfig::default().heads)]
        heads: usize,
        #[arg(long, default_value_t = BackboneConfig::default().ffn_dim)]
        ffn_dim: usize,
    },
    /// Quantize every linear layer of a backbone checkpoint to ternary.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau_frac: f64,
        #[arg(long, value_enum, default_value_t = ScaleFlag::Absmean)]
        scale: ScaleFlag,
    },
    /// Train policy and critic heads on a frozen ternary backbone.
    Train {
        #[arg(long)]
        env: String,
        /// `key = value` file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        critic: Option<String>,
    },
    /// Greedy evaluation of a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ternary against dense FP32 matrix-vector timing, one JSON line per shape.
    Bench {
        /// Comma-separated shapes, `N` for square or `RxC`.
        #[arg(long, default_value = "1024")]
        dims: String,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run verification suites and print their JSON reports.
    Verify {
        #[arg(long)]
        suite: String,
        /// Smallest sizes that satisfy each suite's preconditions.
        #[arg(long)]
        quick: bool,
    },
    /// Aggregate run directories into phase tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            error: e.into(),
        }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

type Outcome = Result<(), Failure>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write_manifest(path: &Path, config: &str, seed: Option<u64>) -> anyhow::Result<()> {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "command": std::env::args().collect::<Vec<_>>(),
        "config": config,
        "config_hash": sha256_hex(config.as_bytes()),
        "seed": seed,
        "git_describe": git_describe(),
        "timestamp": timestamp,
    });
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn parse_env(name: &str) -> Result<EnvId, Failure> {
    name.parse()
        .map_err(|e: bitrl::Error| fail(EXIT_USAGE, e.into()))
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_init(out: &Path, seed: u64, cfg: BackboneConfig) -> Outcome {
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e.into()))?;
    let (_, shadow) = build_backbone(&cfg, &mut RngStream::new(seed, 1))?;
    let mut ck = Checkpoint::default();
    put_dense_backbone(&mut ck, &shadow);
    ck.save(out)?;
    let text = format!(
        "layers = {}\nd_model = {}\nheads = {}\nffn_dim = {}\n",
        cfg.layers, cfg.d_model, cfg.heads, cfg.ffn_dim
    );
    write_manifest(&manifest_beside(out), &text, Some(seed))?;
    println!("wrote {} ({} bytes)", out.display(), ck.size()?);
    Ok(())
}

fn cmd_quantize(input: &Path, out: &Path, tau_frac: f64, scale: ScaleFlag) -> Outcome {
    let quant = QuantConfig {
        threshold: Threshold::AbsMeanFraction(tau_frac),
        scale: match scale {
            ScaleFlag::Absmean => ScaleMode::AbsMean,
            ScaleFlag::None => ScaleMode::None,
        },
    };
    quant.validate().map_err(|e| fail(EXIT_USAGE, e.into()))?;
    let src = load(input)?;
    if src.tensors.is_empty() {
        return Err(anyhow!("{} holds no tensors", input.display()).into());
    }
    let fp: DenseBackbone = match get_backbone(&src)? {
        StoredBackbone::Dense(d) => d,
        StoredBackbone::Ternary(t) => t.dequantized(),
    };
    let model = fp.quantize(&quant)?;

    let mut dst = Checkpoint::default();
    put_backbone(&mut dst, &model);
    for (k, v) in &src.meta {
        dst.meta.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let names: Vec<String> = dst.tensors.iter().map(|t| t.name.clone()).collect();
    for t in &src.tensors {
        if !names.contains(&t.name) {
            dst.tensors.push(t.clone());
        }
    }

    println!(
        "{:<20} {:>12} {:>12} {:>12}",
        "tensor", "|delta|", "|theta|", "eps_q"
    );
    for (l, (wf, wq)) in fp.blocks().iter().zip(model.blocks()).enumerate() {
        for ((name, w), (_, q)) in wf.linears().into_iter().zip(wq.linears()) {
            let p = perturbation_between(w, q)?;
            println!(
                "{:<20} {:>12.6} {:>12.6} {:>12.6}",
                format!("block{l}.{name}"),
                p.delta_norm,
                p.theta_norm,
                p.epsilon_q
            );
        }
    }
    let (_, total) = fp.perturbation(&model)?;
    println!(
        "{:<20} {:>12.6} {:>12.6} {:>12.6}",
        "total", total.delta_norm, total.theta_norm, total.epsilon_q
    );
    dst.save(out)?;
    let (a, b) = (fs::metadata(input)?.len(), fs::metadata(out)?.len());
    println!("size {a} -> {b} bytes, ratio {:.2}", a as f64 / b as f64);
    write_manifest(
        &manifest_beside(out),
        &format!(
            "tau_frac = {tau_frac}\nscale = {}\n",
            scale.to_possible_value().expect("not skipped").get_name()
        ),
        None,
    )?;
    Ok(())
}

fn cmd_train(
    env: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    critic: Option<&str>,
) -> Outcome {
    let env = parse_env(env)?;
    let text = match config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let (mut cfg, defaulted) = TrainConfig::parse(&text).map_err(|e| fail(EXIT_USAGE, e.into()))?;
    for key in defaulted {
        eprintln!("config: {key} not set, using default {}", cfg.get(key)?);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(c) = critic {
        cfg.critic_mode = c
            .parse::<CriticMode>()
            .map_err(|e| fail(EXIT_USAGE, e.into()))?;
    }
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e.into()))?;
    fs::create_dir_all(out)?;
    let resolved = cfg.to_text();
    fs::write(out.join("config.txt"), &resolved)?;
    write_manifest(&out.join("manifest.json"), &resolved, Some(cfg.seed))?;

    let run = train_with(env, &cfg, &mut |_| {}, &mut |e| {
        eprintln!(
            "step {} eval {:.2} ± {:.2}",
            e.step, e.mean_return, e.std_return
        )
    })?;
    write_run(out, &run)?;
    if run.status == RunStatus::Diverged {
        return Err(fail(
            EXIT_RUNTIME,
            anyhow!(
                "training diverged at step {}: {} updates had non-finite losses",
                run.metrics.last().map_or(0, |m| m.step),
                run.non_finite_updates
            ),
        ));
    }
    let last = run.final_eval().expect("a completed run is evaluated");
    println!(
        "{}",
        json!({
            "env": env.name(),
            "seed": cfg.seed,
            "final_return": last.mean_return,
            "best_return": run.best_eval(),
            "failed": run.failed(),
            "checkpoint": out.join(CHECKPOINT_FILE),
        })
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, env: &str, episodes: usize, seed: u64) -> Outcome {
    let env = parse_env(env)?;
    if episodes == 0 {
        return Err(fail(EXIT_USAGE, anyhow!("--episodes must be positive")));
    }
    let ck = load(ckpt)?;
    if let Ok(trained) = ck.meta("env") {
        if trained != env.name() {
            eprintln!("warning: checkpoint was trained on {trained}");
        }
    }
    let model = match get_backbone(&ck)? {
        StoredBackbone::Ternary(m) => m,
        StoredBackbone::Dense(d) => d.quantize(&d.config().quant)?,
    };
    let policy = get_head(&ck, "policy")?;
    let rep = evaluate(&model, &policy, env, episodes, &mut RngStream::new(seed, 7))?;
    println!("{}", serde_json::to_string(&rep)?);
    Ok(())
}

fn parse_dims(text: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|item| {
            let item = item.trim();
            let (r, c) = item.split_once(['x', 'X']).unwrap_or((item, item));
            let r: usize = r
                .trim()
                .parse()
                .with_context(|| format!("bad dims `{item}`"))?;
            let c: usize = c
                .trim()
                .parse()
                .with_context(|| format!("bad dims `{item}`"))?;
            if r == 0 || c == 0 {
                bail!("dims must be positive in `{item}`");
            }
            Ok((r, c))
        })
        .collect()
}

fn cmd_bench(dims: &str, iters: usize, seed: u64) -> Outcome {
    let dims = parse_dims(dims).map_err(|e| fail(EXIT_USAGE, e))?;
    if iters == 0 {
        return Err(fail(EXIT_USAGE, anyhow!("--iters must be positive")));
    }
    for (rows, cols) in dims {
        let r = bench_matvec(rows, cols, iters, seed)?;
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

fn cmd_verify(suite: &str, quick: bool) -> Outcome {
    let names: Vec<&str> = match suite {
        "all" => SUITES.to_vec(),
        s if SUITES.contains(&s) => vec![s],
        other => {
            return Err(fail(
                EXIT_USAGE,
                anyhow!("unknown suite `{other}`; expected one of {SUITES:?} or all"),
            ))
        }
    };
    let scale = if quick {
        SuiteScale::quick()
    } else {
        SuiteScale::full()
    };
    let mut all_passed = true;
    for name in names {
        let report = run_suite(name, &scale)?;
        all_passed &= report.passed;
        println!("{}", serde_json::to_string(&report)?);
    }
    if all_passed {
        Ok(())
    } else {
        Err(fail(EXIT_ASSERTION, anyhow!("a verification suite failed")))
    }
}

fn cmd_report(runs: &[PathBuf], as_json: bool) -> Outcome {
    let records = runs
        .iter()
        .map(|d| read_run(d).with_context(|| format!("reading run {}", d.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let summary = summarize(&records)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", summary.to_table());
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Init {
            out,
            seed,
            layers,
            d_model,
            heads,
            ffn_dim,
        } => {
            let cfg = BackboneConfig {
                layers,
                d_model,
                heads,
                ffn_dim,
                ..BackboneConfig::default()
            };
            cmd_init(&out, seed, cfg)
        }
        Command::Quantize {
            input,
            out,
            tau_frac,
            scale,
        } => cmd_quantize(&input, &out, tau_frac, scale),
        Command::Train {
            env,
            config,
            seed,
            out,
            critic,
        } => cmd_train(&env, config.as_deref(), seed, &out, critic.as_deref()),
        Command::Eval {
            ckpt,
            env,
            episodes,
            seed,
        } => cmd_eval(&ckpt, &env, episodes, seed),
        Command::Bench { dims, iters, seed } => cmd_bench(&dims, iters, seed),
        Command::Verify { suite, quick } => cmd_verify(&suite, quick),
        Command::Report { runs, json } => cmd_report(&runs, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
