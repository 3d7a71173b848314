use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carp::envs::{generate_demos, Task, TaskConfig};
use carp::harness::{
    ablate_scales, ablation_csv, evaluate, measure_latency, record_ema_comparison, train_policy_stage, train_tokenizer_stage,
    AblationConfig, CarpAgent, EvalMetrics, EvalOptions, PolicyTrainConfig, TokenizerTrainConfig,
};
use carp::io::{read_demos, write_atomic, write_demos, write_trajectory, Checkpoint};
use carp::policy::Sampler;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "carp", version, about = "Coarse-to-fine autoregressive action policies on planar control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a JSONL dataset.
    GenDemos {
        #[arg(long)]
        task: Task,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-dimension action tokenizers.
    TrainTokenizer {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated key=value overrides, e.g. k_scales=6,epochs=100.
        #[arg(long, default_value = "")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the next-scale policy on frozen tokenizers.
    TrainPolicy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, default_value = "")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Keep no weight average; evaluation uses the live weights.
        #[arg(long)]
        no_ema: bool,
    },
    /// Closed-loop evaluation of a trained policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every predicted chunk and its per-scale decodes as CSV.
        #[arg(long)]
        export_traj: Option<PathBuf>,
        /// argmax or topk:K[:T]; defaults to the checkpoint's sampler.
        #[arg(long)]
        sampler: Option<Sampler>,
        /// Also time 400 executed actions over 5 runs.
        #[arg(long)]
        latency: bool,
    },
    /// Train and evaluate once per scale count and write a CSV table.
    Ablate {
        #[arg(long)]
        task: Task,
        /// Comma-separated scale counts in 1..=8.
        #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..=8), required = true)]
        k_list: Vec<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_table: PathBuf,
        /// Overrides: demos, episodes, tokenizer.<key>, policy.<key>.
        #[arg(long, default_value = "")]
        config: String,
    },
}

type Res<T> = Result<T, carp::Error>;

fn report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn print_metrics(m: &EvalMetrics) {
    println!("success_rate: {:.3}", m.success_rate);
    println!("mean_length: {:.2}", m.mean_length);
    if m.staged.len() > 1 {
        let p: Vec<String> = m.staged.iter().enumerate().map(|(i, p)| format!("p{}={p:.3}", i + 1)).collect();
        println!("staged: {}", p.join(" "));
    }
    if let Some(c) = &m.mode_counts {
        println!("modes: left={} right={} undecided={}", c.left, c.right, c.undecided);
    }
    if let Some(r) = m.refinement_monotone_rate {
        println!("refinement_monotone: {r:.3}");
    }
}

fn single_task(demos: &[carp::envs::Demo]) -> Option<Task> {
    let first = demos.first()?.task.parse().ok()?;
    demos.iter().all(|d| d.task.parse::<Task>().ok() == Some(first)).then_some(first)
}

fn run(cmd: Command) -> Res<()> {
    match cmd {
        Command::GenDemos { task, n, seed, out } => {
            let demos = generate_demos(&TaskConfig::new(task), n as usize, seed)?;
            write_demos(&out, &demos)?;
            let steps: usize = demos.iter().map(|d| d.len()).sum();
            println!("wrote {} successful {task} demos ({steps} steps) to {}", demos.len(), out.display());
        }
        Command::TrainTokenizer { data, config, seed, out } => {
            let demos = read_demos(&data)?;
            let mut cfg = TokenizerTrainConfig::default();
            cfg.apply_overrides(&config)?;
            let (set, report) = train_tokenizer_stage(&demos, &cfg, seed)?;
            Checkpoint::from_tokenizers(&set, single_task(&demos)).save(&out)?;
            report.save(&report_path(&out))?;
            println!("scales: {} (L={})", cfg.tokenizer.num_scales(), cfg.tokenizer.feature_len);
            println!("final_loss: {:.6}", report.epoch_losses.last().copied().unwrap_or(f64::NAN));
            println!("recon_mse_heldout: {:.6e}", report.metric("recon_mse_heldout").unwrap_or(f64::NAN));
            println!("wrote {}", out.display());
        }
        Command::TrainPolicy { data, tokenizer, config, seed, out, no_ema } => {
            let demos = read_demos(&data)?;
            let set = Checkpoint::load(&tokenizer)?.tokenizers()?;
            let mut cfg = PolicyTrainConfig::default();
            cfg.apply_overrides(&config)?;
            cfg.ema = !no_ema;
            let (tp, mut report) = train_policy_stage(&demos, &set, &cfg, seed)?;
            Checkpoint::from_policy(&tp).save(&out)?;
            println!("final_ce: {:.4} (ln V = {:.4})", report.metric("final_ce").unwrap_or(f64::NAN), report.metric("ln_v").unwrap_or(f64::NAN));
            if let Some(task) = single_task(&demos) {
                let m = record_ema_comparison(&tp, &TaskConfig::new(task), &EvalOptions::new(50, seed), &mut report)?;
                println!("eval_success_rate: {:.3} ({} weights)", m.success_rate, if cfg.ema { "ema" } else { "live" });
            }
            report.save(&report_path(&out))?;
            println!("wrote {}", out.display());
        }
        Command::Eval { policy, task, episodes, seed, export_traj, sampler, latency } => {
            let tp = Checkpoint::load(&policy)?.trained_policy()?;
            let obs_dim = tp.policy.config().obs_dim;
            if obs_dim != task.obs_dim() {
                return Err(carp::Error::Config(format!(
                    "policy expects {obs_dim} observation values but task {task} provides {}",
                    task.obs_dim()
                )));
            }
            let cfg = TaskConfig::new(task);
            let weights = tp.eval_policy(tp.ema.is_some())?;
            let sampler = sampler.unwrap_or(weights.config().sampler);
            let mut agent = CarpAgent::new(&weights, &tp.tokenizers, sampler);
            let mut opts = EvalOptions::new(episodes, seed);
            opts.trace = export_traj.is_some();
            let report = evaluate(&mut agent, &cfg, &opts)?;
            println!("task: {task} episodes: {episodes} sampler: {sampler} weights: {}", if tp.ema.is_some() { "ema" } else { "live" });
            print_metrics(&report.metrics);
            if let Some(path) = export_traj {
                write_trajectory(&path, &report.trajectory)?;
                println!("wrote {} trajectory rows to {}", report.trajectory.len(), path.display());
            }
            if latency {
                let lat = measure_latency(&mut agent, &cfg, 400, 5, seed)?;
                println!(
                    "latency: {:.4} ± {:.4} s per {} actions over {} runs; {} predicts per run; passes per predict: {}",
                    lat.mean_s,
                    lat.std_s,
                    lat.n_actions,
                    lat.runs_s.len(),
                    lat.predicts_per_run,
                    lat.passes_per_predict.map_or("n/a".into(), |p| format!("{p}"))
                );
            }
        }
        Command::Ablate { task, k_list, seed, out_table, config } => {
            let mut cfg = AblationConfig::default();
            cfg.apply_overrides(&config)?;
            let ks: Vec<usize> = k_list.iter().map(|&k| k as usize).collect();
            let rows = ablate_scales(&TaskConfig::new(task), &ks, seed, &cfg)?;
            write_atomic(&out_table, &ablation_csv(&rows)?)?;
            for r in &rows {
                println!("K={} L={} recon_mse={:.6e} success_rate={:.3}", r.k, r.feature_len, r.recon_mse, r.success_rate);
            }
            println!("wrote {}", out_table.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

