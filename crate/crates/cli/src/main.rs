use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gtr::checkpoint::load_model;
use gtr::config::ModelConfig;
use gtr::cost::{count_params, estimate_flops, visual_tokens};
use gtr::data::{eval_split, gen_synthetic, train_split, write_dataset, DataSpec};
use gtr::decoder::{attention_csv, FusionMode};
use gtr::eval::evaluate;
use gtr::matching::rank;
use gtr::train::{trace_path, train};
use gtr::verify::model_gradient_check;
use gtr::video::{read_gtrv, sample_frames};
use gtr::{GtrError, Result};
use log::info;

#[derive(Parser)]
#[command(
    name = "gtr",
    version,
    about = "Temporal grounding of text queries in video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic training split and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split and write a JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Rank predicted segments for one clip and query.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        query: String,
    },
    /// Check analytic gradients of a toy model against finite differences.
    Gradcheck {
        #[arg(long)]
        fusion: FusionMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Forward FLOPs of the configured model.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        query_len: usize,
    },
    /// Trainable parameter count of the configured model.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// List the visual tokens a clip is cut into.
    TokenizeDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        video: PathBuf,
    },
    /// Write decoder cross-attention weights for one held-out sample as CSV.
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic clips and a manifest.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Clip size and class count come from this config; tiny otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    ModelConfig::load(path)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, steps, out } => {
            let cfg = load_config(&config)?;
            let t = train(&cfg, train_split(&cfg)?, steps, &out)?;
            let last = t.trace.last().map_or(f64::NAN, |(_, l)| *l);
            println!("trained {steps} steps, final loss {last:.6}");
            println!("checkpoint {}", out.display());
            println!("loss trace {}", trace_path(&out).display());
        }
        Command::Eval {
            config,
            ckpt,
            report,
        } => {
            let cfg = load_config(&config)?;
            let (model, step) = load_model::<f32>(&ckpt)?;
            info!("evaluating checkpoint at step {step}");
            let r = evaluate(&model, &eval_split(&cfg)?)?;
            fs::write(&report, r.to_json() + "\n")?;
            println!("{}", r.to_json());
        }
        Command::Infer { ckpt, video, query } => {
            let (model, _) = load_model::<f32>(&ckpt)?;
            let clip = read_gtrv(&video)?;
            let preds = model.predict(&clip, &model.encode_query(&query))?;
            println!("rank,start,end,confidence");
            for (r, i) in rank(&preds.confidence).into_iter().enumerate() {
                let s = preds.segment(i);
                println!(
                    "{},{:.4},{:.4},{:.4}",
                    r + 1,
                    s.start,
                    s.end,
                    preds.confidence[i]
                );
            }
        }
        Command::Gradcheck { fusion, seed } => {
            let r = model_gradient_check(fusion, seed)?;
            println!("parameter,max_rel,max_abs_small,one_sided,kinked");
            for p in &r.per_param {
                println!(
                    "{},{:.3e},{:.3e},{},{}",
                    p.name, p.error.max_rel, p.error.max_abs_small, p.one_sided, p.kinked
                );
            }
            println!(
                "{fusion}: loss {:.6}, max rel {:.3e}, max abs {:.3e}, {} one-sided, {} kinked",
                r.loss, r.overall.max_rel, r.overall.max_abs_small, r.one_sided, r.kinked
            );
            if !r.passes(1e-4, 1e-6) {
                return Err(GtrError::Contract(format!(
                    "{fusion} gradients exceed tolerance"
                )));
            }
        }
        Command::Flops { config, query_len } => {
            let cfg = load_config(&config)?;
            let f = estimate_flops(&cfg, query_len)?;
            println!(
                "{f} FLOPs ({:.3} GFLOPs) for {} visual tokens",
                f as f64 / 1e9,
                visual_tokens(&cfg)?
            );
        }
        Command::Params { config } => {
            let cfg = load_config(&config)?;
            let n = count_params(&cfg)?;
            println!("{n} parameters ({:.2} M)", n as f64 / 1e6);
        }
        Command::TokenizeDump { config, video } => {
            let cfg = load_config(&config)?;
            let clip = sample_frames(&read_gtrv(&video)?, cfg.sample_rate)?;
            let cubic = cfg.cubic()?;
            let grid = cubic.grid(clip.dims())?;
            let [kh, kw, kt] = cubic.kernel;
            let [sh, sw, st] = cubic.stride;
            println!(
                "# {} tokens, grid O_h={} O_w={} O_t={}, kernel ({kh},{kw},{kt}), stride ({sh},{sw},{st})",
                grid.tokens(),
                grid.o_h,
                grid.o_w,
                grid.o_t
            );
            println!("token,frame_start,frame_end,y,x");
            for i in 0..grid.tokens() {
                let (h, w, t) = grid.coord(i);
                println!("{i},{},{},{},{}", t * st, t * st + kt, h * sh, w * sw);
            }
        }
        Command::AttnDump {
            ckpt,
            sample,
            layer,
            out,
        } => {
            let (model, _) = load_model::<f32>(&ckpt)?;
            let samples = eval_split(&model.cfg)?;
            let s = samples.get(sample).ok_or_else(|| {
                GtrError::Contract(format!(
                    "sample {sample} out of range for {} samples",
                    samples.len()
                ))
            })?;
            let blocks = model.attention(&s.clip, &s.query_ids, layer)?;
            fs::write(&out, attention_csv(&blocks))?;
            println!(
                "wrote {} ({:?}, gt {:.3}..{:.3})",
                out.display(),
                s.query,
                s.gt.start,
                s.gt.end
            );
        }
        Command::GenData {
            count,
            seed,
            out_dir,
            config,
        } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ModelConfig::tiny(),
            };
            let samples = gen_synthetic(count, &DataSpec::from_config(&cfg), seed)?;
            write_dataset(&out_dir, &samples)?;
            println!("wrote {count} clips to {}", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
