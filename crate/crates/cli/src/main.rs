use std::path::{Path, PathBuf};
use std::process::ExitCode;

use std::fmt::Write as _;
use std::io::Write as _;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use clover_core::archive::{factors_from_archive, read_archive, weights_from_archive, write_archive, Archive};
use clover_core::attention::{random_weights, SynthOptions};
use clover_core::finetune::{
    make_toy_task, train_toy, FactoredModel, OptimizerKind, TaskDims, TaskKind, Teacher, TrainConfig, TrainableSet,
};
use clover_core::transform::{
    count_params, decompose_factors, merge_back, prune_factors, spectrum_report, verify_equivalence, CountMethod,
    ProbeSpec, QKV, QKVO,
};
use clover_core::{DecomposeMode, Dims, MaskSpec, Rng, RopeSpec};

#[derive(Parser)]
#[command(
    name = "clover",
    about = "Absorb-decompose attention weights into orthonormal factors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dims, ranks and a spectrum summary of an archive
    Inspect { archive: PathBuf },
    /// Decompose plain weights into factors
    Transform {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "svd")]
        mode: DecomposeMode,
        /// Recorded in the output; the transform itself is deterministic
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Drop singular directions at or below the thresholds
    Prune {
        input: PathBuf,
        output: PathBuf,
        #[arg(long = "threshold-qk")]
        threshold_qk: f64,
        #[arg(long = "threshold-vo")]
        threshold_vo: f64,
        /// Write the per-head CSV here instead of standard output
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare plain and factored forwards on seeded random inputs
    Verify {
        weights: PathBuf,
        factors: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, value_parser = parse_mask, default_value = "none")]
        mask: MaskSpec,
        #[arg(long)]
        rope: bool,
        #[arg(long = "rope-base", default_value_t = 10_000.0)]
        rope_base: f64,
        #[arg(long, default_value_t = ProbeSpec::default().seed)]
        seed: u64,
    },
    /// Write the per-head singular value spectra as CSV
    Spectrum {
        input: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Closed-form trainable parameter counts for one attention layer
    CountParams {
        #[arg(long = "D")]
        model: usize,
        #[arg(long = "h")]
        heads: usize,
        #[arg(long = "d")]
        head: usize,
        #[arg(long, value_parser = parse_method)]
        method: CountMethod,
        #[arg(long, value_enum, default_value = "qkv")]
        targets: Targets,
    },
    /// Train the mixing matrices of a factors archive on a toy task
    TrainToy {
        factors: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "loss-csv")]
        loss_csv: PathBuf,
        #[arg(long, value_enum, default_value = "adam")]
        optimizer: Optimizer,
        #[arg(long, value_parser = parse_mask, default_value = "causal")]
        mask: MaskSpec,
        #[arg(long)]
        rope: bool,
        #[arg(long = "rope-base", default_value_t = 10_000.0)]
        rope_base: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long = "seq-len", default_value_t = 9)]
        seq_len: usize,
        /// Relative noise separating the regression teacher from the student
        #[arg(long, default_value_t = 0.3)]
        perturb: f64,
        /// Keep the QK factors frozen
        #[arg(long = "freeze-qk")]
        freeze_qk: bool,
    },
    /// Fold factors back into plain weights
    Merge { factors: PathBuf, output: PathBuf },
    /// Generate synthetic attention weights
    Gen {
        output: PathBuf,
        #[arg(long = "D")]
        model: usize,
        #[arg(long = "h")]
        heads: usize,
        #[arg(long = "d")]
        head: usize,
        /// Per-head rank of the constructed projections
        #[arg(long = "heads-rank")]
        heads_rank: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        bias: bool,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Targets {
    Qkv,
    Qkvo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Adam,
    Sgd,
}

fn parse_mode(s: &str) -> Result<DecomposeMode, String> {
    DecomposeMode::parse(s).map_err(|e| e.to_string())
}

fn parse_mask(s: &str) -> Result<MaskSpec, String> {
    MaskSpec::parse(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<CountMethod, String> {
    CountMethod::parse(s).map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).map_err(|e| e.to_string())
}

fn rope_spec(enabled: bool, base: f64) -> RopeSpec {
    if enabled {
        RopeSpec::enabled(base)
    } else {
        RopeSpec::default()
    }
}

fn load(path: &Path) -> Result<Archive> {
    Ok(read_archive(path)?)
}

fn summarize(values: &[f64]) -> String {
    let shown: Vec<String> = values.iter().take(4).map(|v| format!("{v:.4e}")).collect();
    let more = if values.len() > 4 { ", …" } else { "" };
    format!("[{}{more}]", shown.join(", "))
}

fn inspect(path: &Path, out: &mut String) -> Result<()> {
    let a = load(path)?;
    writeln!(out, "kind     {}", a.meta.kind)?;
    writeln!(out, "version  {}", a.meta.version)?;
    if let Some(d) = a.meta.dims {
        writeln!(out, "dims     D={} h={} d={}", d.model, d.heads, d.head)?;
    }
    match a.meta.kind.as_str() {
        "weights" => {
            let w = weights_from_archive(&a)?;
            writeln!(
                out,
                "bias     {}",
                w.has_qk_bias() || w.b_v.is_some() || w.b_o.is_some()
            )?;
            for h in spectrum_report(&w, 0)?.heads {
                let tol = 1e-12 * h.sv_qk.first().copied().unwrap_or(0.0);
                let rank_qk = h.sv_qk.iter().filter(|&&s| s > tol).count();
                let tol = 1e-12 * h.sv_vo.first().copied().unwrap_or(0.0);
                let rank_vo = h.sv_vo.iter().filter(|&&s| s > tol).count();
                writeln!(
                    out,
                    "head {}  rank_qk {rank_qk} sv_qk {}  rank_vo {rank_vo} sv_vo {}",
                    h.head,
                    summarize(&h.sv_qk),
                    summarize(&h.sv_vo)
                )?;
            }
        }
        "factors" | "train-state" => {
            let f = factors_from_archive(&a)?;
            writeln!(out, "mode     {}", f.mode().label())?;
            writeln!(out, "augmented {}", f.qk_augmented())?;
            writeln!(out, "ranks_qk {:?}", f.qk_ranks())?;
            writeln!(out, "ranks_vo {:?}", f.vo_ranks())?;
            for (i, head) in f.vo.iter().enumerate() {
                writeln!(out, "head {i}  s_vo {}", summarize(&head.s))?;
            }
        }
        _ => {}
    }
    writeln!(out, "tensors")?;
    for (name, t) in &a.tensors {
        writeln!(out, "  {name:<14} {:?}", t.shape())?;
    }
    Ok(())
}

fn run(cmd: Command, out: &mut String) -> Result<bool> {
    match cmd {
        Command::Inspect { archive } => inspect(&archive, out)?,
        Command::Transform {
            input,
            output,
            mode,
            seed,
        } => {
            let w = weights_from_archive(&load(&input)?)?;
            let f = decompose_factors(&w, mode)?;
            let mut a = Archive::try_from(&f)?;
            a.meta.extra.insert("seed".into(), seed.to_string());
            write_archive(&output, &a)?;
            writeln!(out, "ranks_qk {:?}", f.qk_ranks())?;
            writeln!(out, "ranks_vo {:?}", f.vo_ranks())?;
        }
        Command::Prune {
            input,
            output,
            threshold_qk,
            threshold_vo,
            csv,
        } => {
            let f = factors_from_archive(&load(&input)?)?;
            let (pruned, stats) = prune_factors(&f, threshold_qk, threshold_vo)?;
            write_archive(&output, &Archive::try_from(&pruned)?)?;
            write!(out, "{}", stats.table())?;
            match csv {
                Some(path) => {
                    let mut buf = Vec::new();
                    stats.write_csv(0, &mut buf)?;
                    clover_core::archive::write_atomic(&path, &buf)?;
                }
                None => {
                    let mut buf = Vec::new();
                    stats.write_csv(0, &mut buf)?;
                    out.push_str(&String::from_utf8(buf)?);
                }
            }
        }
        Command::Verify {
            weights,
            factors,
            tol,
            mask,
            rope,
            rope_base,
            seed,
        } => {
            let w = weights_from_archive(&load(&weights)?)?;
            let f = factors_from_archive(&load(&factors)?)?;
            let probe = ProbeSpec {
                seed,
                ..ProbeSpec::default()
            };
            let dev = verify_equivalence(&w, &f, &mask, &rope_spec(rope, rope_base), &probe)?;
            let ok = dev <= tol;
            writeln!(out, "seed {seed}")?;
            writeln!(out, "max_abs_deviation {dev:.6e}")?;
            writeln!(out, "tolerance {tol:.6e}")?;
            writeln!(out, "{}", if ok { "equivalent" } else { "NOT equivalent" })?;
            return Ok(ok);
        }
        Command::Spectrum { input, csv } => {
            let w = weights_from_archive(&load(&input)?)?;
            let report = spectrum_report(&w, 0)?;
            report.save_csv(&csv)?;
            writeln!(out, "wrote {} heads to {}", report.heads.len(), csv.display())?;
        }
        Command::CountParams {
            model,
            heads,
            head,
            method,
            targets,
        } => {
            let targets: &[_] = match targets {
                Targets::Qkv => &QKV,
                Targets::Qkvo => &QKVO,
            };
            write!(out, "{}", count_params(Dims::new(model, heads, head), method, targets))?;
        }
        Command::TrainToy {
            factors,
            task,
            steps,
            lr,
            seed,
            out: out_path,
            loss_csv,
            optimizer,
            mask,
            rope,
            rope_base,
            batch,
            seq_len,
            perturb,
            freeze_qk,
        } => {
            let f = factors_from_archive(&load(&factors)?)?;
            let trainable = TrainableSet {
                qk: !freeze_qk,
                vo: true,
            };
            let mut model = FactoredModel::new(f, mask, rope_spec(rope, rope_base), trainable)?;
            let dims = TaskDims {
                batch,
                seq_len,
                model: model.factors.dims.model,
            };
            let toy = make_toy_task(task, seed, dims, Some(&model), Teacher::Perturbed(perturb))?;
            if let Some(r) = toy.initial_readout() {
                model = model.with_readout(r);
            }
            let optimizer = match optimizer {
                Optimizer::Adam => OptimizerKind::ADAM,
                Optimizer::Sgd => OptimizerKind::Sgd,
            };
            let state = train_toy(model, &toy, &TrainConfig { steps, lr, optimizer })?;
            write_archive(&out_path, &state.to_archive()?)?;
            state.save_loss_csv(&loss_csv)?;
            writeln!(out, "initial_loss {:.6e}", state.initial_loss())?;
            writeln!(out, "final_loss {:.6e}", state.final_loss())?;
        }
        Command::Merge { factors, output } => {
            let f = factors_from_archive(&load(&factors)?)?;
            let w = merge_back(&f)?;
            write_archive(&output, &Archive::from(&w))?;
        }
        Command::Gen {
            output,
            model,
            heads,
            head,
            heads_rank,
            seed,
            bias,
            noise,
        } => {
            if heads_rank.is_some_and(|r| r > head) {
                bail!("--heads-rank must not exceed --d");
            }
            let opts = SynthOptions {
                head_rank: heads_rank,
                bias,
                noise,
            };
            let w = random_weights(Dims::new(model, heads, head), &opts, &mut Rng::new(seed))?;
            write_archive(&output, &Archive::from(&w))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut out = String::new();
    let result = run(cli.command, &mut out);
    // A closed pipe downstream is not a failure of the operation.
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
