//! Command-line front end. [`run`] parses arguments and writes human
//! readable output to the given writer; the binary maps errors to exit codes.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::check::{model_grad_check, tiny_config, GRADCHECK_TOL};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfigFile;
use crate::data::{self, SplitSpec, TokenFile, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::model::Gpt;
use crate::sweep::{run_sweep, Grid};
use crate::tensor::OpKind;
use crate::train::{self, bench_compare, evaluate, Outputs, TrainState, Trainer};

#[derive(Debug, Parser)]
#[command(name = "skiplayer", version, about = "Train and probe GPT models with skip-layer attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize a text file into train and validation token files.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        /// Output stem: `x.bin` becomes `x.train.bin` and `x.val.bin`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        val_frac: f64,
    },
    /// Train a model, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train every point of a skip-layer and/or skip-head grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "both")]
        grid: String,
    },
    /// Compare analytic and finite-difference gradients on a shrunken model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sabotage one backward rule (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Time training steps of the configured model against its baseline.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Generate text from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "\n")]
        prompt: String,
        /// Defaults to filling the context window.
        #[arg(long)]
        max_new: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validation loss of a checkpoint on its run's fixed eval batches.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return write!(out, "{e}").map_err(|e| Error::io("<stdout>", e));
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    execute(cli.command, out)
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Prepare { input, out: stem, val_frac } => prepare(&input, &stem, val_frac, out),
        Command::Train { config, resume } => train_cmd(&config, resume.as_deref(), out),
        Command::Sweep { config, grid } => sweep_cmd(&config, grid.parse()?, out),
        Command::Gradcheck {
            config,
            eps,
            seed,
            corrupt,
        } => gradcheck_cmd(&config, eps, seed, corrupt.as_deref(), out),
        Command::Bench { config, steps, warmup } => bench_cmd(&config, steps, warmup, out),
        Command::Sample {
            ckpt,
            prompt,
            max_new,
            temperature,
            top_k,
            seed,
        } => sample_cmd(&ckpt, &prompt, max_new, temperature, top_k, seed, out),
        Command::Eval { ckpt } => eval_cmd(&ckpt, out),
    }
}

/// `x.bin` -> (`x.train.bin`, `x.val.bin`).
pub fn split_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let ext = stem.extension().map(|e| e.to_string_lossy().into_owned());
    let base = stem.with_extension("");
    let with = |split: &str| {
        let mut name = base.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".{split}"));
        if let Some(e) = &ext {
            name.push(format!(".{e}"));
        }
        base.with_file_name(name)
    };
    (with("train"), with("val"))
}

fn prepare(input: &Path, stem: &Path, val_frac: f64, out: &mut dyn Write) -> Result<()> {
    let split = SplitSpec::from_val_frac(val_frac)?;
    let text = fs::read(input).map_err(|e| Error::io(input, e))?;
    if text.is_empty() {
        return Err(Error::Data(format!("{} is empty", input.display())));
    }
    let tokens = data::tokenize_bytes(&text);
    let (train, val) = split.split(&tokens)?;
    let (train_path, val_path) = split_paths(stem);
    let train_file = TokenFile::new(train.to_vec(), BYTE_VOCAB)?;
    let val_file = TokenFile::new(val.to_vec(), BYTE_VOCAB)?;
    if let Some(dir) = train_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    train_file.write(&train_path)?;
    val_file.write(&val_path)?;
    say(out, format!("vocab {BYTE_VOCAB}"))?;
    say(out, format!("train {} tokens -> {}", train.len(), train_path.display()))?;
    say(out, format!("val {} tokens -> {}", val.len(), val_path.display()))
}

fn load_splits(cfg: &RunConfigFile) -> Result<(Vec<u16>, Vec<u16>)> {
    let d = cfg.data()?;
    let train = TokenFile::read(&d.train)?;
    let val = TokenFile::read(&d.val)?;
    for (path, f) in [(&d.train, &train), (&d.val, &val)] {
        if f.vocab_size as usize > cfg.model.vocab_size {
            return Err(Error::Data(format!(
                "{} has vocab {} but the model has {}",
                path.display(),
                f.vocab_size,
                cfg.model.vocab_size
            )));
        }
    }
    Ok((train.tokens, val.tokens))
}

fn train_cmd(config: &Path, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let (train_toks, val_toks) = load_splits(&cfg)?;
    let config_toml = cfg.to_toml();
    let state = match resume {
        None => TrainState::<f32>::fresh(&cfg.model, &cfg.train)?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.hash() != checkpoint::config_hash(&config_toml) {
                return Err(Error::Config(format!(
                    "{} was written under a different configuration than {}",
                    path.display(),
                    config.display()
                )));
            }
            if ck.step as usize >= cfg.train.max_steps {
                return say(
                    out,
                    format!(
                        "{} already finished at step {} of {}; nothing to do",
                        path.display(),
                        ck.step,
                        cfg.train.max_steps
                    ),
                );
            }
            TrainState::from_checkpoint(&ck, &cfg.model)?
        }
    };
    let mut trainer = Trainer::with_state(cfg.model.clone(), cfg.train.clone(), &train_toks, &val_toks, state)?;

    let d = cfg.data()?;
    fs::create_dir_all(&d.out_dir).map_err(|e| Error::io(&d.out_dir, e))?;
    let outputs = Outputs {
        dir: d.out_dir.clone(),
        config_toml,
    };
    let record_path = outputs.record();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&record_path)
        .map_err(|e| Error::io(&record_path, e))?;
    trainer = trainer.with_outputs(outputs).with_sink(Box::new(BufWriter::new(file)));

    say(
        out,
        format!(
            "training {} parameters from step {} to {} (config {})",
            trainer.state.model.param_count(),
            trainer.state.step,
            cfg.train.max_steps,
            &trainer.record.config_hash[..12]
        ),
    )?;
    while !trainer.is_finished() {
        let next = (trainer.state.step / cfg.train.eval_interval + 1) * cfg.train.eval_interval;
        trainer.run_until(next)?;
        let last_train = trainer.record.train_losses().last().copied().unwrap_or(f64::NAN);
        let val = trainer.record.final_val().unwrap_or(f64::NAN);
        say(
            out,
            format!("step {:>6}  train {last_train:.4}  val {val:.4}", trainer.state.step),
        )?;
    }
    if let Some((med, mean)) = trainer.record.step_ms() {
        say(out, format!("step time median {med:.1} ms, mean {mean:.1} ms"))?;
    }
    say(
        out,
        format!(
            "best val {:.4}; checkpoints in {}",
            trainer.state.best_val.unwrap_or(f64::NAN),
            d.out_dir.display()
        ),
    )
}

fn sweep_cmd(config: &Path, grid: Grid, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let (train_toks, val_toks) = load_splits(&cfg)?;
    let d = cfg.data()?;
    fs::create_dir_all(&d.out_dir).map_err(|e| Error::io(&d.out_dir, e))?;
    let mut log = Vec::new();
    let table = run_sweep(&cfg.model, grid, |m| {
        let (_, record) = train::train::<f32>(m, &cfg.train, &train_toks, &val_toks)?;
        let val = record
            .final_val()
            .ok_or_else(|| Error::State("run finished without an evaluation".into()))?;
        log.push(format!(
            "n_skip_layer {} n_skip_head {}: val {val:.4}",
            m.n_skip_layer, m.n_skip_head
        ));
        Ok(val)
    });
    for line in log {
        say(out, line)?;
    }
    let text = table.to_text();
    let name = match grid {
        Grid::SkipLayer => "skiplayer",
        Grid::SkipHead => "skiphead",
        Grid::Both => "both",
    };
    for (ext, body) in [("txt", &text), ("csv", &table.to_csv())] {
        let p = d.out_dir.join(format!("sweep_{name}.{ext}"));
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    say(out, text.trim_end())
}

fn gradcheck_cmd(config: &Path, eps: f64, seed: u64, corrupt: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let corrupt = corrupt
        .map(|name| OpKind::parse(name).ok_or_else(|| Error::Config(format!("unknown op {name:?}"))))
        .transpose()?;
    let tiny = tiny_config(&cfg.model);
    say(
        out,
        format!(
            "gradcheck L={} h={} C={} T={} V={} n_l={} n_h={} eps={eps:e}",
            tiny.n_layer,
            tiny.n_head,
            tiny.n_embd,
            tiny.block_size,
            tiny.vocab_size,
            tiny.n_skip_layer,
            tiny.n_skip_head
        ),
    )?;
    let errors = model_grad_check(&tiny, seed, eps, corrupt)?;
    let mut worst = 0.0f64;
    for (name, err) in &errors {
        let mark = if *err <= GRADCHECK_TOL { "ok" } else { "FAIL" };
        say(out, format!("{name:<28} {err:.3e} {mark}"))?;
        worst = worst.max(*err);
    }
    say(out, format!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:e})"))?;
    if !(worst <= GRADCHECK_TOL) {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} exceeds {GRADCHECK_TOL:e}"
        )));
    }
    Ok(())
}

fn bench_cmd(config: &Path, steps: Option<usize>, warmup: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let mut opts = cfg.bench_options();
    opts.steps = steps.unwrap_or(opts.steps);
    opts.warmup = warmup.unwrap_or(opts.warmup);
    let m = &cfg.model;
    let r = bench_compare(&m.baseline(), m, &opts)?;
    say(
        out,
        format!(
            "config L={} h={} C={} T={} B={}  skip ({}, {})  {} timed steps after {} warmup",
            m.n_layer, m.n_head, m.n_embd, m.block_size, opts.micro_batch, m.n_skip_layer, m.n_skip_head, r.steps, r.warmup
        ),
    )?;
    say(out, format!("baseline median {:.2} ms/step", r.baseline_ms))?;
    say(out, format!("sla      median {:.2} ms/step", r.sla_ms))?;
    say(
        out,
        format!(
            "speed delta {:+.2}%  ((baseline - sla) / baseline; negative means sla is slower)",
            r.delta_pct
        ),
    )?;
    say(
        out,
        format!(
            "multiply-accumulates per forward: baseline {} sla {} (difference {:+.4}%)",
            r.baseline_macs, r.sla_macs, r.mac_delta_pct
        ),
    )
}

fn load_ckpt(path: &Path) -> Result<(Checkpoint, RunConfigFile)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfigFile::parse(&ck.config_toml)?;
    Ok((ck, cfg))
}

fn sample_cmd(
    ckpt: &Path,
    prompt: &str,
    max_new: Option<usize>,
    temperature: f64,
    top_k: Option<usize>,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    let (ck, cfg) = load_ckpt(ckpt)?;
    let model: Gpt<f32> = ck.model(&cfg.model)?;
    let prompt_ids: Vec<usize> = data::tokenize_bytes(prompt.as_bytes()).iter().map(|&t| t as usize).collect();
    let max_new = max_new.unwrap_or(cfg.model.block_size.saturating_sub(prompt_ids.len()));
    let ids = model.generate(&prompt_ids, max_new, temperature, top_k, seed)?;
    let toks: Vec<u16> = ids.iter().map(|&t| t as u16).collect();
    let bytes = data::detokenize(&toks)?;
    say(out, String::from_utf8_lossy(&bytes))
}

fn eval_cmd(ckpt: &Path, out: &mut dyn Write) -> Result<()> {
    let (ck, cfg) = load_ckpt(ckpt)?;
    let model: Gpt<f32> = ck.model(&cfg.model)?;
    let d = cfg.data()?;
    let val = TokenFile::read(&d.val)?;
    let batches = train::eval_batches(&val.tokens, &cfg.train, cfg.model.block_size)?;
    let loss = evaluate(&model, &batches, cfg.train.micro_batch)?;
    say(out, format!("step {} val loss {loss:.6}", ck.step))?;
    if let Some(saved) = ck.val_at_save {
        say(out, format!("recorded at save {saved:.6} (difference {:.2e})", (loss - saved).abs()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_paths_insert_split_name() {
        assert_eq!(
            split_paths(Path::new("data/corpus.bin")),
            (PathBuf::from("data/corpus.train.bin"), PathBuf::from("data/corpus.val.bin"))
        );
        assert_eq!(
            split_paths(Path::new("tok")),
            (PathBuf::from("tok.train"), PathBuf::from("tok.val"))
        );
    }

    #[test]
    fn parse_errors_are_config_errors() {
        let mut sink = Vec::new();
        let err = run(["skiplayer", "sweep", "--config", "x.toml", "--grid", "diagonal"], &mut sink).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = run(["skiplayer", "frobnicate"], &mut sink).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
