//! Training loop, evaluation, run records and the step-time benchmark.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::sample_batch;
use crate::error::{Error, Result};
use crate::model::{Gpt, ModelConfig};
use crate::optim::{clip_grad_norm, AdamW, AdamWParams, Schedule};
use crate::tensor::{Scalar, Tensor};

/// Stream offsets keep the data, dropout and eval generators independent
/// while deriving all of them from one seed.
const DATA_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Defaults to 2% of `max_steps`.
    pub warmup_steps: Option<usize>,
    pub max_steps: usize,
    /// Defaults to 10% of `learning_rate`.
    pub min_lr: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub eval_interval: usize,
    pub eval_iters: usize,
    pub seed: u64,
    /// Single-threaded kernels.
    pub deterministic: bool,
    /// Extra numbered checkpoints every this many steps; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.5e-4,
            warmup_steps: None,
            max_steps: 2000,
            min_lr: None,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            micro_batch: 8,
            accum_steps: 1,
            eval_interval: 250,
            eval_iters: 20,
            seed: 1337,
            deterministic: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.max_steps as f64 * 0.02).round() as usize)
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(0.1 * self.learning_rate)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.learning_rate,
            min_lr: self.min_lr(),
            warmup_steps: self.warmup(),
            max_steps: self.max_steps,
        }
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Tokens consumed by one optimizer step for sequences of length `t`.
    pub fn tokens_per_step(&self, t: usize) -> usize {
        self.micro_batch * self.accum_steps * t
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.max_steps == 0 {
            return fail("max_steps must be positive".into());
        }
        if self.warmup() >= self.max_steps {
            return fail(format!(
                "warmup_steps ({}) must be below max_steps ({})",
                self.warmup(),
                self.max_steps
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.min_lr() > 0.0) || self.min_lr() > self.learning_rate {
            return fail("learning rates must be positive with min_lr <= learning_rate".into());
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return fail("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.micro_batch == 0 || self.accum_steps == 0 || self.eval_interval == 0 || self.eval_iters == 0 {
            return fail("micro_batch, accum_steps, eval_interval and eval_iters must be positive".into());
        }
        Ok(())
    }
}

pub fn lr_at(step: usize, tc: &TrainConfig) -> f64 {
    tc.schedule().lr_at(step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of the run record stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    /// Wall time of the step in milliseconds; evals carry the eval time.
    pub ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub entries: Vec<RecordEntry>,
}

impl RunRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.of(Split::Train).map(|e| e.loss).collect()
    }

    pub fn val_losses(&self) -> Vec<(usize, f64)> {
        self.of(Split::Val).map(|e| (e.step, e.loss)).collect()
    }

    pub fn final_val(&self) -> Option<f64> {
        self.of(Split::Val).last().map(|e| e.loss)
    }

    fn of(&self, split: Split) -> impl Iterator<Item = &RecordEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Median and mean training step time in milliseconds.
    pub fn step_ms(&self) -> Option<(f64, f64)> {
        let ms: Vec<f64> = self.of(Split::Train).map(|e| e.ms).collect();
        if ms.is_empty() {
            return None;
        }
        Some((median(&ms), ms.iter().sum::<f64>() / ms.len() as f64))
    }

    /// Step indices strictly increase within each split.
    pub fn is_ordered(&self) -> bool {
        [Split::Train, Split::Val].iter().all(|&s| {
            let steps: Vec<usize> = self.of(s).map(|e| e.step).collect();
            steps.windows(2).all(|w| w[0] < w[1])
        })
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<S: Scalar = f32> {
    pub model: Gpt<S>,
    pub opt: AdamW<S>,
    pub step: usize,
    pub data_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub best_val: Option<f64>,
}

impl<S: Scalar> TrainState<S> {
    pub fn fresh(model_cfg: &ModelConfig, tc: &TrainConfig) -> Result<Self> {
        let model = Gpt::new(model_cfg.clone(), tc.seed)?;
        let opt = AdamW::new(model.params());
        Ok(TrainState {
            model,
            opt,
            step: 0,
            data_rng: stream_rng(tc.seed, DATA_STREAM),
            dropout_rng: stream_rng(tc.seed, DROPOUT_STREAM),
            best_val: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, model_cfg: &ModelConfig) -> Result<Self> {
        if ck.rngs.len() != 2 {
            return Err(Error::Integrity(format!("checkpoint holds {} RNG states, expected 2", ck.rngs.len())));
        }
        Ok(TrainState {
            model: ck.model(model_cfg)?,
            opt: ck.optimizer()?,
            step: ck.step as usize,
            data_rng: ck.rngs[0].restore(),
            dropout_rng: ck.rngs[1].restore(),
            best_val: ck.best_val,
        })
    }

    pub fn checkpoint(&self, config_toml: &str, val_at_save: Option<f64>) -> Checkpoint {
        let mut ck = Checkpoint::capture(
            config_toml.to_string(),
            self.step as u64,
            &self.model,
            &self.opt,
            &[&self.data_rng, &self.dropout_rng],
        );
        ck.best_val = self.best_val;
        ck.val_at_save = val_at_save;
        ck
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The fixed validation batches used by every evaluation of a run.
pub fn eval_batches(
    val: &[u16],
    tc: &TrainConfig,
    block_size: usize,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut rng = stream_rng(tc.seed, EVAL_STREAM);
    (0..tc.eval_iters)
        .map(|_| sample_batch(val, tc.micro_batch, block_size, &mut rng))
        .collect()
}

/// Mean loss over `batches` with dropout off.
pub fn evaluate<S: Scalar>(model: &Gpt<S>, batches: &[(Vec<usize>, Vec<usize>)], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in batches {
        total += model.loss(x, y, batch)?;
    }
    Ok(total / batches.len() as f64)
}

/// Where a trainer writes checkpoints and its record stream.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub dir: PathBuf,
    /// Canonical config text embedded in every checkpoint.
    pub config_toml: String,
}

impl Outputs {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.slck")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.slck")
    }

    pub fn numbered(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.slck"))
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.dir.join("diagnostics.slck")
    }

    pub fn record(&self) -> PathBuf {
        self.dir.join("record.jsonl")
    }
}

pub struct Trainer<'a, S: Scalar = f32> {
    pub model_cfg: ModelConfig,
    pub tc: TrainConfig,
    pub state: TrainState<S>,
    pub record: RunRecord,
    train: &'a [u16],
    eval: Vec<(Vec<usize>, Vec<usize>)>,
    decay: Vec<bool>,
    outputs: Option<Outputs>,
    sink: Option<Box<dyn Write + 'a>>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(model_cfg: ModelConfig, tc: TrainConfig, train: &'a [u16], val: &'a [u16]) -> Result<Self> {
        let state = TrainState::fresh(&model_cfg, &tc)?;
        Self::with_state(model_cfg, tc, train, val, state)
    }

    /// Validates configs and data before any step runs.
    pub fn with_state(
        model_cfg: ModelConfig,
        tc: TrainConfig,
        train: &'a [u16],
        val: &'a [u16],
        state: TrainState<S>,
    ) -> Result<Self> {
        model_cfg.validate()?;
        tc.validate()?;
        let t = model_cfg.block_size;
        for (name, toks) in [("train", train), ("val", val)] {
            if toks.len() <= t + 1 {
                return Err(Error::Data(format!(
                    "{name} split has {} tokens, needs more than {} for block size {t}",
                    toks.len(),
                    t + 1
                )));
            }
            if let Some(&bad) = toks.iter().find(|&&x| usize::from(x) >= model_cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "{name} split contains token {bad} outside vocab {}",
                    model_cfg.vocab_size
                )));
            }
        }
        let eval = eval_batches(val, &tc, t)?;
        let decay = crate::model::param_layout(&model_cfg).iter().map(|s| s.decay).collect();
        let config_hash = checkpoint::hex(&checkpoint::config_hash(&canonical_config(&model_cfg, &tc)));
        Ok(Trainer {
            model_cfg,
            tc,
            state,
            record: RunRecord {
                config_hash,
                entries: Vec::new(),
            },
            train,
            eval,
            decay,
            outputs: None,
            sink: None,
        })
    }

    pub fn with_outputs(mut self, outputs: Outputs) -> Self {
        self.outputs = Some(outputs);
        self
    }

    /// Each record entry is also written to `sink` as one JSON line.
    pub fn with_sink(mut self, sink: Box<dyn Write + 'a>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn eval_set(&self) -> &[(Vec<usize>, Vec<usize>)] {
        &self.eval
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.tc.max_steps
    }

    fn emit(&mut self, entry: RecordEntry) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&entry).expect("record entries serialize");
            writeln!(sink, "{line}").map_err(|e| Error::io("<record sink>", e))?;
        }
        self.record.entries.push(entry);
        Ok(())
    }

    /// Mean loss and summed gradients over the accumulation micro-batches.
    pub fn accumulate(&mut self) -> Result<(f64, Vec<Tensor<S>>)> {
        let t = self.model_cfg.block_size;
        let accum = self.tc.accum_steps;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor<S>>> = None;
        for _ in 0..accum {
            let (x, y) = sample_batch(self.train, self.tc.micro_batch, t, &mut self.state.data_rng)?;
            let lg = self.state.model.loss_and_grads(
                &x,
                &y,
                self.tc.micro_batch,
                Some(&mut self.state.dropout_rng),
                !self.tc.deterministic,
            )?;
            loss += lg.loss / accum as f64;
            let scale = 1.0 / accum as f64;
            let scaled = lg.grads.into_iter().map(|g| {
                if accum == 1 {
                    g
                } else {
                    Tensor::from_fn(g.shape(), |i| S::from_f64(g.data()[i].to_f64() * scale))
                }
            });
            match grads.as_mut() {
                None => grads = Some(scaled.collect()),
                Some(acc) => acc.iter_mut().zip(scaled).for_each(|(a, g)| a.add_assign(&g)),
            }
        }
        Ok((loss, grads.expect("accum_steps >= 1")))
    }

    /// One optimizer step. A non-finite loss or gradient aborts the run and,
    /// when outputs are configured, dumps a diagnostics checkpoint.
    pub fn step(&mut self) -> Result<RecordEntry> {
        let start = Instant::now();
        let (loss, mut grads) = self.accumulate()?;
        let lr = lr_at(self.state.step + 1, &self.tc);
        let outcome = if loss.is_finite() {
            clip_grad_norm(&mut grads, self.tc.grad_clip).and_then(|_| {
                self.state
                    .opt
                    .step(self.state.model.params_mut(), &grads, &self.decay, lr, &self.tc.adamw())
            })
        } else {
            Err(Error::Numeric(format!("loss is {loss} at step {}", self.state.step + 1)))
        };
        if let Err(e) = outcome {
            if let Some(out) = &self.outputs {
                self.state.checkpoint(&out.config_toml, None).save(&out.diagnostics())?;
            }
            return Err(e);
        }
        self.state.step += 1;
        let entry = RecordEntry {
            step: self.state.step,
            split: Split::Train,
            loss,
            ms: start.elapsed().as_secs_f64() * 1e3,
            lr: Some(lr),
        };
        self.emit(entry.clone())?;
        Ok(entry)
    }

    /// Evaluates, records, and checkpoints `last` and (if improved) `best`.
    pub fn eval(&mut self) -> Result<f64> {
        let start = Instant::now();
        let val = evaluate(&self.state.model, &self.eval, self.tc.micro_batch)?;
        let improved = self.state.best_val.is_none_or(|b| val < b);
        if improved {
            self.state.best_val = Some(val);
        }
        self.emit(RecordEntry {
            step: self.state.step,
            split: Split::Val,
            loss: val,
            ms: start.elapsed().as_secs_f64() * 1e3,
            lr: None,
        })?;
        if let Some(out) = &self.outputs {
            let ck = self.state.checkpoint(&out.config_toml, Some(val));
            if improved {
                ck.save(&out.best())?;
            }
            ck.save(&out.last())?;
        }
        Ok(val)
    }

    /// Runs until `stop` (capped at `max_steps`), evaluating every
    /// `eval_interval` steps and at `max_steps`.
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        let stop = stop.min(self.tc.max_steps);
        while self.state.step < stop {
            self.step()?;
            let s = self.state.step;
            if s.is_multiple_of(self.tc.eval_interval) || s == self.tc.max_steps {
                self.eval()?;
            }
            if self.tc.checkpoint_every > 0 && s.is_multiple_of(self.tc.checkpoint_every) {
                if let Some(out) = &self.outputs {
                    self.state.checkpoint(&out.config_toml, None).save(&out.numbered(s))?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<&RunRecord> {
        self.run_until(self.tc.max_steps)?;
        Ok(&self.record)
    }
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

/// TOML rendering of the settings that determine a run's trajectory.
pub fn canonical_config(model: &ModelConfig, train: &TrainConfig) -> String {
    toml::to_string(&HashedConfig { model, train }).expect("configs serialize")
}

/// Convenience: full training run from scratch.
pub fn train<S: Scalar>(model_cfg: &ModelConfig, tc: &TrainConfig, train: &[u16], val: &[u16]) -> Result<(Gpt<S>, RunRecord)> {
    let mut t = Trainer::<S>::new(model_cfg.clone(), tc.clone(), train, val)?;
    t.run()?;
    Ok((t.state.model, t.record))
}

pub const MIN_TIMED_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub baseline_ms: f64,
    pub sla_ms: f64,
    /// `(baseline - sla) / baseline` in percent; positive means SLA is faster.
    pub delta_pct: f64,
    pub baseline_macs: u64,
    pub sla_macs: u64,
    /// Relative difference in counted multiply-accumulates, percent.
    pub mac_delta_pct: f64,
    pub steps: usize,
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub steps: usize,
    pub warmup: usize,
    pub micro_batch: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            steps: 50,
            warmup: 10,
            micro_batch: 2,
            seed: 0,
            parallel: true,
        }
    }
}

/// Median full training-step time (forward, backward, clip, AdamW) of two
/// configurations that differ only in skip settings. Steps alternate
/// between the two models, swapping order every iteration, so that drift
/// in machine load affects both equally.
pub fn bench_compare(baseline: &ModelConfig, sla: &ModelConfig, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.steps < MIN_TIMED_STEPS {
        return Err(Error::InsufficientSamples {
            got: opts.steps,
            need: MIN_TIMED_STEPS,
        });
    }
    if baseline.with_skip(0, 0) != sla.with_skip(0, 0) {
        return Err(Error::Config(
            "benchmarked configs must be identical apart from n_skip_layer and n_skip_head".into(),
        ));
    }
    baseline.validate()?;
    sla.validate()?;
    let t = baseline.block_size;
    let b = opts.micro_batch.max(1);
    let mut models = [
        Gpt::<f32>::new(baseline.clone(), opts.seed)?,
        Gpt::<f32>::new(sla.clone(), opts.seed)?,
    ];
    let decay: Vec<bool> = crate::model::param_layout(baseline).iter().map(|s| s.decay).collect();
    let mut opts_state = [AdamW::new(models[0].params()), AdamW::new(models[1].params())];
    let hp = AdamWParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut times = [Vec::with_capacity(opts.steps), Vec::with_capacity(opts.steps)];
    let mut macs = [0u64; 2];

    for i in 0..opts.warmup + opts.steps {
        let x: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..baseline.vocab_size)).collect();
        let y: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..baseline.vocab_size)).collect();
        let order = if i % 2 == 0 { [0, 1] } else { [1, 0] };
        for k in order {
            let start = Instant::now();
            let mut lg = models[k].loss_and_grads(&x, &y, b, None, opts.parallel)?;
            clip_grad_norm(&mut lg.grads, 1.0)?;
            opts_state[k].step(models[k].params_mut(), &lg.grads, &decay, 1e-4, &hp)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            macs[k] = lg.macs;
            if i >= opts.warmup {
                times[k].push(ms);
            }
        }
    }
    let (base_ms, sla_ms) = (median(&times[0]), median(&times[1]));
    Ok(BenchReport {
        baseline_ms: base_ms,
        sla_ms,
        delta_pct: (base_ms - sla_ms) / base_ms * 100.0,
        baseline_macs: macs[0],
        sla_macs: macs[1],
        mac_delta_pct: (macs[1] as f64 - macs[0] as f64) / macs[0] as f64 * 100.0,
        steps: opts.steps,
        warmup: opts.warmup,
    })
}

/// Writes a run record as JSON lines.
pub fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut out = String::new();
    for e in &record.entries {
        out.push_str(&serde_json::to_string(e).expect("record entries serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
