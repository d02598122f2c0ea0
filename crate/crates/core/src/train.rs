//! Optimization loops: per-task and multi-task LoRA fine-tuning, hypernet
//! reconstruction and SFT training, and base-model pretraining.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::base_lm::{BaseLm, ForwardOpts, SftBatch};
use crate::error::{Error, Result};
use crate::hypernet::{HyperOpts, Hypernet};
use crate::lora::{AdapterLibrary, AdapterSet, LoraLayout, ZScoreStats};
use crate::task_embed::TaskInput;
use crate::taskgen::{Prefix, ToyTask, PAD};
use crate::tensor::Tensor;

pub const LR_TASK_LORA: f64 = 8e-5;
pub const LR_T2L_SFT: f64 = 2.5e-5;
pub const LR_RECON: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub grad_clip_norm: f64,
    pub neftune_alpha: f64,
    pub weight_decay: f64,
    /// Input dropout on the adapter branch during LoRA training.
    pub lora_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            batch_size: 8,
            max_lr: LR_TASK_LORA,
            warmup_fraction: 0.1,
            grad_clip_norm: 1.0,
            neftune_alpha: 0.0,
            weight_decay: 0.0,
            lora_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_steps and batch_size must be positive".into()));
        }
        if !(self.max_lr > 0.0) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if self.neftune_alpha < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("neftune_alpha and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!("lora_dropout {} outside [0, 1)", self.lora_dropout)));
        }
        Ok(())
    }
}

/// Steps for `n_tasks` when `base_steps` was budgeted for `base_tasks`.
pub fn scaled_steps(base_steps: usize, base_tasks: usize, n_tasks: usize) -> usize {
    (base_steps * n_tasks).div_ceil(base_tasks.max(1)).max(1)
}

/// Linear warmup from 0 to `max_lr`, then linear decay to 0 at `max_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.max_steps as f64;
    let warm = cfg.warmup_fraction * total;
    let s = step as f64;
    if s < warm {
        cfg.max_lr * s / warm
    } else {
        cfg.max_lr * ((total - s) / (total - warm)).max(0.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Contract("gradient size does not match parameter".into()));
            }
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_grads(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
        (norm, global_norm(grads))
    } else {
        (norm, norm)
    }
}

/// Uniform noise on input embeddings, `α/√(L·d)` per row where `L` is the
/// row's unpadded length; padded positions get none.
pub fn neftune_noise(batch: &SftBatch, d_model: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    let t = batch.tokens.seq;
    let mut out = vec![0.0; batch.tokens.batch * t * d_model];
    for (b, &len) in batch.lengths.iter().enumerate() {
        let scale = alpha / ((len * d_model) as f64).sqrt();
        for x in &mut out[b * t * d_model..(b * t + len) * d_model] {
            *x = scale * rng.random_range(-1.0..=1.0);
        }
    }
    out
}

/// `batch` draws of `(task, example)`, task first and uniform.
pub fn sample_mixture(tasks: &[&ToyTask], batch: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..batch)
        .map(|_| {
            let t = rng.random_range(0..tasks.len());
            (t, rng.random_range(0..tasks[t].train.len()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// Raw-space mean per-element L1 (reconstruction only).
    pub recon_l1: Option<f64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={}\tlr={:.6e}\tloss={:.8e}\tgrad_norm={:.6e}",
            self.step, self.lr, self.loss, self.grad_norm
        )?;
        if let Some(l1) = self.recon_l1 {
            write!(f, "\trecon_l1={l1:.8e}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn render(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    fn push(&mut self, rec: LogRecord) -> Result<()> {
        if !rec.loss.is_finite() || !rec.grad_norm.is_finite() {
            return Err(Error::Divergence {
                step: rec.step,
                loss: rec.loss,
            });
        }
        self.records.push(rec);
        Ok(())
    }
}

fn grads_of(tape: &Tape<'_>, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| {
            tape.grad_slice(v)
                .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
        })
        .collect()
}

fn adapter_tensors(set: &mut AdapterSet) -> Vec<&mut [f64]> {
    set.pairs
        .iter_mut()
        .flat_map(|p| [p.a.data_mut(), p.b.data_mut()])
        .collect()
}

fn tensor_slices(ts: &mut [Tensor]) -> Vec<&mut [f64]> {
    ts.iter_mut().map(Tensor::data_mut).collect()
}

struct Stepper<'c> {
    cfg: &'c TrainConfig,
    opt: AdamW,
    log: TrainLog,
}

impl<'c> Stepper<'c> {
    fn new(cfg: &'c TrainConfig, sizes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            opt: AdamW::new(sizes, cfg.weight_decay),
            log: TrainLog::default(),
        })
    }

    fn apply(
        &mut self,
        step: usize,
        loss: f64,
        mut grads: Vec<Vec<f64>>,
        params: &mut [&mut [f64]],
        recon_l1: Option<f64>,
    ) -> Result<()> {
        let lr = lr_at(step, self.cfg);
        let (grad_norm, clipped_norm) = clip_grads(&mut grads, self.cfg.grad_clip_norm);
        self.log.push(LogRecord {
            step,
            lr,
            loss,
            grad_norm,
            clipped_norm,
            recon_l1,
        })?;
        self.opt.step(params, &grads, lr)
    }
}

fn sft_opts<'n>(
    cfg: &TrainConfig,
    batch: &SftBatch,
    lm: &BaseLm,
    rng: &mut ChaCha8Rng,
    noise: &'n mut Vec<f64>,
) -> ForwardOpts<'n> {
    let embed_noise = (cfg.neftune_alpha > 0.0).then(|| {
        *noise = neftune_noise(batch, lm.config().d_model, cfg.neftune_alpha, rng);
        noise.as_slice()
    });
    let lora_dropout = (cfg.lora_dropout > 0.0).then(|| (cfg.lora_dropout, rng.random()));
    ForwardOpts {
        embed_noise,
        lora_dropout,
    }
}

fn train_lora_on(lm: &BaseLm, tasks: &[&ToyTask], layout: &LoraLayout, cfg: &TrainConfig) -> Result<(AdapterSet, TrainLog)> {
    if tasks.is_empty() || tasks.iter().any(|t| t.train.is_empty()) {
        return Err(Error::Contract("LoRA training needs non-empty train splits".into()));
    }
    let mut set = AdapterSet::init(layout, cfg.seed)?;
    let sizes: Vec<usize> = set.pairs.iter().flat_map(|p| [p.a.numel(), p.b.numel()]).collect();
    let mut st = Stepper::new(cfg, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut noise = Vec::new();
    for step in 0..cfg.max_steps {
        let pairs: Vec<_> = sample_mixture(tasks, cfg.batch_size, &mut rng)
            .into_iter()
            .map(|(t, e)| tasks[t].encode(&tasks[t].train[e], Prefix::Null))
            .collect();
        let batch = SftBatch::from_pairs(&pairs, PAD)?;
        let opts = sft_opts(cfg, &batch, lm, &mut rng, &mut noise);
        let (loss, grads) = {
            let mut tape = Tape::new();
            let av = lm.bind_adapters(&mut tape, &set, true)?;
            let loss = lm.sft_loss(&mut tape, &batch, Some(&av), opts)?;
            tape.backward(loss)?;
            (tape.value(loss)[0], grads_of(&tape, &av.flat_vars()))
        };
        st.apply(step, loss, grads, &mut adapter_tensors(&mut set), None)?;
    }
    Ok((set, st.log))
}

/// Fine-tunes one adapter on `task` with the base model frozen.
pub fn train_task_lora(
    lm: &BaseLm,
    task: &ToyTask,
    layout: &LoraLayout,
    cfg: &TrainConfig,
) -> Result<(AdapterSet, TrainLog)> {
    let (set, log) = train_lora_on(lm, &[task], layout, cfg)?;
    Ok((set.with_meta(&task.id, task.train_descriptions.first().cloned().unwrap_or_default()), log))
}

/// One adapter on batches mixed uniformly over `tasks`.
pub fn train_multitask_lora(
    lm: &BaseLm,
    tasks: &[&ToyTask],
    layout: &LoraLayout,
    cfg: &TrainConfig,
) -> Result<(AdapterSet, TrainLog)> {
    let (set, log) = train_lora_on(lm, tasks, layout, cfg)?;
    Ok((set.with_meta("multitask", "multi-task adapter"), log))
}

/// Mean per-element `|std·(pred − target)|`, the raw-space error of z-space
/// predictions.
pub fn raw_l1(z_pred: &[f64], z_target: &[f64], stats: &ZScoreStats) -> f64 {
    let p = stats.len();
    let s: f64 = z_pred
        .iter()
        .zip(z_target)
        .enumerate()
        .map(|(i, (a, b))| (stats.std[i % p] * (a - b)).abs())
        .sum();
    s / z_pred.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconReport {
    pub log: TrainLog,
    /// Final mean per-element L1 in z-space, evaluation mode.
    pub z_l1: f64,
    /// Final mean per-element L1 in raw weight space, evaluation mode.
    pub raw_l1: f64,
}

/// Trains `net` to reproduce every adapter of `library` from its task input.
/// The whole library forms each batch. Stats are attached to the result.
pub fn train_t2l_recon(
    mut net: Hypernet,
    library: &AdapterLibrary,
    inputs: &[TaskInput],
    cfg: &TrainConfig,
) -> Result<(Hypernet, ReconReport)> {
    if library.is_empty() || inputs.len() != library.len() {
        return Err(Error::Contract(format!(
            "{} task inputs for {} library adapters",
            inputs.len(),
            library.len()
        )));
    }
    if library.layout() != net.layout() {
        return Err(Error::Contract("library layout differs from the hypernet layout".into()));
    }
    net.set_stats(None)?;
    let stats = library.stats.clone();
    let target: Vec<f64> = library
        .adapters
        .iter()
        .flat_map(|a| stats.normalize(&a.flatten()))
        .collect();
    let sizes: Vec<usize> = net.params().iter().map(|(_, t)| t.numel()).collect();
    let mut st = Stepper::new(cfg, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    for step in 0..cfg.max_steps {
        let opts = HyperOpts {
            dropout_seed: Some(rng.random()),
        };
        let (loss, l1, grads) = {
            let mut tape = Tape::new();
            let th = net.bind(&mut tape, true);
            let out = net.forward_on(&mut tape, &th, inputs, opts)?;
            let loss = tape.l1_loss(out.raw, &target)?;
            tape.backward(loss)?;
            let l1 = raw_l1(tape.value(out.raw), &target, &stats);
            (tape.value(loss)[0], l1, grads_of(&tape, &th))
        };
        st.apply(
            step,
            loss,
            grads,
            &mut tensor_slices(net.params_mut().tensors_mut()),
            Some(l1),
        )?;
    }
    let (z_l1, raw) = {
        let mut tape = Tape::new();
        let th = net.bind(&mut tape, false);
        let out = net.forward_on(&mut tape, &th, inputs, HyperOpts::default())?;
        let pred = tape.value(out.raw);
        let z = pred.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
        (z, raw_l1(pred, &target, &stats))
    };
    net.set_stats(Some(stats))?;
    Ok((
        net,
        ReconReport {
            log: st.log,
            z_l1,
            raw_l1: raw,
        },
    ))
}

/// End-to-end SFT of `net` through the frozen base model. Each datapoint
/// draws one of its task's training descriptions; `embed(task, description)`
/// turns it into a hypernet input.
pub fn train_t2l_sft<E>(
    mut net: Hypernet,
    lm: &BaseLm,
    tasks: &[&ToyTask],
    embed: E,
    cfg: &TrainConfig,
) -> Result<(Hypernet, TrainLog)>
where
    E: Fn(usize, &str) -> Result<TaskInput>,
{
    if tasks.is_empty() {
        return Err(Error::Contract("SFT training needs at least one task".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.train_descriptions.is_empty() || t.train.is_empty()) {
        return Err(Error::Contract(format!("task {} has no descriptions or examples", t.id)));
    }
    if net.layout().fingerprint != lm.fingerprint() {
        return Err(Error::Fingerprint {
            found: net.layout().fingerprint,
            expected: lm.fingerprint(),
        });
    }
    net.set_stats(None)?;
    let sizes: Vec<usize> = net.params().iter().map(|(_, t)| t.numel()).collect();
    let mut st = Stepper::new(cfg, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    for step in 0..cfg.max_steps {
        // (task, description) groups in first-seen order, with their examples.
        let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
        for (t, e) in sample_mixture(tasks, cfg.batch_size, &mut rng) {
            let d = rng.random_range(0..tasks[t].train_descriptions.len());
            match groups.iter_mut().find(|(k, _)| *k == (t, d)) {
                Some((_, ex)) => ex.push(e),
                None => groups.push(((t, d), vec![e])),
            }
        }
        let inputs = groups
            .iter()
            .map(|&((t, d), _)| embed(t, &tasks[t].train_descriptions[d]))
            .collect::<Result<Vec<_>>>()?;
        let batches = groups
            .iter()
            .map(|&((t, _), ref ex)| {
                let pairs: Vec<_> = ex
                    .iter()
                    .map(|&e| tasks[t].encode(&tasks[t].train[e], Prefix::Null))
                    .collect();
                SftBatch::from_pairs(&pairs, PAD)
            })
            .collect::<Result<Vec<_>>>()?;
        let total: usize = batches.iter().map(|b| b.targets.iter().flatten().count()).sum();
        let hopts = HyperOpts {
            dropout_seed: Some(rng.random()),
        };
        let opts: Vec<Vec<f64>> = batches
            .iter()
            .map(|b| {
                let mut n = Vec::new();
                sft_opts(cfg, b, lm, &mut rng, &mut n);
                n
            })
            .collect();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let th = net.bind(&mut tape, true);
            let out = net.forward_on(&mut tape, &th, &inputs, hopts)?;
            let mut acc: Option<Var> = None;
            for (g, batch) in batches.iter().enumerate() {
                let av = net.adapter_vars(&mut tape, out.flat, g)?;
                let fo = ForwardOpts {
                    embed_noise: (cfg.neftune_alpha > 0.0).then_some(opts[g].as_slice()),
                    lora_dropout: None,
                };
                let l = lm.sft_loss(&mut tape, batch, Some(&av), fo)?;
                let w = batch.targets.iter().flatten().count() as f64 / total as f64;
                let l = tape.scale(l, w);
                acc = Some(match acc {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            let loss = acc.expect("at least one group");
            tape.backward(loss)?;
            (tape.value(loss)[0], grads_of(&tape, &th))
        };
        st.apply(step, loss, grads, &mut tensor_slices(net.params_mut().tensors_mut()), None)?;
    }
    Ok((net, st.log))
}

/// Trains every base-model parameter on `tasks` with instruction-code
/// prefixes.
pub fn pretrain_base(mut lm: BaseLm, tasks: &[&ToyTask], cfg: &TrainConfig) -> Result<(BaseLm, TrainLog)> {
    if tasks.is_empty() || tasks.iter().any(|t| t.train.is_empty()) {
        return Err(Error::Contract("pretraining needs non-empty train splits".into()));
    }
    let sizes: Vec<usize> = lm.params().iter().map(|(_, t)| t.numel()).collect();
    let mut st = Stepper::new(cfg, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0004);
    let mut noise = Vec::new();
    for step in 0..cfg.max_steps {
        let pairs: Vec<_> = sample_mixture(tasks, cfg.batch_size, &mut rng)
            .into_iter()
            .map(|(t, e)| tasks[t].encode(&tasks[t].train[e], Prefix::Code))
            .collect();
        let batch = SftBatch::from_pairs(&pairs, PAD)?;
        let opts = sft_opts(cfg, &batch, &lm, &mut rng, &mut noise);
        let (loss, grads) = {
            let mut tape = Tape::new();
            let psi = lm.params().bind(&mut tape, true);
            let logits = lm.forward_with(&mut tape, &psi, &batch.tokens, None, opts)?;
            let loss = tape.cross_entropy(logits, &batch.targets)?;
            tape.backward(loss)?;
            (tape.value(loss)[0], grads_of(&tape, &psi))
        };
        st.apply(step, loss, grads, &mut tensor_slices(lm.params_mut().tensors_mut()), None)?;
    }
    Ok((lm, st.log))
}
