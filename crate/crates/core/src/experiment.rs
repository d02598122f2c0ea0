//! End-to-end experiment drivers on the toy suite: base pretraining, oracle
//! libraries, reconstruction sweeps, zero-shot transfer, description
//! alignment and the rotated-library similarity study.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::base_lm::{BaseLm, BaseLmConfig, TargetModule};
use crate::error::{Error, Result};
use crate::eval::{
    compression_ratio, evaluate, relative_performance, Benchmark, CompressionPoint, EvalReport,
};
use crate::hypernet::{Arch, Hypernet, HypernetConfig};
use crate::lora::{AdapterLibrary, AdapterSet, LoraLayout, LoraPair};
use crate::task_embed::{Embedder, TaskInput, DEFAULT_HASH_SEED};
use crate::taskgen::{TaskKind, TaskParams, TaskSuite, ToyTask};
use crate::tensor::Tensor;
use crate::train::{
    pretrain_base, scaled_steps, train_multitask_lora, train_t2l_recon, train_t2l_sft, train_task_lora,
    ReconReport, TrainConfig, TrainLog, LR_RECON,
};

/// Hypernet widths, shared by every arch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperShape {
    pub d_task_enc: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub dropout: f64,
}

impl Default for HyperShape {
    fn default() -> Self {
        Self {
            d_task_enc: 64,
            d_embed: 32,
            d_hidden: 128,
            d_out: 128,
            dropout: 0.05,
        }
    }
}

impl HyperShape {
    pub fn config(&self, arch: Arch, d_task: usize, layout: LoraLayout) -> HypernetConfig {
        HypernetConfig {
            d_task_enc: self.d_task_enc,
            d_embed: self.d_embed,
            d_hidden: self.d_hidden,
            d_out: self.d_out,
            dropout: self.dropout,
            ..HypernetConfig::new(arch, d_task, layout)
        }
    }
}

/// Base-model widths; the vocabulary comes from the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub target_modules: Vec<TargetModule>,
}

impl Default for BaseShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_seq: 12,
            target_modules: vec![TargetModule::QProj, TargetModule::VProj],
        }
    }
}

/// Everything a desk-scale run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    pub seed: u64,
    pub tasks: TaskParams,
    /// Task kinds kept out of adapter and hypernet training.
    pub held_out: Vec<String>,
    pub base: BaseShape,
    pub rank: usize,
    pub d_task: usize,
    pub hyper: HyperShape,
    pub pretrain: TrainConfig,
    pub lora: TrainConfig,
    pub multitask: TrainConfig,
    pub recon: TrainConfig,
    pub sft: TrainConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: TaskParams {
                n_symbols: 8,
                ..TaskParams::default()
            },
            held_out: vec![
                "seq:sort:predecessor".into(),
                "seq:reverse:case_map".into(),
                "seq:rotate:successor".into(),
            ],
            base: BaseShape::default(),
            rank: 4,
            d_task: 64,
            hyper: HyperShape::default(),
            pretrain: TrainConfig {
                max_steps: 2000,
                batch_size: 32,
                max_lr: 3e-3,
                warmup_fraction: 0.05,
                ..TrainConfig::default()
            },
            lora: TrainConfig {
                max_steps: 300,
                batch_size: 16,
                max_lr: 1e-2,
                ..TrainConfig::default()
            },
            multitask: TrainConfig {
                max_steps: 600,
                batch_size: 16,
                max_lr: 1e-2,
                ..TrainConfig::default()
            },
            recon: TrainConfig {
                max_steps: 2000,
                batch_size: 1,
                max_lr: LR_RECON,
                ..TrainConfig::default()
            },
            sft: TrainConfig {
                max_steps: 3000,
                batch_size: 16,
                max_lr: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl DeskConfig {
    pub fn held_out_kinds(&self) -> Result<Vec<TaskKind>> {
        self.held_out.iter().map(|s| TaskKind::parse(s)).collect()
    }

    pub fn suite(&self) -> Result<TaskSuite> {
        TaskSuite::standard(&self.held_out_kinds()?, &self.tasks, self.seed)
    }

    pub fn base_config(&self, vocab_size: usize) -> BaseLmConfig {
        BaseLmConfig {
            vocab_size,
            d_model: self.base.d_model,
            n_layers: self.base.n_layers,
            n_heads: self.base.n_heads,
            d_ff: self.base.d_ff,
            max_seq: self.base.max_seq,
            target_modules: self.base.target_modules.clone(),
        }
    }

    /// A copy with every training seed offset by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        for t in [&mut c.pretrain, &mut c.lora, &mut c.multitask, &mut c.recon, &mut c.sft] {
            t.seed = t.seed.wrapping_add(seed.wrapping_mul(7919));
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.held_out_kinds()?;
        self.base_config(1).validate()?;
        for t in [&self.pretrain, &self.lora, &self.multitask, &self.recon, &self.sft] {
            t.validate()?;
        }
        if self.rank == 0 || self.d_task == 0 {
            return Err(Error::Config("rank and d_task must be positive".into()));
        }
        Ok(())
    }

    pub fn hashed_embedder(&self) -> Embedder {
        Embedder::Hashed {
            d_task: self.d_task,
            seed: DEFAULT_HASH_SEED,
        }
    }
}

/// Pretrains a fresh base model on every task of the suite, held-out ones
/// included, with instruction codes in the prompt.
pub fn pretrain(cfg: &DeskConfig, suite: &TaskSuite) -> Result<(BaseLm, TrainLog)> {
    let lm = BaseLm::init(cfg.base_config(suite.vocab.size()), cfg.seed)?;
    let tasks: Vec<&ToyTask> = suite.all_tasks().collect();
    pretrain_base(lm, &tasks, &cfg.pretrain)
}

/// One oracle adapter per task, seeded by position.
pub fn train_oracles(lm: &BaseLm, tasks: &[&ToyTask], cfg: &DeskConfig) -> Result<AdapterLibrary> {
    let layout = lm.lora_layout(cfg.rank)?;
    let adapters = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let c = TrainConfig {
                seed: cfg.lora.seed.wrapping_add(i as u64),
                ..cfg.lora.clone()
            };
            Ok(train_task_lora(lm, t, &layout, &c)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterLibrary::new(adapters)
}

/// Per-task accuracies of the bare base model and of each oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct Baselines {
    pub base: Vec<f64>,
    pub oracle: Vec<f64>,
}

pub fn baselines(lm: &BaseLm, tasks: &[&ToyTask], library: &AdapterLibrary) -> Result<Baselines> {
    let mut b = Baselines {
        base: Vec::new(),
        oracle: Vec::new(),
    };
    for t in tasks {
        let oracle = library
            .find(&t.id)
            .ok_or_else(|| Error::UnknownId(format!("no oracle for {}", t.id)))?;
        b.base.push(evaluate(lm, None, t)?);
        b.oracle.push(evaluate(lm, Some(oracle), t)?);
    }
    Ok(b)
}

#[derive(Clone, Debug)]
pub struct ReconRun {
    pub net: Hypernet,
    pub report: ReconReport,
    pub accuracies: Vec<f64>,
    pub point: CompressionPoint,
}

/// Reconstruction-trains `arch` on `library` with one-hot task inputs and
/// scores the generated adapters against the baselines.
pub fn recon_one_hot(
    lm: &BaseLm,
    tasks: &[&ToyTask],
    library: &AdapterLibrary,
    base: &Baselines,
    arch: Arch,
    cfg: &DeskConfig,
) -> Result<ReconRun> {
    let n = tasks.len();
    let embedder = Embedder::OneHot { n_tasks: n };
    let inputs = (0..n).map(|i| embedder.embed(i, "")).collect::<Result<Vec<_>>>()?;
    let hc = cfg.hyper.config(arch, n, library.layout().clone());
    let net = Hypernet::build(hc, cfg.recon.seed)?;
    let (net, report) = train_t2l_recon(net, library, &inputs, &cfg.recon)?;
    let generated = net.generate(&inputs)?;
    let mut accuracies = Vec::with_capacity(n);
    let mut rel = 0.0;
    for (i, (t, a)) in tasks.iter().zip(&generated).enumerate() {
        let acc = evaluate(lm, Some(a), t)?;
        rel += relative_performance(acc, base.base[i], base.oracle[i]).value;
        accuracies.push(acc);
    }
    let point = CompressionPoint {
        n_tasks: n,
        compression_ratio: compression_ratio(library, &net),
        raw_l1: report.raw_l1,
        rel_perf: rel / n as f64,
    };
    Ok(ReconRun {
        net,
        report,
        accuracies,
        point,
    })
}

/// Held-out evaluation: base model, multi-task adapter and SFT-trained
/// hypernet (arch M, hashed descriptions). Each hypernet accuracy averages
/// over the task's eval-split descriptions.
pub fn zero_shot(lm: &BaseLm, suite: &TaskSuite, cfg: &DeskConfig) -> Result<(EvalReport, Hypernet)> {
    let start = Instant::now();
    let train: Vec<&ToyTask> = suite.train.iter().collect();
    let layout = lm.lora_layout(cfg.rank)?;
    let (multi, _) = train_multitask_lora(lm, &train, &layout, &cfg.multitask)?;
    let embedder = cfg.hashed_embedder();
    let net = Hypernet::build(cfg.hyper.config(Arch::M, cfg.d_task, layout), cfg.sft.seed)?;
    let (net, _) = train_t2l_sft(net, lm, &train, |i, d| embedder.embed(i, d), &cfg.sft)?;
    let mut rep = EvalReport::default();
    for t in &suite.held_out {
        rep.push(&t.id, "base", cfg.seed, evaluate(lm, None, t)?);
        rep.push(&t.id, "multitask", cfg.seed, evaluate(lm, Some(&multi), t)?);
        rep.push(&t.id, "t2l_m", cfg.seed, description_accuracy(lm, &net, &embedder, t, &t.eval_descriptions)?);
    }
    rep.runtime_s = start.elapsed().as_secs_f64();
    Ok((rep, net))
}

/// Mean accuracy over adapters generated from each of `descriptions`.
pub fn description_accuracy(
    lm: &BaseLm,
    net: &Hypernet,
    embedder: &Embedder,
    task: &ToyTask,
    descriptions: &[String],
) -> Result<f64> {
    if descriptions.is_empty() {
        return Err(Error::Contract(format!("no descriptions for {}", task.id)));
    }
    let inputs = descriptions
        .iter()
        .map(|d| embedder.embed(0, d))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = 0.0;
    for a in net.generate(&inputs)? {
        acc += evaluate(lm, Some(&a), task)?;
    }
    Ok(acc / descriptions.len() as f64)
}

/// Reconstruction training where each of the first `n_desc` training
/// descriptions of a task maps to that task's oracle.
pub fn recon_with_descriptions(
    tasks: &[&ToyTask],
    library: &AdapterLibrary,
    arch: Arch,
    n_desc: usize,
    cfg: &DeskConfig,
) -> Result<(Hypernet, ReconReport)> {
    let embedder = cfg.hashed_embedder();
    let mut adapters = Vec::new();
    let mut inputs = Vec::new();
    for t in tasks {
        let oracle = library
            .find(&t.id)
            .ok_or_else(|| Error::UnknownId(format!("no oracle for {}", t.id)))?;
        for d in t.train_descriptions.iter().take(n_desc) {
            adapters.push(oracle.clone());
            inputs.push(embedder.embed(0, d)?);
        }
    }
    let expanded = AdapterLibrary::new(adapters)?;
    let net = Hypernet::build(cfg.hyper.config(arch, cfg.d_task, library.layout().clone()), cfg.recon.seed)?;
    train_t2l_recon(net, &expanded, &inputs, &cfg.recon)
}

/// Accuracy on each training task under its own eval-split descriptions
/// (`aligned`) and under training descriptions of other tasks
/// (`unaligned`).
pub fn alignment(
    lm: &BaseLm,
    net: &Hypernet,
    suite: &TaskSuite,
    tasks: &[&ToyTask],
    cfg: &DeskConfig,
) -> Result<EvalReport> {
    let embedder = cfg.hashed_embedder();
    let mut rep = EvalReport::default();
    for t in tasks {
        let aligned = description_accuracy(lm, net, &embedder, t, &t.eval_descriptions)?;
        let random = suite.unaligned_descriptions(&t.id, t.eval_descriptions.len(), cfg.seed)?;
        let unaligned = description_accuracy(lm, net, &embedder, t, &random)?;
        rep.push(&t.id, "aligned", cfg.seed, aligned);
        rep.push(&t.id, "unaligned", cfg.seed, unaligned);
    }
    Ok(rep)
}

/// Haar-ish random orthogonal matrix by Gram–Schmidt.
pub fn random_orthogonal(r: usize, rng: &mut impl Rng) -> Tensor {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(r);
    while q.len() < r {
        let mut v: Vec<f64> = (0..r).map(|_| StandardNormal.sample(rng)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::new([r, r], q.concat()).expect("square")
}

fn rotate(set: &AdapterSet, rng: &mut impl Rng) -> Result<AdapterSet> {
    let pairs = set
        .pairs
        .iter()
        .map(|p| {
            let q = random_orthogonal(p.rank(), rng);
            Ok(LoraPair {
                a: q.matmul(&p.a)?,
                b: q.matmul(&p.b)?,
                scaling: p.scaling,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterSet::new(set.layout.clone(), pairs)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A library whose members are rank-space rotations of a few shared
/// `ΔW`s. Embeddings scatter around one random center per shared `ΔW`, so
/// embedding similarity tracks `ΔW` similarity while `A`/`B` similarity
/// is scrambled. `embed_noise` is the expected noise norm relative to the
/// unit center. One extra benchmark member per cluster is returned.
pub fn rotated_library(
    layout: &LoraLayout,
    clusters: usize,
    per_cluster: usize,
    d_embed: usize,
    embed_noise: f64,
    seed: u64,
) -> Result<(AdapterLibrary, Vec<(String, Vec<f64>)>, Vec<Benchmark>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    let mut adapters = Vec::new();
    let mut embeds = Vec::new();
    let mut benches = Vec::new();
    for c in 0..clusters {
        let center = unit(normal(&mut rng, d_embed));
        let proto = AdapterSet::from_flat(layout, &normal(&mut rng, layout.param_count()))?;
        for k in 0..=per_cluster {
            let member = rotate(&proto, &mut rng)?;
            let noise = normal(&mut rng, d_embed);
            let sd = embed_noise / (d_embed as f64).sqrt();
            let e: Vec<f64> = center.iter().zip(noise).map(|(a, b)| a + sd * b).collect();
            let id = format!("c{c}_m{k}");
            if k == per_cluster {
                benches.push(Benchmark {
                    id,
                    adapter: member,
                    embedding: e,
                    rel_perf: None,
                });
            } else {
                embeds.push((id.clone(), e));
                adapters.push(member.with_meta(id, format!("cluster {c}")));
            }
        }
    }
    Ok((AdapterLibrary::new(adapters)?, embeds, benches))
}

/// Steps for reconstruction on `n_tasks` scaled from a budget set for
/// `base_tasks`.
pub fn recon_steps(cfg: &DeskConfig, base_tasks: usize, n_tasks: usize) -> usize {
    scaled_steps(cfg.recon.max_steps, base_tasks, n_tasks)
}

/// Every task input of a one-hot suite of `n`.
pub fn one_hot_inputs(n: usize) -> Result<Vec<TaskInput>> {
    let e = Embedder::OneHot { n_tasks: n };
    (0..n).map(|i| e.embed(i, "")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::similarity_study;
    use crate::lora::{similarity_ab, similarity_dw, ModuleShape};

    fn layout() -> LoraLayout {
        LoraLayout::new(2, vec![ModuleShape::new("q_proj", 6, 6)], 3, None, 9).unwrap()
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random_orthogonal(4, &mut rng);
        let qqt = q.matmul(&q.transpose().unwrap()).unwrap();
        assert!(qqt.max_abs_diff(&Tensor::eye(4)) < 1e-12);
    }

    #[test]
    fn rotation_preserves_delta_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = AdapterSet::init(&layout(), 2).unwrap();
        let mut a = a;
        a.pairs.iter_mut().for_each(|p| p.b = Tensor::filled(p.b.shape().to_vec(), 0.3));
        let b = rotate(&a, &mut rng).unwrap();
        assert!((similarity_dw(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert!(similarity_ab(&a, &b).unwrap() < 0.999);
    }

    #[test]
    fn rotated_library_orders_correlations() {
        let (lib, emb, benches) = rotated_library(&layout(), 3, 4, 8, 0.3, 5).unwrap();
        assert_eq!(lib.len(), 12);
        assert_eq!(benches.len(), 3);
        let study = similarity_study(&lib, &emb, &benches).unwrap();
        for (_, ab, dw) in &study.correlations {
            assert!(dw > ab);
        }
        let mut shuffled = emb.clone();
        shuffled.swap(0, 5);
        assert!(matches!(similarity_study(&lib, &shuffled, &benches), Err(Error::UnknownId(_))));
    }

    #[test]
    fn desk_config_round_trips_through_toml_types() {
        let c = DeskConfig::default();
        c.validate().unwrap();
        assert_eq!(c.suite().unwrap().held_out.len(), 3);
        let s = c.with_seed(2);
        assert_ne!(s.lora.seed, c.lora.seed);
        assert_eq!(s.seed, 2);
    }
}
