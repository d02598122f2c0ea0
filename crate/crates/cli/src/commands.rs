//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use t2l_core::eval::{
    export_activations, intra_inter_distance, render_activations, similarity_study, CompressionCurve,
    CompressionPoint, EvalReport, FlopsReport,
};
use t2l_core::experiment::{self, Baselines, DeskConfig};
use t2l_core::lora::{load_adapter, load_adapter_for, load_library, save_adapter};
use t2l_core::task_embed::{load_embedding_table, Embedder, Provider, DEFAULT_HASH_SEED};
use t2l_core::train::{train_t2l_recon, train_t2l_sft, train_task_lora, TrainConfig};
use t2l_core::{AdapterLibrary, Arch, BaseLm, Hypernet, TaskInput, TaskSuite, ToyTask};

use crate::config::{load_config, seeded, ConfigSources, SEED_ENV};
use crate::manifest::{Manifest, Run, MANIFEST_FILE};
use crate::{Command, Common, Inputs, Split, StudyKind};

pub fn run(mut cmd: Command) -> Result<()> {
    let cwd = std::env::current_dir().context("reading the working directory")?;
    cmd.absolutize(&cwd);
    match &cmd {
        Command::Rerun { manifest, out } => rerun(manifest, out.clone()),
        Command::Flops { out, .. } => flops(&cmd, out.as_deref()),
        Command::Generate { .. } => generate(&cmd),
        _ => run_configured(cmd),
    }
}

fn resolve(common: &Common) -> Result<DeskConfig> {
    if let Some(c) = &common.resolved {
        c.validate().context("recorded config")?;
        return Ok(c.clone());
    }
    if let Some(p) = &common.config {
        ensure_exists(p, "config")?;
    }
    load_config(&ConfigSources {
        file: common.config.as_deref(),
        overrides: &common.set,
        seed: common.seed,
        env_seed: std::env::var(SEED_ENV).ok(),
        lr_scale: common.lr_scale,
    })
}

fn ensure_exists(p: &Path, what: &str) -> Result<()> {
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

fn run_configured(mut cmd: Command) -> Result<()> {
    let common = cmd.common_mut().expect("configured command");
    let cfg = resolve(common)?;
    let resume = common.resume;
    let out = common.out.clone();
    common.resume = false;
    common.resolved = None;
    let mut run = Run::open(out.join(MANIFEST_FILE), &cmd, Some(&cfg), resume)?;
    let eff = seeded(&cfg);
    match &cmd {
        Command::MakeSuite { .. } => {
            suite_for(&mut run, &eff, None)?;
        }
        Command::PretrainBase { suite, .. } => {
            let suite = suite_for(&mut run, &eff, suite.as_deref())?;
            base_for(&mut run, &eff, &suite, None)?;
        }
        Command::TrainLora { inputs, task, .. } => train_lora(&mut run, &eff, inputs, task)?,
        Command::BuildLibrary { inputs, split, .. } => {
            build_library(&mut run, &eff, inputs, *split)?;
        }
        Command::TrainT2lRecon {
            library,
            arch,
            embeddings,
            ..
        } => recon(&mut run, &eff, library, arch, embeddings)?,
        Command::TrainT2lSft {
            inputs,
            arch,
            embeddings,
            ..
        } => sft(&mut run, &eff, inputs, arch, embeddings)?,
        Command::Eval {
            inputs,
            split,
            adapter,
            library,
            ckpt,
            embeddings,
            ..
        } => eval(&mut run, &eff, inputs, *split, adapter.as_deref(), library.as_deref(), ckpt.as_deref(), embeddings)?,
        Command::Study {
            kind,
            inputs,
            arch,
            sizes,
            ckpt,
            descriptions,
            ..
        } => study(&mut run, &eff, *kind, inputs, arch, sizes, ckpt.as_deref(), *descriptions)?,
        Command::Generate { .. } | Command::Flops { .. } | Command::Rerun { .. } => unreachable!(),
    }
    let path = run.complete()?;
    println!("manifest\t{}", path.display());
    Ok(())
}

fn rerun(manifest: &Path, out: Option<PathBuf>) -> Result<()> {
    let m = Manifest::load(manifest)?;
    let mut cmd = m.invocation;
    if let Some(c) = cmd.common_mut() {
        c.resolved = m.config;
        if let Some(o) = out {
            c.out = o;
        }
    } else if let Some(o) = out {
        match &mut cmd {
            Command::Generate { out, .. } => *out = o,
            Command::Flops { out, .. } => *out = Some(o),
            _ => {}
        }
    }
    if matches!(cmd, Command::Rerun { .. }) {
        bail!("manifest {} records a rerun", manifest.display());
    }
    run(cmd)
}

// -------------------------------------------------------------------------
// shared stages
// -------------------------------------------------------------------------

fn suite_for(run: &mut Run, cfg: &DeskConfig, given: Option<&Path>) -> Result<TaskSuite> {
    if let Some(p) = given {
        ensure_exists(p, "suite")?;
        return TaskSuite::load(p).with_context(|| format!("taskgen: loading {}", p.display()));
    }
    run.stage("suite", |dir| {
        let suite = cfg.suite().context("taskgen: generating the suite")?;
        let p = dir.join("suite.txt");
        suite.save(&p)?;
        println!("suite\t{} train, {} held out", suite.train.len(), suite.held_out.len());
        Ok(vec![p])
    })?;
    Ok(TaskSuite::load(run.dir.join("suite.txt"))?)
}

fn base_for(run: &mut Run, cfg: &DeskConfig, suite: &TaskSuite, given: Option<&Path>) -> Result<BaseLm> {
    let lm = if let Some(p) = given {
        ensure_exists(p, "base model")?;
        BaseLm::load(p).with_context(|| format!("base_lm: loading {}", p.display()))?
    } else {
        run.stage("pretrain", |dir| {
            let (lm, log) = experiment::pretrain(cfg, suite).context("train: base pretraining")?;
            let p = dir.join("base.t2lb");
            let l = dir.join("pretrain.log");
            lm.save(&p)?;
            std::fs::write(&l, log.render())?;
            println!("pretrain\tfinal loss {:.6}", log.final_loss().unwrap_or(f64::NAN));
            Ok(vec![p, l])
        })?;
        BaseLm::load(run.dir.join("base.t2lb"))?
    };
    if lm.config().vocab_size != suite.vocab.size() {
        bail!(
            "base_lm: vocabulary {} does not match the suite's {}",
            lm.config().vocab_size,
            suite.vocab.size()
        );
    }
    Ok(lm)
}

fn tasks_of(suite: &TaskSuite, split: Split) -> Vec<&ToyTask> {
    match split {
        Split::Train => suite.train.iter().collect(),
        Split::HeldOut => suite.held_out.iter().collect(),
        Split::All => suite.all_tasks().collect(),
    }
}

fn parse_arch(s: &str) -> Result<Arch> {
    Arch::parse(s).context("hypernet: --arch")
}

/// Builds the embedder named by `spec` for `n_tasks` index-addressed tasks
/// or `d_task`-wide text vectors.
fn embedder(spec: &str, n_tasks: usize, d_task: usize) -> Result<Embedder> {
    Ok(match spec {
        "onehot" => Embedder::OneHot { n_tasks },
        "learned" => Embedder::Learned { n_tasks },
        "hashed" => Embedder::Hashed {
            d_task,
            seed: DEFAULT_HASH_SEED,
        },
        other => match other.strip_prefix("table:") {
            Some(p) => {
                ensure_exists(Path::new(p), "embedding table")?;
                Embedder::Table(load_embedding_table(p).context("task_embed: loading the table")?)
            }
            None => bail!("unknown embeddings {other:?}; expected onehot, learned, hashed or table:PATH"),
        },
    })
}

fn index_based(e: &Embedder) -> bool {
    matches!(e.provider(), Provider::OneHot | Provider::Learned)
}

fn hypernet_for(cfg: &DeskConfig, arch: Arch, emb: &Embedder, layout: t2l_core::LoraLayout) -> t2l_core::HypernetConfig {
    match emb {
        Embedder::Learned { n_tasks } => t2l_core::HypernetConfig {
            n_learned_tasks: *n_tasks,
            ..cfg.hyper.config(arch, cfg.d_task, layout)
        },
        e => cfg.hyper.config(arch, e.d_task(), layout),
    }
}

// -------------------------------------------------------------------------
// commands
// -------------------------------------------------------------------------

fn train_lora(run: &mut Run, cfg: &DeskConfig, inputs: &Inputs, id: &str) -> Result<()> {
    let suite = suite_for(run, cfg, inputs.suite.as_deref())?;
    let lm = base_for(run, cfg, &suite, inputs.base.as_deref())?;
    let task = suite.find(id).ok_or_else(|| {
        let ids: Vec<&str> = suite.all_tasks().map(|t| t.id.as_str()).collect();
        anyhow!("taskgen: unknown task {id:?}; known tasks: {}", ids.join(", "))
    })?;
    run.stage(&format!("lora:{id}"), |dir| {
        let layout = lm.lora_layout(cfg.rank)?;
        let (set, log) = train_task_lora(&lm, task, &layout, &cfg.lora).context("train: task LoRA")?;
        let stem = file_stem(id);
        let a = dir.join(format!("{stem}.t2la"));
        let l = dir.join(format!("{stem}.log"));
        save_adapter(&set, &a)?;
        std::fs::write(&l, log.render())?;
        println!("adapter\t{}", a.display());
        Ok(vec![a, l])
    })
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn build_library(run: &mut Run, cfg: &DeskConfig, inputs: &Inputs, split: Split) -> Result<PathBuf> {
    let suite = suite_for(run, cfg, inputs.suite.as_deref())?;
    let lm = base_for(run, cfg, &suite, inputs.base.as_deref())?;
    let tasks = tasks_of(&suite, split);
    let layout = lm.lora_layout(cfg.rank)?;
    let lib_dir = run.dir.join("library");
    std::fs::create_dir_all(&lib_dir)?;
    let file = |i: usize| format!("lora_{i:02}.t2la");
    for (i, t) in tasks.iter().enumerate() {
        run.stage(&format!("lora:{}", t.id), |_| {
            let c = TrainConfig {
                seed: cfg.lora.seed.wrapping_add(i as u64),
                ..cfg.lora.clone()
            };
            let (set, log) = train_task_lora(&lm, t, &layout, &c).with_context(|| format!("train: LoRA for {}", t.id))?;
            let p = lib_dir.join(file(i));
            save_adapter(&set, &p)?;
            println!("adapter\t{}\tfinal loss {:.6}", t.id, log.final_loss().unwrap_or(f64::NAN));
            Ok(vec![p])
        })?;
    }
    let manifest = lib_dir.join("library.manifest");
    run.stage("library", |_| {
        let mut text = String::from("# path\ttask_id\tdescription\n");
        for (i, t) in tasks.iter().enumerate() {
            let desc = t.train_descriptions.first().map(String::as_str).unwrap_or("");
            let _ = writeln!(text, "{}\t{}\t{}", file(i), t.id, desc.replace(['\t', '\n'], " "));
        }
        std::fs::write(&manifest, text)?;
        load_library(&manifest).context("lora: re-reading the library")?;
        println!("library\t{}", manifest.display());
        Ok(vec![manifest.clone()])
    })?;
    Ok(manifest)
}

fn recon(run: &mut Run, cfg: &DeskConfig, library: &Path, arch: &str, embeddings: &str) -> Result<()> {
    ensure_exists(library, "library manifest")?;
    let arch = parse_arch(arch)?;
    let lib = load_library(library).context("lora: loading the library")?;
    let emb = embedder(embeddings, lib.len(), cfg.d_task)?;
    let inputs = lib
        .adapters
        .iter()
        .enumerate()
        .map(|(i, a)| emb.embed(i, &a.description))
        .collect::<t2l_core::Result<Vec<_>>>()
        .context("task_embed: embedding library descriptions")?;
    run.stage("recon", |dir| {
        let net = Hypernet::build(hypernet_for(cfg, arch, &emb, lib.layout().clone()), cfg.recon.seed)?;
        let (net, report) = train_t2l_recon(net, &lib, &inputs, &cfg.recon).context("train: reconstruction")?;
        let h = dir.join("hypernet.t2lh");
        let l = dir.join("recon.log");
        net.save(&h)?;
        let mut log = report.log.render();
        let _ = writeln!(log, "# z_l1={:e}\traw_l1={:e}", report.z_l1, report.raw_l1);
        std::fs::write(&l, log)?;
        println!("recon\t{arch}\traw_l1 {:.3e}\tz_l1 {:.3e}", report.raw_l1, report.z_l1);
        Ok(vec![h, l])
    })
}

fn sft(run: &mut Run, cfg: &DeskConfig, inputs: &Inputs, arch: &str, embeddings: &str) -> Result<()> {
    let arch = parse_arch(arch)?;
    let suite = suite_for(run, cfg, inputs.suite.as_deref())?;
    let lm = base_for(run, cfg, &suite, inputs.base.as_deref())?;
    let train: Vec<&ToyTask> = suite.train.iter().collect();
    let emb = embedder(embeddings, train.len(), cfg.d_task)?;
    run.stage("sft", |dir| {
        let net = Hypernet::build(hypernet_for(cfg, arch, &emb, lm.lora_layout(cfg.rank)?), cfg.sft.seed)?;
        let (net, log) = train_t2l_sft(net, &lm, &train, |i, d| emb.embed(i, d), &cfg.sft).context("train: hypernet SFT")?;
        let h = dir.join("hypernet.t2lh");
        let l = dir.join("sft.log");
        net.save(&h)?;
        std::fs::write(&l, log.render())?;
        println!("sft\t{arch}\tfinal loss {:.6}", log.final_loss().unwrap_or(f64::NAN));
        Ok(vec![h, l])
    })
}

fn generate(cmd: &Command) -> Result<()> {
    let Command::Generate {
        ckpt,
        describe,
        task_index,
        embeddings,
        out,
    } = cmd
    else {
        unreachable!()
    };
    ensure_exists(ckpt, "checkpoint")?;
    let name = out.file_name().ok_or_else(|| anyhow!("--out must name a file"))?;
    let mpath = out.with_file_name(format!("{}.manifest.toml", name.to_string_lossy()));
    let mut run = Run::open(mpath, cmd, None, false)?;
    let net = Hypernet::load(ckpt).context("hypernet: loading the checkpoint")?;
    let c = net.config();
    let n_index = if c.n_learned_tasks > 0 { c.n_learned_tasks } else { c.d_task };
    let emb = embedder(embeddings, n_index, c.d_task)?;
    let (index, text) = match (task_index, describe) {
        (Some(i), None) => (*i, String::new()),
        (None, Some(d)) if !index_based(&emb) => (0, d.clone()),
        (None, Some(_)) => bail!("{embeddings} embeddings need --task-index"),
        _ => bail!("give --describe or --task-index"),
    };
    let input = emb.embed(index, &text).context("task_embed")?;
    let id = if text.is_empty() { format!("task_{index}") } else { "generated".into() };
    let set = net.generate_one(&input)?.with_meta(id, text);
    save_adapter(&set, out)?;
    load_adapter(out).context("lora: re-reading the generated adapter")?;
    run.finish("generate", &[out.as_path()])?;
    run.complete()?;
    println!("adapter\t{}", out.display());
    Ok(())
}

/// Mean accuracy of a hypernet on `task`: over its eval descriptions for
/// text embedders, or from its index for index embedders.
fn hypernet_accuracy(lm: &BaseLm, net: &Hypernet, emb: &Embedder, index: Option<usize>, task: &ToyTask) -> Result<f64> {
    if index_based(emb) {
        let i = index.ok_or_else(|| anyhow!("{} has no training index for index embeddings", task.id))?;
        let set = net.generate_one(&emb.embed(i, "")?)?;
        return Ok(t2l_core::eval::evaluate(lm, Some(&set), task)?);
    }
    Ok(experiment::description_accuracy(lm, net, emb, task, &task.eval_descriptions)?)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    run: &mut Run,
    cfg: &DeskConfig,
    inputs: &Inputs,
    split: Split,
    adapter: Option<&Path>,
    library: Option<&Path>,
    ckpt: Option<&Path>,
    embeddings: &str,
) -> Result<()> {
    let suite = suite_for(run, cfg, inputs.suite.as_deref())?;
    let lm = base_for(run, cfg, &suite, inputs.base.as_deref())?;
    let adapter = adapter
        .map(|p| {
            ensure_exists(p, "adapter")?;
            load_adapter_for(p, lm.fingerprint()).context("lora: loading the adapter")
        })
        .transpose()?;
    let library = library
        .map(|p| {
            ensure_exists(p, "library manifest")?;
            load_library(p).context("lora: loading the library")
        })
        .transpose()?;
    let net = ckpt
        .map(|p| {
            ensure_exists(p, "checkpoint")?;
            Hypernet::load(p).context("hypernet: loading the checkpoint")
        })
        .transpose()?;
    let emb = match &net {
        Some(n) => Some(embedder(
            embeddings,
            n.config().n_learned_tasks.max(n.config().d_task),
            n.config().d_task,
        )?),
        None => None,
    };
    run.stage("eval", |dir| {
        let start = Instant::now();
        let mut rep = EvalReport::default();
        for t in tasks_of(&suite, split) {
            rep.push(&t.id, "base", cfg.seed, t2l_core::eval::evaluate(&lm, None, t)?);
            if let Some(a) = &adapter {
                rep.push(&t.id, "adapter", cfg.seed, t2l_core::eval::evaluate(&lm, Some(a), t)?);
            }
            if let Some(o) = library.as_ref().and_then(|l| l.find(&t.id)) {
                rep.push(&t.id, "oracle", cfg.seed, t2l_core::eval::evaluate(&lm, Some(o), t)?);
            }
            if let (Some(n), Some(e)) = (&net, &emb) {
                let index = suite.train.iter().position(|x| x.id == t.id);
                rep.push(&t.id, "t2l", cfg.seed, hypernet_accuracy(&lm, n, e, index, t)?);
            }
        }
        rep.runtime_s = start.elapsed().as_secs_f64();
        let r = dir.join("report.tsv");
        let s = dir.join("summary.tsv");
        std::fs::write(&r, rep.render_entries())?;
        std::fs::write(&s, summary(&rep))?;
        print!("{}", summary(&rep));
        Ok(vec![r, s])
    })
}

fn summary(rep: &EvalReport) -> String {
    let mut tags: Vec<&str> = Vec::new();
    for e in &rep.entries {
        if !tags.contains(&e.tag.as_str()) {
            tags.push(&e.tag);
        }
    }
    let mut s = String::from("tag\tmean_accuracy\n");
    for t in tags {
        let _ = writeln!(s, "{t}\t{:.6}", rep.mean(t).unwrap_or(f64::NAN));
    }
    let _ = writeln!(s, "# runtime_s={:.3}", rep.runtime_s);
    s
}

#[allow(clippy::too_many_arguments)]
fn study(
    run: &mut Run,
    cfg: &DeskConfig,
    kind: StudyKind,
    inputs: &Inputs,
    arch: &str,
    sizes: &[usize],
    ckpt: Option<&Path>,
    descriptions: usize,
) -> Result<()> {
    let arch = parse_arch(arch)?;
    let suite = suite_for(run, cfg, inputs.suite.as_deref())?;
    match kind {
        StudyKind::Similarity => run.stage("similarity", |dir| {
            let layout = cfg.base_config(suite.vocab.size()).lora_layout(cfg.rank)?;
            let (lib, emb, benches) = experiment::rotated_library(&layout, 4, 5, cfg.d_task, 0.3, cfg.seed)?;
            let study = similarity_study(&lib, &emb, &benches).context("eval: similarity study")?;
            let p = dir.join("similarity.tsv");
            std::fs::write(&p, study.render())?;
            print!("{}", study.render());
            Ok(vec![p])
        }),
        StudyKind::Compression => compression(run, cfg, &suite, inputs, arch, sizes),
        StudyKind::ZeroShot => {
            let lm = base_for(run, cfg, &suite, inputs.base.as_deref())?;
            run.stage("zero-shot", |dir| {
                let (rep, net) = experiment::zero_shot(&lm, &suite, cfg).context("eval: zero-shot study")?;
                let r = dir.join("zero_shot.tsv");
                let h = dir.join("hypernet.t2lh");
                std::fs::write(&r, rep.render_entries())?;
                net.save(&h)?;
                print!("{}", summary(&rep));
                Ok(vec![r, h])
            })
        }
        StudyKind::Alignment => {
            let lm = base_for(run, cfg, &suite, inputs.base.as_deref())?;
            let tasks: Vec<&ToyTask> = suite.train.iter().collect();
            let lib = oracles(run, cfg, &lm, &tasks)?;
            run.stage("alignment", |dir| {
                let (net, report) = experiment::recon_with_descriptions(&tasks, &lib, arch, descriptions, cfg)
                    .context("train: description reconstruction")?;
                let rep = experiment::alignment(&lm, &net, &suite, &tasks, cfg).context("eval: alignment study")?;
                let r = dir.join("alignment.tsv");
                std::fs::write(&r, rep.render_entries())?;
                println!("recon\traw_l1 {:.3e}", report.raw_l1);
                print!("{}", summary(&rep));
                Ok(vec![r])
            })
        }
        StudyKind::Activations => {
            let p = ckpt.ok_or_else(|| anyhow!("the activations study needs --ckpt"))?;
            ensure_exists(p, "checkpoint")?;
            let net = Hypernet::load(p).context("hypernet: loading the checkpoint")?;
            let emb = Embedder::Hashed {
                d_task: net.config().d_task,
                seed: DEFAULT_HASH_SEED,
            };
            run.stage("activations", |dir| {
                let mut items: Vec<(String, usize, TaskInput)> = Vec::new();
                for t in suite.all_tasks() {
                    for (i, d) in t.eval_descriptions.iter().enumerate() {
                        items.push((t.id.clone(), i, emb.embed(0, d)?));
                    }
                }
                let rows = export_activations(&net, &items)?;
                let (ei, ex) = intra_inter_distance(&rows, |r| &r.task_enc);
                let (li, lx) = intra_inter_distance(&rows, |r| &r.last_block);
                let a = dir.join("activations.tsv");
                std::fs::write(&a, render_activations(&rows))?;
                println!("task_enc\tintra {ei:.6}\tinter {ex:.6}");
                println!("last_block\tintra {li:.6}\tinter {lx:.6}");
                Ok(vec![a])
            })
        }
    }
}

fn oracles(run: &mut Run, cfg: &DeskConfig, lm: &BaseLm, tasks: &[&ToyTask]) -> Result<AdapterLibrary> {
    let dir = run.dir.join("oracles");
    run.stage("oracles", |_| {
        let lib = experiment::train_oracles(lm, tasks, cfg).context("train: oracle adapters")?;
        Ok(vec![t2l_core::lora::save_library(&lib, &dir)?])
    })?;
    Ok(load_library(dir.join("library.manifest"))?)
}

fn compression(
    run: &mut Run,
    cfg: &DeskConfig,
    suite: &TaskSuite,
    inputs: &Inputs,
    arch: Arch,
    sizes: &[usize],
) -> Result<()> {
    let lm = base_for(run, cfg, suite, inputs.base.as_deref())?;
    let all: Vec<&ToyTask> = suite.all_tasks().collect();
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > all.len()) {
        bail!("compression size {n} outside 1..={}", all.len());
    }
    let lib = oracles(run, cfg, &lm, &all)?;
    let base_path = run.dir.join("baselines.tsv");
    run.stage("baselines", |_| {
        let b = experiment::baselines(&lm, &all, &lib)?;
        let mut s = String::from("task\tbase\toracle\n");
        for (t, (x, y)) in all.iter().zip(b.base.iter().zip(&b.oracle)) {
            let _ = writeln!(s, "{}\t{x:?}\t{y:?}", t.id);
        }
        std::fs::write(&base_path, s)?;
        Ok(vec![base_path.clone()])
    })?;
    let base = read_baselines(&base_path)?;
    let mut curve = CompressionCurve::default();
    for &n in sizes {
        let p = run.dir.join(format!("recon_{n}.tsv"));
        run.stage(&format!("recon:{n}"), |_| {
            let tasks = &all[..n];
            let sub = AdapterLibrary::new(lib.adapters[..n].to_vec())?;
            let b = Baselines {
                base: base.base[..n].to_vec(),
                oracle: base.oracle[..n].to_vec(),
            };
            let r = experiment::recon_one_hot(&lm, tasks, &sub, &b, arch, cfg).context("train: reconstruction")?;
            let q = r.point;
            std::fs::write(&p, format!("{}\t{:?}\t{:?}\t{:?}\n", q.n_tasks, q.compression_ratio, q.raw_l1, q.rel_perf))?;
            println!("recon\t{n} tasks\traw_l1 {:.3e}\trel_perf {:.4}", q.raw_l1, q.rel_perf);
            Ok(vec![p.clone()])
        })?;
        curve.insert(read_point(&p)?);
    }
    let c = run.dir.join("compression.tsv");
    std::fs::write(&c, curve.render())?;
    print!("{}", curve.render());
    if run.done("curve") {
        return Ok(());
    }
    run.finish("curve", &[c.as_path()])
}

fn read_baselines(p: &Path) -> Result<Baselines> {
    let text = std::fs::read_to_string(p)?;
    let mut b = Baselines {
        base: Vec::new(),
        oracle: Vec::new(),
    };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            bail!("{}: malformed line {line:?}", p.display());
        }
        b.base.push(f[1].parse()?);
        b.oracle.push(f[2].parse()?);
    }
    Ok(b)
}

fn read_point(p: &Path) -> Result<CompressionPoint> {
    let text = std::fs::read_to_string(p)?;
    let f: Vec<&str> = text.trim().split('\t').collect();
    if f.len() != 4 {
        bail!("{}: malformed compression point", p.display());
    }
    Ok(CompressionPoint {
        n_tasks: f[0].parse()?,
        compression_ratio: f[1].parse()?,
        raw_l1: f[2].parse()?,
        rel_perf: f[3].parse()?,
    })
}

fn flops(cmd: &Command, out: Option<&Path>) -> Result<()> {
    let rep = FlopsReport::paper();
    print!("{}", rep.render());
    if let Some(dir) = out {
        let mut run = Run::open(dir.join(MANIFEST_FILE), cmd, None, false)?;
        let p = dir.join("flops.tsv");
        std::fs::write(&p, rep.render())?;
        run.finish("flops", &[p.as_path()])?;
        run.complete()?;
    }
    Ok(())
}
