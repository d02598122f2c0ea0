//! Text-to-LoRA hypernetworks.
//!
//! A descriptor row concatenates an encoded task vector with learned module
//! and layer embeddings, runs through a mixer and two residual MLP blocks,
//! and a final MLP feeds a per-module linear head:
//!
//! - **L** emits `A` and `B` of one `(module, layer)` at once;
//! - **M** emits one matrix, picked by an A/B embedding added after block 1;
//! - **S** emits one rank row, picked by A/B plus a rank embedding added
//!   after block 2.
//!
//! All descriptor rows of all tasks are evaluated as one batch. Every op is
//! row-independent, so the batch result equals row-at-a-time evaluation
//! bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::lora::{read_layout, write_layout, AdapterSet, AdapterVars, LoraLayout, ZScoreStats};
use crate::params::ParamSet;
use crate::task_embed::TaskInput;
use crate::tensor::Tensor;

pub const HYPERNET_MAGIC: &[u8; 4] = b"T2LH";
pub const HYPERNET_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    L,
    M,
    S,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::L, Arch::M, Arch::S];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "L" | "l" => Ok(Arch::L),
            "M" | "m" => Ok(Arch::M),
            "S" | "s" => Ok(Arch::S),
            _ => Err(Error::Config(format!("unknown arch {s:?} (expected L, M or S)"))),
        }
    }

    fn tag(self) -> u32 {
        match self {
            Arch::L => 0,
            Arch::M => 1,
            Arch::S => 2,
        }
    }

    fn from_tag(t: u32) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.tag() == t)
            .ok_or_else(|| Error::Format(format!("unknown arch tag {t}")))
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ab {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypernetConfig {
    pub arch: Arch,
    pub d_task: usize,
    pub d_task_enc: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub layout: LoraLayout,
    pub dropout: f64,
    /// Rows of the learned task dictionary; zero disables it.
    pub n_learned_tasks: usize,
}

impl HypernetConfig {
    pub fn new(arch: Arch, d_task: usize, layout: LoraLayout) -> Self {
        Self {
            arch,
            d_task,
            d_task_enc: 64,
            d_embed: 32,
            d_hidden: 128,
            d_out: 128,
            layout,
            dropout: 0.05,
            n_learned_tasks: 0,
        }
    }

    /// Residual-stream width.
    pub fn width(&self) -> usize {
        self.d_task_enc + 2 * self.d_embed
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        for (k, v) in [
            ("d_task", self.d_task),
            ("d_task_enc", self.d_task_enc),
            ("d_embed", self.d_embed),
            ("d_hidden", self.d_hidden),
            ("d_out", self.d_out),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("hypernet {k} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn n_ab(&self) -> usize {
        if self.arch == Arch::L {
            1
        } else {
            2
        }
    }

    fn n_rank_rows(&self) -> usize {
        if self.arch == Arch::S {
            self.layout.rank
        } else {
            1
        }
    }

    /// Descriptor rows evaluated per task.
    pub fn rows_per_task(&self) -> usize {
        self.layout.modules.len() * self.layout.n_layers * self.n_ab() * self.n_rank_rows()
    }

    /// Output width of module `m`'s head.
    pub fn head_out(&self, m: usize) -> usize {
        let ms = &self.layout.modules[m];
        let r = self.layout.rank;
        match self.arch {
            Arch::L => r * (ms.d_in + ms.d_out),
            Arch::M => r * ms.d_max(),
            Arch::S => ms.d_max(),
        }
    }

    fn head_bias_rows(&self) -> usize {
        match self.arch {
            Arch::L => 1,
            Arch::M => 2,
            Arch::S => 2 * self.layout.rank,
        }
    }

    pub fn head_weight_count(&self) -> usize {
        (0..self.layout.modules.len()).map(|m| self.d_out * self.head_out(m)).sum()
    }

    pub fn head_param_count(&self) -> usize {
        (0..self.layout.modules.len())
            .map(|m| (self.d_out + self.head_bias_rows()) * self.head_out(m))
            .sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        let (w, h, e) = (self.width(), self.d_hidden, self.d_embed);
        let enc = self.d_task_enc;
        let mlp = |i: usize, o: usize| h * i + h + o * h + o;
        let mut n = self.n_learned_tasks * self.d_task
            + enc * self.d_task + enc + 2 * enc
            + self.layout.n_layers * e + 2 * e
            + self.layout.modules.len() * e + 2 * e
            + mlp(w, w)
            + 2 * (2 * w + mlp(w, w))
            + 2 * w + mlp(w, self.d_out);
        if self.arch != Arch::L {
            n += 2 * self.layout.modules.len() * w;
        }
        if self.arch == Arch::S {
            n += self.layout.rank * w + 2 * w;
        }
        n
    }

    pub fn param_count(&self) -> usize {
        self.backbone_param_count() + self.head_param_count()
    }
}

/// One descriptor row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub task: usize,
    pub module: usize,
    pub layer: usize,
    pub ab: Option<Ab>,
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Idx {
    task_dict: Option<usize>,
    enc_w: usize,
    enc_b: usize,
    enc_g: usize,
    enc_beta: usize,
    layer_emb: usize,
    layer_g: usize,
    layer_b: usize,
    module_emb: usize,
    module_g: usize,
    module_b: usize,
    mixer: [usize; 4],
    mlp1: [usize; 6],
    mlp2: [usize; 6],
    ab_emb: Option<usize>,
    rank: Option<[usize; 3]>,
    mlp3: [usize; 6],
    heads: Vec<(usize, usize)>,
}

/// Train-time switches for a hypernet forward.
#[derive(Clone, Copy, Debug, Default)]
pub struct HyperOpts {
    /// Enables dropout with this mask seed.
    pub dropout_seed: Option<u64>,
}

/// Values produced by one batched forward.
#[derive(Clone, Copy, Debug)]
pub struct HyperOut {
    /// Encoded task vectors, `[tasks, d_task_enc]`.
    pub task_enc: Var,
    /// Final MLP block output per descriptor row, `[rows, d_out]`.
    pub last: Var,
    /// Head outputs in canonical adapter order, `[tasks, P]`, before any
    /// z-score denormalization.
    pub raw: Var,
    /// Adapter parameters, `[tasks, P]`.
    pub flat: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypernet {
    config: HypernetConfig,
    params: ParamSet,
    idx: Idx,
    stats: Option<ZScoreStats>,
}

impl Hypernet {
    /// Random backbone; heads use Bias-HyperInit so that every generated `B`
    /// is exactly zero.
    pub fn build(config: HypernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (w, h, e) = (config.width(), config.d_hidden, config.d_embed);
        let enc = config.d_task_enc;

        let linear = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize| {
            let bound = 1.0 / (i as f64).sqrt();
            let wi = p.push(format!("{name}.w"), Tensor::uniform([o, i], bound, rng));
            let bi = p.push(format!("{name}.b"), Tensor::uniform([o], bound, rng));
            (wi, bi)
        };
        let norm = |p: &mut ParamSet, name: &str, n: usize| {
            (
                p.push(format!("{name}.g"), Tensor::filled([n], 1.0)),
                p.push(format!("{name}.b"), Tensor::zeros([n])),
            )
        };
        let block = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, out: usize| {
            let (g, b) = norm(p, &format!("{name}.ln"), w);
            let (w1, b1) = linear(p, rng, &format!("{name}.fc1"), h, w);
            let (w2, b2) = linear(p, rng, &format!("{name}.fc2"), out, h);
            [g, b, w1, b1, w2, b2]
        };

        let task_dict = (config.n_learned_tasks > 0).then(|| {
            p.push(
                "task_dict",
                Tensor::normal([config.n_learned_tasks, config.d_task], 1.0, &mut rng),
            )
        });
        let (enc_w, enc_b) = linear(&mut p, &mut rng, "task_encoder", enc, config.d_task);
        let (enc_g, enc_beta) = norm(&mut p, "task_encoder.ln", enc);
        let layer_emb = p.push("layer_emb", Tensor::normal([config.layout.n_layers, e], 1.0, &mut rng));
        let (layer_g, layer_b) = norm(&mut p, "layer_emb.ln", e);
        let module_emb = p.push(
            "module_emb",
            Tensor::normal([config.layout.modules.len(), e], 1.0, &mut rng),
        );
        let (module_g, module_b) = norm(&mut p, "module_emb.ln", e);
        let (m1, mb1) = linear(&mut p, &mut rng, "mixer.fc1", h, w);
        let (m2, mb2) = linear(&mut p, &mut rng, "mixer.fc2", w, h);
        let mlp1 = block(&mut p, &mut rng, "mlp1", w);
        let mlp2 = block(&mut p, &mut rng, "mlp2", w);
        let ab_emb = (config.arch != Arch::L).then(|| {
            p.push(
                "ab_emb",
                Tensor::normal([2 * config.layout.modules.len(), w], 1.0, &mut rng),
            )
        });
        let rank = (config.arch == Arch::S).then(|| {
            let t = p.push("rank_emb", Tensor::normal([config.layout.rank, w], 1.0, &mut rng));
            let (g, b) = norm(&mut p, "rank_emb.ln", w);
            [t, g, b]
        });
        let mlp3 = block(&mut p, &mut rng, "mlp3", config.d_out);

        let r = config.layout.rank;
        let mut heads = Vec::new();
        for (m, ms) in config.layout.modules.iter().enumerate() {
            let out = config.head_out(m);
            let wi = p.push(format!("head.{}.w", ms.name), Tensor::zeros([out, config.d_out]));
            let rows = config.head_bias_rows();
            let mut bias = Tensor::zeros([rows, out]);
            let d = ms.d_in as f64;
            let bd = bias.data_mut();
            match config.arch {
                Arch::L => {
                    let bound = 1.0 / d;
                    for x in &mut bd[..r * ms.d_in] {
                        *x = rng.random_range(-bound..bound);
                    }
                }
                Arch::M => {
                    let bound = 1.0 / (2f64.sqrt() * d);
                    for x in &mut bd[..r * ms.d_in] {
                        *x = rng.random_range(-bound..bound);
                    }
                }
                Arch::S => {
                    let bound = 1.0 / ((2.0 * r as f64).sqrt() * d);
                    for k in 0..r {
                        for x in &mut bd[k * out..k * out + ms.d_in] {
                            *x = rng.random_range(-bound..bound);
                        }
                    }
                }
            }
            let bi = p.push(format!("head.{}.b", ms.name), bias);
            heads.push((wi, bi));
        }

        let idx = Idx {
            task_dict,
            enc_w,
            enc_b,
            enc_g,
            enc_beta,
            layer_emb,
            layer_g,
            layer_b,
            module_emb,
            module_g,
            module_b,
            mixer: [m1, mb1, m2, mb2],
            mlp1,
            mlp2,
            ab_emb,
            rank,
            mlp3,
            heads,
        };
        Ok(Self {
            config,
            params: p,
            idx,
            stats: None,
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn layout(&self) -> &LoraLayout {
        &self.config.layout
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn stats(&self) -> Option<&ZScoreStats> {
        self.stats.as_ref()
    }

    /// Outputs are read as z-scores and mapped back through `stats`.
    pub fn set_stats(&mut self, stats: Option<ZScoreStats>) -> Result<()> {
        if let Some(s) = &stats {
            if s.len() != self.config.layout.param_count() {
                return Err(Error::Shape {
                    op: "hypernet stats",
                    lhs: vec![self.config.layout.param_count()],
                    rhs: vec![s.len()],
                });
            }
        }
        self.stats = stats;
        Ok(())
    }

    /// Descriptor rows of `n_tasks` tasks in task → module → layer → A/B →
    /// rank order.
    pub fn rows(&self, n_tasks: usize) -> Vec<Descriptor> {
        let c = &self.config;
        let abs: &[Option<Ab>] = match c.arch {
            Arch::L => &[None],
            _ => &[Some(Ab::A), Some(Ab::B)],
        };
        let ranks: Vec<Option<usize>> = match c.arch {
            Arch::S => (0..c.layout.rank).map(Some).collect(),
            _ => vec![None],
        };
        let mut out = Vec::with_capacity(n_tasks * c.rows_per_task());
        for task in 0..n_tasks {
            for module in 0..c.layout.modules.len() {
                for layer in 0..c.layout.n_layers {
                    for &ab in abs {
                        for &rank in &ranks {
                            out.push(Descriptor {
                                task,
                                module,
                                layer,
                                ab,
                                rank,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn check_descriptor(&self, d: &Descriptor) -> Result<()> {
        let c = &self.config;
        if d.module >= c.layout.modules.len() || d.layer >= c.layout.n_layers {
            return Err(Error::Index {
                what: "descriptor module/layer",
                index: d.module.max(d.layer),
                bound: c.layout.modules.len().min(c.layout.n_layers),
            });
        }
        if c.arch != Arch::L && d.ab.is_none() {
            return Err(Error::Contract(format!("arch {} needs an A/B selector", c.arch)));
        }
        match (c.arch, d.rank) {
            (Arch::S, None) => Err(Error::Contract("arch S needs a rank index".into())),
            (Arch::S, Some(k)) if k >= c.layout.rank => Err(Error::Index {
                what: "rank index",
                index: k,
                bound: c.layout.rank,
            }),
            _ => Ok(()),
        }
    }

    /// `concat[enc(f(z)), E[m], E[l]]` for one row, after checking that the
    /// arch-required selectors are present.
    pub fn descriptor(
        &self,
        task: &TaskInput,
        module: usize,
        layer: usize,
        ab: Option<Ab>,
        rank: Option<usize>,
    ) -> Result<Tensor> {
        let d = Descriptor {
            task: 0,
            module,
            layer,
            ab,
            rank,
        };
        self.check_descriptor(&d)?;
        let mut tape = Tape::new();
        let th = self.params.bind(&mut tape, false);
        let enc = self.encode_tasks(&mut tape, &th, std::slice::from_ref(task))?;
        let x = self.descriptor_input(&mut tape, &th, enc, &[d])?;
        Ok(tape.tensor(x).reshape([self.config.width()])?)
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    fn encode_tasks(&self, tape: &mut Tape<'_>, th: &[Var], tasks: &[TaskInput]) -> Result<Var> {
        let c = &self.config;
        if tasks.is_empty() {
            return Err(Error::Contract("no tasks to encode".into()));
        }
        let x = if tasks.iter().all(|t| matches!(t, TaskInput::Vector(_))) {
            let mut data = Vec::with_capacity(tasks.len() * c.d_task);
            for t in tasks {
                let TaskInput::Vector(v) = t else { unreachable!() };
                if v.len() != c.d_task {
                    return Err(Error::Shape {
                        op: "task embedding",
                        lhs: vec![c.d_task],
                        rhs: vec![v.len()],
                    });
                }
                data.extend_from_slice(v);
            }
            tape.constant(Tensor::new([tasks.len(), c.d_task], data)?)
        } else if tasks.iter().all(|t| matches!(t, TaskInput::Learned(_))) {
            let dict = self
                .idx
                .task_dict
                .ok_or_else(|| Error::Config("hypernet has no learned task dictionary".into()))?;
            let ids: Vec<usize> = tasks
                .iter()
                .map(|t| match t {
                    TaskInput::Learned(i) => *i,
                    TaskInput::Vector(_) => unreachable!(),
                })
                .collect();
            tape.gather_rows(th[dict], &ids)?
        } else {
            return Err(Error::Contract("cannot mix learned and vector task inputs".into()));
        };
        let y = tape.linear(x, th[self.idx.enc_w], Some(th[self.idx.enc_b]))?;
        tape.layer_norm(y, th[self.idx.enc_g], th[self.idx.enc_beta], LN_EPS)
    }

    fn descriptor_input(&self, tape: &mut Tape<'_>, th: &[Var], enc: Var, rows: &[Descriptor]) -> Result<Var> {
        let i = &self.idx;
        let le = tape.layer_norm(th[i.layer_emb], th[i.layer_g], th[i.layer_b], LN_EPS)?;
        let me = tape.layer_norm(th[i.module_emb], th[i.module_g], th[i.module_b], LN_EPS)?;
        let t: Vec<usize> = rows.iter().map(|d| d.task).collect();
        let m: Vec<usize> = rows.iter().map(|d| d.module).collect();
        let l: Vec<usize> = rows.iter().map(|d| d.layer).collect();
        let te = tape.gather_rows(enc, &t)?;
        let me = tape.gather_rows(me, &m)?;
        let le = tape.gather_rows(le, &l)?;
        tape.concat_cols(&[te, me, le])
    }

    /// Task encoding through the final MLP block; `[rows, d_out]`.
    fn trunk(
        &self,
        tape: &mut Tape<'_>,
        th: &[Var],
        enc: Var,
        rows: &[Descriptor],
        drop: &mut Option<ChaCha8Rng>,
    ) -> Result<Var> {
        let i = &self.idx;
        let p = self.config.dropout;
        let mut dropout = |tape: &mut Tape<'_>, x: Var| -> Result<Var> {
            match drop.as_mut() {
                Some(rng) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let mask = (0..tape.value(x).len())
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    tape.mul_const(x, mask)
                }
                _ => Ok(x),
            }
        };
        let x = self.descriptor_input(tape, th, enc, rows)?;

        let [w1, b1, w2, b2] = i.mixer;
        let y = tape.linear(x, th[w1], Some(th[b1]))?;
        let y = tape.silu(y);
        let y = dropout(tape, y)?;
        let y = tape.linear(y, th[w2], Some(th[b2]))?;
        let y = tape.silu(y);
        let mut h = dropout(tape, y)?;

        let mut block = |tape: &mut Tape<'_>, h: Var, b: [usize; 6], last: bool| -> Result<Var> {
            let [g, be, w1, b1, w2, b2] = b;
            let y = tape.layer_norm(h, th[g], th[be], LN_EPS)?;
            let y = tape.linear(y, th[w1], Some(th[b1]))?;
            let y = tape.silu(y);
            let y = dropout(tape, y)?;
            let y = tape.linear(y, th[w2], Some(th[b2]))?;
            let y = tape.silu(y);
            if last {
                Ok(y)
            } else {
                let y = dropout(tape, y)?;
                tape.add(h, y)
            }
        };
        h = block(tape, h, i.mlp1, false)?;
        if let Some(ab) = i.ab_emb {
            let sel: Vec<usize> = rows
                .iter()
                .map(|d| 2 * d.module + usize::from(d.ab == Some(Ab::B)))
                .collect();
            let e = tape.gather_rows(th[ab], &sel)?;
            h = tape.add(h, e)?;
        }
        h = block(tape, h, i.mlp2, false)?;
        if let Some([t, g, b]) = i.rank {
            let table = tape.layer_norm(th[t], th[g], th[b], LN_EPS)?;
            let sel: Vec<usize> = rows.iter().map(|d| d.rank.unwrap_or(0)).collect();
            let e = tape.gather_rows(table, &sel)?;
            h = tape.add(h, e)?;
        }
        block(tape, h, i.mlp3, true)
    }

    /// Per-module head outputs concatenated flat in module order; within a
    /// module, rows keep their order in `rows`.
    fn heads(&self, tape: &mut Tape<'_>, th: &[Var], last: Var, rows: &[Descriptor]) -> Result<Var> {
        let r = self.config.layout.rank;
        let mut parts = Vec::new();
        let mut total = 0;
        for (m, &(wi, bi)) in self.idx.heads.iter().enumerate() {
            let sel: Vec<usize> = (0..rows.len()).filter(|&j| rows[j].module == m).collect();
            if sel.is_empty() {
                continue;
            }
            let x = tape.gather_rows(last, &sel)?;
            let y = tape.matmul_nt(x, th[wi])?;
            let bias_rows: Vec<usize> = sel
                .iter()
                .map(|&j| {
                    let d = &rows[j];
                    let ab = usize::from(d.ab == Some(Ab::B));
                    match self.config.arch {
                        Arch::L => 0,
                        Arch::M => ab,
                        Arch::S => ab * r + d.rank.unwrap_or(0),
                    }
                })
                .collect();
            let b = tape.gather_rows(th[bi], &bias_rows)?;
            let y = tape.add(y, b)?;
            total += tape.value(y).len();
            parts.push(y);
        }
        tape.concat(&parts, vec![total])
    }

    /// Where each canonical adapter scalar of each task lives in the flat head
    /// output built from the full row set of `n_tasks` tasks.
    fn assembly_index(&self, n_tasks: usize) -> Vec<usize> {
        let c = &self.config;
        let lay = &c.layout;
        let (nl, r) = (lay.n_layers, lay.rank);
        let (n_ab, n_rank) = (c.n_ab(), c.n_rank_rows());
        let mut offsets = Vec::with_capacity(lay.modules.len());
        let mut off = 0;
        for m in 0..lay.modules.len() {
            offsets.push(off);
            off += n_tasks * nl * n_ab * n_rank * c.head_out(m);
        }
        let mut idx = Vec::with_capacity(n_tasks * lay.param_count());
        for t in 0..n_tasks {
            for l in 0..nl {
                for (m, ms) in lay.modules.iter().enumerate() {
                    let out = c.head_out(m);
                    let row = |ab: usize, k: usize| ((t * nl + l) * n_ab + ab) * n_rank + k;
                    let at = |ab: usize, k: usize, col: usize| offsets[m] + row(ab, k) * out + col;
                    for (ab, d) in [(0, ms.d_in), (1, ms.d_out)] {
                        for i in 0..r {
                            for j in 0..d {
                                idx.push(match c.arch {
                                    Arch::L => at(0, 0, ab * r * ms.d_in + i * d + j),
                                    Arch::M => at(ab, 0, i * d + j),
                                    Arch::S => at(ab, i, j),
                                });
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// One batched forward over every descriptor row of `tasks`.
    pub fn forward_on(&self, tape: &mut Tape<'_>, th: &[Var], tasks: &[TaskInput], opts: HyperOpts) -> Result<HyperOut> {
        let rows = self.rows(tasks.len());
        let mut drop = opts.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let task_enc = self.encode_tasks(tape, th, tasks)?;
        let last = self.trunk(tape, th, task_enc, &rows, &mut drop)?;
        let heads = self.heads(tape, th, last, &rows)?;
        let p = self.config.layout.param_count();
        let raw = tape.index(heads, self.assembly_index(tasks.len()), vec![tasks.len(), p])?;
        let flat = match &self.stats {
            Some(s) => {
                let std: Vec<f64> = s.std.iter().copied().cycle().take(tasks.len() * p).collect();
                let mean: Vec<f64> = s.mean.iter().copied().cycle().take(tasks.len() * p).collect();
                let y = tape.mul_const(raw, std)?;
                tape.add_const(y, &mean)?
            }
            None => raw,
        };
        Ok(HyperOut {
            task_enc,
            last,
            raw,
            flat,
        })
    }

    /// Adapter pairs of task `t` as views into `flat`.
    pub fn adapter_vars(&self, tape: &mut Tape<'_>, flat: Var, t: usize) -> Result<AdapterVars> {
        let lay = &self.config.layout;
        let mut off = t * lay.param_count();
        let mut pairs = Vec::with_capacity(lay.n_entries());
        for (_, m) in lay.entries() {
            let ms = &lay.modules[m];
            let a = tape.slice(flat, off, vec![lay.rank, ms.d_in])?;
            off += lay.rank * ms.d_in;
            let b = tape.slice(flat, off, vec![lay.rank, ms.d_out])?;
            off += lay.rank * ms.d_out;
            pairs.push((a, b));
        }
        Ok(AdapterVars {
            module_names: lay.modules.iter().map(|m| m.name.clone()).collect(),
            scaling: lay.scaling(),
            pairs,
        })
    }

    /// All adapters in one batched forward.
    pub fn generate(&self, tasks: &[TaskInput]) -> Result<Vec<AdapterSet>> {
        let mut tape = Tape::new();
        let th = self.params.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &th, tasks, HyperOpts::default())?;
        let p = self.config.layout.param_count();
        let flat = tape.value(out.flat);
        (0..tasks.len())
            .map(|t| AdapterSet::from_flat(&self.config.layout, &flat[t * p..(t + 1) * p]))
            .collect()
    }

    pub fn generate_one(&self, task: &TaskInput) -> Result<AdapterSet> {
        Ok(self.generate(std::slice::from_ref(task))?.remove(0))
    }

    /// Reference path: the backbone and heads are run once per descriptor
    /// row and the results assembled afterwards.
    pub fn generate_sequential(&self, tasks: &[TaskInput]) -> Result<Vec<AdapterSet>> {
        let rows = self.rows(tasks.len());
        let n_mod = self.config.layout.modules.len();
        let mut per_module: Vec<Vec<f64>> = vec![Vec::new(); n_mod];
        for d in &rows {
            let mut tape = Tape::new();
            let th = self.params.bind(&mut tape, false);
            let enc = self.encode_tasks(&mut tape, &th, std::slice::from_ref(&tasks[d.task]))?;
            let one = Descriptor { task: 0, ..*d };
            let last = self.trunk(&mut tape, &th, enc, &[one], &mut None)?;
            let head = self.heads(&mut tape, &th, last, &[one])?;
            per_module[d.module].extend_from_slice(tape.value(head));
        }
        let heads = per_module.concat();
        let p = self.config.layout.param_count();
        let mut raw: Vec<f64> = self.assembly_index(tasks.len()).into_iter().map(|i| heads[i]).collect();
        if let Some(s) = &self.stats {
            for (k, x) in raw.iter_mut().enumerate() {
                *x = *x * s.std[k % p] + s.mean[k % p];
            }
        }
        (0..tasks.len())
            .map(|t| AdapterSet::from_flat(&self.config.layout, &raw[t * p..(t + 1) * p]))
            .collect()
    }

    /// Per task: the task-encoder activation and the mean final-MLP-block
    /// activation over that task's descriptor rows.
    pub fn activations(&self, tasks: &[TaskInput]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut tape = Tape::new();
        let th = self.params.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &th, tasks, HyperOpts::default())?;
        let (enc_w, d_out) = (self.config.d_task_enc, self.config.d_out);
        let rpt = self.config.rows_per_task();
        let enc = tape.value(out.task_enc);
        let last = tape.value(out.last);
        Ok((0..tasks.len())
            .map(|t| {
                let mut mean = vec![0.0; d_out];
                for r in t * rpt..(t + 1) * rpt {
                    for (m, x) in mean.iter_mut().zip(&last[r * d_out..(r + 1) * d_out]) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rpt as f64);
                (enc[t * enc_w..(t + 1) * enc_w].to_vec(), mean)
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let c = &self.config;
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(HYPERNET_MAGIC)?;
        w.u32(HYPERNET_VERSION)?;
        w.u32(c.arch.tag())?;
        for v in [c.d_task, c.d_task_enc, c.d_embed, c.d_hidden, c.d_out, c.n_learned_tasks] {
            w.usize(v)?;
        }
        w.f64(c.dropout)?;
        write_layout(&mut w, &c.layout)?;
        match &self.stats {
            Some(s) => {
                w.u32(1)?;
                w.f64s(&s.mean)?;
                w.f64s(&s.std)?;
            }
            None => w.u32(0)?,
        }
        w.usize(self.params.len())?;
        for (name, t) in self.params.iter() {
            w.str(name)?;
            w.tensor(t)?;
        }
        w.u64(self.params.checksum())?;
        w.finish()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.bytes(&mut magic, "magic")?;
        if &magic != HYPERNET_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected T2LH")));
        }
        let version = r.u32("version")?;
        if version != HYPERNET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: HYPERNET_VERSION,
            });
        }
        let arch = Arch::from_tag(r.u32("arch")?)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize("hypernet dims")?;
        }
        let dropout = r.f64("dropout")?;
        let layout = read_layout(&mut r)?;
        let config = HypernetConfig {
            arch,
            d_task: dims[0],
            d_task_enc: dims[1],
            d_embed: dims[2],
            d_hidden: dims[3],
            d_out: dims[4],
            n_learned_tasks: dims[5],
            dropout,
            layout,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let p = config.layout.param_count();
        let stats = match r.u32("stats flag")? {
            0 => None,
            1 => Some(ZScoreStats {
                mean: r.f64s(p, "stats mean")?,
                std: r.f64s(p, "stats std")?,
            }),
            f => return Err(Error::Format(format!("bad stats flag {f}"))),
        };
        let mut net = Self::build(config, 0)?;
        let n = r.usize("parameter count")?;
        if n != net.params.len() {
            return Err(Error::Format(format!(
                "{n} parameter tensors, expected {}",
                net.params.len()
            )));
        }
        let mut names = Vec::with_capacity(n);
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            names.push(r.str("parameter name")?);
            tensors.push(r.tensor("parameter")?);
        }
        net.params.load_from(ParamSet::from_parts(names, tensors))?;
        let sum = r.u64("checksum")?;
        r.expect_eof()?;
        if sum != net.params.checksum() {
            return Err(Error::Format("parameter checksum mismatch".into()));
        }
        net.stats = stats;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::ModuleShape;

    fn layout(d: usize, r: usize) -> LoraLayout {
        LoraLayout::new(
            2,
            vec![ModuleShape::new("q_proj", d, d), ModuleShape::new("v_proj", d, d)],
            r,
            None,
            1,
        )
        .unwrap()
    }

    fn small(arch: Arch) -> HypernetConfig {
        HypernetConfig {
            d_task_enc: 8,
            d_embed: 4,
            d_hidden: 12,
            d_out: 10,
            ..HypernetConfig::new(arch, 6, layout(8, 2))
        }
    }

    fn task(seed: u64, d: usize) -> TaskInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TaskInput::Vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn counts_match_allocation() {
        for arch in Arch::ALL {
            for n_learned in [0, 3] {
                let cfg = HypernetConfig {
                    n_learned_tasks: n_learned,
                    ..small(arch)
                };
                let net = Hypernet::build(cfg.clone(), 0).unwrap();
                assert_eq!(net.param_count(), cfg.param_count(), "{arch}");
            }
        }
    }

    #[test]
    fn head_weight_ratios() {
        let lay = layout(64, 4);
        let l = HypernetConfig::new(Arch::L, 64, lay.clone());
        let m = HypernetConfig::new(Arch::M, 64, lay.clone());
        assert_eq!(l.head_weight_count(), 2 * m.head_weight_count());
        assert_eq!(l.head_weight_count() / 2, 128 * 2 * 4 * 64);
        let s4 = HypernetConfig::new(Arch::S, 64, lay);
        let s8 = HypernetConfig::new(Arch::S, 64, layout(64, 8));
        assert_eq!(s4.head_weight_count(), s8.head_weight_count());
        assert_eq!(s4.head_weight_count(), 2 * 128 * 64);
    }

    #[test]
    fn fresh_hypernet_emits_zero_b() {
        for arch in Arch::ALL {
            let net = Hypernet::build(small(arch), 3).unwrap();
            let sets = net.generate(&[task(1, 6), task(2, 6)]).unwrap();
            for set in &sets {
                for p in &set.pairs {
                    assert!(p.b.data().iter().all(|&x| x == 0.0), "{arch}");
                    assert!(p.a.data().iter().any(|&x| x != 0.0), "{arch}");
                }
            }
        }
    }

    #[test]
    fn bias_bounds() {
        let d = 8.0f64;
        for (arch, bound) in [
            (Arch::L, 1.0 / d),
            (Arch::M, 1.0 / (2f64.sqrt() * d)),
            (Arch::S, 1.0 / (4f64.sqrt() * d)),
        ] {
            let net = Hypernet::build(small(arch), 5).unwrap();
            let set = net.generate_one(&task(0, 6)).unwrap();
            for p in &set.pairs {
                assert!(p.a.data().iter().all(|x| x.abs() <= bound), "{arch}");
            }
        }
    }

    #[test]
    fn batched_equals_sequential() {
        for arch in Arch::ALL {
            let net = Hypernet::build(small(arch), 9).unwrap();
            let tasks = [task(1, 6), task(2, 6), task(3, 6)];
            assert_eq!(net.generate(&tasks).unwrap(), net.generate_sequential(&tasks).unwrap());
        }
    }

    #[test]
    fn descriptor_layout() {
        let net = Hypernet::build(small(Arch::M), 0).unwrap();
        let t = task(4, 6);
        let a = net.descriptor(&t, 1, 0, Some(Ab::A), None).unwrap();
        let b = net.descriptor(&t, 1, 1, Some(Ab::A), None).unwrap();
        assert_eq!(a.numel(), 8 + 4 + 4);
        assert_eq!(a.data()[..12], b.data()[..12]);
        assert_ne!(a.data()[12..], b.data()[12..]);
        assert!(matches!(
            net.descriptor(&t, 0, 0, None, None),
            Err(Error::Contract(_))
        ));
        let s = Hypernet::build(small(Arch::S), 0).unwrap();
        assert!(s.descriptor(&t, 0, 0, Some(Ab::B), None).is_err());
        assert!(s.descriptor(&t, 0, 0, Some(Ab::B), Some(1)).is_ok());
    }

    #[test]
    fn wrong_task_width_is_a_shape_error() {
        let net = Hypernet::build(small(Arch::L), 0).unwrap();
        assert!(matches!(net.generate(&[task(0, 5)]), Err(Error::Shape { .. })));
        assert!(net.generate(&[TaskInput::Learned(0)]).is_err());
    }

    #[test]
    fn learned_dictionary_inputs() {
        let cfg = HypernetConfig {
            n_learned_tasks: 2,
            ..small(Arch::M)
        };
        let net = Hypernet::build(cfg, 0).unwrap();
        let acts = net.activations(&[TaskInput::Learned(0), TaskInput::Learned(1)]).unwrap();
        assert_ne!(acts[0].0, acts[1].0);
        let sets = net.generate(&[TaskInput::Learned(0), TaskInput::Learned(1)]).unwrap();
        assert_eq!(sets[0], sets[1]);
        assert!(net.generate(&[TaskInput::Learned(2)]).is_err());
    }

    #[test]
    fn stats_denormalize_outputs() {
        let mut net = Hypernet::build(small(Arch::L), 0).unwrap();
        let p = net.layout().param_count();
        let plain = net.generate_one(&task(0, 6)).unwrap().flatten();
        let stats = ZScoreStats {
            mean: vec![0.5; p],
            std: vec![2.0; p],
        };
        net.set_stats(Some(stats)).unwrap();
        let scaled = net.generate_one(&task(0, 6)).unwrap().flatten();
        for (x, y) in plain.iter().zip(&scaled) {
            assert_eq!(*y, x * 2.0 + 0.5);
        }
        assert_eq!(
            net.generate(&[task(0, 6)]).unwrap(),
            net.generate_sequential(&[task(0, 6)]).unwrap()
        );
    }

    #[test]
    fn activations_shape_and_determinism() {
        let net = Hypernet::build(small(Arch::S), 0).unwrap();
        let t = task(3, 6);
        let acts = net.activations(&[t.clone(), t]).unwrap();
        assert_eq!(acts[0], acts[1]);
        assert_eq!(acts[0].0.len(), 8);
        assert_eq!(acts[0].1.len(), 10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for arch in Arch::ALL {
            let mut net = Hypernet::build(small(arch), 2).unwrap();
            let p = net.layout().param_count();
            net.set_stats(Some(ZScoreStats {
                mean: vec![0.1; p],
                std: vec![1.5; p],
            }))
            .unwrap();
            let path = dir.path().join("h.t2lh");
            net.save(&path).unwrap();
            assert_eq!(Hypernet::load(&path).unwrap(), net);
        }
    }
}
