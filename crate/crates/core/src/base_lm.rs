//! The frozen decoder-only transformer that adapters are applied to.
//!
//! Pre-norm blocks, learned positional embeddings, bias-free attention
//! projections, a SiLU feed-forward, a final LayerNorm and an untied output
//! head. LoRA branches attach to the attention projections named in
//! [`BaseLmConfig::target_modules`].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::binio::{Fnv64, Reader, Writer};
use crate::error::{Error, Result};
use crate::lora::{merge, AdapterSet, AdapterVars, LoraLayout, LoraPair, ModuleShape};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"T2LB";
pub const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetModule {
    QProj,
    KProj,
    VProj,
    OProj,
}

impl TargetModule {
    pub const ALL: [TargetModule; 4] = [Self::QProj, Self::KProj, Self::VProj, Self::OProj];

    pub fn name(self) -> &'static str {
        match self {
            Self::QProj => "q_proj",
            Self::KProj => "k_proj",
            Self::VProj => "v_proj",
            Self::OProj => "o_proj",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown target module {s:?}")))
    }
}

impl std::fmt::Display for TargetModule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub target_modules: Vec<TargetModule>,
}

impl Default for BaseLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 32,
            target_modules: vec![TargetModule::QProj, TargetModule::VProj],
        }
    }
}

impl BaseLmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.target_modules.is_empty() {
            return Err(Error::Config("target_modules is empty".into()));
        }
        for (i, m) in self.target_modules.iter().enumerate() {
            if self.target_modules[..i].contains(m) {
                return Err(Error::Config(format!("duplicate target module {m}")));
            }
        }
        Ok(())
    }

    /// `(d_in, d_out)` of an injection point.
    pub fn module_dims(&self, _m: TargetModule) -> (usize, usize) {
        (self.d_model, self.d_model)
    }

    pub fn lora_layout(&self, rank: usize) -> Result<LoraLayout> {
        self.validate()?;
        let modules = self
            .target_modules
            .iter()
            .map(|&m| {
                let (i, o) = self.module_dims(m);
                ModuleShape::new(m.name(), i, o)
            })
            .collect();
        LoraLayout::new(self.n_layers, modules, rank, None, self.fingerprint())
    }

    /// FNV-1a over the canonical little-endian encoding of every field.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write(b"BaseLmConfig/1");
        for v in [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq,
            self.target_modules.len(),
        ] {
            h.write(&(v as u64).to_le_bytes());
        }
        for m in &self.target_modules {
            h.write(m.name().as_bytes());
            h.write(&[0]);
        }
        h.finish()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, s) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq);
        let per_layer = 2 * 2 * d // two LayerNorms
            + 4 * d * d // q, k, v, o
            + f * d + f // W1, b1
            + d * f + d; // W2, b2
        v * d + s * d + self.n_layers * per_layer + 2 * d + v * d
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl LayerIdx {
    fn proj(&self, m: TargetModule) -> usize {
        match m {
            TargetModule::QProj => self.q,
            TargetModule::KProj => self.k,
            TargetModule::VProj => self.v,
            TargetModule::OProj => self.o,
        }
    }
}

/// A rectangular batch of token ids, row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq == 0 {
            return Err(Error::Contract("token batch is empty".into()));
        }
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Contract("token batch rows differ in length".into()));
        }
        Ok(Self {
            batch: rows.len(),
            seq,
            ids: rows.concat(),
        })
    }

    pub fn single(row: &[usize]) -> Result<Self> {
        Self::new(&[row.to_vec()])
    }
}

/// Inputs plus next-token targets; `None` targets are masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct SftBatch {
    pub tokens: TokenBatch,
    pub targets: Vec<Option<usize>>,
    /// Unpadded input length of each row.
    pub lengths: Vec<usize>,
}

impl SftBatch {
    /// Builds a right-padded batch from `(prompt, completion)` pairs. Loss is
    /// taken on every completion token.
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)], pad: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("SFT batch is empty".into()));
        }
        let mut rows = Vec::with_capacity(pairs.len());
        let mut tgts = Vec::with_capacity(pairs.len());
        for (x, y) in pairs {
            if x.is_empty() || y.is_empty() {
                return Err(Error::Contract("prompt and completion must be non-empty".into()));
            }
            let full: Vec<usize> = x.iter().chain(y).copied().collect();
            let input = full[..full.len() - 1].to_vec();
            let t: Vec<Option<usize>> = (0..input.len())
                .map(|i| (i + 1 >= x.len()).then(|| full[i + 1]))
                .collect();
            rows.push(input);
            tgts.push(t);
        }
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        let lengths = rows.iter().map(Vec::len).collect();
        for (r, t) in rows.iter_mut().zip(&mut tgts) {
            r.resize(seq, pad);
            t.resize(seq, None);
        }
        Ok(Self {
            tokens: TokenBatch::new(&rows)?,
            targets: tgts.concat(),
            lengths,
        })
    }
}

/// Train-time perturbations. The default is a clean eval forward.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts<'o> {
    /// Added to the input embeddings, `[batch·seq, d_model]`.
    pub embed_noise: Option<&'o [f64]>,
    /// Input dropout on the adapter branch, with its mask seed.
    pub lora_dropout: Option<(f64, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseLm {
    config: BaseLmConfig,
    params: ParamSet,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

impl BaseLm {
    /// Deterministic initialization from `seed`.
    pub fn init(config: BaseLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let mut p = ParamSet::new();
        let sd = 1.0 / (d as f64).sqrt();
        let tok_emb = p.push("tok_emb", Tensor::normal([v, d], 1.0, &mut rng));
        let pos_emb = p.push("pos_emb", Tensor::normal([config.max_seq, d], 1.0, &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let w = |p: &mut ParamSet, name: &str, t: Tensor| p.push(format!("layers.{l}.{name}"), t);
            let ln1_g = w(&mut p, "ln1.g", Tensor::filled([d], 1.0));
            let ln1_b = w(&mut p, "ln1.b", Tensor::zeros([d]));
            let q = w(&mut p, "q_proj", Tensor::normal([d, d], sd, &mut rng));
            let k = w(&mut p, "k_proj", Tensor::normal([d, d], sd, &mut rng));
            let vv = w(&mut p, "v_proj", Tensor::normal([d, d], sd, &mut rng));
            let o = w(&mut p, "o_proj", Tensor::normal([d, d], sd, &mut rng));
            let ln2_g = w(&mut p, "ln2.g", Tensor::filled([d], 1.0));
            let ln2_b = w(&mut p, "ln2.b", Tensor::zeros([d]));
            let w1 = w(&mut p, "ffn.w1", Tensor::normal([f, d], sd, &mut rng));
            let b1 = w(&mut p, "ffn.b1", Tensor::zeros([f]));
            let w2 = w(&mut p, "ffn.w2", Tensor::normal([d, f], 1.0 / (f as f64).sqrt(), &mut rng));
            let b2 = w(&mut p, "ffn.b2", Tensor::zeros([d]));
            layers.push(LayerIdx {
                ln1_g,
                ln1_b,
                q,
                k,
                v: vv,
                o,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = p.push("lnf.g", Tensor::filled([d], 1.0));
        let lnf_b = p.push("lnf.b", Tensor::zeros([d]));
        let head = p.push("head", Tensor::normal([v, d], sd, &mut rng));
        Ok(Self {
            config,
            params: p,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head,
        })
    }

    pub fn config(&self) -> &BaseLmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for base-model pretraining only.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint()
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn lora_layout(&self, rank: usize) -> Result<LoraLayout> {
        self.config.lora_layout(rank)
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.max_seq {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.seq,
                bound: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: t,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[batch·seq, vocab]` on `tape`, with Ψ bound as frozen leaves.
    pub fn forward_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &TokenBatch,
        adapters: Option<&AdapterVars>,
        opts: ForwardOpts<'_>,
    ) -> Result<Var> {
        let psi = self.params.bind(tape, false);
        self.forward_with(tape, &psi, tokens, adapters, opts)
    }

    /// Same as [`forward_on`](Self::forward_on) with Ψ already bound.
    pub fn forward_with(
        &self,
        tape: &mut Tape<'_>,
        psi: &[Var],
        tokens: &TokenBatch,
        adapters: Option<&AdapterVars>,
        opts: ForwardOpts<'_>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (b, t) = (tokens.batch, tokens.seq);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = tape.gather_rows(psi[self.tok_emb], &tokens.ids)?;
        let pos = tape.gather_rows(psi[self.pos_emb], &positions)?;
        let mut h = tape.add(tok, pos)?;
        if let Some(noise) = opts.embed_noise {
            h = tape.add_const(h, noise)?;
        }
        let mut dropout_rng = opts.lora_dropout.map(|(_, s)| ChaCha8Rng::seed_from_u64(s));
        for (l, li) in self.layers.iter().enumerate() {
            let x = tape.layer_norm(h, psi[li.ln1_g], psi[li.ln1_b], LN_EPS)?;
            let mut proj = |tape: &mut Tape<'_>, m: TargetModule, input: Var| -> Result<Var> {
                let base = tape.matmul_nt(input, psi[li.proj(m)])?;
                let Some((a, bv)) = adapters.and_then(|ad| ad.get(l, m.name())) else {
                    return Ok(base);
                };
                let s = adapters.map_or(1.0, |ad| ad.scaling);
                check_pair(tape, m, l, a, bv, cfg.module_dims(m))?;
                let mut inp = input;
                if let (Some((p, _)), Some(rng)) = (opts.lora_dropout, dropout_rng.as_mut()) {
                    let keep = 1.0 - p;
                    let mask: Vec<f64> = (0..tape.value(input).len())
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
                        .collect();
                    inp = tape.mul_const(input, mask)?;
                }
                let xa = tape.matmul_nt(inp, a)?;
                let delta = tape.matmul(xa, bv)?;
                let delta = tape.scale(delta, s);
                tape.add(base, delta)
            };
            let q = proj(tape, TargetModule::QProj, x)?;
            let k = proj(tape, TargetModule::KProj, x)?;
            let v = proj(tape, TargetModule::VProj, x)?;
            let att = tape.causal_attention(q, k, v, b, t, cfg.n_heads)?;
            let o = proj(tape, TargetModule::OProj, att)?;
            h = tape.add(h, o)?;
            let x = tape.layer_norm(h, psi[li.ln2_g], psi[li.ln2_b], LN_EPS)?;
            let f = tape.linear(x, psi[li.w1], Some(psi[li.b1]))?;
            let f = tape.silu(f);
            let f = tape.linear(f, psi[li.w2], Some(psi[li.b2]))?;
            h = tape.add(h, f)?;
        }
        let x = tape.layer_norm(h, psi[self.lnf_g], psi[self.lnf_b], LN_EPS)?;
        tape.matmul_nt(x, psi[self.head])
    }

    /// Logits `[batch, seq, vocab]` without gradient bookkeeping.
    pub fn forward(&self, tokens: &TokenBatch, adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let av = match adapters {
            Some(set) => Some(self.bind_adapters(&mut tape, set, false)?),
            None => None,
        };
        let logits = self.forward_on(&mut tape, tokens, av.as_ref(), ForwardOpts::default())?;
        tape.tensor(logits)
            .reshape([tokens.batch, tokens.seq, self.config.vocab_size])
    }

    /// Binds an adapter set after checking it belongs to this model.
    pub fn bind_adapters<'a>(
        &self,
        tape: &mut Tape<'a>,
        set: &'a AdapterSet,
        trainable: bool,
    ) -> Result<AdapterVars> {
        if set.layout.fingerprint != self.fingerprint() {
            return Err(Error::Fingerprint {
                found: set.layout.fingerprint,
                expected: self.fingerprint(),
            });
        }
        Ok(set.bind(tape, trainable))
    }

    /// Mean masked next-token cross-entropy.
    pub fn sft_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &SftBatch,
        adapters: Option<&AdapterVars>,
        opts: ForwardOpts<'_>,
    ) -> Result<Var> {
        let logits = self.forward_on(tape, &batch.tokens, adapters, opts)?;
        tape.cross_entropy(logits, &batch.targets)
    }

    /// A copy of the model with every adapter pair folded into Ψ.
    pub fn with_merged(&self, set: &AdapterSet) -> Result<BaseLm> {
        if set.layout.fingerprint != self.fingerprint() {
            return Err(Error::Fingerprint {
                found: set.layout.fingerprint,
                expected: self.fingerprint(),
            });
        }
        let mut out = self.clone();
        for (l, m) in set.layout.entries() {
            let tm = TargetModule::parse(&set.layout.modules[m].name)?;
            let idx = self.layers[l].proj(tm);
            let pair: &LoraPair = set.pair(l, m);
            let merged = merge(self.params.get(idx), pair)?;
            *out.params.get_mut(idx) = merged;
        }
        Ok(out)
    }

    /// Greedy decoding from `prompt`, stopping after `stop` or `max_new`
    /// tokens or at `max_seq`. The returned completion excludes the prompt.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        adapters: Option<&AdapterSet>,
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        let v = self.config.vocab_size;
        while out.len() < max_new && seq.len() < self.config.max_seq + 1 {
            let logits = self.forward(&TokenBatch::single(&seq)?, adapters)?;
            let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax(last);
            out.push(next);
            if Some(next) == stop || seq.len() == self.config.max_seq {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.u64(self.fingerprint())?;
        let c = &self.config;
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq] {
            w.usize(v)?;
        }
        w.usize(c.target_modules.len())?;
        for m in &c.target_modules {
            w.str(m.name())?;
        }
        w.usize(self.params.len())?;
        for (name, t) in self.params.iter() {
            w.str(name)?;
            w.tensor(t)?;
        }
        w.u64(self.checksum())?;
        w.finish()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.bytes(&mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected T2LB")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let fp = r.u64("fingerprint")?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize("config")?;
        }
        let n_mod = r.usize("module count")?;
        if n_mod > 4 {
            return Err(Error::Format(format!("{n_mod} target modules")));
        }
        let target_modules = (0..n_mod)
            .map(|_| TargetModule::parse(&r.str("module")?).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let config = BaseLmConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            d_ff: dims[4],
            max_seq: dims[5],
            target_modules,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        if config.fingerprint() != fp {
            return Err(Error::Fingerprint {
                found: fp,
                expected: config.fingerprint(),
            });
        }
        let mut lm = Self::init(config, 0)?;
        let n = r.usize("parameter count")?;
        if n != lm.params.len() {
            return Err(Error::Format(format!("{n} parameter tensors, expected {}", lm.params.len())));
        }
        let mut names = Vec::with_capacity(n);
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            names.push(r.str("parameter name")?);
            tensors.push(r.tensor("parameter")?);
        }
        lm.params.load_from(ParamSet::from_parts(names, tensors))?;
        let sum = r.u64("checksum")?;
        r.expect_eof()?;
        if sum != lm.checksum() {
            return Err(Error::Format("parameter checksum mismatch".into()));
        }
        Ok(lm)
    }
}

fn check_pair(
    tape: &Tape<'_>,
    m: TargetModule,
    layer: usize,
    a: Var,
    b: Var,
    (d_in, d_out): (usize, usize),
) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    let r = sa.first().copied().unwrap_or(0);
    for (found, want) in [(sa, [r, d_in]), (sb, [r, d_out])] {
        if found != want {
            return Err(Error::AdapterShape {
                module: m.name().to_string(),
                layer,
                expected: want.to_vec(),
                found: found.to_vec(),
            });
        }
    }
    Ok(())
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BaseLmConfig {
        BaseLmConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq: 6,
            target_modules: vec![TargetModule::QProj, TargetModule::VProj],
        }
    }

    fn hand_count(c: &BaseLmConfig) -> usize {
        let d = c.d_model;
        let attn = 4 * d * d;
        let ffn = c.d_ff * d + c.d_ff + d * c.d_ff + d;
        let norms = 4 * d;
        let embeds = c.vocab_size * d + c.max_seq * d;
        embeds + c.n_layers * (attn + ffn + norms) + 2 * d + c.vocab_size * d
    }

    #[test]
    fn param_count_matches_allocation() {
        for c in [tiny(), BaseLmConfig::default()] {
            let lm = BaseLm::init(c.clone(), 1).unwrap();
            assert_eq!(lm.param_count(), c.param_count());
            assert_eq!(lm.param_count(), hand_count(&c));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = BaseLm::init(tiny(), 3).unwrap();
        let b = BaseLm::init(tiny(), 3).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), BaseLm::init(tiny(), 4).unwrap().checksum());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(matches!(BaseLm::init(c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.target_modules.clear();
        assert!(BaseLm::init(c, 0).is_err());
        let mut c = tiny();
        c.target_modules.push(TargetModule::QProj);
        assert!(BaseLm::init(c, 0).is_err());
    }

    #[test]
    fn output_shape_and_input_checks() {
        let lm = BaseLm::init(tiny(), 0).unwrap();
        let batch = TokenBatch::new(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(lm.forward(&batch, None).unwrap().shape(), [2, 3, 11]);
        let bad = TokenBatch::single(&[1, 11]).unwrap();
        assert!(matches!(lm.forward(&bad, None), Err(Error::Index { .. })));
        let long = TokenBatch::single(&[1; 7]).unwrap();
        assert!(lm.forward(&long, None).is_err());
    }

    #[test]
    fn zero_b_adapter_leaves_logits_bitwise_equal() {
        let lm = BaseLm::init(tiny(), 0).unwrap();
        let set = AdapterSet::init(&lm.lora_layout(2).unwrap(), 7).unwrap();
        let batch = TokenBatch::new(&[vec![1, 2, 3, 4], vec![9, 8, 7, 6]]).unwrap();
        let plain = lm.forward(&batch, None).unwrap();
        let adapted = lm.forward(&batch, Some(&set)).unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn merged_forward_matches_adapter_forward() {
        let lm = BaseLm::init(tiny(), 0).unwrap();
        let layout = lm.lora_layout(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flat: Vec<f64> = (0..layout.param_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
        let set = AdapterSet::from_flat(&layout, &flat).unwrap();
        let batch = TokenBatch::new(&[vec![1, 2, 3, 4, 5]]).unwrap();
        let adapted = lm.forward(&batch, Some(&set)).unwrap();
        let merged = lm.with_merged(&set).unwrap().forward(&batch, None).unwrap();
        assert!(adapted.max_abs_diff(&merged) < 1e-10);
        assert!(adapted.max_abs_diff(&lm.forward(&batch, None).unwrap()) > 1e-6);
    }

    #[test]
    fn adapter_shape_errors_name_module_and_layer() {
        let lm = BaseLm::init(tiny(), 0).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 8]));
        let b = tape.constant(Tensor::zeros([2, 5]));
        let vars = AdapterVars {
            module_names: vec!["q_proj".into()],
            scaling: 1.0,
            pairs: vec![(a, b), (a, b)],
        };
        let batch = TokenBatch::single(&[1, 2]).unwrap();
        let err = lm
            .forward_on(&mut tape, &batch, Some(&vars), ForwardOpts::default())
            .unwrap_err();
        match err {
            Error::AdapterShape { module, layer, .. } => {
                assert_eq!(module, "q_proj");
                assert_eq!(layer, 0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let lm = BaseLm::init(tiny(), 2).unwrap();
        let a = lm.forward(&TokenBatch::single(&[1, 2, 3, 4, 5]).unwrap(), None).unwrap();
        let b = lm.forward(&TokenBatch::single(&[1, 2, 3, 9, 0]).unwrap(), None).unwrap();
        assert_eq!(a.data()[..3 * 11], b.data()[..3 * 11]);
        assert_ne!(a.data()[3 * 11..], b.data()[3 * 11..]);
    }

    #[test]
    fn sft_loss_is_uniform_for_flat_head() {
        let mut lm = BaseLm::init(tiny(), 0).unwrap();
        let head = lm.head;
        lm.params.get_mut(head).data_mut().fill(0.0);
        let batch = SftBatch::from_pairs(&[(vec![1, 2], vec![3, 4])], 0).unwrap();
        let mut tape = Tape::new();
        let loss = lm.sft_loss(&mut tape, &batch, None, ForwardOpts::default()).unwrap();
        assert!((tape.value(loss)[0] - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sft_batch_masks_prompt_and_padding() {
        let b = SftBatch::from_pairs(&[(vec![1, 2], vec![3, 4]), (vec![5], vec![6])], 0).unwrap();
        assert_eq!(b.tokens.ids, vec![1, 2, 3, 5, 0, 0]);
        assert_eq!(b.targets, vec![None, Some(3), Some(4), Some(6), None, None]);
        assert_eq!(b.lengths, vec![3, 1]);
    }

    #[test]
    fn sft_gradients_skip_psi() {
        let lm = BaseLm::init(tiny(), 0).unwrap();
        let set = AdapterSet::init(&lm.lora_layout(2).unwrap(), 1).unwrap();
        let batch = SftBatch::from_pairs(&[(vec![1, 2], vec![3, 4])], 0).unwrap();
        let mut tape = Tape::new();
        let psi = lm.params.bind(&mut tape, false);
        let av = set.bind(&mut tape, true);
        let logits = lm
            .forward_with(&mut tape, &psi, &batch.tokens, Some(&av), ForwardOpts::default())
            .unwrap();
        let loss = tape.cross_entropy(logits, &batch.targets).unwrap();
        tape.backward(loss).unwrap();
        assert!(psi.iter().all(|&v| tape.grad(v).is_none()));
        assert!(av.pairs.iter().any(|&(_, b)| tape.grad(b).is_some_and(|g| g.norm() > 0.0)));
    }

    #[test]
    fn greedy_decode_matches_forward_argmax() {
        let lm = BaseLm::init(tiny(), 4).unwrap();
        let out = lm.generate_greedy(&[1, 2], None, 3, None).unwrap();
        assert_eq!(out.len(), 3);
        let mut seq = vec![1, 2];
        for &tok in &out {
            let l = lm.forward(&TokenBatch::single(&seq).unwrap(), None).unwrap();
            assert_eq!(argmax(&l.data()[(seq.len() - 1) * 11..seq.len() * 11]), tok);
            seq.push(tok);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lm = BaseLm::init(tiny(), 9).unwrap();
        let path = dir.path().join("base.t2lb");
        lm.save(&path).unwrap();
        assert_eq!(BaseLm::load(&path).unwrap(), lm);
    }
}
