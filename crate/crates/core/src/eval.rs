//! Accuracy, derived metrics, weight-space similarity analysis, activation
//! export and analytic FLOPs.

use std::fmt::Write as _;

use crate::base_lm::{argmax, BaseLm, TokenBatch};
use crate::error::{Error, Result};
use crate::hypernet::Hypernet;
use crate::lora::{similarity_ab, similarity_dw, AdapterLibrary, AdapterSet, LoraPair};
use crate::task_embed::TaskInput;
use crate::taskgen::{Prefix, ToyTask, EOS};
use crate::tensor::cosine;

/// Greedy completions for `prompts`, each cut after `stop` if emitted.
/// Prompts of equal length share forwards; results match
/// [`BaseLm::generate_greedy`] row for row.
pub fn greedy_batch(
    lm: &BaseLm,
    prompts: &[Vec<usize>],
    adapters: Option<&AdapterSet>,
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); prompts.len()];
    let mut lens: Vec<usize> = prompts.iter().map(Vec::len).collect();
    lens.sort_unstable();
    lens.dedup();
    let max_seq = lm.config().max_seq;
    let v = lm.config().vocab_size;
    for plen in lens {
        if plen == 0 {
            return Err(Error::Contract("empty prompt".into()));
        }
        let ids: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].len() == plen).collect();
        let mut seqs: Vec<Vec<usize>> = ids.iter().map(|&i| prompts[i].clone()).collect();
        let mut done = vec![false; ids.len()];
        let steps = max_new.min((max_seq + 1).saturating_sub(plen));
        for _ in 0..steps {
            let logits = lm.forward(&TokenBatch::new(&seqs)?, adapters)?;
            let t = seqs[0].len();
            for (j, s) in seqs.iter_mut().enumerate() {
                let row = &logits.data()[(j * t + t - 1) * v..(j * t + t) * v];
                let next = argmax(row);
                if !done[j] {
                    out[ids[j]].push(next);
                    done[j] = Some(next) == stop;
                }
                s.push(next);
            }
            if done.iter().all(|&d| d) || t == max_seq {
                break;
            }
        }
    }
    Ok(out)
}

/// Exact-match accuracy of greedy completions on the test split, prompts
/// carrying `prefix`.
pub fn evaluate_with(lm: &BaseLm, adapters: Option<&AdapterSet>, task: &ToyTask, prefix: Prefix) -> Result<f64> {
    if task.test.is_empty() {
        return Err(Error::Contract(format!("task {} has an empty test split", task.id)));
    }
    let pairs = task.encode_all(&task.test, prefix);
    let prompts: Vec<Vec<usize>> = pairs.iter().map(|(x, _)| x.clone()).collect();
    let max_new = pairs.iter().map(|(_, y)| y.len()).max().unwrap_or(1);
    let outs = greedy_batch(lm, &prompts, adapters, max_new, Some(EOS))?;
    let hits = outs.iter().zip(&pairs).filter(|(o, (_, y))| *o == y).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Exact-match accuracy with the null prefix, the adapter-driven setting.
pub fn evaluate(lm: &BaseLm, adapters: Option<&AdapterSet>, task: &ToyTask) -> Result<f64> {
    evaluate_with(lm, adapters, task, Prefix::Null)
}

/// `(acc − base)/(oracle − base)`; `degenerate` marks a denominator below
/// 0.01.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelPerf {
    pub value: f64,
    pub degenerate: bool,
}

pub fn relative_performance(acc: f64, base_acc: f64, oracle_acc: f64) -> RelPerf {
    let den = oracle_acc - base_acc;
    RelPerf {
        value: (acc - base_acc) / den,
        degenerate: den < 0.01,
    }
}

pub fn compression_ratio(library: &AdapterLibrary, net: &Hypernet) -> f64 {
    library.total_params() as f64 / net.param_count() as f64
}

/// Elementwise mean of every `A` and `B`.
pub fn average_lora(adapters: &[AdapterSet]) -> Result<AdapterSet> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::Contract("cannot average an empty library".into()))?;
    for a in &adapters[1..] {
        if a.layout.fingerprint != first.layout.fingerprint {
            return Err(Error::Fingerprint {
                found: a.layout.fingerprint,
                expected: first.layout.fingerprint,
            });
        }
        if a.layout != first.layout {
            return Err(Error::Contract("adapter layouts differ".into()));
        }
    }
    let n = adapters.len() as f64;
    let pairs = (0..first.pairs.len())
        .map(|i| {
            let mut a = first.pairs[i].a.clone();
            let mut b = first.pairs[i].b.clone();
            for other in &adapters[1..] {
                a.data_mut().iter_mut().zip(other.pairs[i].a.data()).for_each(|(x, y)| *x += y);
                b.data_mut().iter_mut().zip(other.pairs[i].b.data()).for_each(|(x, y)| *x += y);
            }
            a.data_mut().iter_mut().for_each(|x| *x /= n);
            b.data_mut().iter_mut().for_each(|x| *x /= n);
            LoraPair {
                a,
                b,
                scaling: first.pairs[i].scaling,
            }
        })
        .collect();
    Ok(AdapterSet::new(first.layout.clone(), pairs)?.with_meta("average", "element-wise average"))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "pearson",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation("fewer than 3 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// An adapter compared against the library.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub id: String,
    pub adapter: AdapterSet,
    pub embedding: Vec<f64>,
    pub rel_perf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRow {
    pub benchmark: String,
    pub library: String,
    pub embed_cos: f64,
    pub ab_cos: f64,
    pub dw_cos: f64,
    pub rel_perf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStudy {
    pub rows: Vec<SimilarityRow>,
    /// Per benchmark: `(id, r(embed, A/B), r(embed, ΔW))`.
    pub correlations: Vec<(String, f64, f64)>,
}

impl SimilarityStudy {
    pub fn render(&self) -> String {
        let mut s = String::from("benchmark\tlibrary\tembed_cos\tab_cos\tdw_cos\trel_perf\n");
        for r in &self.rows {
            let rp = r.rel_perf.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{rp}",
                r.benchmark, r.library, r.embed_cos, r.ab_cos, r.dw_cos
            );
        }
        for (id, ab, dw) in &self.correlations {
            let _ = writeln!(s, "# pearson\t{id}\tembed~ab={ab:.6}\tembed~dw={dw:.6}");
        }
        s
    }
}

/// Cosines in embedding, `A`/`B` and `ΔW` space between each benchmark and
/// each library member. `embeddings` must list the library's task ids in
/// library order.
pub fn similarity_study(
    library: &AdapterLibrary,
    embeddings: &[(String, Vec<f64>)],
    benchmarks: &[Benchmark],
) -> Result<SimilarityStudy> {
    if embeddings.len() != library.len() {
        return Err(Error::UnknownId(format!(
            "{} embeddings for {} library adapters",
            embeddings.len(),
            library.len()
        )));
    }
    for ((id, _), a) in embeddings.iter().zip(&library.adapters) {
        if *id != a.task_id {
            return Err(Error::UnknownId(format!(
                "embedding {id:?} aligned with adapter {:?}",
                a.task_id
            )));
        }
    }
    let mut rows = Vec::new();
    let mut correlations = Vec::new();
    for b in benchmarks {
        let (mut e, mut ab, mut dw) = (Vec::new(), Vec::new(), Vec::new());
        for ((id, emb), a) in embeddings.iter().zip(&library.adapters) {
            let row = SimilarityRow {
                benchmark: b.id.clone(),
                library: id.clone(),
                embed_cos: cosine(&b.embedding, emb)?,
                ab_cos: similarity_ab(&b.adapter, a)?,
                dw_cos: similarity_dw(&b.adapter, a)?,
                rel_perf: b.rel_perf,
            };
            e.push(row.embed_cos);
            ab.push(row.ab_cos);
            dw.push(row.dw_cos);
            rows.push(row);
        }
        correlations.push((b.id.clone(), pearson(&e, &ab)?, pearson(&e, &dw)?));
    }
    Ok(SimilarityStudy { rows, correlations })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRow {
    pub task: String,
    pub description: usize,
    pub task_enc: Vec<f64>,
    pub last_block: Vec<f64>,
}

/// One row per `(task id, description index, input)`.
pub fn export_activations(net: &Hypernet, items: &[(String, usize, TaskInput)]) -> Result<Vec<ActivationRow>> {
    if items.is_empty() {
        return Err(Error::Contract("no descriptions to export".into()));
    }
    let inputs: Vec<TaskInput> = items.iter().map(|(_, _, t)| t.clone()).collect();
    let acts = net.activations(&inputs)?;
    Ok(items
        .iter()
        .zip(acts)
        .map(|((task, d, _), (enc, last))| ActivationRow {
            task: task.clone(),
            description: *d,
            task_enc: enc,
            last_block: last,
        })
        .collect())
}

pub fn render_activations(rows: &[ActivationRow]) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(",");
    rows.iter()
        .map(|r| format!("{}\t{}\t{}\t{}\n", r.task, r.description, join(&r.task_enc), join(&r.last_block)))
        .collect()
}

/// Mean Euclidean distance between rows of the same task and between rows of
/// different tasks, using `pick` to choose the vector.
pub fn intra_inter_distance(rows: &[ActivationRow], pick: impl Fn(&ActivationRow) -> &[f64]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = pick(&rows[i])
                .iter()
                .zip(pick(&rows[j]))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if rows[i].task == rows[j].task {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

/// One accuracy measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub task: String,
    pub tag: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub runtime_s: f64,
}

impl EvalReport {
    pub fn push(&mut self, task: &str, tag: &str, seed: u64, accuracy: f64) {
        self.entries.push(EvalEntry {
            task: task.into(),
            tag: tag.into(),
            seed,
            accuracy,
        });
    }

    /// Mean accuracy over entries with `tag`.
    pub fn mean(&self, tag: &str) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.tag == tag).map(|e| e.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn get(&self, task: &str, tag: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.task == task && e.tag == tag)
            .map(|e| e.accuracy)
    }

    /// TAB-separated entries; the runtime goes on a trailing comment line.
    pub fn render(&self) -> String {
        let mut s = self.render_entries();
        let _ = writeln!(s, "# runtime_s={:.3}", self.runtime_s);
        s
    }

    pub fn render_entries(&self) -> String {
        let mut s = String::from("task\ttag\tseed\taccuracy\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.17}", e.task, e.tag, e.seed, e.accuracy);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rep = EvalReport::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if let Some(rt) = line.strip_prefix("# runtime_s=") {
                rep.runtime_s = rt.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: "bad runtime".into(),
                })?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("task\t")) {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| Error::Parse {
                line: line_no,
                msg: msg.into(),
            };
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            rep.entries.push(EvalEntry {
                task: f[0].into(),
                tag: f[1].into(),
                seed: f[2].parse().map_err(|_| bad("bad seed"))?,
                accuracy: f[3].parse().map_err(|_| bad("bad accuracy"))?,
            });
        }
        Ok(rep)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionPoint {
    pub n_tasks: usize,
    pub compression_ratio: f64,
    pub raw_l1: f64,
    pub rel_perf: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompressionCurve {
    pub points: Vec<CompressionPoint>,
}

impl CompressionCurve {
    /// Inserts keeping points ordered by task count.
    pub fn insert(&mut self, p: CompressionPoint) {
        let at = self.points.partition_point(|q| q.n_tasks <= p.n_tasks);
        self.points.insert(at, p);
    }

    /// True if relative performance never rises by more than `band` when the
    /// error grows.
    pub fn is_monotone(&self, band: f64) -> bool {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.raw_l1.total_cmp(&b.raw_l1));
        pts.windows(2).all(|w| w[1].rel_perf <= w[0].rel_perf + band)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("n_tasks\tcompression_ratio\traw_l1\trel_perf\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6e}\t{:.6}",
                p.n_tasks, p.compression_ratio, p.raw_l1, p.rel_perf
            );
        }
        s
    }
}

// -------------------------------------------------------------------------
// FLOPs
// -------------------------------------------------------------------------

/// Self-attention `8SH² + 4HS²` plus feed-forward `16SH²`.
pub fn flops_block(s: u64, h: u64) -> u64 {
    24 * s * h * h + 4 * h * s * s
}

pub fn flops_model(s: u64, h: u64, layers: u64) -> u64 {
    layers * flops_block(s, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmDims {
    pub seq: u64,
    pub hidden: u64,
    pub layers: u64,
}

impl LmDims {
    pub fn flops(&self) -> u64 {
        flops_model(self.seq, self.hidden, self.layers)
    }
}

/// Hypernet dimensions for one descriptor row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyperDims {
    pub d_task: u64,
    pub d_task_enc: u64,
    pub width: u64,
    pub d_hidden: u64,
    /// Linear layers in the mixer and MLP blocks.
    pub n_linear: u64,
    pub d_out: u64,
    pub head_out: u64,
}

impl HyperDims {
    pub fn flops(&self) -> u64 {
        2 * self.d_task * self.d_task_enc
            + self.n_linear * 2 * self.width * self.d_hidden
            + 2 * self.d_out * self.head_out
    }
}

/// The task-encoder, hypernet and adapted-model costs of one instance.
pub fn flops_t2l_pipeline(encoder: LmDims, hyper: HyperDims, lm: LmDims) -> u64 {
    encoder.flops() + hyper.flops() + lm.flops()
}

/// Base-model cost with `shots_len` tokens of demonstrations prepended.
pub fn flops_icl(lm: LmDims, shots_len: u64) -> u64 {
    LmDims {
        seq: lm.seq + shots_len,
        ..lm
    }
    .flops()
}

/// Reference dimensions: a 7B-class decoder, a large sentence encoder and
/// the default hypernet.
pub mod preset {
    use super::{HyperDims, LmDims};

    pub const LM: LmDims = LmDims {
        seq: 64,
        hidden: 4096,
        layers: 32,
    };
    pub const SHOTS_LEN: u64 = 256;
    pub const ENCODER: LmDims = LmDims {
        seq: 48,
        hidden: 1024,
        layers: 24,
    };
    pub const HYPER: HyperDims = HyperDims {
        d_task: 1024,
        d_task_enc: 64,
        width: 128,
        d_hidden: 512,
        n_linear: 8,
        d_out: 512,
        head_out: 4096,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsReport {
    pub base: u64,
    pub icl: u64,
    pub encoder: u64,
    pub hypernet: u64,
    pub pipeline: u64,
}

impl FlopsReport {
    pub fn compute(encoder: LmDims, hyper: HyperDims, lm: LmDims, shots_len: u64) -> Self {
        Self {
            base: lm.flops(),
            icl: flops_icl(lm, shots_len),
            encoder: encoder.flops(),
            hypernet: hyper.flops(),
            pipeline: flops_t2l_pipeline(encoder, hyper, lm),
        }
    }

    pub fn paper() -> Self {
        Self::compute(preset::ENCODER, preset::HYPER, preset::LM, preset::SHOTS_LEN)
    }

    pub fn icl_ratio(&self) -> f64 {
        self.icl as f64 / self.pipeline as f64
    }

    /// Pipeline TFLOPs summed from display-rounded parts: encoder and base
    /// model to three decimals, hypernet to six.
    pub fn pipeline_tflops_rounded(&self) -> String {
        let round = |x: u64, unit: u64| (x + unit / 2) / unit * (unit / 1_000_000);
        let sum = round(self.encoder, 1_000_000_000)
            + round(self.hypernet, 1_000_000)
            + round(self.base, 1_000_000_000);
        format!("{}.{:06}", sum / 1_000_000, sum % 1_000_000)
    }

    pub fn render(&self) -> String {
        let t = |x: u64| x as f64 / 1e12;
        format!(
            "base\t{}\t{:.6} TFLOPs\n\
             icl\t{}\t{:.6} TFLOPs\n\
             encoder\t{}\t{:.6} TFLOPs\n\
             hypernet\t{}\t{:.9} TFLOPs\n\
             pipeline\t{}\t{} TFLOPs (exact {:.9})\n\
             icl_over_pipeline\t{:.4}\n",
            self.base,
            t(self.base),
            self.icl,
            t(self.icl),
            self.encoder,
            t(self.encoder),
            self.hypernet,
            t(self.hypernet),
            self.pipeline,
            self.pipeline_tflops_rounded(),
            t(self.pipeline),
            self.icl_ratio()
        )
    }
}
