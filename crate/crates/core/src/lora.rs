//! LoRA adapters: layout, initialization, merging, similarity, and the
//! `T2LA` binary container.
//!
//! A pair stores `A: [r, d_in]` and `B: [r, d_out]`; the weight update is
//! `ΔW = s · Bᵀ A` with shape `[d_out, d_in]`. Entries of an [`AdapterSet`]
//! are kept in canonical order: layers ascending, then target-module order.
//! Flattening walks that order and emits `A` before `B`, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

pub const ADAPTER_MAGIC: &[u8; 4] = b"T2LA";
pub const ADAPTER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleShape {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl ModuleShape {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }

    pub fn d_max(&self) -> usize {
        self.d_in.max(self.d_out)
    }
}

/// Shape of a full adapter set: which modules in how many layers, at what
/// rank, bound to which base-model fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLayout {
    pub n_layers: usize,
    pub modules: Vec<ModuleShape>,
    pub rank: usize,
    pub alpha: f64,
    pub fingerprint: u64,
}

impl LoraLayout {
    /// `alpha` defaults to `2·rank`, which with rank-stabilized scaling gives
    /// `s = α/√r` (16/√8 at rank 8).
    pub fn new(
        n_layers: usize,
        modules: Vec<ModuleShape>,
        rank: usize,
        alpha: Option<f64>,
        fingerprint: u64,
    ) -> Result<Self> {
        let layout = Self {
            n_layers,
            modules,
            rank,
            alpha: alpha.unwrap_or(2.0 * rank as f64),
            fingerprint,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if self.n_layers == 0 || self.modules.is_empty() {
            return Err(Error::Config("LoRA layout needs layers and modules".into()));
        }
        for (i, m) in self.modules.iter().enumerate() {
            if self.rank >= m.d_in.min(m.d_out) {
                return Err(Error::Config(format!(
                    "rank {} must be below min(d_in, d_out) = {} for {}",
                    self.rank,
                    m.d_in.min(m.d_out),
                    m.name
                )));
            }
            if self.modules[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate target module {}", m.name)));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / (self.rank as f64).sqrt()
    }

    pub fn n_entries(&self) -> usize {
        self.n_layers * self.modules.len()
    }

    pub fn entry_index(&self, layer: usize, module: usize) -> usize {
        layer * self.modules.len() + module
    }

    pub fn module_index(&self, name: &str) -> Option<usize> {
        self.modules.iter().position(|m| m.name == name)
    }

    /// Canonical `(layer, module index)` walk.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_layers).flat_map(move |l| (0..self.modules.len()).map(move |m| (l, m)))
    }

    /// Exact adapter parameter count, `Σ_m r·(d_in + d_out)·L`.
    pub fn param_count(&self) -> usize {
        self.modules
            .iter()
            .map(|m| self.rank * (m.d_in + m.d_out) * self.n_layers)
            .sum()
    }

    /// Number of `ΔW` scalars, `Σ_m d_in·d_out·L`.
    pub fn delta_w_count(&self) -> usize {
        self.modules.iter().map(|m| m.d_in * m.d_out * self.n_layers).sum()
    }
}

/// Exact LoRA parameter count for a layout.
pub fn param_count(layout: &LoraLayout) -> Result<usize> {
    layout.validate()?;
    Ok(layout.param_count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `s · Bᵀ A`, shape `[d_out, d_in]`.
    pub fn delta_w(&self) -> Tensor {
        let bt = self.b.transpose().expect("B is a matrix");
        bt.matmul(&self.a).expect("pair ranks agree").scaled(self.scaling)
    }
}

/// `W0 + s·BᵀA`.
pub fn merge(w0: &Tensor, pair: &LoraPair) -> Result<Tensor> {
    let dw = pair.delta_w();
    if w0.shape() != dw.shape() {
        return Err(Error::Shape {
            op: "merge",
            lhs: w0.shape().to_vec(),
            rhs: dw.shape().to_vec(),
        });
    }
    w0.add(&dw)
}

/// A full set of adapters for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub layout: LoraLayout,
    pub pairs: Vec<LoraPair>,
    pub task_id: String,
    pub description: String,
}

impl AdapterSet {
    pub fn new(layout: LoraLayout, pairs: Vec<LoraPair>) -> Result<Self> {
        let set = Self {
            layout,
            pairs,
            task_id: String::new(),
            description: String::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_meta(mut self, task_id: impl Into<String>, description: impl Into<String>) -> Self {
        self.task_id = task_id.into();
        self.description = description.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.pairs.len() != self.layout.n_entries() {
            return Err(Error::Contract(format!(
                "adapter set has {} pairs, layout needs {}",
                self.pairs.len(),
                self.layout.n_entries()
            )));
        }
        let s = self.layout.scaling();
        for ((l, m), p) in self.layout.entries().zip(&self.pairs) {
            let ms = &self.layout.modules[m];
            let want_a = [self.layout.rank, ms.d_in];
            let want_b = [self.layout.rank, ms.d_out];
            for (found, want) in [(p.a.shape(), want_a), (p.b.shape(), want_b)] {
                if found != want {
                    return Err(Error::AdapterShape {
                        module: ms.name.clone(),
                        layer: l,
                        expected: want.to_vec(),
                        found: found.to_vec(),
                    });
                }
            }
            if p.scaling != s {
                return Err(Error::Contract("pairs must share the layout scaling".into()));
            }
        }
        Ok(())
    }

    /// `A ~ U(−1/d_in, 1/d_in)`, `B = 0`.
    pub fn init(layout: &LoraLayout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = layout.scaling();
        let pairs = layout
            .entries()
            .map(|(_, m)| {
                let ms = &layout.modules[m];
                LoraPair {
                    a: Tensor::uniform([layout.rank, ms.d_in], 1.0 / ms.d_in as f64, &mut rng),
                    b: Tensor::zeros([layout.rank, ms.d_out]),
                    scaling: s,
                }
            })
            .collect();
        Self::new(layout.clone(), pairs)
    }

    pub fn zeros(layout: &LoraLayout) -> Result<Self> {
        let flat = vec![0.0; layout.param_count()];
        Self::from_flat(layout, &flat)
    }

    pub fn pair(&self, layer: usize, module: usize) -> &LoraPair {
        &self.pairs[self.layout.entry_index(layer, module)]
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    /// Canonical flat parameter vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.pairs {
            out.extend_from_slice(p.a.data());
            out.extend_from_slice(p.b.data());
        }
        out
    }

    pub fn from_flat(layout: &LoraLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.param_count() {
            return Err(Error::Shape {
                op: "adapter from_flat",
                lhs: vec![layout.param_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        let s = layout.scaling();
        let r = layout.rank;
        let mut pairs = Vec::with_capacity(layout.n_entries());
        for (_, m) in layout.entries() {
            let ms = &layout.modules[m];
            let a = Tensor::new([r, ms.d_in], flat[off..off + r * ms.d_in].to_vec())?;
            off += r * ms.d_in;
            let b = Tensor::new([r, ms.d_out], flat[off..off + r * ms.d_out].to_vec())?;
            off += r * ms.d_out;
            pairs.push(LoraPair { a, b, scaling: s });
        }
        Self::new(layout.clone(), pairs)
    }

    /// Concatenated flattened `ΔW` matrices in canonical order.
    pub fn flatten_delta_w(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.delta_w_count());
        for p in &self.pairs {
            out.extend_from_slice(p.delta_w().data());
        }
        out
    }

    /// Puts every pair on the tape.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> AdapterVars {
        AdapterVars {
            module_names: self.layout.modules.iter().map(|m| m.name.clone()).collect(),
            scaling: self.layout.scaling(),
            pairs: self
                .pairs
                .iter()
                .map(|p| (tape.leaf(&p.a, trainable), tape.leaf(&p.b, trainable)))
                .collect(),
        }
    }

    fn check_compatible(&self, other: &AdapterSet) -> Result<()> {
        if self.layout.fingerprint != other.layout.fingerprint {
            return Err(Error::Fingerprint {
                found: other.layout.fingerprint,
                expected: self.layout.fingerprint,
            });
        }
        if self.layout != other.layout {
            return Err(Error::Contract("adapter layouts differ".into()));
        }
        Ok(())
    }
}

/// Adapter pairs living on a tape, in canonical order.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub module_names: Vec<String>,
    pub scaling: f64,
    pub pairs: Vec<(Var, Var)>,
}

impl AdapterVars {
    pub fn get(&self, layer: usize, module: &str) -> Option<(Var, Var)> {
        let m = self.module_names.iter().position(|n| n == module)?;
        self.pairs.get(layer * self.module_names.len() + m).copied()
    }

    /// Vars in canonical flatten order (A, B, A, B, …).
    pub fn flat_vars(&self) -> Vec<Var> {
        self.pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// Cosine between concatenated flattened `A`/`B` matrices.
pub fn similarity_ab(a: &AdapterSet, b: &AdapterSet) -> Result<f64> {
    a.check_compatible(b)?;
    cosine(&a.flatten(), &b.flatten())
}

/// Cosine between concatenated flattened `ΔW` matrices.
pub fn similarity_dw(a: &AdapterSet, b: &AdapterSet) -> Result<f64> {
    a.check_compatible(b)?;
    cosine(&a.flatten_delta_w(), &b.flatten_delta_w())
}

// -------------------------------------------------------------------------
// T2LA container
// -------------------------------------------------------------------------

pub(crate) fn write_layout<W: std::io::Write>(w: &mut Writer<W>, layout: &LoraLayout) -> Result<()> {
    w.u64(layout.fingerprint)?;
    w.usize(layout.rank)?;
    w.f64(layout.scaling())?;
    w.f64(layout.alpha)?;
    w.usize(layout.n_layers)?;
    w.usize(layout.modules.len())?;
    for m in &layout.modules {
        w.str(&m.name)?;
        w.usize(m.d_in)?;
        w.usize(m.d_out)?;
    }
    Ok(())
}

pub(crate) fn read_layout<R: std::io::Read>(r: &mut Reader<R>) -> Result<LoraLayout> {
    let fingerprint = r.u64("fingerprint")?;
    let rank = r.usize("rank")?;
    let scaling = r.f64("scaling")?;
    let alpha = r.f64("alpha")?;
    let n_layers = r.usize("layer count")?;
    let n_modules = r.usize("module count")?;
    if n_modules > 64 {
        return Err(Error::Format(format!("{n_modules} modules")));
    }
    let modules = (0..n_modules)
        .map(|_| {
            Ok(ModuleShape {
                name: r.str("module name")?,
                d_in: r.usize("module d_in")?,
                d_out: r.usize("module d_out")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = LoraLayout {
        n_layers,
        modules,
        rank,
        alpha,
        fingerprint,
    };
    layout
        .validate()
        .map_err(|e| Error::Format(format!("stored layout: {e}")))?;
    if layout.scaling().to_bits() != scaling.to_bits() {
        return Err(Error::Format("stored scaling disagrees with alpha and rank".into()));
    }
    Ok(layout)
}

/// Writes `set` as a `T2LA` file.
pub fn save_adapter(set: &AdapterSet, path: impl AsRef<Path>) -> Result<()> {
    set.validate()?;
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(ADAPTER_MAGIC)?;
    w.u32(ADAPTER_VERSION)?;
    write_layout(&mut w, &set.layout)?;
    w.str(&set.task_id)?;
    w.str(&set.description)?;
    // entry table: (layer, module, offset, count) in f64 units
    w.usize(set.pairs.len())?;
    let mut off = 0u64;
    for ((l, m), p) in set.layout.entries().zip(&set.pairs) {
        let count = (p.a.numel() + p.b.numel()) as u64;
        w.usize(l)?;
        w.usize(m)?;
        w.u64(off)?;
        w.u64(count)?;
        off += count;
    }
    for p in &set.pairs {
        w.f64s(p.a.data())?;
        w.f64s(p.b.data())?;
    }
    w.finish()?;
    Ok(())
}

/// Reads a `T2LA` file.
pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterSet> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "magic")?;
    if &magic != ADAPTER_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected T2LA")));
    }
    let version = r.u32("version")?;
    if version != ADAPTER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: ADAPTER_VERSION,
        });
    }
    let layout = read_layout(&mut r)?;
    let task_id = r.str("task id")?;
    let description = r.str("description")?;
    let n = r.usize("entry count")?;
    if n != layout.n_entries() {
        return Err(Error::Format(format!(
            "entry table lists {n} entries, layout has {}",
            layout.n_entries()
        )));
    }
    let mut off = 0u64;
    for (l, m) in layout.entries() {
        let (fl, fm) = (r.usize("entry layer")?, r.usize("entry module")?);
        let (fo, fc) = (r.u64("entry offset")?, r.u64("entry count")?);
        let ms = &layout.modules[m];
        let count = (layout.rank * (ms.d_in + ms.d_out)) as u64;
        if (fl, fm, fo, fc) != (l, m, off, count) {
            return Err(Error::Format(format!("entry table out of order at ({l}, {m})")));
        }
        off += count;
    }
    let flat = r.f64s(layout.param_count(), "adapter payload")?;
    r.expect_eof()?;
    Ok(AdapterSet::from_flat(&layout, &flat)?.with_meta(task_id, description))
}

/// Reads a `T2LA` file and checks it was made for the given base model.
pub fn load_adapter_for(path: impl AsRef<Path>, fingerprint: u64) -> Result<AdapterSet> {
    let set = load_adapter(path)?;
    if set.layout.fingerprint != fingerprint {
        return Err(Error::Fingerprint {
            found: set.layout.fingerprint,
            expected: fingerprint,
        });
    }
    Ok(set)
}

// -------------------------------------------------------------------------
// libraries
// -------------------------------------------------------------------------

/// Per-element mean and standard deviation over a library's flattened
/// adapters. Elements whose spread is below `STD_FLOOR` use a unit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScoreStats {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn compute(flats: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = flats.first() else {
            return Err(Error::Contract("statistics need at least one adapter".into()));
        };
        let n = first.len();
        if flats.iter().any(|f| f.len() != n) {
            return Err(Error::Contract("adapters differ in length".into()));
        }
        let k = flats.len() as f64;
        let mut mean = vec![0.0; n];
        for f in flats {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mut var = vec![0.0; n];
        for f in flats {
            for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / k).sqrt();
                if s < Self::STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn normalize(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }
}

/// An ordered collection of adapters sharing one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLibrary {
    pub adapters: Vec<AdapterSet>,
    pub stats: ZScoreStats,
}

impl AdapterLibrary {
    pub fn new(adapters: Vec<AdapterSet>) -> Result<Self> {
        let Some(first) = adapters.first() else {
            return Err(Error::Contract("adapter library is empty".into()));
        };
        for a in &adapters[1..] {
            first.check_compatible(a)?;
        }
        let flats: Vec<Vec<f64>> = adapters.iter().map(AdapterSet::flatten).collect();
        let stats = ZScoreStats::compute(&flats)?;
        Ok(Self { adapters, stats })
    }

    pub fn layout(&self) -> &LoraLayout {
        &self.adapters[0].layout
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.adapters.iter().map(|a| a.task_id.as_str()).collect()
    }

    pub fn find(&self, task_id: &str) -> Option<&AdapterSet> {
        self.adapters.iter().find(|a| a.task_id == task_id)
    }

    pub fn total_params(&self) -> usize {
        self.adapters.iter().map(AdapterSet::param_count).sum()
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub task_id: String,
    pub description: String,
}

/// Parses a library manifest: `path<TAB>task_id<TAB>description` per line;
/// `#` starts a comment line. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(p), Some(id)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected path<TAB>task_id[<TAB>description]".into(),
            });
        };
        let desc = parts.next().unwrap_or("");
        let path = PathBuf::from(p);
        out.push(ManifestEntry {
            path: if path.is_absolute() { path } else { base.join(path) },
            task_id: id.to_string(),
            description: desc.to_string(),
        });
    }
    Ok(out)
}

pub fn load_library(manifest: impl AsRef<Path>) -> Result<AdapterLibrary> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let adapters = parse_manifest(&text, base)?
        .into_iter()
        .map(|e| {
            let mut a = load_adapter(&e.path)?;
            a.task_id = e.task_id;
            if !e.description.is_empty() {
                a.description = e.description;
            }
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?;
    AdapterLibrary::new(adapters)
}

/// Writes each adapter as `<task_id>.t2la` under `dir` plus `library.manifest`.
pub fn save_library(lib: &AdapterLibrary, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("# path\ttask_id\tdescription\n");
    for a in &lib.adapters {
        let file = format!("{}.t2la", sanitize(&a.task_id));
        save_adapter(a, dir.join(&file))?;
        manifest.push_str(&format!(
            "{file}\t{}\t{}\n",
            a.task_id,
            a.description.replace(['\t', '\n'], " ")
        ));
    }
    let path = dir.join("library.manifest");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

pub(crate) fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_layout(rank: usize) -> LoraLayout {
        LoraLayout::new(
            4,
            vec![ModuleShape::new("q_proj", 64, 64), ModuleShape::new("v_proj", 64, 64)],
            rank,
            None,
            42,
        )
        .unwrap()
    }

    #[test]
    fn mistral_scale_param_count() {
        let layout = LoraLayout::new(
            32,
            vec![
                ModuleShape::new("q_proj", 4096, 4096),
                ModuleShape::new("v_proj", 4096, 1024),
            ],
            8,
            None,
            0,
        )
        .unwrap();
        assert_eq!(param_count(&layout).unwrap(), 3_407_872);
        assert!((layout.scaling() - 16.0 / 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn desk_param_count_matches_allocation() {
        let layout = desk_layout(4);
        assert_eq!(layout.param_count(), 4 * (4 * 128) * 2);
        let set = AdapterSet::init(&layout, 1).unwrap();
        assert_eq!(set.flatten().len(), 4096);
    }

    #[test]
    fn zero_rank_and_oversized_rank_are_rejected() {
        let mods = vec![ModuleShape::new("q_proj", 8, 8)];
        assert!(matches!(
            LoraLayout::new(1, mods.clone(), 0, None, 0),
            Err(Error::Config(_))
        ));
        assert!(LoraLayout::new(1, mods, 8, None, 0).is_err());
    }

    #[test]
    fn init_bounds_and_determinism() {
        let layout = desk_layout(4);
        let a = AdapterSet::init(&layout, 9).unwrap();
        let b = AdapterSet::init(&layout, 9).unwrap();
        assert_eq!(a, b);
        for p in &a.pairs {
            assert!(p.a.data().iter().all(|x| x.abs() <= 1.0 / 64.0));
            assert!(p.b.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn merge_unit_outer_product() {
        let w0 = Tensor::zeros([3, 4]);
        let mut a = Tensor::zeros([1, 4]);
        a.data_mut()[2] = 1.0; // e_i, i = 2
        let mut b = Tensor::zeros([1, 3]);
        b.data_mut()[1] = 1.0; // e_j, j = 1
        let merged = merge(&w0, &LoraPair { a, b, scaling: 1.0 }).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let want = if (r, c) == (1, 2) { 1.0 } else { 0.0 };
                assert_eq!(merged.get2(r, c), want);
            }
        }
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = Tensor::normal([5, 6], 1.0, &mut rng);
        let pair = LoraPair {
            a: Tensor::normal([2, 6], 1.0, &mut rng),
            b: Tensor::zeros([2, 5]),
            scaling: 2.0,
        };
        assert_eq!(merge(&w0, &pair).unwrap(), w0);
    }

    #[test]
    fn merged_product_matches_factored_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = Tensor::normal([5, 6], 1.0, &mut rng);
        let pair = LoraPair {
            a: Tensor::normal([2, 6], 1.0, &mut rng),
            b: Tensor::normal([2, 5], 1.0, &mut rng),
            scaling: 1.7,
        };
        let x = Tensor::normal([6, 1], 1.0, &mut rng);
        let merged = merge(&w0, &pair).unwrap().matmul(&x).unwrap();
        let ax = pair.a.matmul(&x).unwrap();
        let factored = w0
            .matmul(&x)
            .unwrap()
            .add(&pair.b.transpose().unwrap().matmul(&ax).unwrap().scaled(1.7))
            .unwrap();
        assert!(merged.max_abs_diff(&factored) < 1e-10);
    }

    #[test]
    fn merge_rejects_mismatched_dims() {
        let pair = LoraPair {
            a: Tensor::zeros([1, 4]),
            b: Tensor::zeros([1, 3]),
            scaling: 1.0,
        };
        assert!(matches!(
            merge(&Tensor::zeros([4, 4]), &pair),
            Err(Error::Shape { .. })
        ));
    }

    fn single_entry(layout: &LoraLayout, flat_index: usize) -> AdapterSet {
        let mut flat = vec![0.0; layout.param_count()];
        flat[flat_index] = 1.0;
        AdapterSet::from_flat(layout, &flat).unwrap()
    }

    #[test]
    fn ab_similarity_basics() {
        let layout = desk_layout(2);
        let a = AdapterSet::init(&layout, 1).unwrap();
        let mut flat = a.flatten();
        // give B some mass so ΔW is nonzero too
        flat.iter_mut().for_each(|x| *x += 0.01);
        let a = AdapterSet::from_flat(&layout, &flat).unwrap();
        let neg: Vec<f64> = flat.iter().map(|x| -x).collect();
        let na = AdapterSet::from_flat(&layout, &neg).unwrap();
        assert!((similarity_ab(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((similarity_ab(&a, &na).unwrap() + 1.0).abs() < 1e-12);
        assert!((similarity_dw(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let e0 = single_entry(&layout, 0);
        let e1 = single_entry(&layout, 5);
        assert_eq!(similarity_ab(&e0, &e1).unwrap(), 0.0);
    }

    #[test]
    fn zero_adapters_have_undefined_similarity() {
        let layout = desk_layout(2);
        let z = AdapterSet::zeros(&layout).unwrap();
        assert!(matches!(
            similarity_ab(&z, &z),
            Err(Error::UndefinedSimilarity)
        ));
        let fresh = AdapterSet::init(&layout, 0).unwrap();
        assert!(matches!(
            similarity_dw(&fresh, &fresh),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn delta_w_similarity_survives_rank_rotation() {
        let layout = LoraLayout::new(1, vec![ModuleShape::new("q_proj", 6, 5)], 2, None, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::normal([2, 6], 1.0, &mut rng);
        let b = Tensor::normal([2, 5], 1.0, &mut rng);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let q = Tensor::new([2, 2], vec![c, -s, s, c]).unwrap();
        // BᵀA = (QᵀB)ᵀ(QᵀA) for orthogonal Q
        let qt = q.transpose().unwrap();
        let sc = layout.scaling();
        let one = AdapterSet::new(layout.clone(), vec![LoraPair { a: a.clone(), b: b.clone(), scaling: sc }]).unwrap();
        let rot = AdapterSet::new(
            layout.clone(),
            vec![LoraPair {
                a: qt.matmul(&a).unwrap(),
                b: qt.matmul(&b).unwrap(),
                scaling: sc,
            }],
        )
        .unwrap();
        assert!((similarity_dw(&one, &rot).unwrap() - 1.0).abs() < 1e-12);
        assert!(similarity_ab(&one, &rot).unwrap() < 0.99);
    }

    #[test]
    fn disjoint_delta_w_is_orthogonal() {
        let layout = LoraLayout::new(1, vec![ModuleShape::new("q_proj", 4, 4)], 1, None, 0).unwrap();
        // A = e0, B = e0 → ΔW at (0,0); A = e1, B = e1 → ΔW at (1,1)
        let mut flat = vec![0.0; 8];
        flat[0] = 1.0;
        flat[4] = 1.0;
        let x = AdapterSet::from_flat(&layout, &flat).unwrap();
        let mut flat = vec![0.0; 8];
        flat[1] = 1.0;
        flat[5] = 1.0;
        let y = AdapterSet::from_flat(&layout, &flat).unwrap();
        assert_eq!(similarity_dw(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn adapter_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let layout = desk_layout(4);
        let set = AdapterSet::init(&layout, 5).unwrap().with_meta("copy", "copy the tokens");
        let path = dir.path().join("a.t2la");
        save_adapter(&set, &path).unwrap();
        let back = load_adapter(&path).unwrap();
        assert_eq!(back, set);
        assert!(back
            .flatten()
            .iter()
            .zip(set.flatten())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        assert!(matches!(
            load_adapter_for(&path, 43),
            Err(Error::Fingerprint { .. })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_adapter(&path), Err(Error::Format(_))));

        let mut bytes = good.clone();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_adapter(&path), Err(Error::Version { found: 9, .. })));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_adapter(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn library_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = desk_layout(2);
        let lib = AdapterLibrary::new(vec![
            AdapterSet::init(&layout, 1).unwrap().with_meta("t0", "first task"),
            AdapterSet::init(&layout, 2).unwrap().with_meta("t1", "second task"),
        ])
        .unwrap();
        let manifest = save_library(&lib, dir.path()).unwrap();
        assert_eq!(load_library(&manifest).unwrap(), lib);
    }

    #[test]
    fn zscore_stats_by_hand() {
        let stats = ZScoreStats::compute(&[vec![1.0, 5.0, 2.0], vec![3.0, 5.0, 6.0]]).unwrap();
        assert_eq!(stats.mean, vec![2.0, 5.0, 4.0]);
        assert_eq!(stats.std, vec![1.0, 1.0, 2.0]);
        let z = stats.normalize(&[3.0, 5.0, 2.0]);
        assert_eq!(z, vec![1.0, 0.0, -1.0]);
        assert_eq!(stats.denormalize(&z), vec![3.0, 5.0, 2.0]);
        let single = ZScoreStats::compute(&[vec![0.5, -2.0]]).unwrap();
        assert_eq!(single.std, vec![1.0, 1.0]);
    }

    #[test]
    fn library_rejects_mixed_fingerprints() {
        let a = AdapterSet::init(&desk_layout(2), 1).unwrap();
        let mut other = desk_layout(2);
        other.fingerprint = 7;
        let b = AdapterSet::init(&other, 1).unwrap();
        assert!(AdapterLibrary::new(vec![a, b]).is_err());
    }
}
