//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::base_lm::{BaseLm, BaseLmConfig, ForwardOpts, SftBatch, TargetModule};
use crate::error::Result;
use crate::hypernet::{Arch, HyperOpts, Hypernet, HypernetConfig};
use crate::lora::{AdapterSet, AdapterVars, ZScoreStats};
use crate::task_embed::TaskInput;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// dominating through cancellation noise.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `coords` randomly sampled coordinates (spread over all inputs) of
/// the scalar function `f`. `f` receives the inputs as trainable leaves.
pub fn check<'a, F>(f: F, inputs: &[Tensor], coords: usize, eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_owned(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad_slice(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_owned(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, coords.min(total)).into_vec();
    let mut work = inputs.to_vec();
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for flat in picks {
        let (mut which, mut idx) = (0, flat);
        while idx >= inputs[which].numel() {
            idx -= inputs[which].numel();
            which += 1;
        }
        let x0 = inputs[which].data()[idx];
        work[which].data_mut()[idx] = x0 + eps;
        let up = eval(&work)?;
        work[which].data_mut()[idx] = x0 - eps;
        let down = eval(&work)?;
        work[which].data_mut()[idx] = x0;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[which][idx];
        let err = rel_err(analytic, numeric, 1e-6);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((which, idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Weighted sum of `out` with fixed pseudo-random weights, so every output
/// element carries a distinct gradient.
fn probe(tape: &mut Tape<'_>, out: Var) -> Result<Var> {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = tape.mul_const(out, w)?;
    Ok(tape.sum(y))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

type Graph = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>>;

/// Every differentiable tape primitive, each with at least 20 input scalars.
pub fn primitive_suite(coords: usize, eps: f64, seed: u64) -> Result<Vec<(String, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize]| rand_tensor(s, &mut rng);
    let target: Vec<f64> = r(&[4, 6]).into_data();
    let cases: Vec<(&str, Vec<Tensor>, Graph)> = vec![
        ("matmul", vec![r(&[4, 5]), r(&[5, 3])], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y) })),
        ("matmul_nt", vec![r(&[4, 5]), r(&[3, 5])], Box::new(|t, v| { let y = t.matmul_nt(v[0], v[1])?; probe(t, y) })),
        ("add", vec![r(&[4, 6]), r(&[4, 6])], Box::new(|t, v| { let y = t.add(v[0], v[1])?; probe(t, y) })),
        ("sub", vec![r(&[4, 6]), r(&[4, 6])], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; probe(t, y) })),
        ("mul", vec![r(&[4, 6]), r(&[4, 6])], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; probe(t, y) })),
        ("add_row", vec![r(&[4, 6]), r(&[6])], Box::new(|t, v| { let y = t.add_row(v[0], v[1])?; probe(t, y) })),
        ("linear", vec![r(&[4, 5]), r(&[3, 5]), r(&[3])], Box::new(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; probe(t, y) })),
        ("scale", vec![r(&[4, 6])], Box::new(|t, v| { let y = t.scale(v[0], -1.7); probe(t, y) })),
        ("mul_const", vec![r(&[4, 6])], Box::new(|t, v| { let y = t.mul_const(v[0], (0..24).map(|i| i as f64 / 7.0).collect())?; probe(t, y) })),
        ("add_const", vec![r(&[4, 6])], Box::new(|t, v| { let c: Vec<f64> = (0..24).map(|i| i as f64).collect(); let y = t.add_const(v[0], &c)?; let y = t.mul(y, y)?; probe(t, y) })),
        ("sum", vec![r(&[4, 6])], Box::new(|t, v| { let s = t.sum(v[0]); t.mul(s, s) })),
        ("mean", vec![r(&[4, 6])], Box::new(|t, v| { let s = t.mean(v[0]); t.mul(s, s) })),
        ("silu", vec![r(&[4, 6])], Box::new(|t, v| { let y = t.silu(v[0]); probe(t, y) })),
        ("layer_norm", vec![r(&[4, 6]), r(&[6]), r(&[6])], Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(t, y) })),
        ("causal_attention", vec![r(&[6, 4]), r(&[6, 4]), r(&[6, 4])], Box::new(|t, v| { let y = t.causal_attention(v[0], v[1], v[2], 2, 3, 2)?; probe(t, y) })),
        ("gather_rows", vec![r(&[5, 4])], Box::new(|t, v| { let y = t.gather_rows(v[0], &[0, 2, 2, 4, 1])?; probe(t, y) })),
        ("cross_entropy", vec![r(&[5, 6])], Box::new(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0), Some(1)]))),
        ("l1_loss", vec![r(&[4, 6])], Box::new(move |t, v| t.l1_loss(v[0], &target))),
        ("concat_cols", vec![r(&[4, 3]), r(&[4, 5])], Box::new(|t, v| { let y = t.concat_cols(&[v[0], v[1]])?; probe(t, y) })),
        ("concat", vec![r(&[10]), r(&[3, 4])], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], vec![22])?; probe(t, y) })),
        ("slice", vec![r(&[24])], Box::new(|t, v| { let y = t.slice(v[0], 3, vec![4, 4])?; probe(t, y) })),
        ("index", vec![r(&[24])], Box::new(|t, v| { let idx = (0..30).map(|i| (i * 7) % 24).collect(); let y = t.index(v[0], idx, vec![30])?; probe(t, y) })),
        ("reshape", vec![r(&[4, 6])], Box::new(|t, v| { let y = t.reshape(v[0], vec![6, 4])?; let y = t.matmul_nt(y, y)?; probe(t, y) })),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| Ok((name.to_string(), check(f, &inputs, coords, eps, seed ^ i as u64)?)))
        .collect()
}

fn tiny_lm() -> Result<BaseLm> {
    BaseLm::init(
        BaseLmConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq: 8,
            target_modules: vec![TargetModule::QProj, TargetModule::VProj],
        },
        3,
    )
}

fn tiny_batch() -> Result<SftBatch> {
    SftBatch::from_pairs(&[(vec![4, 5, 1], vec![6, 7, 2]), (vec![8, 1], vec![9, 2])], 0)
}

/// A hypernet whose head weights are randomized so no path is zero.
fn tiny_hypernet(arch: Arch, lm: &BaseLm, seed: u64) -> Result<Hypernet> {
    let cfg = HypernetConfig {
        d_task_enc: 6,
        d_embed: 3,
        d_hidden: 8,
        d_out: 5,
        dropout: 0.0,
        ..HypernetConfig::new(arch, 4, lm.lora_layout(2)?)
    };
    let mut net = Hypernet::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in net.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    Ok(net)
}

/// The reconstruction objective for each arch, the hypernet SFT objective,
/// the LoRA SFT objective and the pretraining objective.
pub fn composed_suite(coords: usize, eps: f64, seed: u64) -> Result<Vec<(String, GradReport)>> {
    let lm = tiny_lm()?;
    let batch = tiny_batch()?;
    let tasks = [
        TaskInput::Vector(vec![0.5, -0.2, 0.1, 0.9]),
        TaskInput::Vector(vec![-0.3, 0.4, 0.8, -0.6]),
    ];
    let mut out = Vec::new();
    for arch in Arch::ALL {
        let mut net = tiny_hypernet(arch, &lm, seed)?;
        let p = net.layout().param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 11);
        let target: Vec<f64> = (0..2 * p).map(|_| rng.random_range(-2.0..2.0)).collect();
        net.set_stats(Some(ZScoreStats {
            mean: (0..p).map(|_| rng.random_range(-0.1..0.1)).collect(),
            std: (0..p).map(|_| rng.random_range(0.5..1.5)).collect(),
        }))?;
        let theta: Vec<Tensor> = net.params().iter().map(|(_, t)| t.clone()).collect();
        let report = check(
            |tape, th: &[Var]| -> Result<Var> {
                let o = net.forward_on(tape, th, &tasks, HyperOpts::default())?;
                let l1 = tape.l1_loss(o.raw, &target)?;
                let reg = probe(tape, o.flat)?;
                let reg = tape.scale(reg, 1e-2);
                tape.add(l1, reg)
            },
            &theta, coords, eps, seed ^ 21,
        )?;
        out.push((format!("recon_{arch}"), report));
    }

    let net = tiny_hypernet(Arch::M, &lm, seed)?;
    let theta: Vec<Tensor> = net.params().iter().map(|(_, t)| t.clone()).collect();
    let report = check(
        |tape, th: &[Var]| -> Result<Var> {
            let o = net.forward_on(tape, th, &tasks[..1], HyperOpts::default())?;
            let av = net.adapter_vars(tape, o.flat, 0)?;
            lm.sft_loss(tape, &batch, Some(&av), ForwardOpts::default())
        },
        &theta, coords, eps, seed ^ 22,
    )?;
    out.push(("t2l_sft".into(), report));

    let mut set = AdapterSet::init(&lm.lora_layout(2)?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 33);
    set.pairs
        .iter_mut()
        .for_each(|p| p.b.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5)));
    let ab: Vec<Tensor> = set.pairs.iter().flat_map(|p| [p.a.clone(), p.b.clone()]).collect();
    let names: Vec<String> = set.layout.modules.iter().map(|m| m.name.clone()).collect();
    let scaling = set.layout.scaling();
    let report = check(
        |tape, v: &[Var]| -> Result<Var> {
            let av = AdapterVars {
                module_names: names.clone(),
                scaling,
                pairs: v.chunks(2).map(|c| (c[0], c[1])).collect(),
            };
            lm.sft_loss(tape, &batch, Some(&av), ForwardOpts::default())
        },
        &ab, coords, eps, seed ^ 23,
    )?;
    out.push(("lora_sft".into(), report));

    let psi: Vec<Tensor> = lm.params().iter().map(|(_, t)| t.clone()).collect();
    let report = check(
        |tape, v: &[Var]| -> Result<Var> {
            let logits = lm.forward_with(tape, v, &batch.tokens, None, ForwardOpts::default())?;
            tape.cross_entropy(logits, &batch.targets)
        },
        &psi, coords, eps, seed ^ 24,
    )?;
    out.push(("pretrain".into(), report));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(rel_err(0.0, 1e-9, 1e-6), 1e-3);
        assert!((rel_err(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x·stop(x) is not 2x; emulate a broken op with a constant.
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = check(
            |t, v| {
                let c = t.constant(t.tensor(v[0]));
                let y = t.mul(v[0], c)?;
                Ok(t.sum(y))
            },
            &[x],
            3,
            1e-6,
            0,
        )
        .unwrap();
        assert!(!r.passes(1e-4));
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }
}
