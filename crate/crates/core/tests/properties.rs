use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use t2l_core::base_lm::TokenBatch;
use t2l_core::eval::{average_lora, relative_performance};
use t2l_core::experiment::random_orthogonal;
use t2l_core::hypernet::HypernetConfig;
use t2l_core::lora::{similarity_ab, similarity_dw, ModuleShape, ZScoreStats};
use t2l_core::task_embed::{embed_hashed, embed_one_hot};
use t2l_core::taskgen::{TaskKind, TaskParams, TaskSuite};
use t2l_core::train::{clip_grads, global_norm, lr_at, TrainConfig};
use t2l_core::{
    AdapterSet, Arch, BaseLm, BaseLmConfig, Hypernet, LoraLayout, TargetModule, TaskInput, Tensor,
};

fn lm_config(d_model: usize, n_layers: usize, modules: Vec<TargetModule>) -> BaseLmConfig {
    BaseLmConfig {
        vocab_size: 12,
        d_model,
        n_layers,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_seq: 8,
        target_modules: modules,
    }
}

fn small_lm(seed: u64) -> BaseLm {
    BaseLm::init(lm_config(8, 2, vec![TargetModule::QProj, TargetModule::VProj]), seed).unwrap()
}

fn random_set(layout: &LoraLayout, seed: u64) -> AdapterSet {
    let mut set = AdapterSet::init(layout, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for p in &mut set.pairs {
        p.b = Tensor::uniform(p.b.shape().to_vec(), 0.3, &mut rng);
    }
    set
}

fn tokens(rows: &[Vec<usize>]) -> TokenBatch {
    TokenBatch::new(rows).unwrap()
}

fn arch() -> impl Strategy<Value = Arch> {
    prop_oneof![Just(Arch::L), Just(Arch::M), Just(Arch::S)]
}

fn token_rows() -> impl Strategy<Value = Vec<Vec<usize>>> {
    (1usize..=8).prop_flat_map(|len| prop::collection::vec(prop::collection::vec(0usize..12, len), 1..4))
}

fn layout() -> impl Strategy<Value = LoraLayout> {
    (1usize..4, 1usize..4, 1usize..6, 1usize..5, 1usize..5).prop_map(|(layers, mods, rank, d_in, d_out)| {
        let modules = (0..mods)
            .map(|m| ModuleShape::new(format!("m{m}"), rank + d_in + m, rank + d_out))
            .collect();
        LoraLayout::new(layers, modules, rank, None, 0).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flatten_round_trips(layout in layout(), seed in any::<u64>()) {
        let set = random_set(&layout, seed);
        let flat = set.flatten();
        prop_assert_eq!(flat.len(), layout.param_count());
        prop_assert_eq!(set.param_count(), layout.param_count());
        let back = AdapterSet::from_flat(&layout, &flat).unwrap();
        prop_assert_eq!(back.pairs, set.pairs);
    }

    #[test]
    fn zscore_round_trips(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..6)) {
        let stats = ZScoreStats::compute(&rows).unwrap();
        prop_assert!(stats.std.iter().all(|&s| s >= ZScoreStats::STD_FLOOR));
        for r in &rows {
            let back = stats.denormalize(&stats.normalize(r));
            for (a, b) in back.iter().zip(r) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn similarities_are_symmetric_and_reflexive(layout in layout(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_set(&layout, s1);
        let b = random_set(&layout, s2);
        prop_assert!((similarity_ab(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((similarity_dw(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(similarity_ab(&a, &b).unwrap(), similarity_ab(&b, &a).unwrap());
        prop_assert_eq!(similarity_dw(&a, &b).unwrap(), similarity_dw(&b, &a).unwrap());
    }

    #[test]
    fn delta_w_similarity_ignores_rank_rotation(layout in layout(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_set(&layout, s1);
        let other = random_set(&layout, s2);
        let mut rotated = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(s2);
        for p in &mut rotated.pairs {
            let q = random_orthogonal(layout.rank, &mut rng);
            p.a = q.matmul(&p.a).unwrap();
            p.b = q.matmul(&p.b).unwrap();
        }
        let before = similarity_dw(&a, &other).unwrap();
        let after = similarity_dw(&rotated, &other).unwrap();
        prop_assert!((before - after).abs() < 1e-10);
        prop_assert!((similarity_dw(&a, &rotated).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn merged_weights_match_the_adapter_branch(rows in token_rows(), seed in 0u64..1000) {
        let lm = small_lm(seed);
        let set = random_set(&lm.lora_layout(3).unwrap(), seed);
        let batch = tokens(&rows);
        let applied = lm.forward(&batch, Some(&set)).unwrap();
        let merged = lm.with_merged(&set).unwrap().forward(&batch, None).unwrap();
        prop_assert!(applied.max_abs_diff(&merged) <= 1e-10);
    }

    #[test]
    fn zero_b_leaves_logits_bitwise_unchanged(rows in token_rows(), seed in 0u64..1000) {
        let lm = small_lm(seed);
        let set = AdapterSet::init(&lm.lora_layout(2).unwrap(), seed).unwrap();
        let batch = tokens(&rows);
        prop_assert_eq!(lm.forward(&batch, Some(&set)).unwrap(), lm.forward(&batch, None).unwrap());
    }

    #[test]
    fn logits_are_causal(row in prop::collection::vec(0usize..12, 2..=8), cut in 0usize..7, tok in 0usize..12, seed in 0u64..100) {
        let cut = cut % (row.len() - 1);
        let lm = small_lm(seed);
        let mut changed = row.clone();
        for t in changed.iter_mut().skip(cut + 1) {
            *t = (*t + tok + 1) % 12;
        }
        let a = lm.forward(&tokens(&[row.clone()]), None).unwrap();
        let b = lm.forward(&tokens(&[changed]), None).unwrap();
        let v = lm.config().vocab_size;
        prop_assert_eq!(&a.data()[..(cut + 1) * v], &b.data()[..(cut + 1) * v]);
    }

    #[test]
    fn fresh_hypernet_is_a_no_op(arch in arch(), seed in 0u64..1000, rows in token_rows(), v in prop::collection::vec(-1.0f64..1.0, 6)) {
        let lm = small_lm(seed);
        let net = Hypernet::build(HypernetConfig::new(arch, 6, lm.lora_layout(2).unwrap()), seed).unwrap();
        let set = net.generate_one(&TaskInput::Vector(v)).unwrap();
        let batch = tokens(&rows);
        prop_assert_eq!(lm.forward(&batch, Some(&set)).unwrap(), lm.forward(&batch, None).unwrap());
    }

    #[test]
    fn batched_generation_equals_sequential(arch in arch(), seed in 0u64..1000, vs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 1..4)) {
        let lm = small_lm(seed);
        let mut net = Hypernet::build(HypernetConfig::new(arch, 5, lm.lora_layout(2).unwrap()), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in net.params_mut().tensors_mut() {
            let noise = Tensor::uniform(t.shape().to_vec(), 0.2, &mut rng);
            *t = t.add(&noise).unwrap();
        }
        let tasks: Vec<TaskInput> = vs.into_iter().map(TaskInput::Vector).collect();
        let batched = net.generate(&tasks).unwrap();
        let sequential = net.generate_sequential(&tasks).unwrap();
        prop_assert_eq!(&batched, &sequential);
        let layout = net.layout().clone();
        for set in &batched {
            for (l, m) in layout.entries() {
                let p = set.pair(l, m);
                prop_assert_eq!(p.a.shape(), &[layout.rank, layout.modules[m].d_in][..]);
                prop_assert_eq!(p.b.shape(), &[layout.rank, layout.modules[m].d_out][..]);
            }
        }
    }

    #[test]
    fn hypernet_param_count_matches_allocation(arch in arch(), layers in 1usize..4, rank in 1usize..6, d_task in 1usize..10) {
        let lm = BaseLm::init(lm_config(8, layers, vec![TargetModule::QProj, TargetModule::KProj, TargetModule::VProj]), 0).unwrap();
        let cfg = HypernetConfig::new(arch, d_task, lm.lora_layout(rank).unwrap());
        let net = Hypernet::build(cfg.clone(), 1).unwrap();
        prop_assert_eq!(net.param_count(), cfg.param_count());
        prop_assert_eq!(cfg.param_count(), cfg.backbone_param_count() + cfg.head_param_count());
    }

    #[test]
    fn head_weight_ratios(rank in 1usize..9, d_hidden in 1usize..64) {
        let layout = |r| LoraLayout::new(2, vec![ModuleShape::new("q_proj", 16, 16), ModuleShape::new("v_proj", 16, 16)], r, None, 0).unwrap();
        let cfg = |a, r| HypernetConfig { d_hidden, ..HypernetConfig::new(a, 4, layout(r)) };
        prop_assert_eq!(cfg(Arch::L, rank).head_weight_count(), 2 * cfg(Arch::M, rank).head_weight_count());
        prop_assert_eq!(cfg(Arch::S, rank).head_weight_count(), cfg(Arch::S, 1).head_weight_count());
    }

    #[test]
    fn clipping_bounds_the_global_norm(grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..8), 1..5), max in 0.01f64..10.0) {
        let mut g = grads;
        let (pre, post) = clip_grads(&mut g, max);
        prop_assert!(post <= max * (1.0 + 1e-12));
        prop_assert!((global_norm(&g) - post).abs() <= 1e-9 * pre.max(1.0));
    }

    #[test]
    fn lr_stays_in_range(steps in 1usize..500, warm in 0.0f64..0.99, lr in 1e-6f64..1.0, step in 0usize..600) {
        let cfg = TrainConfig { max_steps: steps, warmup_fraction: warm, max_lr: lr, ..TrainConfig::default() };
        let v = lr_at(step.min(steps - 1), &cfg);
        prop_assert!((0.0..=lr * (1.0 + 1e-12)).contains(&v));
    }

    #[test]
    fn relative_performance_endpoints(base in 0.0f64..0.5, gap in 0.01f64..0.5) {
        let oracle = base + gap;
        prop_assert!((relative_performance(oracle, base, oracle).value - 1.0).abs() < 1e-12);
        prop_assert_eq!(relative_performance(base, base, oracle).value, 0.0);
    }

    #[test]
    fn average_of_one_adapter_is_itself(layout in layout(), seed in any::<u64>()) {
        let set = random_set(&layout, seed);
        prop_assert_eq!(average_lora(std::slice::from_ref(&set)).unwrap().pairs, set.pairs);
    }

    #[test]
    fn hashed_embedding_ignores_word_order(words in prop::collection::vec("[a-z]{1,6}", 1..8), seed in any::<u64>()) {
        let a = embed_hashed(&words.join(" "), 16, seed).unwrap();
        let mut rev = words.clone();
        rev.reverse();
        let b = embed_hashed(&rev.join(" "), 16, seed).unwrap();
        prop_assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn one_hot_vectors_are_orthonormal(n in 1usize..20, i in 0usize..20, j in 0usize..20) {
        let (i, j) = (i % n, j % n);
        let a = embed_one_hot(i, n).unwrap().vector;
        let b = embed_one_hot(j, n).unwrap().vector;
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generated_tasks_follow_their_rules(seed in any::<u64>(), half in 3usize..6) {
        let n_symbols = 2 * half;
        let params = TaskParams { n_symbols, n_train: 40, n_test: 10, ..TaskParams::default() };
        let held = [TaskKind::parse("seq:sort:predecessor").unwrap()];
        let suite = TaskSuite::standard(&held, &params, seed).unwrap();
        let cfg = BaseLmConfig { vocab_size: suite.vocab.size(), ..BaseLmConfig::default() };
        for task in suite.all_tasks() {
            task.self_check().unwrap();
            for ex in task.train.iter().chain(&task.test) {
                for prefix in [t2l_core::taskgen::Prefix::Code, t2l_core::taskgen::Prefix::Null] {
                    let (p, c) = task.encode(ex, prefix);
                    prop_assert!(p.iter().chain(&c).all(|&t| t < cfg.vocab_size));
                }
            }
            for d in &task.eval_descriptions {
                prop_assert!(!task.train_descriptions.contains(d));
            }
        }
        let train_kinds: Vec<_> = suite.train.iter().map(|t| t.kind.clone()).collect();
        prop_assert!(suite.held_out.iter().all(|t| !train_kinds.contains(&t.kind)));
    }
}
