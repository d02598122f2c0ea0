//! Synthetic token-level tasks with templated natural-language descriptions.
//!
//! Symbols are drawn from an alphabet rendered as `a..` then `A..`, so the
//! case map pairs symbol `i` with `i ± n/2`. A prompt is laid out as
//! `[c1, c2, x…, SEP]` and its completion as `[y…, EOS]`, where `(c1, c2)` is
//! either the task's instruction code or two `NULL` tokens.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const NULL: usize = 3;
const ORDER_CODE: usize = 4;
const MAP_CODE: usize = ORDER_CODE + 4;
const MODADD_CODE: usize = MAP_CODE + 4;
const FILTER_CODE: usize = MODADD_CODE + 1;
pub const FIRST_SYMBOL: usize = FILTER_CODE + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    Copy,
    Reverse,
    Sort,
    Rotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolMap {
    Identity,
    Successor,
    Predecessor,
    CaseMap,
}

impl Order {
    pub const ALL: [Order; 4] = [Self::Copy, Self::Reverse, Self::Sort, Self::Rotate];

    pub fn name(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Sort => "sort",
            Self::Rotate => "rotate",
        }
    }

    fn phrases(self) -> &'static [&'static str] {
        match self {
            Self::Copy => &["copy", "repeat", "echo back", "reproduce"],
            Self::Reverse => &["reverse", "flip the order of", "write backwards", "mirror"],
            Self::Sort => &[
                "sort",
                "order ascending",
                "arrange from smallest to largest",
                "rank in increasing order",
            ],
            Self::Rotate => &[
                "rotate left",
                "cyclically shift left",
                "move the first element to the end of",
                "rotate by one position",
            ],
        }
    }
}

impl SymbolMap {
    pub const ALL: [SymbolMap; 4] = [Self::Identity, Self::Successor, Self::Predecessor, Self::CaseMap];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Successor => "successor",
            Self::Predecessor => "predecessor",
            Self::CaseMap => "case_map",
        }
    }

    fn phrases(self) -> &'static [&'static str] {
        match self {
            Self::Identity => &[
                "keeping each symbol unchanged",
                "without changing any symbol",
                "leaving the symbols as they are",
                "with symbols kept as is",
            ],
            Self::Successor => &[
                "then increment each symbol",
                "then replace each symbol with the next one",
                "then shift every symbol up by one",
                "then add one to each symbol",
            ],
            Self::Predecessor => &[
                "then decrement each symbol",
                "then replace each symbol with the previous one",
                "then shift every symbol down by one",
                "then subtract one from each symbol",
            ],
            Self::CaseMap => &[
                "then swap the case of each symbol",
                "then toggle upper and lower case",
                "then flip the case of every letter",
                "then change the capitalization of each symbol",
            ],
        }
    }

    fn apply(self, s: usize, n: usize) -> usize {
        match self {
            Self::Identity => s,
            Self::Successor => (s + 1) % n,
            Self::Predecessor => (s + n - 1) % n,
            Self::CaseMap => (s + n / 2) % n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Seq { order: Order, map: SymbolMap },
    ModularAdd { modulus: usize },
    FilterToken { token: usize },
}

impl TaskKind {
    pub fn seq(order: Order, map: SymbolMap) -> Self {
        Self::Seq { order, map }
    }

    /// Every order/map combination, order-major.
    pub fn all_seq() -> Vec<TaskKind> {
        Order::ALL
            .iter()
            .flat_map(|&o| SymbolMap::ALL.iter().map(move |&m| Self::seq(o, m)))
            .collect()
    }

    /// Parses `copy`, `reverse`, `sort`, `rotate`, `successor`, `predecessor`,
    /// `case_map`, `seq:<order>:<map>`, `modadd:<k>` and `filter:<symbol index>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unsupported task kind {s:?}"));
        let order = |o: &str| Order::ALL.into_iter().find(|x| x.name() == o);
        let map = |m: &str| SymbolMap::ALL.into_iter().find(|x| x.name() == m);
        if let Some(o) = order(s) {
            return Ok(Self::seq(o, SymbolMap::Identity));
        }
        if let Some(m) = map(s) {
            return Ok(Self::seq(Order::Copy, m));
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["seq", o, m] => Ok(Self::seq(order(o).ok_or_else(bad)?, map(m).ok_or_else(bad)?)),
            ["modadd" | "modular_add", k] => Ok(Self::ModularAdd {
                modulus: k.parse().map_err(|_| bad())?,
            }),
            ["filter" | "filter_token", t] => Ok(Self::FilterToken {
                token: t.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }

    /// Canonical spec string, accepted by [`parse`](Self::parse).
    pub fn spec(&self) -> String {
        match self {
            Self::Seq { order, map } => format!("seq:{}:{}", order.name(), map.name()),
            Self::ModularAdd { modulus } => format!("modadd:{modulus}"),
            Self::FilterToken { token } => format!("filter:{token}"),
        }
    }

    pub fn default_id(&self) -> String {
        match self {
            Self::Seq { order, map } => format!("{}_{}", order.name(), map.name()),
            Self::ModularAdd { modulus } => format!("modadd_{modulus}"),
            Self::FilterToken { token } => format!("filter_{token}"),
        }
    }

    fn validate(&self, vocab: &Vocab) -> Result<()> {
        match *self {
            Self::Seq { map: SymbolMap::CaseMap, .. } if vocab.n_symbols % 2 != 0 => Err(
                Error::Config("case_map needs an even alphabet".into()),
            ),
            Self::ModularAdd { modulus } if modulus < 2 || modulus > vocab.n_symbols => Err(
                Error::Config(format!("modulus {modulus} outside 2..={}", vocab.n_symbols)),
            ),
            Self::FilterToken { token } if token >= vocab.n_symbols => Err(Error::Config(format!(
                "filter token {token} outside the alphabet"
            ))),
            _ => Ok(()),
        }
    }

    /// The task's rule, or `None` if `x` is not a valid input.
    pub fn apply(&self, x: &[usize], n_symbols: usize) -> Option<Vec<usize>> {
        if x.iter().any(|&s| s >= n_symbols) {
            return None;
        }
        match *self {
            Self::Seq { order, map } => {
                let mut y = x.to_vec();
                match order {
                    Order::Copy => {}
                    Order::Reverse => y.reverse(),
                    Order::Sort => y.sort_unstable(),
                    Order::Rotate => {
                        let k = 1.min(y.len());
                        y.rotate_left(k)
                    }
                }
                Some(y.into_iter().map(|s| map.apply(s, n_symbols)).collect())
            }
            Self::ModularAdd { modulus } => match x {
                &[a, b] if a < modulus && b < modulus => Some(vec![(a + b) % modulus]),
                _ => None,
            },
            Self::FilterToken { token } => {
                let y: Vec<usize> = x.iter().copied().filter(|&s| s != token).collect();
                (!y.is_empty()).then_some(y)
            }
        }
    }

    /// Two-token instruction code.
    pub fn code(&self, vocab: &Vocab) -> [usize; 2] {
        match *self {
            Self::Seq { order, map } => [
                ORDER_CODE + Order::ALL.iter().position(|&o| o == order).unwrap_or(0),
                MAP_CODE + SymbolMap::ALL.iter().position(|&m| m == map).unwrap_or(0),
            ],
            Self::ModularAdd { modulus } => [MODADD_CODE, vocab.symbol_token(modulus - 1)],
            Self::FilterToken { token } => [FILTER_CODE, vocab.symbol_token(token)],
        }
    }

    fn templates(&self, vocab: &Vocab, split: DescSplit) -> Vec<String> {
        let frames: &[&str] = match (self, split) {
            (Self::Seq { .. }, DescSplit::Train) => &[
                "{o} the tokens {m}",
                "please {o} the input sequence {m}",
                "your job is to {o} the list {m}",
                "{o} every item you are given {m}",
            ],
            (Self::Seq { .. }, DescSplit::Eval) => &[
                "task: {o} the symbols {m}",
                "given a sequence, {o} it {m}",
                "you should {o} the string of letters {m}",
                "read the characters, {o} them, {m}",
            ],
            (Self::ModularAdd { .. }, DescSplit::Train) => &[
                "add the two numbers modulo {k}",
                "sum both digits and reduce mod {k}",
                "compute the sum of the inputs modulo {k}",
                "return the two values added together, wrapping at {k}",
                "add the pair and take the remainder by {k}",
                "give the sum of both numbers mod {k}",
                "sum the inputs, then reduce modulo {k}",
                "combine the two digits by addition modulo {k}",
            ],
            (Self::ModularAdd { .. }, DescSplit::Eval) => &[
                "modular addition with modulus {k}",
                "output (a + b) mod {k}",
                "add them up in arithmetic modulo {k}",
                "what is the remainder of the sum divided by {k}",
                "clock arithmetic: add both, modulus {k}",
                "the answer is the sum taken mod {k}",
                "produce a plus b, reduced by {k}",
                "addition on a ring of size {k}",
            ],
            (Self::FilterToken { .. }, DescSplit::Train) => &[
                "remove every {t} from the sequence",
                "delete the symbol {t} and keep the rest",
                "filter out {t}",
                "drop each occurrence of {t}",
                "strip {t} out of the input",
                "return the list without {t}",
                "discard the token {t}",
                "leave out any {t}",
            ],
            (Self::FilterToken { .. }, DescSplit::Eval) => &[
                "copy the input but skip {t}",
                "erase all {t} symbols",
                "keep everything except {t}",
                "the output omits the letter {t}",
                "echo the tokens minus {t}",
                "everything but {t}, in order",
                "skip over {t} while copying",
                "write the input with {t} deleted",
            ],
        };
        let mut out = Vec::new();
        for f in frames {
            match *self {
                Self::Seq { order, map } => {
                    for o in order.phrases() {
                        for m in map.phrases() {
                            out.push(f.replace("{o}", o).replace("{m}", m));
                        }
                    }
                }
                Self::ModularAdd { modulus } => out.push(f.replace("{k}", &modulus.to_string())),
                Self::FilterToken { token } => out.push(f.replace("{t}", &vocab.symbol_name(token))),
            }
        }
        out
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescSplit {
    Train,
    Eval,
}

/// Token-id layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_symbols: usize,
}

impl Vocab {
    pub fn new(n_symbols: usize) -> Result<Self> {
        if !(2..=52).contains(&n_symbols) {
            return Err(Error::Config(format!("alphabet size {n_symbols} outside 2..=52")));
        }
        Ok(Self { n_symbols })
    }

    pub fn size(&self) -> usize {
        FIRST_SYMBOL + self.n_symbols
    }

    pub fn symbol_token(&self, s: usize) -> usize {
        FIRST_SYMBOL + s
    }

    pub fn token_symbol(&self, t: usize) -> Option<usize> {
        (FIRST_SYMBOL..self.size()).contains(&t).then(|| t - FIRST_SYMBOL)
    }

    pub fn symbol_name(&self, s: usize) -> String {
        let half = self.n_symbols.div_ceil(2);
        let c = if s < half {
            (b'a' + s as u8) as char
        } else {
            (b'A' + (s - half) as u8) as char
        };
        c.to_string()
    }

    pub fn parse_symbol(&self, name: &str) -> Option<usize> {
        (0..self.n_symbols).find(|&s| self.symbol_name(s) == name)
    }

    pub fn render(&self, symbols: &[usize]) -> String {
        symbols
            .iter()
            .map(|&s| self.symbol_name(s))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

/// Prefix placed before the input symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prefix {
    Code,
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub id: String,
    pub kind: TaskKind,
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub train_descriptions: Vec<String>,
    pub eval_descriptions: Vec<String>,
}

impl ToyTask {
    /// Encodes one example as `(prompt, completion)` token ids.
    pub fn encode(&self, ex: &Example, prefix: Prefix) -> (Vec<usize>, Vec<usize>) {
        encode(&self.vocab, &self.kind, ex, prefix)
    }

    pub fn encode_all(&self, examples: &[Example], prefix: Prefix) -> Vec<(Vec<usize>, Vec<usize>)> {
        examples.iter().map(|e| self.encode(e, prefix)).collect()
    }

    pub fn descriptions(&self, split: DescSplit) -> &[String] {
        match split {
            DescSplit::Train => &self.train_descriptions,
            DescSplit::Eval => &self.eval_descriptions,
        }
    }

    /// Re-runs the rule on every example and checks split disjointness.
    pub fn self_check(&self) -> Result<()> {
        for ex in self.train.iter().chain(&self.test) {
            if self.kind.apply(&ex.x, self.vocab.n_symbols).as_ref() != Some(&ex.y) {
                return Err(Error::Contract(format!(
                    "{}: example {} does not follow the rule",
                    self.id,
                    self.vocab.render(&ex.x)
                )));
            }
        }
        let train: HashSet<&Vec<usize>> = self.train.iter().map(|e| &e.x).collect();
        if self.test.iter().any(|e| train.contains(&e.x)) {
            return Err(Error::Contract(format!("{}: train and test overlap", self.id)));
        }
        if self.train_descriptions.is_empty() {
            return Err(Error::Contract(format!("{}: no descriptions", self.id)));
        }
        Ok(())
    }
}

pub fn encode(vocab: &Vocab, kind: &TaskKind, ex: &Example, prefix: Prefix) -> (Vec<usize>, Vec<usize>) {
    let head = match prefix {
        Prefix::Code => kind.code(vocab),
        Prefix::Null => [NULL, NULL],
    };
    let mut prompt = head.to_vec();
    prompt.extend(ex.x.iter().map(|&s| vocab.symbol_token(s)));
    prompt.push(SEP);
    let mut completion: Vec<usize> = ex.y.iter().map(|&s| vocab.symbol_token(s)).collect();
    completion.push(EOS);
    (prompt, completion)
}

/// Generation knobs shared by every task in a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub n_symbols: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_descriptions: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            n_symbols: 16,
            seq_len: 4,
            n_train: 256,
            n_test: 64,
            n_descriptions: 8,
        }
    }
}

fn sample_input(kind: &TaskKind, p: &TaskParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = p.n_symbols;
    match *kind {
        TaskKind::Seq { .. } => {
            let mut all: Vec<usize> = (0..n).collect();
            all.partial_shuffle(rng, p.seq_len.min(n)).0.to_vec()
        }
        TaskKind::ModularAdd { modulus } => vec![rng.random_range(0..modulus), rng.random_range(0..modulus)],
        TaskKind::FilterToken { token } => {
            let mut others: Vec<usize> = (0..n).filter(|&s| s != token).collect();
            let k = p.seq_len.saturating_sub(1).max(1).min(others.len());
            let mut x = others.partial_shuffle(rng, k).0.to_vec();
            let at = rng.random_range(0..=x.len());
            x.insert(at, token);
            x
        }
    }
}

fn input_capacity(kind: &TaskKind, p: &TaskParams) -> f64 {
    let n = p.n_symbols as f64;
    match *kind {
        TaskKind::Seq { .. } => (0..p.seq_len.min(p.n_symbols)).map(|i| n - i as f64).product(),
        TaskKind::ModularAdd { modulus } => (modulus * modulus) as f64,
        TaskKind::FilterToken { .. } => {
            let k = p.seq_len.saturating_sub(1).max(1);
            (0..k).map(|i| n - 1.0 - i as f64).product::<f64>() * (k + 1) as f64
        }
    }
}

/// Builds a deterministic task. Fails if the requested counts exceed what
/// the kind can supply.
pub fn make_task(kind: TaskKind, params: &TaskParams, seed: u64) -> Result<ToyTask> {
    let vocab = Vocab::new(params.n_symbols)?;
    kind.validate(&vocab)?;
    if params.n_train == 0 || params.n_test == 0 || params.n_descriptions == 0 || params.seq_len == 0 {
        return Err(Error::Config("task counts must be positive".into()));
    }
    let need = params.n_train + params.n_test;
    if (need as f64) > input_capacity(&kind, params) {
        return Err(Error::Capacity(format!(
            "{kind} has fewer than {need} distinct inputs"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::binio::Fnv64::with_seed(seed).finish());
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(need);
    let mut attempts = 0usize;
    while examples.len() < need {
        attempts += 1;
        if attempts > need * 1000 {
            return Err(Error::Capacity(format!("could not draw {need} inputs for {kind}")));
        }
        let x = sample_input(&kind, params, &mut rng);
        if !seen.insert(x.clone()) {
            continue;
        }
        let y = kind
            .apply(&x, params.n_symbols)
            .ok_or_else(|| Error::Contract(format!("sampled invalid input for {kind}")))?;
        examples.push(Example { x, y });
    }
    let test = examples.split_off(params.n_train);
    let task = ToyTask {
        id: kind.default_id(),
        kind,
        vocab,
        train: examples,
        test,
        train_descriptions: description_variants_for(&kind, &vocab, DescSplit::Train, params.n_descriptions, seed)?,
        eval_descriptions: description_variants_for(&kind, &vocab, DescSplit::Eval, params.n_descriptions, seed)?,
    };
    task.self_check()?;
    Ok(task)
}

fn description_variants_for(
    kind: &TaskKind,
    vocab: &Vocab,
    split: DescSplit,
    n: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut pool = kind.templates(vocab, split);
    if n > pool.len() {
        return Err(Error::Capacity(format!(
            "{kind}: {n} descriptions requested, {} templates available",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split as u64);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    Ok(pool)
}

/// `n` distinct descriptions of `task` drawn from the given template split.
pub fn description_variants(task: &ToyTask, split: DescSplit, n: usize, seed: u64) -> Result<Vec<String>> {
    description_variants_for(&task.kind, &task.vocab, split, n, seed)
}

/// Space-separated random lowercase "words", for the random-strings control.
pub fn random_strings(n: usize, words: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..words)
                .map(|_| {
                    let len = rng.random_range(3..8);
                    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Training and held-out tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub vocab: Vocab,
    pub train: Vec<ToyTask>,
    pub held_out: Vec<ToyTask>,
}

impl TaskSuite {
    pub fn new(train: Vec<ToyTask>, held_out: Vec<ToyTask>) -> Result<Self> {
        let Some(first) = train.first() else {
            return Err(Error::Config("suite has no training tasks".into()));
        };
        let vocab = first.vocab;
        let mut ids = HashSet::new();
        for t in train.iter().chain(&held_out) {
            if t.vocab != vocab {
                return Err(Error::Config("suite tasks use different alphabets".into()));
            }
            if !ids.insert(t.id.clone()) {
                return Err(Error::Config(format!("duplicate task id {}", t.id)));
            }
        }
        for h in &held_out {
            if train.iter().any(|t| t.kind == h.kind) {
                return Err(Error::Config(format!("held-out task {} also appears in training", h.id)));
            }
        }
        Ok(Self { vocab, train, held_out })
    }

    /// Builds tasks for the given kinds with per-task seeds derived from `seed`.
    pub fn generate(train: &[TaskKind], held_out: &[TaskKind], params: &TaskParams, seed: u64) -> Result<Self> {
        let make = |kinds: &[TaskKind], off: u64| -> Result<Vec<ToyTask>> {
            kinds
                .iter()
                .enumerate()
                .map(|(i, &k)| make_task(k, params, seed.wrapping_mul(1_000_003).wrapping_add(off + i as u64)))
                .collect()
        };
        Self::new(make(train, 0)?, make(held_out, 10_000)?)
    }

    /// Every order/map combination; `held_out` of them are set aside.
    pub fn standard(held_out: &[TaskKind], params: &TaskParams, seed: u64) -> Result<Self> {
        let train: Vec<TaskKind> = TaskKind::all_seq().into_iter().filter(|k| !held_out.contains(k)).collect();
        Self::generate(&train, held_out, params, seed)
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &ToyTask> {
        self.train.iter().chain(&self.held_out)
    }

    pub fn find(&self, id: &str) -> Option<&ToyTask> {
        self.all_tasks().find(|t| t.id == id)
    }

    /// `n` training descriptions sampled from training tasks other than `task_id`.
    pub fn unaligned_descriptions(&self, task_id: &str, n: usize, seed: u64) -> Result<Vec<String>> {
        let pool: Vec<&String> = self
            .train
            .iter()
            .filter(|t| t.id != task_id)
            .flat_map(|t| &t.train_descriptions)
            .collect();
        if self.train.len() < 2 || pool.is_empty() {
            return Err(Error::Capacity("unaligned descriptions need at least two tasks".into()));
        }
        let own: HashSet<&String> = self
            .find(task_id)
            .map(|t| t.train_descriptions.iter().collect())
            .unwrap_or_default();
        let pool: Vec<&String> = pool.into_iter().filter(|d| !own.contains(d)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| pool.choose(&mut rng).map(|s| (*s).clone()).unwrap_or_default())
            .collect())
    }

    /// Plain-text dump, one example per line.
    pub fn dump(&self) -> String {
        let mut out = format!("suite symbols={}\n", self.vocab.n_symbols);
        for (tag, tasks) in [("task", &self.train), ("heldout", &self.held_out)] {
            for t in tasks.iter() {
                out.push_str(&format!("{tag} {} {}\n", t.id, t.kind.spec()));
                for d in &t.train_descriptions {
                    out.push_str(&format!("desc train {d}\n"));
                }
                for d in &t.eval_descriptions {
                    out.push_str(&format!("desc eval {d}\n"));
                }
                for (split, exs) in [("train", &t.train), ("test", &t.test)] {
                    for e in exs.iter() {
                        out.push_str(&format!(
                            "{split} {} -> {}\n",
                            self.vocab.render(&e.x),
                            self.vocab.render(&e.y)
                        ));
                    }
                }
                out.push_str("end\n");
            }
        }
        out
    }

    pub fn load_str(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| perr(1, "empty suite file"))?;
        let n_symbols: usize = head
            .strip_prefix("suite symbols=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(1, "expected `suite symbols=<n>`"))?;
        let vocab = Vocab::new(n_symbols)?;
        let (mut train, mut held) = (Vec::new(), Vec::new());
        let mut cur: Option<(bool, ToyTask)> = None;
        let parse_syms = |s: &str, line: usize| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|w| vocab.parse_symbol(w).ok_or_else(|| perr(line, &format!("unknown symbol {w:?}"))))
                .collect()
        };
        for (i, line) in lines {
            let ln = i + 1;
            let (word, rest) = line.split_once(' ').unwrap_or((line, ""));
            match (word, cur.as_mut()) {
                ("task" | "heldout", None) => {
                    let (id, spec) = rest.split_once(' ').ok_or_else(|| perr(ln, "expected id and kind"))?;
                    let kind = TaskKind::parse(spec.trim()).map_err(|e| perr(ln, &e.to_string()))?;
                    cur = Some((
                        word == "heldout",
                        ToyTask {
                            id: id.to_string(),
                            kind,
                            vocab,
                            train: vec![],
                            test: vec![],
                            train_descriptions: vec![],
                            eval_descriptions: vec![],
                        },
                    ));
                }
                ("desc", Some((_, t))) => match rest.split_once(' ') {
                    Some(("train", d)) => t.train_descriptions.push(d.to_string()),
                    Some(("eval", d)) => t.eval_descriptions.push(d.to_string()),
                    _ => return Err(perr(ln, "expected `desc train|eval <text>`")),
                },
                ("train" | "test", Some((_, t))) => {
                    let (x, y) = rest.split_once("->").ok_or_else(|| perr(ln, "expected `x -> y`"))?;
                    let ex = Example {
                        x: parse_syms(x, ln)?,
                        y: parse_syms(y, ln)?,
                    };
                    if word == "train" {
                        t.train.push(ex);
                    } else {
                        t.test.push(ex);
                    }
                }
                ("end", Some(_)) => {
                    let (is_held, t) = cur.take().expect("matched Some");
                    t.self_check()?;
                    if is_held {
                        held.push(t);
                    } else {
                        train.push(t);
                    }
                }
                _ => return Err(perr(ln, &format!("unexpected line {line:?}"))),
            }
        }
        if cur.is_some() {
            return Err(perr(text.lines().count(), "missing `end`"));
        }
        Self::new(train, held)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.dump())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TaskParams {
        TaskParams {
            n_train: 20,
            n_test: 10,
            ..TaskParams::default()
        }
    }

    fn syms(v: &Vocab, s: &str) -> Vec<usize> {
        s.split_whitespace().map(|w| v.parse_symbol(w).unwrap()).collect()
    }

    #[test]
    fn rule_examples() {
        let v = Vocab::new(16).unwrap();
        let abc = syms(&v, "a b c");
        let copy = TaskKind::parse("copy").unwrap();
        assert_eq!(copy.apply(&abc, 16).unwrap(), syms(&v, "a b c"));
        let rev = TaskKind::parse("reverse").unwrap();
        assert_eq!(rev.apply(&abc, 16).unwrap(), syms(&v, "c b a"));
        let add = TaskKind::ModularAdd { modulus: 5 };
        assert_eq!(add.apply(&[3, 4], 16).unwrap(), vec![(3 + 4) % 5]);
        assert!(add.apply(&[5, 0], 16).is_none());
        let case = TaskKind::parse("case_map").unwrap();
        assert_eq!(case.apply(&syms(&v, "a H"), 16).unwrap(), syms(&v, "A h"));
        let succ = TaskKind::parse("successor").unwrap();
        assert_eq!(succ.apply(&syms(&v, "a H"), 16).unwrap(), syms(&v, "b a"));
        let rot = TaskKind::parse("rotate").unwrap();
        assert_eq!(rot.apply(&abc, 16).unwrap(), syms(&v, "b c a"));
        let filt = TaskKind::FilterToken { token: 1 };
        assert_eq!(filt.apply(&abc, 16).unwrap(), syms(&v, "a c"));
    }

    #[test]
    fn tasks_are_deterministic_disjoint_and_closed() {
        for kind in [
            TaskKind::parse("sort").unwrap(),
            TaskKind::ModularAdd { modulus: 7 },
            TaskKind::FilterToken { token: 3 },
        ] {
            let a = make_task(kind, &params(), 4).unwrap();
            assert_eq!(a, make_task(kind, &params(), 4).unwrap());
            a.self_check().unwrap();
            for ex in a.train.iter().chain(&a.test) {
                for prefix in [Prefix::Code, Prefix::Null] {
                    let (x, y) = a.encode(ex, prefix);
                    assert!(x.iter().chain(&y).all(|&t| t < a.vocab.size()));
                }
            }
        }
    }

    #[test]
    fn inputs_cover_the_alphabet() {
        let t = make_task(TaskKind::parse("copy").unwrap(), &TaskParams::default(), 1).unwrap();
        for pos in 0..t.train[0].x.len() {
            let seen: HashSet<usize> = t.train.iter().map(|e| e.x[pos]).collect();
            assert_eq!(seen.len(), t.vocab.n_symbols, "position {pos}");
        }
        let f = make_task(TaskKind::FilterToken { token: 3 }, &params(), 1).unwrap();
        let firsts: HashSet<usize> = f.train.iter().map(|e| e.x[0]).collect();
        assert!(firsts.len() > 2);
    }

    #[test]
    fn capacity_and_kind_errors() {
        let p = TaskParams {
            n_train: 20,
            n_test: 10,
            ..TaskParams::default()
        };
        assert!(matches!(
            make_task(TaskKind::ModularAdd { modulus: 5 }, &p, 0),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            make_task(TaskKind::ModularAdd { modulus: 99 }, &p, 0),
            Err(Error::Config(_))
        ));
        assert!(TaskKind::parse("juggle").is_err());
        let too_many = TaskParams {
            n_descriptions: 17,
            ..params()
        };
        assert!(matches!(
            make_task(TaskKind::ModularAdd { modulus: 7 }, &too_many, 0),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn description_splits_are_disjoint_and_seeded() {
        let t = make_task(TaskKind::parse("seq:sort:successor").unwrap(), &params(), 1).unwrap();
        let tr = description_variants(&t, DescSplit::Train, 16, 5).unwrap();
        let ev = description_variants(&t, DescSplit::Eval, 16, 5).unwrap();
        assert_eq!(tr, description_variants(&t, DescSplit::Train, 16, 5).unwrap());
        let trs: HashSet<_> = tr.iter().collect();
        assert_eq!(trs.len(), 16);
        assert!(ev.iter().all(|d| !trs.contains(d)));
    }

    #[test]
    fn unaligned_descriptions_come_from_other_tasks() {
        let held = [TaskKind::seq(Order::Sort, SymbolMap::CaseMap)];
        let suite = TaskSuite::standard(&held, &params(), 2).unwrap();
        let id = &suite.train[0].id;
        let got = suite.unaligned_descriptions(id, 10, 3).unwrap();
        assert_eq!(got, suite.unaligned_descriptions(id, 10, 3).unwrap());
        let own: HashSet<_> = suite.train[0].train_descriptions.iter().collect();
        let all: HashSet<_> = suite.train.iter().flat_map(|t| &t.train_descriptions).collect();
        assert!(got.iter().all(|d| !own.contains(d) && all.contains(d)));

        let lone = TaskSuite::new(vec![suite.train[0].clone()], vec![]).unwrap();
        assert!(matches!(lone.unaligned_descriptions(id, 1, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn held_out_kinds_are_excluded_from_training() {
        let held = [TaskKind::seq(Order::Reverse, SymbolMap::Successor)];
        let suite = TaskSuite::standard(&held, &params(), 0).unwrap();
        assert_eq!(suite.train.len(), 15);
        assert!(suite.train.iter().all(|t| t.kind != held[0]));
        let dup = TaskSuite::new(suite.train.clone(), vec![suite.train[0].clone()]);
        assert!(dup.is_err());
    }

    #[test]
    fn suite_text_round_trip() {
        let suite = TaskSuite::generate(
            &[TaskKind::parse("reverse").unwrap(), TaskKind::ModularAdd { modulus: 6 }],
            &[TaskKind::FilterToken { token: 2 }],
            &params(),
            8,
        )
        .unwrap();
        assert_eq!(TaskSuite::load_str(&suite.dump()).unwrap(), suite);
        assert!(TaskSuite::load_str("suite symbols=16\ntask x copy\n").is_err());
    }

    #[test]
    fn random_strings_are_seeded() {
        assert_eq!(random_strings(3, 4, 1), random_strings(3, 4, 1));
        assert_ne!(random_strings(3, 4, 1), random_strings(3, 4, 2));
    }
}
