//! Task-descriptor vectors: one-hot, learned-dictionary indices, hashed
//! bag-of-words text encodings, and tables loaded from file.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::Fnv64;
use crate::error::{Error, Result};

pub const DEFAULT_D_TASK: usize = 64;
pub const DEFAULT_HASH_SEED: u64 = 0x7a5c_e11a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    OneHot,
    Learned,
    Hashed,
    Table,
}

impl Provider {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "onehot" | "one_hot" => Ok(Self::OneHot),
            "learned" => Ok(Self::Learned),
            "hashed" => Ok(Self::Hashed),
            "table" | "file" => Ok(Self::Table),
            _ => Err(Error::Config(format!(
                "unknown embedding provider {s:?} (onehot, learned, hashed, table)"
            ))),
        }
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OneHot => "onehot",
            Self::Learned => "learned",
            Self::Hashed => "hashed",
            Self::Table => "table",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub vector: Vec<f64>,
    pub provider: Provider,
    pub source: String,
}

/// What a hypernetwork is conditioned on: a fixed vector, or a row of its
/// own learned task dictionary.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskInput {
    Vector(Vec<f64>),
    Learned(usize),
}

impl From<TaskEmbedding> for TaskInput {
    fn from(e: TaskEmbedding) -> Self {
        TaskInput::Vector(e.vector)
    }
}

pub fn embed_one_hot(index: usize, n_tasks: usize) -> Result<TaskEmbedding> {
    if index >= n_tasks {
        return Err(Error::Index {
            what: "one-hot task index",
            index,
            bound: n_tasks,
        });
    }
    let mut vector = vec![0.0; n_tasks];
    vector[index] = 1.0;
    Ok(TaskEmbedding {
        vector,
        provider: Provider::OneHot,
        source: index.to_string(),
    })
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of the token multiset, L2-normalized.
pub fn embed_hashed(description: &str, d_task: usize, hash_seed: u64) -> Result<TaskEmbedding> {
    if d_task == 0 {
        return Err(Error::Config("d_task must be positive".into()));
    }
    let tokens = tokenize(description);
    if tokens.is_empty() {
        return Err(Error::Input("description has no tokens".into()));
    }
    let mut vector = vec![0.0; d_task];
    for tok in &tokens {
        let mut h = Fnv64::with_seed(hash_seed);
        h.write(tok.as_bytes());
        let h = h.finish();
        let bucket = (h % d_task as u64) as usize;
        vector[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every token cancelled out; fall back to an unsigned count
        for tok in &tokens {
            let mut h = Fnv64::with_seed(hash_seed);
            h.write(tok.as_bytes());
            vector[(h.finish() % d_task as u64) as usize] += 1.0;
        }
    }
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    vector.iter_mut().for_each(|x| *x /= norm);
    Ok(TaskEmbedding {
        vector,
        provider: Provider::Hashed,
        source: description.to_string(),
    })
}

/// External embeddings keyed by exact description text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub d_task: usize,
    entries: HashMap<String, Vec<f64>>,
    order: Vec<String>,
}

impl EmbeddingTable {
    pub fn new(d_task: usize) -> Self {
        Self {
            d_task,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, description: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let key = description.into();
        if vector.len() != self.d_task {
            return Err(Error::Dimension {
                line: self.order.len() + 1,
                expected: self.d_task,
                found: vector.len(),
            });
        }
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateKey {
                line: self.order.len() + 1,
                key,
            });
        }
        self.order.push(key.clone());
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, description: &str) -> Option<TaskEmbedding> {
        self.entries.get(description).map(|v| TaskEmbedding {
            vector: v.clone(),
            provider: Provider::Table,
            source: description.to_string(),
        })
    }

    /// Parses `description<TAB>v1,v2,…` lines. The first row fixes the
    /// dimension.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let Some((key, vals)) = line.rsplit_once('\t') else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected description<TAB>values".into(),
                });
            };
            let vector = vals
                .split(',')
                .map(|v| {
                    let x: f64 = v.trim().parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad number {v:?}"),
                    })?;
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(Error::Parse {
                            line: line_no,
                            msg: "non-finite value".into(),
                        })
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            if vector.len() != t.d_task {
                return Err(Error::Dimension {
                    line: line_no,
                    expected: t.d_task,
                    found: vector.len(),
                });
            }
            if t.entries.contains_key(key) {
                return Err(Error::DuplicateKey {
                    line: line_no,
                    key: key.to_string(),
                });
            }
            t.insert(key, vector)?;
        }
        table.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "embedding table is empty".into(),
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            let vals: Vec<String> = self.entries[k].iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&format!("{k}\t{}\n", vals.join(",")));
        }
        out
    }
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::parse(&std::fs::read_to_string(path)?)
}

/// Maps `(task index, description)` to a hypernet input for one provider.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedder {
    OneHot { n_tasks: usize },
    Learned { n_tasks: usize },
    Hashed { d_task: usize, seed: u64 },
    Table(EmbeddingTable),
}

impl Embedder {
    pub fn provider(&self) -> Provider {
        match self {
            Self::OneHot { .. } => Provider::OneHot,
            Self::Learned { .. } => Provider::Learned,
            Self::Hashed { .. } => Provider::Hashed,
            Self::Table(_) => Provider::Table,
        }
    }

    /// Width of the vector fed to the task encoder.
    pub fn d_task(&self) -> usize {
        match self {
            Self::OneHot { n_tasks } | Self::Learned { n_tasks } => *n_tasks,
            Self::Hashed { d_task, .. } => *d_task,
            Self::Table(t) => t.d_task,
        }
    }

    /// Index-based providers ignore the text; text providers ignore the index.
    pub fn embed(&self, task_index: usize, description: &str) -> Result<TaskInput> {
        match self {
            Self::OneHot { n_tasks } => Ok(embed_one_hot(task_index, *n_tasks)?.into()),
            Self::Learned { n_tasks } => {
                if task_index >= *n_tasks {
                    return Err(Error::Index {
                        what: "learned task index",
                        index: task_index,
                        bound: *n_tasks,
                    });
                }
                Ok(TaskInput::Learned(task_index))
            }
            Self::Hashed { d_task, seed } => Ok(embed_hashed(description, *d_task, *seed)?.into()),
            Self::Table(t) => t
                .get(description)
                .map(Into::into)
                .ok_or_else(|| Error::UnknownId(format!("no embedding for {description:?}"))),
        }
    }
}
