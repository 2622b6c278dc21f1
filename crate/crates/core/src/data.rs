//! Synthetic planted-signal sequence classification tasks.
//!
//! Each class owns a disjoint set of signal tokens. An example of class `c`
//! carries `⌈ρ·S⌉` tokens drawn from class `c`'s set at random positions; the
//! remaining positions are filled from a background vocabulary that contains
//! no signal token of any task in the suite.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_DRAWS_PER_EXAMPLE: usize = 1000;

/// Token sequences with labels for one task, stored row-major `[n × S]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatch {
    tokens: Vec<u32>,
    labels: Vec<usize>,
    task: usize,
    seq_len: usize,
}

impl TaskBatch {
    pub fn new(task: usize, seq_len: usize, tokens: Vec<u32>, labels: Vec<usize>) -> Result<Self> {
        if seq_len == 0 || tokens.len() != labels.len() * seq_len {
            return Err(Error::Contract(format!(
                "{} tokens do not form {} sequences of length {seq_len}",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(Self {
            tokens,
            labels,
            task,
            seq_len,
        })
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.task, self.seq_len, self.tokens.clone(), labels)
    }

    /// Sub-batch of the given example indices, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        Self {
            tokens,
            labels,
            task: self.task,
            seq_len: self.seq_len,
        }
    }

    pub fn label_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Frequency of the most common label.
    pub fn majority_frequency(&self) -> f64 {
        let classes = self.labels.iter().max().map_or(0, |m| m + 1);
        let best = self.label_counts(classes).into_iter().max().unwrap_or(0);
        best as f64 / self.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 500,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub num_classes: usize,
    /// One signal token set per class.
    pub signal_sets: Vec<Vec<u32>>,
    /// Tokens used for non-signal positions.
    pub background: Vec<u32>,
    pub signal_density: f64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl TaskSpec {
    /// Contiguous signal sets of `set_size` tokens starting at `first_token`,
    /// with every other vocabulary token as background.
    #[allow(clippy::too_many_arguments)]
    pub fn planted(
        task_id: usize,
        num_classes: usize,
        first_token: u32,
        set_size: usize,
        signal_density: f64,
        vocab_size: usize,
        seq_len: usize,
        sizes: SplitSizes,
        seed: u64,
    ) -> Self {
        let signal_sets: Vec<Vec<u32>> = (0..num_classes)
            .map(|c| {
                let start = first_token as usize + c * set_size;
                (start..start + set_size).map(|t| t as u32).collect()
            })
            .collect();
        let used: HashSet<u32> = signal_sets.iter().flatten().copied().collect();
        let background = (0..vocab_size as u32).filter(|t| !used.contains(t)).collect();
        Self {
            task_id,
            num_classes,
            signal_sets,
            background,
            signal_density,
            vocab_size,
            seq_len,
            sizes,
            seed,
        }
    }

    pub fn signal_positions(&self) -> usize {
        (self.signal_density * self.seq_len as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec("a task needs at least two classes".into()));
        }
        if self.signal_sets.len() != self.num_classes {
            return Err(Error::Spec(format!(
                "{} signal sets for {} classes",
                self.signal_sets.len(),
                self.num_classes
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Spec("sequence length must be positive".into()));
        }
        if !(self.signal_density > 0.0 && self.signal_density <= 1.0) {
            return Err(Error::Spec(format!(
                "signal density {} outside (0, 1]",
                self.signal_density
            )));
        }
        if self.signal_density * (self.seq_len as f64) < 1.0 {
            return Err(Error::Spec("signal density leaves no signal position".into()));
        }
        let mut seen = HashSet::new();
        for (c, set) in self.signal_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Spec(format!("class {c} has an empty signal set")));
            }
            for &t in set {
                if t as usize >= self.vocab_size {
                    return Err(Error::Spec(format!("signal token {t} outside the vocabulary")));
                }
                if !seen.insert(t) {
                    return Err(Error::Spec(format!("signal token {t} is shared between classes")));
                }
            }
        }
        if self.signal_positions() < self.seq_len && self.background.is_empty() {
            return Err(Error::Spec("background vocabulary is empty".into()));
        }
        if let Some(t) = self.background.iter().find(|t| seen.contains(t)) {
            return Err(Error::Spec(format!("background token {t} is also a signal token")));
        }
        if let Some(t) = self.background.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Spec(format!("background token {t} outside the vocabulary")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub spec: TaskSpec,
    pub train: TaskBatch,
    pub val: TaskBatch,
    pub test: TaskBatch,
}

/// Draws train, val and test splits; no token sequence appears twice.
pub fn generate(spec: &TaskSpec) -> Result<TaskSplits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut draw_split = |n: usize, rng: &mut ChaCha8Rng| -> Result<TaskBatch> {
        let mut tokens = Vec::with_capacity(n * spec.seq_len);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (seq, label) = (0..MAX_DRAWS_PER_EXAMPLE)
                .map(|_| draw_example(spec, rng))
                .find(|(seq, _)| !seen.contains(seq))
                .ok_or_else(|| {
                    Error::Spec("vocabulary too small to draw distinct sequences".into())
                })?;
            tokens.extend_from_slice(&seq);
            seen.insert(seq);
            labels.push(label);
        }
        TaskBatch::new(spec.task_id, spec.seq_len, tokens, labels)
    };
    let train = draw_split(spec.sizes.train, &mut rng)?;
    let val = draw_split(spec.sizes.val, &mut rng)?;
    let test = draw_split(spec.sizes.test, &mut rng)?;
    Ok(TaskSplits {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

fn draw_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vec<u32>, usize) {
    let label = rng.random_range(0..spec.num_classes);
    let mut seq: Vec<u32> = (0..spec.seq_len)
        .map(|_| {
            if spec.background.is_empty() {
                0
            } else {
                spec.background[rng.random_range(0..spec.background.len())]
            }
        })
        .collect();
    let set = &spec.signal_sets[label];
    for pos in sample(rng, spec.seq_len, spec.signal_positions()) {
        seq[pos] = set[rng.random_range(0..set.len())];
    }
    (seq, label)
}

/// Replaces each token independently with probability `p` by a uniform draw
/// from the rest of the vocabulary. Labels and the input are untouched.
pub fn inject_noise(batch: &TaskBatch, vocab_size: usize, p: f64, seed: u64) -> Result<TaskBatch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("noise ratio {p} outside [0, 1]")));
    }
    if vocab_size < 2 {
        return Err(Error::Config("noise injection needs a vocabulary of at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = batch
        .tokens
        .iter()
        .map(|&t| {
            if rng.random::<f64>() < p {
                let r = rng.random_range(0..vocab_size as u32 - 1);
                if r >= t {
                    r + 1
                } else {
                    r
                }
            } else {
                t
            }
        })
        .collect();
    Ok(TaskBatch {
        tokens,
        ..batch.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub num_tasks: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub signal_set_size: usize,
    pub base_density: f64,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            num_tasks: 2,
            vocab_size: 200,
            seq_len: 16,
            signal_set_size: 8,
            base_density: 0.25,
            sizes: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl SuiteConfig {
    /// Classes alternate 2, 3, 2, …
    pub fn classes_for(task: usize) -> usize {
        2 + task % 2
    }

    /// Each later task carries one more signal position per sequence.
    pub fn density_for(&self, task: usize) -> f64 {
        (self.base_density + task as f64 / self.seq_len as f64).min(1.0)
    }

    pub fn task_seed(&self, task: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(task as u64 + 1)
    }

    /// Task specs with disjoint signal regions and a shared background.
    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        if self.num_tasks == 0 {
            return Err(Error::Spec("a suite needs at least one task".into()));
        }
        let region: usize = (0..self.num_tasks)
            .map(|t| Self::classes_for(t) * self.signal_set_size)
            .sum();
        if region >= self.vocab_size {
            return Err(Error::Spec(format!(
                "vocabulary of {} cannot hold {region} signal tokens plus background",
                self.vocab_size
            )));
        }
        let background: Vec<u32> = (region as u32..self.vocab_size as u32).collect();
        let mut first = 0u32;
        let mut specs = Vec::with_capacity(self.num_tasks);
        for t in 0..self.num_tasks {
            let classes = Self::classes_for(t);
            let mut spec = TaskSpec::planted(
                t,
                classes,
                first,
                self.signal_set_size,
                self.density_for(t),
                self.vocab_size,
                self.seq_len,
                self.sizes,
                self.task_seed(t),
            );
            spec.background = background.clone();
            first += (classes * self.signal_set_size) as u32;
            specs.push(spec);
        }
        Ok(specs)
    }
}

pub fn make_multitask_suite(config: &SuiteConfig) -> Result<Vec<TaskSplits>> {
    config.specs()?.iter().map(generate).collect()
}

/// Writes `task_id<TAB>label<TAB>space-separated token ids` lines.
pub fn export_records<W: Write>(batch: &TaskBatch, mut out: W) -> Result<()> {
    for i in 0..batch.len() {
        let ids: Vec<String> = batch.sequence(i).iter().map(u32::to_string).collect();
        writeln!(out, "{}\t{}\t{}", batch.task, batch.labels[i], ids.join(" "))?;
    }
    Ok(())
}

/// Reads records written by [`export_records`], grouped by task id.
pub fn import_records<R: BufRead>(input: R) -> Result<BTreeMap<usize, TaskBatch>> {
    let mut grouped: BTreeMap<usize, (usize, Vec<u32>, Vec<usize>)> = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [task, label, tokens] = fields.as_slice() else {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let task: usize = task.parse().map_err(|e| parse_err(format!("task id: {e}")))?;
        let label: usize = label.parse().map_err(|e| parse_err(format!("label: {e}")))?;
        let tokens: Vec<u32> = tokens
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(format!("token id: {e}")))?;
        if tokens.is_empty() {
            return Err(parse_err("empty token sequence".into()));
        }
        let entry = grouped
            .entry(task)
            .or_insert_with(|| (tokens.len(), Vec::new(), Vec::new()));
        if entry.0 != tokens.len() {
            return Err(parse_err(format!(
                "sequence length {} differs from {} seen earlier for task {task}",
                tokens.len(),
                entry.0
            )));
        }
        entry.1.extend(tokens);
        entry.2.push(label);
    }
    grouped
        .into_iter()
        .map(|(task, (seq_len, tokens, labels))| Ok((task, TaskBatch::new(task, seq_len, tokens, labels)?)))
        .collect()
}
