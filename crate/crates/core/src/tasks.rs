//! Classification tasks: planted-rule synthetic suites and TSV ingestion.
//!
//! Synthetic tasks share a pool of motifs (ordered token bigrams). Each task
//! labels text by a rule over the motifs in its own set. Negatives carry the
//! same motif tokens in reversed order, so bag-of-tokens features carry no
//! label information and an order-aware encoder is required.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenSeq, CLS, FIRST_CONTENT_ID, PAD, SEP, UNK};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Single,
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub a: Vec<u32>,
    pub b: Option<Vec<u32>>,
    pub label: usize,
}

impl Example {
    pub fn single(a: Vec<u32>, label: usize) -> Self {
        Self { a, b: None, label }
    }

    pub fn pair(a: Vec<u32>, b: Vec<u32>, label: usize) -> Self {
        Self {
            a,
            b: Some(b),
            label,
        }
    }

    pub fn to_tokens(&self, max_positions: usize) -> Result<TokenSeq> {
        encode_ids(&self.a, self.b.as_deref(), max_positions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub family: String,
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(format!("task {}: {m}", self.name)));
        if self.num_classes < 2 {
            return bad(format!("needs at least 2 classes, has {}", self.num_classes));
        }
        if self.train.is_empty() || self.dev.is_empty() {
            return bad("train and dev splits must be non-empty".into());
        }
        for ex in self.train.iter().chain(&self.dev) {
            if ex.label >= self.num_classes {
                return bad(format!("label {} out of range", ex.label));
            }
            if ex.b.is_some() != (self.kind == TaskKind::Pair) {
                return bad("example arity does not match task kind".into());
            }
        }
        Ok(())
    }

    /// Fraction of the most frequent label over train and dev.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for ex in self.train.iter().chain(&self.dev) {
            counts[ex.label] += 1;
        }
        let total = self.train.len() + self.dev.len();
        *counts.iter().max().unwrap_or(&0) as f64 / total.max(1) as f64
    }
}

/// `[CLS] a...` or `[CLS] a... [SEP] b...`, truncated to `max_positions` by
/// trimming the end of the longer segment.
pub fn encode_ids(a: &[u32], b: Option<&[u32]>, max_positions: usize) -> Result<TokenSeq> {
    if a.is_empty() || b.is_some_and(|b| b.is_empty()) {
        return Err(Error::Input("empty text".into()));
    }
    let mut ids = vec![CLS];
    match b {
        None => {
            let keep = a.len().min(max_positions.saturating_sub(1));
            if keep == 0 {
                return Err(Error::Input(format!(
                    "max_positions {max_positions} leaves no room for text"
                )));
            }
            ids.extend_from_slice(&a[..keep]);
        }
        Some(b) => {
            if max_positions < 4 {
                return Err(Error::Input(format!(
                    "max_positions {max_positions} cannot hold a pair"
                )));
            }
            let (mut la, mut lb) = (a.len(), b.len());
            while 2 + la + lb > max_positions {
                if la >= lb {
                    la -= 1;
                } else {
                    lb -= 1;
                }
            }
            ids.extend_from_slice(&a[..la]);
            ids.push(SEP);
            ids.extend_from_slice(&b[..lb]);
        }
    }
    TokenSeq::new(ids)
}

/// Whitespace-token vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    ids: HashMap<String, u32>,
    size: usize,
}

impl Vocab {
    fn reserved(size: usize) -> HashMap<String, u32> {
        let _ = size;
        [("[CLS]", CLS), ("[SEP]", SEP), ("[PAD]", PAD), ("[UNK]", UNK)]
            .into_iter()
            .map(|(w, i)| (w.to_string(), i))
            .collect()
    }

    /// The vocabulary of synthetic suites: `w<id>` for every content id.
    pub fn synthetic(size: usize) -> Self {
        let mut ids = Self::reserved(size);
        for id in FIRST_CONTENT_ID..size as u32 {
            ids.insert(synthetic_word(id), id);
        }
        Self { ids, size }
    }

    /// Assigns ids to words in first-seen order until `size` is reached;
    /// later words map to `[UNK]`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, size: usize) -> Self {
        let mut ids = Self::reserved(size);
        let mut next = FIRST_CONTENT_ID;
        for text in texts {
            for w in text.split_whitespace() {
                if (next as usize) < size && !ids.contains_key(w) {
                    ids.insert(w.to_string(), next);
                    next += 1;
                }
            }
        }
        Self { ids, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

pub fn synthetic_word(id: u32) -> String {
    format!("w{id}")
}

/// Tokenizes raw text (or a text pair) and builds the encoder input.
pub fn encode_example(
    text_a: &str,
    text_b: Option<&str>,
    vocab: &Vocab,
    max_positions: usize,
) -> Result<TokenSeq> {
    let a = vocab.tokenize(text_a);
    let b = text_b.map(|t| vocab.tokenize(t));
    encode_ids(&a, b.as_deref(), max_positions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Binary: any motif of the task set present.
    MotifPresence,
    /// Three classes: number of distinct set motifs present, capped at 2.
    MotifCount,
    /// Binary over a pair: some set motif present in both segments.
    PairOverlap,
}

impl Family {
    pub fn tag(self) -> &'static str {
        match self {
            Family::MotifPresence => "motif-presence",
            Family::MotifCount => "motif-count",
            Family::PairOverlap => "pair-overlap",
        }
    }

    fn num_classes(self) -> usize {
        match self {
            Family::MotifCount => 3,
            _ => 2,
        }
    }

    fn kind(self) -> TaskKind {
        match self {
            Family::PairOverlap => TaskKind::Pair,
            _ => TaskKind::Single,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRule {
    pub family: Family,
    /// Indices into the motif pool.
    pub motifs: Vec<usize>,
}

impl TaskRule {
    pub fn label(&self, pool: &[(u32, u32)], ex: &Example) -> usize {
        let present = |seg: &[u32], m: usize| count_bigram(seg, pool[m]) > 0;
        match self.family {
            Family::MotifPresence => self.motifs.iter().any(|&m| present(&ex.a, m)) as usize,
            Family::MotifCount => self
                .motifs
                .iter()
                .filter(|&&m| present(&ex.a, m))
                .count()
                .min(2),
            Family::PairOverlap => {
                let b = ex.b.as_deref().unwrap_or(&[]);
                self.motifs
                    .iter()
                    .any(|&m| present(&ex.a, m) && present(b, m)) as usize
            }
        }
    }
}

pub fn count_bigram(seg: &[u32], (x, y): (u32, u32)) -> usize {
    seg.windows(2).filter(|w| w[0] == x && w[1] == y).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub vocab_size: usize,
    pub num_motifs: usize,
    pub motifs_per_task: usize,
    /// Content tokens of a single-text example.
    pub single_len: usize,
    /// Content tokens of each pair segment.
    pub segment_len: usize,
    pub dev_size: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_motifs: 12,
            motifs_per_task: 3,
            single_len: 8,
            segment_len: 5,
            dev_size: 200,
        }
    }
}

/// A generated suite together with its planted rules.
#[derive(Clone, Debug)]
pub struct PlantedSuite {
    pub tasks: Vec<TaskDataset>,
    pub rules: Vec<TaskRule>,
    pub motifs: Vec<(u32, u32)>,
    pub seed: u64,
    pub options: SuiteOptions,
}

impl PlantedSuite {
    /// Per-motif occurrence counts in segment a, then segment b.
    pub fn motif_indicators(&self, ex: &Example) -> Vec<f32> {
        let count = |seg: &[u32]| {
            self.motifs
                .iter()
                .map(|&m| count_bigram(seg, m) as f32)
                .collect::<Vec<_>>()
        };
        let mut out = count(&ex.a);
        out.extend(count(ex.b.as_deref().unwrap_or(&[])));
        out
    }

    /// Fraction of each task's motifs that also belong to another task.
    pub fn shared_motif_fractions(&self) -> Vec<f64> {
        self.rules
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let shared = r
                    .motifs
                    .iter()
                    .filter(|m| {
                        self.rules
                            .iter()
                            .enumerate()
                            .any(|(j, o)| j != i && o.motifs.contains(m))
                    })
                    .count();
                shared as f64 / r.motifs.len() as f64
            })
            .collect()
    }

    pub fn manifest(&self) -> Vec<SuiteEntry> {
        self.tasks
            .iter()
            .map(|t| SuiteEntry {
                name: t.name.clone(),
                kind: t.kind,
                family: t.family.clone(),
                num_classes: t.num_classes,
                train_size: t.train.len(),
                dev_size: t.dev.len(),
                seed: self.seed,
            })
            .collect()
    }
}

const MAX_REGENERATIONS: u64 = 8;
const MAJORITY_LIMIT: f64 = 0.65;
const MIN_SHARED_FRACTION: f64 = 0.5;

pub fn generate_task_suite(num_tasks: usize, seed: u64, sizes: &[usize]) -> Result<Vec<TaskDataset>> {
    Ok(plant_task_suite(num_tasks, seed, sizes, SuiteOptions::default())?.tasks)
}

pub fn plant_task_suite(
    num_tasks: usize,
    seed: u64,
    sizes: &[usize],
    options: SuiteOptions,
) -> Result<PlantedSuite> {
    if num_tasks < 2 {
        return Err(Error::Param(format!("need at least 2 tasks, got {num_tasks}")));
    }
    if sizes.len() != num_tasks {
        return Err(Error::Param(format!(
            "{} sizes given for {num_tasks} tasks",
            sizes.len()
        )));
    }
    if sizes.contains(&0) || options.dev_size == 0 {
        return Err(Error::Param("task sizes must be positive".into()));
    }
    let content = options.vocab_size.saturating_sub(FIRST_CONTENT_ID as usize);
    if content < 2 * options.num_motifs + 4 {
        return Err(Error::Param(format!(
            "vocabulary of {} is too small for {} motifs",
            options.vocab_size, options.num_motifs
        )));
    }
    if options.motifs_per_task < 2 || options.motifs_per_task > options.num_motifs {
        return Err(Error::Param("motifs_per_task must be in 2..=num_motifs".into()));
    }
    if options.single_len < 5 || options.segment_len < 5 {
        return Err(Error::Param("examples are too short to hold motifs".into()));
    }

    let mut rng = rng::seeded(seed);
    let mut tokens: Vec<u32> = (FIRST_CONTENT_ID..options.vocab_size as u32).collect();
    tokens.shuffle(&mut rng);
    let motifs: Vec<(u32, u32)> = (0..options.num_motifs)
        .map(|j| (tokens[2 * j], tokens[2 * j + 1]))
        .collect();
    let filler = tokens[2 * options.num_motifs..].to_vec();

    let mut order: Vec<usize> = (0..options.num_motifs).collect();
    order.shuffle(&mut rng);
    // Task i uses motifs i, i+1, ... (mod span): neighbours overlap, and
    // with enough tasks every motif of a task also belongs to another one.
    let span = options
        .num_motifs
        .min(num_tasks.max(options.motifs_per_task + 1));
    let rules: Vec<TaskRule> = (0..num_tasks)
        .map(|i| TaskRule {
            family: match i % 3 {
                0 => Family::MotifPresence,
                1 => Family::PairOverlap,
                _ => Family::MotifCount,
            },
            motifs: (0..options.motifs_per_task)
                .map(|t| order[(i + t) % span])
                .collect(),
        })
        .collect();

    let gen = Generator {
        motifs: &motifs,
        filler: &filler,
        options: &options,
    };
    let mut tasks = Vec::with_capacity(num_tasks);
    for (i, rule) in rules.iter().enumerate() {
        let mut attempt = 0;
        let task = loop {
            let mut task_rng = rng::derive(seed, (i as u64) << 8 | attempt);
            let task = gen.task(i, rule, sizes[i], &mut task_rng)?;
            if task.majority_rate() <= MAJORITY_LIMIT {
                break task;
            }
            attempt += 1;
            if attempt >= MAX_REGENERATIONS {
                return Err(Error::Param(format!(
                    "task {} stays above the majority limit",
                    task.name
                )));
            }
        };
        tasks.push(task);
    }
    let suite = PlantedSuite {
        tasks,
        rules,
        motifs,
        seed,
        options,
    };
    if let Some((i, f)) = suite
        .shared_motif_fractions()
        .into_iter()
        .enumerate()
        .find(|(_, f)| *f < MIN_SHARED_FRACTION)
    {
        return Err(Error::Param(format!(
            "task {i} shares only {f:.2} of its motifs"
        )));
    }
    Ok(suite)
}

struct Generator<'a> {
    motifs: &'a [(u32, u32)],
    filler: &'a [u32],
    options: &'a SuiteOptions,
}

type Piece = [u32; 2];

impl Generator<'_> {
    fn task(&self, index: usize, rule: &TaskRule, size: usize, rng: &mut Rng) -> Result<TaskDataset> {
        let classes = rule.family.num_classes();
        let split = |n: usize, rng: &mut Rng| -> Result<Vec<Example>> {
            let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            labels.shuffle(rng);
            labels
                .into_iter()
                .map(|label| {
                    let ex = self.example(rule, label, rng);
                    let truth = rule.label(self.motifs, &ex);
                    if truth != label {
                        return Err(Error::Param(format!(
                            "generated example disagrees with its rule ({truth} != {label})"
                        )));
                    }
                    Ok(ex)
                })
                .collect()
        };
        let train = split(size, rng)?;
        let dev = split(self.options.dev_size, rng)?;
        let task = TaskDataset {
            name: format!("task{index:02}-{}", rule.family.tag()),
            kind: rule.family.kind(),
            family: rule.family.tag().to_string(),
            num_classes: classes,
            label_names: (0..classes).map(|c| c.to_string()).collect(),
            train,
            dev,
        };
        task.validate()?;
        Ok(task)
    }

    fn real(&self, m: usize) -> Piece {
        let (x, y) = self.motifs[m];
        [x, y]
    }

    fn decoy(&self, m: usize) -> Piece {
        let (x, y) = self.motifs[m];
        [y, x]
    }

    fn other_pieces(&self, rule: &TaskRule, max: usize, rng: &mut Rng) -> Vec<Piece> {
        let others: Vec<usize> = (0..self.motifs.len())
            .filter(|m| !rule.motifs.contains(m))
            .collect();
        let count = rng.random_range(0..=max);
        (0..count)
            .map(|_| {
                let m = others[rng.random_range(0..others.len())];
                if rng.random_bool(0.5) {
                    self.real(m)
                } else {
                    self.decoy(m)
                }
            })
            .collect()
    }

    fn pick(&self, set: &[usize], rng: &mut Rng) -> usize {
        set[rng.random_range(0..set.len())]
    }

    fn example(&self, rule: &TaskRule, label: usize, rng: &mut Rng) -> Example {
        let s = &rule.motifs;
        match rule.family {
            Family::MotifPresence => {
                let n_set = rng.random_range(1..=2);
                let mut pieces: Vec<Piece> = (0..n_set)
                    .map(|i| {
                        let m = self.pick(s, rng);
                        if label == 1 && (i == 0 || rng.random_bool(0.5)) {
                            self.real(m)
                        } else {
                            self.decoy(m)
                        }
                    })
                    .collect();
                pieces.extend(self.other_pieces(rule, 2, rng));
                Example::single(self.layout(pieces, self.options.single_len, rng), label)
            }
            Family::MotifCount => {
                let mut chosen = s.clone();
                chosen.shuffle(rng);
                let mut pieces: Vec<Piece> = chosen[..label].iter().map(|&m| self.real(m)).collect();
                for _ in label..2 {
                    let m = self.pick(s, rng);
                    pieces.push(self.decoy(m));
                }
                pieces.extend(self.other_pieces(rule, 2, rng));
                Example::single(self.layout(pieces, self.options.single_len, rng), label)
            }
            Family::PairOverlap => {
                let m = self.pick(s, rng);
                let (mut pa, mut pb) = if label == 1 {
                    (vec![self.real(m)], vec![self.real(m)])
                } else if rng.random_bool(0.5) {
                    // same motif tokens, reversed on one side
                    if rng.random_bool(0.5) {
                        (vec![self.real(m)], vec![self.decoy(m)])
                    } else {
                        (vec![self.decoy(m)], vec![self.real(m)])
                    }
                } else {
                    let rest: Vec<usize> = s.iter().copied().filter(|&x| x != m).collect();
                    let m2 = self.pick(&rest, rng);
                    (vec![self.real(m)], vec![self.real(m2)])
                };
                for seg in [&mut pa, &mut pb] {
                    if rng.random_bool(0.5) {
                        seg.extend(self.other_pieces(rule, 1, rng));
                    }
                }
                let a = self.layout(pa, self.options.segment_len, rng);
                let b = self.layout(pb, self.options.segment_len, rng);
                Example::pair(a, b, label)
            }
        }
    }

    /// Places pieces in random order with at least one filler token between
    /// consecutive pieces, so no bigram forms across piece boundaries.
    fn layout(&self, mut pieces: Vec<Piece>, len: usize, rng: &mut Rng) -> Vec<u32> {
        let max_pieces = (len + 1) / 3;
        pieces.truncate(max_pieces);
        pieces.shuffle(rng);
        let p = pieces.len();
        let fillers = len - 2 * p;
        let mut gaps = vec![0usize; p + 1];
        for g in gaps.iter_mut().take(p).skip(1) {
            *g = 1;
        }
        let interior = p.saturating_sub(1);
        for _ in 0..fillers - interior {
            let slot = rng.random_range(0..=p);
            gaps[slot] += 1;
        }
        let mut out = Vec::with_capacity(len);
        for (i, gap) in gaps.iter().enumerate() {
            for _ in 0..*gap {
                out.push(self.filler[rng.random_range(0..self.filler.len())]);
            }
            if i < p {
                out.extend_from_slice(&pieces[i]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: TaskKind,
    pub family: String,
    pub num_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

pub const SUITE_MANIFEST: &str = "suite.jsonl";

/// Writes `<dir>/<name>.train.tsv`, `<dir>/<name>.dev.tsv` per task and the
/// JSON-lines suite manifest.
pub fn write_suite(dir: &Path, suite: &PlantedSuite) -> Result<()> {
    fs::create_dir_all(dir)?;
    for task in &suite.tasks {
        write_tsv(&dir.join(format!("{}.train.tsv", task.name)), task, &task.train)?;
        write_tsv(&dir.join(format!("{}.dev.tsv", task.name)), task, &task.dev)?;
    }
    let mut out = BufWriter::new(File::create(dir.join(SUITE_MANIFEST))?);
    for entry in suite.manifest() {
        let line = serde_json::to_string(&entry).map_err(|e| Error::Param(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn words(ids: &[u32]) -> String {
    ids.iter()
        .map(|&i| synthetic_word(i))
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_tsv(path: &Path, task: &TaskDataset, examples: &[Example]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in examples {
        let label = &task.label_names[ex.label];
        match &ex.b {
            None => writeln!(out, "{label}\t{}", words(&ex.a))?,
            Some(b) => writeln!(out, "{label}\t{}\t{}", words(&ex.a), words(b))?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the suite manifest and every task it lists.
pub fn load_suite(dir: &Path, vocab: &Vocab) -> Result<(Vec<SuiteEntry>, Vec<TaskDataset>)> {
    let path = dir.join(SUITE_MANIFEST);
    let file = File::open(&path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: SuiteEntry = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    let tasks = entries
        .iter()
        .map(|e| {
            let mut t = load_dataset(
                &dir.join(format!("{}.train.tsv", e.name)),
                &dir.join(format!("{}.dev.tsv", e.name)),
                Schema::Auto,
                vocab,
            )?;
            t.name = e.name.clone();
            t.family = e.family.clone();
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((entries, tasks))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schema {
    /// Two columns → single, three → pair.
    #[default]
    Auto,
    Single,
    Pair,
}

struct Row {
    line: usize,
    label: String,
    a: String,
    b: Option<String>,
}

fn read_rows(path: &Path, schema: Schema) -> Result<(Vec<Row>, Option<usize>)> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut columns = match schema {
        Schema::Auto => None,
        Schema::Single => Some(2),
        Schema::Pair => Some(3),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let n = *columns.get_or_insert(cols.len());
        if cols.len() != n || !(2..=3).contains(&n) {
            return Err(Error::Ingest {
                line: i + 1,
                message: format!("expected {n} tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[1..].iter().any(|c| c.trim().is_empty()) {
            return Err(Error::Ingest {
                line: i + 1,
                message: "empty text".into(),
            });
        }
        rows.push(Row {
            line: i + 1,
            label: cols[0].trim().to_string(),
            a: cols[1].to_string(),
            b: cols.get(2).map(|s| s.to_string()),
        });
    }
    Ok((rows, columns))
}

/// Loads a TSV dataset: `label \t text` or `label \t text_a \t text_b`.
/// Classes are the distinct training labels, ordered numerically when all
/// labels are integers.
pub fn load_dataset(train: &Path, dev: &Path, schema: Schema, vocab: &Vocab) -> Result<TaskDataset> {
    let (train_rows, train_cols) = read_rows(train, schema)?;
    let forced = match train_cols {
        Some(2) => Schema::Single,
        Some(3) => Schema::Pair,
        _ => schema,
    };
    let (dev_rows, dev_cols) = read_rows(dev, forced)?;
    if train_rows.is_empty() || dev_rows.is_empty() {
        return Err(Error::Ingest {
            line: 0,
            message: "train and dev files must contain examples".into(),
        });
    }
    if train_cols != dev_cols {
        return Err(Error::Ingest {
            line: dev_rows[0].line,
            message: "dev columns differ from train columns".into(),
        });
    }
    let distinct: BTreeSet<&str> = train_rows.iter().map(|r| r.label.as_str()).collect();
    let mut label_names: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
    if label_names.iter().all(|l| l.parse::<i64>().is_ok()) {
        label_names.sort_by_key(|l| l.parse::<i64>().unwrap());
    }
    if label_names.len() < 2 {
        return Err(Error::Ingest {
            line: train_rows.last().map_or(0, |r| r.line),
            message: format!("found {} class(es); need at least 2", label_names.len()),
        });
    }
    let index: BTreeMap<String, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect();
    let convert = |rows: &[Row]| -> Result<Vec<Example>> {
        rows.iter()
            .map(|r| {
                let label = *index.get(&r.label).ok_or_else(|| Error::Ingest {
                    line: r.line,
                    message: format!("label {:?} does not occur in training data", r.label),
                })?;
                Ok(Example {
                    a: vocab.tokenize(&r.a),
                    b: r.b.as_ref().map(|b| vocab.tokenize(b)),
                    label,
                })
            })
            .collect()
    };
    let kind = if train_cols == Some(3) {
        TaskKind::Pair
    } else {
        TaskKind::Single
    };
    let name = train
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split('.').next().unwrap_or(n).to_string())
        .unwrap_or_else(|| "dataset".into());
    let task = TaskDataset {
        name,
        kind,
        family: "ingested".into(),
        num_classes: label_names.len(),
        label_names,
        train: convert(&train_rows)?,
        dev: convert(&dev_rows)?,
    };
    Ok(task)
}
