//! Train / eval splits and their JSONL files.
//!
//! A dataset file starts with a header line and then holds one question per
//! line:
//!
//! ```text
//! {"format":"rlzero-dataset","version":1,"split":"eval","vocabulary":"3f..","count":400}
//! {"seed":17,"category":"depth","scene":{..},"question":"scene: ..","choices":["cube","ball"],"gold":1}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_question, generate_scene, Category, Question, Scene, Vocabulary};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "rlzero-dataset";

/// Half-open range of scene seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_seeds: SeedRange,
    pub eval_seeds: SeedRange,
    pub train_size: usize,
    pub eval_size: usize,
    pub grid_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Questions with fewer options are skipped.
    pub min_choices: usize,
    /// Optional second held-out split on larger grids.
    pub ood: Option<OodConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub seeds: SeedRange,
    pub size: usize,
    pub grid_size: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_seeds: SeedRange {
                start: 0,
                end: 1_000_000,
            },
            eval_seeds: SeedRange {
                start: 1_000_000,
                end: 1_100_000,
            },
            train_size: 4000,
            eval_size: 400,
            grid_size: 5,
            min_objects: 3,
            max_objects: 5,
            min_choices: 4,
            ood: None,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut ranges = vec![("train", self.train_seeds), ("eval", self.eval_seeds)];
        if let Some(ood) = &self.ood {
            ranges.push(("ood", ood.seeds));
        }
        for (name, r) in &ranges {
            if r.start >= r.end {
                return Err(Error::Config(format!("{name} seed range is empty")));
            }
        }
        for (i, (a, ra)) in ranges.iter().enumerate() {
            for (b, rb) in &ranges[i + 1..] {
                if ra.overlaps(rb) {
                    return Err(Error::Config(format!(
                        "{a} seeds {}..{} overlap {b} seeds {}..{}",
                        ra.start, ra.end, rb.start, rb.end
                    )));
                }
            }
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if !(2..=super::MAX_CHOICES).contains(&self.min_choices) {
            return Err(Error::Config(format!(
                "min_choices must be in 2..={}",
                super::MAX_CHOICES
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Question>,
    pub eval: Vec<Question>,
    pub ood: Option<Vec<Question>>,
}

fn object_count(seed: u64, lo: usize, hi: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng.random_range(lo..=hi)
}

/// Generate questions for `targets` (one category per slot, in order),
/// consuming scene seeds from `range` until every slot is filled.
fn fill(
    targets: &[Category],
    range: SeedRange,
    grid_size: u32,
    cfg: &SplitConfig,
) -> Result<Vec<Question>> {
    let mut out = Vec::with_capacity(targets.len());
    let mut seed = range.start;
    for &category in targets {
        loop {
            if seed >= range.end {
                return Err(Error::Config(format!(
                    "seed range {}..{} exhausted after {} of {} questions",
                    range.start,
                    range.end,
                    out.len(),
                    targets.len()
                )));
            }
            let s = seed;
            seed += 1;
            let n = object_count(s, cfg.min_objects, cfg.max_objects);
            let scene = generate_scene(s, grid_size, n)?;
            if let Ok(q) = generate_question(&scene, category, s) {
                if q.choices.len() >= cfg.min_choices {
                    out.push(q);
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Category sequence with counts as even as possible, interleaved.
fn stratified(size: usize) -> Vec<Category> {
    (0..size)
        .map(|i| Category::ALL[i % Category::ALL.len()])
        .collect()
}

pub fn make_splits(cfg: &SplitConfig) -> Result<Splits> {
    cfg.validate()?;
    let train = fill(
        &stratified(cfg.train_size),
        cfg.train_seeds,
        cfg.grid_size,
        cfg,
    )?;
    let eval = fill(
        &stratified(cfg.eval_size),
        cfg.eval_seeds,
        cfg.grid_size,
        cfg,
    )?;
    let ood = match &cfg.ood {
        Some(o) => Some(fill(&stratified(o.size), o.seeds, o.grid_size, cfg)?),
        None => None,
    };
    Ok(Splits { train, eval, ood })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    split: String,
    vocabulary: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    seed: u64,
    category: Category,
    scene: Scene,
    question: String,
    choices: Vec<String>,
    gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub vocabulary: String,
    pub questions: Vec<Question>,
}

pub fn write_dataset(path: &Path, split: &str, questions: &[Question]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: DATASET_FORMAT_VERSION,
        split: split.to_string(),
        vocabulary: Vocabulary::standard().fingerprint(),
        count: questions.len(),
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(w, "{line}").map_err(io)?;
    for q in questions {
        let rec = Record {
            seed: q.seed,
            category: q.category,
            scene: q.scene.clone(),
            question: q.text(),
            choices: q.choices.clone(),
            gold: q.gold,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
    if header.format != FORMAT_TAG {
        return Err(parse(
            1,
            format!("not a dataset file (format {:?})", header.format),
        ));
    }
    if header.version != DATASET_FORMAT_VERSION {
        return Err(parse(
            1,
            format!(
                "dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                header.version
            ),
        ));
    }
    let vocab = Vocabulary::standard();
    let mut questions = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(n, e.to_string()))?;
        if rec.gold >= rec.choices.len() || rec.choices.len() > super::MAX_CHOICES {
            return Err(parse(n, "gold index out of range".into()));
        }
        let tokens = vocab
            .encode(&rec.question)
            .map_err(|e| parse(n, e.to_string()))?;
        questions.push(Question {
            category: rec.category,
            seed: rec.seed,
            scene: rec.scene,
            tokens,
            choices: rec.choices,
            gold: rec.gold,
        });
    }
    if questions.len() != header.count {
        return Err(parse(
            1,
            format!(
                "header promises {} questions, found {}",
                header.count,
                questions.len()
            ),
        ));
    }
    Ok(Dataset {
        split: header.split,
        vocabulary: header.vocabulary,
        questions,
    })
}
