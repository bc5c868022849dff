//! Benchmark scoring per question category, length/accuracy dynamics,
//! reflection-marker incidence and side-by-side run comparison.
//!
//! Reflection detection is token membership inside the think span. In a
//! closed toy vocabulary that is the only measurable analog of an "aha"
//! moment, and a nonzero rate says nothing about genuine self-correction.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{Policy, PolicySnapshot};
use crate::reward::{parse_response, score, RewardConfig};
use crate::taskgen::{
    render_prompt, vocab::fingerprint_of, Category, Dataset, Question, Vocabulary,
};
use crate::TokenId;

/// Checkpoints whose well-formed rate reaches this level count as past the
/// format-learning phase.
pub const FORMAT_CONVERGED_RATE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingConfig {
    /// 0 decodes greedily.
    pub temperature: f64,
    pub max_len: usize,
    /// Base seed for sampled decoding; question `i` uses `seed + i`.
    pub seed: u64,
    /// Count answers found outside well-formed tags.
    pub answer_fallback: bool,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_len: 64,
            seed: 0,
            answer_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl CategoryScore {
    fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += correct as usize;
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fingerprint of the evaluated questions.
    pub eval_set: String,
    pub n: usize,
    pub count: CategoryScore,
    pub relation: CategoryScore,
    pub depth: CategoryScore,
    pub distance: CategoryScore,
    pub total_accuracy: f64,
    pub mean_length: f64,
    pub p50_length: usize,
    pub p90_length: usize,
    pub well_formed_rate: f64,
    pub reflection_rate: f64,
}

impl EvalReport {
    pub fn category(&self, c: Category) -> &CategoryScore {
        match c {
            Category::Count => &self.count,
            Category::Relation => &self.relation,
            Category::Depth => &self.depth,
            Category::Distance => &self.distance,
        }
    }

    fn category_mut(&mut self, c: Category) -> &mut CategoryScore {
        match c {
            Category::Count => &mut self.count,
            Category::Relation => &mut self.relation,
            Category::Depth => &mut self.depth,
            Category::Distance => &mut self.distance,
        }
    }

    /// Accuracies in table order: count, relation, depth, distance, total.
    pub fn row(&self) -> [f64; 5] {
        [
            self.count.accuracy,
            self.relation.accuracy,
            self.depth.accuracy,
            self.distance.accuracy,
            self.total_accuracy,
        ]
    }
}

/// Fingerprint of an eval set: question text, choices and gold, in order.
pub fn eval_set_fingerprint(questions: &[Question]) -> String {
    let mut h = Sha256::new();
    for q in questions {
        h.update(q.text().as_bytes());
        for c in &q.choices {
            h.update([0u8]);
            h.update(c.as_bytes());
        }
        h.update([1u8, q.gold as u8]);
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Score `policy` on `questions`, one response per question.
pub fn evaluate(
    policy: &Policy,
    questions: &[Question],
    cfg: &DecodingConfig,
) -> Result<EvalReport> {
    if questions.is_empty() {
        return Err(Error::InsufficientData("empty eval set".into()));
    }
    let vocab = Vocabulary::standard();
    if policy.config().vocab_size != vocab.len() {
        return Err(Error::IncompatibleSnapshot(format!(
            "policy has {} output tokens, vocabulary has {}",
            policy.config().vocab_size,
            vocab.len()
        )));
    }
    let reward = RewardConfig {
        length_bonus_enabled: false,
        answer_fallback: cfg.answer_fallback,
        ..RewardConfig::default()
    };
    let window = policy.config().context_window;
    let prompt_limit = window.saturating_sub(cfg.max_len);
    let eos = vocab.special().eos;

    let mut report = EvalReport {
        eval_set: eval_set_fingerprint(questions),
        n: questions.len(),
        count: CategoryScore::default(),
        relation: CategoryScore::default(),
        depth: CategoryScore::default(),
        distance: CategoryScore::default(),
        total_accuracy: 0.0,
        mean_length: 0.0,
        p50_length: 0,
        p90_length: 0,
        well_formed_rate: 0.0,
        reflection_rate: 0.0,
    };
    let mut lengths = Vec::with_capacity(questions.len());
    let (mut accuracy, mut well_formed, mut reflective) = (0.0, 0usize, 0usize);
    for (i, q) in questions.iter().enumerate() {
        let prompt = render_prompt(q, prompt_limit)?;
        let rollout = policy.sample(
            &prompt,
            cfg.temperature,
            cfg.max_len,
            eos,
            cfg.seed.wrapping_add(i as u64),
        )?;
        let parsed = parse_response(&rollout.tokens);
        let b = score(&parsed, q.gold, &reward);
        accuracy += b.accuracy;
        report.category_mut(q.category).add(b.correct);
        well_formed += parsed.well_formed as usize;
        reflective += detect_reflection(&rollout.tokens).found as usize;
        lengths.push(parsed.num_tokens);
    }
    let n = questions.len() as f64;
    report.total_accuracy = accuracy / n;
    report.well_formed_rate = well_formed as f64 / n;
    report.reflection_rate = reflective as f64 / n;
    report.mean_length = lengths.iter().sum::<usize>() as f64 / n;
    lengths.sort_unstable();
    report.p50_length = percentile(&lengths, 0.5);
    report.p90_length = percentile(&lengths, 0.9);
    Ok(report)
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[usize], p: f64) -> usize {
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// [`evaluate`] a stored snapshot, checking that it was trained on the same
/// vocabulary the dataset was written with.
pub fn evaluate_snapshot(
    snapshot: &PolicySnapshot,
    dataset: &Dataset,
    cfg: &DecodingConfig,
) -> Result<EvalReport> {
    let snap_vocab = fingerprint_of(&snapshot.vocabulary);
    if snap_vocab != dataset.vocabulary {
        return Err(Error::IncompatibleSnapshot(format!(
            "snapshot vocabulary {snap_vocab} differs from eval set vocabulary {}",
            dataset.vocabulary
        )));
    }
    if dataset.vocabulary != Vocabulary::standard().fingerprint() {
        return Err(Error::IncompatibleSnapshot(format!(
            "eval set vocabulary {} is not the built-in vocabulary",
            dataset.vocabulary
        )));
    }
    evaluate(&snapshot.restore()?, &dataset.questions, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reflection {
    pub found: bool,
    /// Positions of marker tokens inside the think span.
    pub positions: Vec<usize>,
}

/// Reflection markers inside the think span. The span opens with the prompt
/// and ends at `</think>`; without one it ends at the first `<answer>` or the
/// stop token.
pub fn detect_reflection(tokens: &[TokenId]) -> Reflection {
    let sp = Vocabulary::standard().special();
    let end = tokens
        .iter()
        .position(|t| *t == sp.think_close || *t == sp.answer_open || *t == sp.eos)
        .unwrap_or(tokens.len());
    let positions: Vec<usize> = (0..end).filter(|&i| sp.is_reflection(tokens[i])).collect();
    Reflection {
        found: !positions.is_empty(),
        positions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPoint {
    pub step: usize,
    pub accuracy: f64,
    pub mean_length: f64,
    pub well_formed_rate: f64,
}

/// Pearson coefficient, `NaN` with `defined == false` when either series is
/// constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub defined: bool,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub series: Vec<DynamicsPoint>,
    pub correlation: Correlation,
    /// First checkpoint step whose well-formed rate reached
    /// [`FORMAT_CONVERGED_RATE`].
    pub format_converged_at: Option<usize>,
    /// Correlation over checkpoints from `format_converged_at` on; `None` when
    /// fewer than three such checkpoints exist.
    pub converged_correlation: Option<Correlation>,
}

impl Dynamics {
    /// Plot-ready table: `step,accuracy,mean_length,well_formed_rate`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,accuracy,mean_length,well_formed_rate\n");
        for p in &self.series {
            s.push_str(&format!(
                "{},{},{},{}\n",
                p.step, p.accuracy, p.mean_length, p.well_formed_rate
            ));
        }
        s
    }
}

/// One-pass (co-moment update) Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Correlation {
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (k + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    let n = xs.len().min(ys.len());
    let scale = (mx.abs() + my.abs() + 1.0) * f64::EPSILON;
    if sxx <= scale * scale || syy <= scale * scale {
        return Correlation {
            value: f64::NAN,
            defined: false,
            n,
        };
    }
    Correlation {
        value: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        defined: true,
        n,
    }
}

/// Minimal view of a training step used by [`dynamics`].
pub trait StepLength {
    fn step(&self) -> usize;
    fn mean_response_length(&self) -> Option<f64>;
}

/// Align periodic eval reports with the training metrics stream. A
/// checkpoint's length is the mean rollout length over the training steps
/// since the previous checkpoint; checkpoints with no such steps are dropped.
pub fn dynamics<M: StepLength>(metrics: &[M], evals: &[(usize, EvalReport)]) -> Result<Dynamics> {
    let mut series = Vec::new();
    let mut prev: Option<usize> = None;
    for (step, report) in evals {
        if prev.is_some_and(|p| *step <= p) {
            return Err(Error::InvalidInput(format!(
                "checkpoint steps must increase, got {step} after {}",
                prev.unwrap_or_default()
            )));
        }
        let lo = prev.map_or(0, |p| p + 1);
        let window: Vec<f64> = metrics
            .iter()
            .filter(|m| m.step() >= lo && m.step() <= *step)
            .filter_map(|m| m.mean_response_length())
            .collect();
        prev = Some(*step);
        if window.is_empty() {
            continue;
        }
        series.push(DynamicsPoint {
            step: *step,
            accuracy: report.total_accuracy,
            mean_length: window.iter().sum::<f64>() / window.len() as f64,
            well_formed_rate: report.well_formed_rate,
        });
    }
    if series.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 checkpoints with training metrics, got {}",
            series.len()
        )));
    }
    let corr = |pts: &[DynamicsPoint]| {
        let xs: Vec<f64> = pts.iter().map(|p| p.mean_length).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.accuracy).collect();
        pearson(&xs, &ys)
    };
    let start = series
        .iter()
        .position(|p| p.well_formed_rate >= FORMAT_CONVERGED_RATE);
    let converged_correlation = start
        .filter(|&i| series.len() - i >= 3)
        .map(|i| corr(&series[i..]));
    Ok(Dynamics {
        correlation: corr(&series),
        format_converged_at: start.map(|i| series[i].step),
        converged_correlation,
        series,
    })
}

pub const TABLE_COLUMNS: [&str; 5] = ["Count", "Relation", "Depth", "Distance", "Total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    /// Accuracies in [`TABLE_COLUMNS`] order.
    pub accuracy: [f64; 5],
    /// Difference from the baseline row, same order.
    pub delta: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Delimiter-separated table with accuracies in percent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run");
        for c in TABLE_COLUMNS {
            s.push_str(&format!(",{c} Acc(%)"));
        }
        for c in TABLE_COLUMNS {
            s.push_str(&format!(",{c} Delta(pp)"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.run);
            for v in r.accuracy.iter().chain(&r.delta) {
                s.push_str(&format!(",{:.2}", 100.0 * v));
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width rendering for terminals.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.run.len())
            .max()
            .unwrap_or(3)
            .max(3);
        let mut s = format!("{:width$}", "run");
        for c in TABLE_COLUMNS {
            s.push_str(&format!(" {c:>10}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:width$}", r.run));
            for (v, d) in r.accuracy.iter().zip(&r.delta) {
                let cell = if r.run == self.baseline {
                    format!("{:.2}", 100.0 * v)
                } else {
                    format!("{:.2}{:+.1}", 100.0 * v, 100.0 * d)
                };
                s.push_str(&format!(" {cell:>10}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Table of named reports with deltas against the first one.
pub fn compare_runs(reports: &[(String, EvalReport)]) -> Result<Comparison> {
    let [(base_name, base), rest @ ..] = reports else {
        return Err(Error::InsufficientData("nothing to compare".into()));
    };
    if rest.is_empty() {
        return Err(Error::InsufficientData("need at least two reports".into()));
    }
    for (name, r) in rest {
        if r.eval_set != base.eval_set || r.n != base.n {
            return Err(Error::IncomparableRuns(format!(
                "{name} was evaluated on {} ({} questions), {base_name} on {} ({})",
                r.eval_set, r.n, base.eval_set, base.n
            )));
        }
    }
    let base_row = base.row();
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let accuracy = r.row();
            let mut delta = [0.0; 5];
            for k in 0..5 {
                delta[k] = accuracy[k] - base_row[k];
            }
            ComparisonRow {
                run: name.clone(),
                accuracy,
                delta,
            }
        })
        .collect();
    Ok(Comparison {
        baseline: base_name.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy, PolicyConfig};
    use crate::taskgen::{make_splits, SplitConfig};

    fn enc(text: &str) -> Vec<TokenId> {
        Vocabulary::standard().encode(text).unwrap()
    }

    fn questions(n: usize) -> Vec<Question> {
        make_splits(&SplitConfig {
            train_size: 4,
            eval_size: n,
            ..SplitConfig::default()
        })
        .unwrap()
        .eval
    }

    fn small_policy() -> Policy {
        init_policy(PolicyConfig {
            d_model: 16,
            n_heads: 2,
            ..PolicyConfig::new(Vocabulary::standard().len(), 176, 3)
        })
        .unwrap()
    }

    struct M(usize, f64);

    impl StepLength for M {
        fn step(&self) -> usize {
            self.0
        }
        fn mean_response_length(&self) -> Option<f64> {
            Some(self.1)
        }
    }

    fn report_with(acc: f64, wf: f64) -> EvalReport {
        let mut r = evaluate_fake(acc);
        r.well_formed_rate = wf;
        r
    }

    fn evaluate_fake(acc: f64) -> EvalReport {
        let s = CategoryScore {
            n: 10,
            correct: (acc * 10.0) as usize,
            accuracy: acc,
        };
        EvalReport {
            eval_set: "x".into(),
            n: 40,
            count: s,
            relation: s,
            depth: s,
            distance: s,
            total_accuracy: acc,
            mean_length: 0.0,
            p50_length: 0,
            p90_length: 0,
            well_formed_rate: 0.0,
            reflection_rate: 0.0,
        }
    }

    #[test]
    fn reflection_inside_think_span_only() {
        assert!(
            detect_reflection(&enc(
                "so wait there are 2 cube </think> <answer> B </answer>"
            ))
            .found
        );
        let r = detect_reflection(&enc("so wait but C"));
        assert_eq!(r.positions, vec![1, 2]);
        assert!(!detect_reflection(&enc("so </think> <answer> wait B </answer>")).found);
        assert!(!detect_reflection(&enc("so <eos> wait")).found);
    }

    #[test]
    fn evaluation_is_deterministic_and_weighted() {
        let qs = questions(12);
        let p = small_policy();
        let cfg = DecodingConfig {
            max_len: 8,
            ..DecodingConfig::default()
        };
        let a = evaluate(&p, &qs, &cfg).unwrap();
        assert_eq!(a, evaluate(&p, &qs, &cfg).unwrap());
        let weighted: f64 = Category::ALL
            .iter()
            .map(|c| a.category(*c).accuracy * a.category(*c).n as f64)
            .sum::<f64>()
            / a.n as f64;
        assert!((weighted - a.total_accuracy).abs() < 1e-9);
        assert!(a.mean_length <= 8.0 && a.p90_length <= 8);
        assert_eq!(
            Category::ALL
                .iter()
                .map(|c| a.category(*c).n)
                .sum::<usize>(),
            12
        );
    }

    #[test]
    fn empty_eval_set_is_an_error() {
        assert!(matches!(
            evaluate(&small_policy(), &[], &DecodingConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn vocabulary_mismatch_is_incompatible() {
        let qs = questions(4);
        let dataset = Dataset {
            split: "eval".into(),
            vocabulary: Vocabulary::standard().fingerprint(),
            questions: qs,
        };
        let p = small_policy();
        let mut snap = PolicySnapshot::capture(&p, Vocabulary::standard().tokens());
        evaluate_snapshot(&snap, &dataset, &DecodingConfig::default()).unwrap();
        snap.vocabulary.swap(3, 4);
        assert!(matches!(
            evaluate_snapshot(&snap, &dataset, &DecodingConfig::default()),
            Err(Error::IncompatibleSnapshot(_))
        ));
    }

    #[test]
    fn pearson_edge_cases() {
        let c = pearson(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4]);
        assert!(c.defined && (c.value - 1.0).abs() < 1e-9);
        let c = pearson(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]);
        assert!(!c.defined && c.value.is_nan());
        let c = pearson(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]);
        assert!((c.value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn dynamics_windows_and_convergence() {
        let metrics: Vec<M> = (1..=30).map(|s| M(s, s as f64)).collect();
        let evals = vec![
            (0, report_with(0.2, 0.0)),
            (10, report_with(0.3, 0.5)),
            (20, report_with(0.5, 0.95)),
            (30, report_with(0.6, 1.0)),
        ];
        let d = dynamics(&metrics, &evals).unwrap();
        assert_eq!(d.series.len(), 3);
        assert_eq!(d.series[0].mean_length, 5.5);
        assert_eq!(d.series[1].mean_length, 15.5);
        assert_eq!(d.format_converged_at, Some(20));
        assert!(d.converged_correlation.is_none());
        assert!(d.correlation.value > 0.9);
        assert!(d.to_csv().starts_with("step,accuracy"));

        assert!(matches!(
            dynamics(&metrics, &evals[..3]),
            Err(Error::InsufficientData(_))
        ));
        let backwards = vec![evals[1].clone(), evals[0].clone()];
        assert!(dynamics(&metrics, &backwards).is_err());
    }

    #[test]
    fn comparison_table() {
        let base = evaluate_fake(0.3);
        let oracle = evaluate_fake(1.0);
        let t = compare_runs(&[("base".into(), base.clone()), ("oracle".into(), oracle)]).unwrap();
        assert_eq!(t.rows[0].delta, [0.0; 5]);
        for d in t.rows[1].delta {
            assert!((d - 0.7).abs() < 1e-12);
        }
        let csv = t.to_csv();
        assert!(csv.starts_with(
            "run,Count Acc(%),Relation Acc(%),Depth Acc(%),Distance Acc(%),Total Acc(%)"
        ));
        let same = compare_runs(&[("a".into(), base.clone()), ("b".into(), base.clone())]).unwrap();
        assert!(same.rows[1].delta.iter().all(|d| *d == 0.0));

        let mut other = base.clone();
        other.eval_set = "y".into();
        assert!(matches!(
            compare_runs(&[("a".into(), base.clone()), ("b".into(), other)]),
            Err(Error::IncomparableRuns(_))
        ));
        assert!(compare_runs(&[("a".into(), base)]).is_err());
    }
}
