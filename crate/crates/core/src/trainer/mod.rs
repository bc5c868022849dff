//! GRPO and SFT training loops, the ablation recipes and run artifacts.
//!
//! One optimizer step consumes `grad_accum` questions. For GRPO each question
//! gets a group of `G` sampled responses which are scored, normalized into
//! advantages and turned into per-token weights by [`crate::grpo::grpo_loss`].
//! For SFT each question contributes the teacher-forced gold trace.
//!
//! A run directory holds:
//!
//! | file              | content                                         |
//! |-------------------|-------------------------------------------------|
//! | `manifest.json`   | resolved config, seed, source revision          |
//! | `metrics.jsonl`   | one [`StepMetrics`] per step                    |
//! | `timing.jsonl`    | wall-clock seconds per step                     |
//! | `evals.jsonl`     | periodic [`EvalReport`]s keyed by step          |
//! | `final_eval.json` | report on the full eval set                     |
//! | `initial.snap`    | starting policy, also the KL reference          |
//! | `final.snap`      | policy after the last step                      |
//! | `snapshots/`      | snapshots on the configured cadence             |
//!
//! Everything but `timing.jsonl` and `manifest.json` is a pure function of the
//! config.

mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, EvalSchedule, PolicySpec, RunConfig, TrainData, RUN_CONFIG_VERSION};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, StepLength};
use crate::grpo::{compute_advantages, grpo_loss, GroupBatch, TokenLogProbs};
use crate::policy::{
    init_policy, Optimizer, ParamGroup, Policy, PolicySnapshot, Rollout, SamplingConfig,
};
use crate::reward::{parse_response, score, RewardBreakdown};
use crate::taskgen::{gold_trace, render_prompt, Question, Vocabulary};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Grpo,
    Sft,
}

/// One line of `metrics.jsonl`. Rollout statistics are absent for SFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: usize,
    pub kind: RunKind,
    pub loss: f64,
    pub mean_reward: Option<f64>,
    pub accuracy_component_rate: Option<f64>,
    pub format_component_rate: Option<f64>,
    /// Mean rollout length for GRPO, mean target length for SFT.
    pub mean_response_length: f64,
    pub mean_kl: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub reflection_rate: Option<f64>,
    /// Groups whose rewards were all equal (zero advantage).
    pub degenerate_groups: usize,
    pub empty_rollouts: usize,
    pub frozen: Vec<ParamGroup>,
}

impl StepLength for StepMetrics {
    fn step(&self) -> usize {
        self.step
    }

    fn mean_response_length(&self) -> Option<f64> {
        Some(self.mean_response_length)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEval {
    pub step: usize,
    pub report: EvalReport,
}

/// Written before any compute so an interrupted run is recognizable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Option<RunConfig>,
    /// Free-form arguments of commands without a run config.
    pub args: serde_json::Value,
    pub source_revision: String,
    pub package_version: String,
}

impl Manifest {
    pub fn new(command: &str, config: Option<&RunConfig>, args: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            seed: config.map(|c| c.seed),
            config: config.cloned(),
            args,
            source_revision: source_revision(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn source_revision() -> String {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    std::process::Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<CheckpointEval>,
    pub final_eval: EvalReport,
    pub initial: Policy,
    pub policy: Policy,
}

impl RunArtifacts {
    pub fn final_snapshot(&self) -> PathBuf {
        self.dir.join("final.snap")
    }

    pub fn checkpoints(&self) -> Vec<(usize, EvalReport)> {
        self.evals
            .iter()
            .map(|e| (e.step, e.report.clone()))
            .collect()
    }
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Cycles through the train set, reshuffling on every pass.
struct QuestionStream<'a> {
    questions: &'a [Question],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> QuestionStream<'a> {
    fn new(questions: &'a [Question], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            questions,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next_question(&mut self) -> &'a Question {
        if self.pos == self.order.len() {
            self.order = (0..self.questions.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        &self.questions[self.order[self.pos - 1]]
    }
}

/// State shared by the GRPO and SFT loops.
struct Run<'a> {
    cfg: &'a RunConfig,
    data: &'a TrainData,
    dir: PathBuf,
    policy: Policy,
    initial: Policy,
    optimizer: Optimizer,
    metrics: Vec<StepMetrics>,
    evals: Vec<CheckpointEval>,
    metrics_out: JsonLines,
    timing_out: JsonLines,
    evals_out: JsonLines,
    vocabulary: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(command: &str, cfg: &'a RunConfig, data: &'a TrainData, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        Manifest::new(command, Some(cfg), serde_json::Value::Null).write(dir)?;
        let vocab = Vocabulary::standard();
        let policy = match &cfg.init_snapshot {
            Some(path) => {
                let snap = PolicySnapshot::read(path)?;
                if snap.vocabulary != vocab.tokens() {
                    return Err(Error::IncompatibleSnapshot(format!(
                        "{} was trained on a different vocabulary",
                        path.display()
                    )));
                }
                snap.restore()?
            }
            None => init_policy(cfg.policy.to_config(cfg.seed))?,
        };
        if policy.config().context_window <= cfg.max_response_len {
            return Err(Error::Config(format!(
                "policy window {} cannot hold {} response tokens",
                policy.config().context_window,
                cfg.max_response_len
            )));
        }
        let snap_dir = dir.join("snapshots");
        if cfg.snapshot_every > 0 {
            std::fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
        }
        let run = Self {
            cfg,
            data,
            dir: dir.to_path_buf(),
            optimizer: Optimizer::new(cfg.optimizer, policy.num_params()),
            initial: policy.clone(),
            policy,
            metrics: Vec::with_capacity(cfg.steps),
            evals: Vec::new(),
            metrics_out: JsonLines::create(dir.join("metrics.jsonl"))?,
            timing_out: JsonLines::create(dir.join("timing.jsonl"))?,
            evals_out: JsonLines::create(dir.join("evals.jsonl"))?,
            vocabulary: vocab.tokens().to_vec(),
        };
        run.save(&run.initial, "initial.snap")?;
        Ok(run)
    }

    fn save(&self, policy: &Policy, name: &str) -> Result<()> {
        PolicySnapshot::capture(policy, &self.vocabulary).write(&self.dir.join(name))
    }

    fn prompt_limit(&self) -> usize {
        self.policy.config().context_window - self.cfg.max_response_len
    }

    fn checkpoint_eval(&mut self, step: usize) -> Result<()> {
        let s = &self.cfg.eval;
        let due =
            step == 0 || step == self.cfg.steps || (s.every > 0 && step.is_multiple_of(s.every));
        if !due {
            return Ok(());
        }
        let n = match s.max_questions {
            0 => self.data.eval.len(),
            k => k.min(self.data.eval.len()),
        };
        let report = evaluate(&self.policy, &self.data.eval[..n], &self.cfg.decoding())?;
        tracing::info!(
            step,
            accuracy = report.total_accuracy,
            well_formed = report.well_formed_rate,
            mean_length = report.mean_length,
            "checkpoint eval"
        );
        let rec = CheckpointEval { step, report };
        self.evals_out.push(&rec)?;
        self.evals_out.flush()?;
        self.evals.push(rec);
        Ok(())
    }

    fn record(&mut self, m: StepMetrics, started: Instant) -> Result<()> {
        self.metrics_out.push(&m)?;
        self.timing_out.push(&serde_json::json!({
            "step": m.step,
            "wall_time_s": started.elapsed().as_secs_f64(),
        }))?;
        if m.step.is_multiple_of(50) {
            tracing::debug!(
                step = m.step,
                loss = m.loss,
                reward = m.mean_reward,
                len = m.mean_response_length,
                "step"
            );
        }
        self.metrics.push(m);
        if self.cfg.snapshot_every > 0 && self.metrics.len().is_multiple_of(self.cfg.snapshot_every)
        {
            let name = format!("snapshots/step_{:06}.snap", self.metrics.len());
            self.save(&self.policy, &name)?;
        }
        Ok(())
    }

    /// Keep the policy from before the failing step and surface the error.
    fn abort(&mut self, last_good: Vec<f64>, err: Error) -> Error {
        self.policy.params_mut().copy_from_slice(&last_good);
        let _ = self.metrics_out.flush();
        let _ = self.timing_out.flush();
        if let Err(e) = self.save(&self.policy, "last_good.snap") {
            tracing::error!("could not write last good snapshot: {e}");
        }
        err
    }

    fn finish(mut self) -> Result<RunArtifacts> {
        self.metrics_out.flush()?;
        self.timing_out.flush()?;
        self.save(&self.policy, "final.snap")?;
        let final_eval = evaluate(&self.policy, &self.data.eval, &self.cfg.decoding())?;
        let path = self.dir.join("final_eval.json");
        let text = serde_json::to_string_pretty(&final_eval).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(RunArtifacts {
            dir: self.dir,
            metrics: self.metrics,
            evals: self.evals,
            final_eval,
            initial: self.initial,
            policy: self.policy,
        })
    }
}

/// One sampled group, scored, with everything the update needs.
struct Group {
    prompt: Vec<TokenId>,
    rollouts: Vec<Rollout>,
    rewards: Vec<RewardBreakdown>,
    advantages: crate::grpo::AdvantageGroup,
    reference: Vec<Vec<f64>>,
    old: Vec<Vec<f64>>,
}

impl Group {
    fn responses(&self) -> Vec<&[TokenId]> {
        self.rollouts.iter().map(|r| r.tokens.as_slice()).collect()
    }
}

fn all_finite(v: &[Vec<f64>]) -> bool {
    v.iter().flatten().all(|x| x.is_finite())
}

/// GRPO from the configured initial policy.
pub fn train_grpo(cfg: &RunConfig, data: &TrainData, dir: &Path) -> Result<RunArtifacts> {
    train_grpo_as("train", cfg, data, dir)
}

fn train_grpo_as(
    command: &str,
    cfg: &RunConfig,
    data: &TrainData,
    dir: &Path,
) -> Result<RunArtifacts> {
    let mut run = Run::start(command, cfg, data, dir)?;
    let reference = run.initial.clone();
    let eos = Vocabulary::standard().special().eos;
    let sampling = SamplingConfig {
        temperature: cfg.temperature,
        max_len: cfg.max_response_len,
        stop_token: eos,
    };
    let mut stream = QuestionStream::new(&data.train, cfg.seed);
    let mut rollout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rollout_rng.set_stream(2);
    let g = cfg.grpo.group_size;
    let frozen: Vec<ParamGroup> = cfg.freeze.iter().copied().collect();
    let mut grad = vec![0.0; run.policy.num_params()];

    run.checkpoint_eval(0)?;
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let last_good = run.policy.params().to_vec();
        let limit = run.prompt_limit();

        let mut groups = Vec::with_capacity(cfg.grad_accum);
        for _ in 0..cfg.grad_accum {
            let q = stream.next_question();
            let prompt = render_prompt(q, limit)?;
            let seeds: Vec<u64> = (0..g).map(|_| rollout_rng.random()).collect();
            let rollouts = run.policy.sample_group(&prompt, &sampling, &seeds)?;
            let rewards: Vec<RewardBreakdown> = rollouts
                .iter()
                .map(|r| score(&parse_response(&r.tokens), q.gold, &cfg.reward))
                .collect();
            let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
            let advantages = compute_advantages(&totals)?;
            let responses: Vec<&[TokenId]> = rollouts.iter().map(|r| r.tokens.as_slice()).collect();
            let reference_lp = reference.group_log_probs(&prompt, &responses)?;
            groups.push(Group {
                prompt,
                rollouts,
                rewards,
                advantages,
                reference: reference_lp,
                old: Vec::new(),
            });
        }

        let (mut loss_sum, mut kl_sum, mut clip_sum, mut empty) = (0.0, 0.0, 0.0, 0usize);
        for epoch in 0..cfg.grpo.inner_epochs {
            grad.iter_mut().for_each(|x| *x = 0.0);
            for grp in groups.iter_mut() {
                let responses = grp.responses();
                let fwd = run.policy.forward_group(&grp.prompt, &responses)?;
                let current = fwd.response_log_probs();
                if !all_finite(&current) {
                    return Err(run.abort(last_good, Error::NonFiniteLoss { step }));
                }
                if epoch == 0 {
                    grp.old = current.clone();
                }
                let rollouts = current
                    .into_iter()
                    .zip(&grp.old)
                    .zip(&grp.reference)
                    .map(|((c, o), r)| TokenLogProbs::new(c, o.clone(), r.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let batch = GroupBatch {
                    rollouts,
                    advantages: grp.advantages.clone(),
                };
                let loss = grpo_loss(&batch, &cfg.grpo)?;
                if !loss.loss.is_finite() {
                    return Err(run.abort(last_good, Error::NonFiniteLoss { step }));
                }
                if epoch == 0 {
                    loss_sum += loss.loss;
                    kl_sum += loss.mean_kl;
                    clip_sum += loss.clip_fraction;
                    empty += loss.empty_rollouts;
                }
                let scale = 1.0 / cfg.grad_accum as f64;
                let weights: Vec<Vec<f64>> = loss
                    .token_weights
                    .iter()
                    .map(|w| w.iter().map(|x| x * scale).collect())
                    .collect();
                fwd.backward(&run.policy, &weights, &cfg.freeze, &mut grad);
            }
            if let Err(e) =
                run.optimizer
                    .step(&mut run.policy, &grad, &cfg.freeze, cfg.learning_rate)
            {
                return Err(run.abort(last_good, e));
            }
        }

        let n_groups = groups.len() as f64;
        let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
        let n = all.len() as f64;
        let lengths: f64 = groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .map(|r| r.tokens.len() as f64)
            .sum();
        let reflective = groups
            .iter()
            .flat_map(|g| &g.rollouts)
            .filter(|r| crate::eval::detect_reflection(&r.tokens).found)
            .count();
        let m = StepMetrics {
            step,
            kind: RunKind::Grpo,
            loss: loss_sum / n_groups,
            mean_reward: Some(all.iter().map(|r| r.total).sum::<f64>() / n),
            accuracy_component_rate: Some(all.iter().filter(|r| r.correct).count() as f64 / n),
            format_component_rate: Some(all.iter().filter(|r| r.well_formed).count() as f64 / n),
            mean_response_length: lengths / n,
            mean_kl: Some(kl_sum / n_groups),
            clip_fraction: Some(clip_sum / n_groups),
            reflection_rate: Some(reflective as f64 / n),
            degenerate_groups: groups
                .iter()
                .filter(|g| g.advantages.is_degenerate())
                .count(),
            empty_rollouts: empty,
            frozen: frozen.clone(),
        };
        run.record(m, started)?;
        run.checkpoint_eval(step)?;
    }
    run.finish()
}

/// Teacher-forced cross-entropy on gold traces. The reported loss is the
/// summed token negative log-likelihood per trace, averaged over the step's
/// traces.
pub fn train_sft(cfg: &RunConfig, data: &TrainData, dir: &Path) -> Result<RunArtifacts> {
    let mut run = Run::start("sft", cfg, data, dir)?;
    let mut stream = QuestionStream::new(&data.train, cfg.seed);
    let frozen: Vec<ParamGroup> = cfg.freeze.iter().copied().collect();
    let mut grad = vec![0.0; run.policy.num_params()];
    let weight = 1.0 / cfg.grad_accum as f64;

    run.checkpoint_eval(0)?;
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let last_good = run.policy.params().to_vec();
        let limit = run.prompt_limit();
        grad.iter_mut().for_each(|x| *x = 0.0);
        let (mut nll, mut len) = (0.0, 0usize);
        for _ in 0..cfg.grad_accum {
            let q = stream.next_question();
            let prompt = render_prompt(q, limit)?;
            let mut trace = gold_trace(q);
            trace.truncate(cfg.max_response_len);
            let fwd = run.policy.forward_group(&prompt, &[&trace])?;
            let lp = fwd.response_log_probs().pop().expect("one trace");
            nll -= lp.iter().sum::<f64>();
            len += trace.len();
            fwd.backward(
                &run.policy,
                &[vec![weight; trace.len()]],
                &cfg.freeze,
                &mut grad,
            );
        }
        let loss = nll / cfg.grad_accum as f64;
        if !loss.is_finite() {
            return Err(run.abort(last_good, Error::NonFiniteLoss { step }));
        }
        if let Err(e) = run
            .optimizer
            .step(&mut run.policy, &grad, &cfg.freeze, cfg.learning_rate)
        {
            return Err(run.abort(last_good, e));
        }
        let m = StepMetrics {
            step,
            kind: RunKind::Sft,
            loss,
            mean_reward: None,
            accuracy_component_rate: None,
            format_component_rate: None,
            mean_response_length: len as f64 / cfg.grad_accum as f64,
            mean_kl: None,
            clip_fraction: None,
            reflection_rate: None,
            degenerate_groups: 0,
            empty_rollouts: 0,
            frozen: frozen.clone(),
        };
        run.record(m, started)?;
        run.checkpoint_eval(step)?;
    }
    run.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// +0.001 reward per generated token.
    LengthReward,
    FreezeEncoder,
    FreezeHead,
    /// GRPO starting from (and anchored to) a supervised snapshot.
    WarmStartRl,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::LengthReward,
        Ablation::FreezeEncoder,
        Ablation::FreezeHead,
        Ablation::WarmStartRl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::LengthReward => "length_reward",
            Ablation::FreezeEncoder => "freeze_encoder",
            Ablation::FreezeHead => "freeze_head",
            Ablation::WarmStartRl => "warm_start_rl",
        }
    }

    /// The base config with this ablation's change applied.
    pub fn apply(self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.name = format!("{}-{}", base.name, self.name());
        match self {
            Ablation::LengthReward => {
                cfg.reward.length_bonus_enabled = true;
                cfg.reward.length_bonus_per_token = 0.001;
            }
            Ablation::FreezeEncoder => {
                cfg.freeze = [ParamGroup::Encoder].into_iter().collect();
            }
            Ablation::FreezeHead => {
                cfg.freeze = [ParamGroup::Head].into_iter().collect();
            }
            Ablation::WarmStartRl => {
                if cfg.init_snapshot.is_none() {
                    return Err(Error::Config(
                        "warm_start_rl needs an SFT snapshot as init_snapshot".into(),
                    ));
                }
            }
        }
        Ok(cfg)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!(
                    "unknown ablation {s:?} (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

/// Apply the named ablation to `base` and train with GRPO.
pub fn run_ablation(
    name: &str,
    base: &RunConfig,
    data: &TrainData,
    dir: &Path,
) -> Result<RunArtifacts> {
    let ablation: Ablation = name.parse()?;
    let cfg = ablation.apply(base)?;
    train_grpo_as(&format!("ablate {ablation}"), &cfg, data, dir)
}

/// Read `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    read_jsonl(path)
}

/// Read `evals.jsonl`.
pub fn read_evals(path: &Path) -> Result<Vec<CheckpointEval>> {
    read_jsonl(path)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
