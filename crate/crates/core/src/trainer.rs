//! Two-stage training: marginal-likelihood warmup with glancing, then
//! joint training with the model-sample losses, plus evaluation, top-k
//! checkpoint averaging, JSON-lines metrics, and resumable state.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AlphaMode, Config};
use crate::data::CorpusExample;
use crate::decoding::{batch_sample, lookahead_decode, DecodeConfig};
use crate::dp::{dp_gradient, dp_marginal_logprob};
use crate::error::{Error, Result};
use crate::lattice::Vocabulary;
use crate::metrics::{corpus_bleu, modality_metrics, ncm, oracle_bleu, sentence_bleu, EvalReport};
use crate::model::{
    forward, glancing_plan, glancing_ratio, load_checkpoint_file, save_checkpoint_file, adam_step,
    AdamHyper, AdamState, GlancingSchedule, ModelParams,
};
use crate::objectives::{combined_step_loss, strip_specials, ObjectiveConfig};
use crate::rng::Rng;
use crate::tape::Tensor;

#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<CorpusExample>,
    pub valid: Vec<CorpusExample>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsEvent {
    pub step: usize,
    pub stage: u8,
    pub dp_loss: f64,
    pub cl_loss: f64,
    pub rl_loss: f64,
    pub valid_bleu: f64,
    pub ncm: f64,
    pub oracle_bleu: f64,
    pub exact_valid_match_rate: f64,
    pub wall_time: f64,
}

impl MetricsEvent {
    /// Event with the nondeterministic wall clock zeroed, for stream
    /// comparisons.
    pub fn without_wall_time(&self) -> MetricsEvent {
        MetricsEvent { wall_time: 0.0, ..self.clone() }
    }
}

/// Graceful stop request, used to exercise interrupt/resume and to fork
/// stage-2 arms off a shared warmup.
#[derive(Clone, Copy, Debug)]
pub enum StopPoint {
    Stage1Step(usize),
    /// Halt right after the stage-1/stage-2 boundary (alpha computed,
    /// stage-1 checkpoint written).
    StageBoundary,
    Stage2Epoch(usize),
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Top-k averaged final artifact.
    pub params: ModelParams,
    /// Snapshot at the end of stage 1 (the MLE-only model).
    pub stage1_params: ModelParams,
    pub metrics: Vec<MetricsEvent>,
    pub alpha: f64,
    pub stage1_valid_dp: f64,
    pub stage2_valid_dp: f64,
}

pub const STATE_FILE: &str = "state.cdat";
pub const STAGE1_FILE: &str = "stage1.cdat";
pub const FINAL_FILE: &str = "final.cdat";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.resolved.cfg";

/// Gate threshold from a validation loss: rounded down to one decimal.
pub fn alpha_from_validation(valid_dp: f64) -> f64 {
    (valid_dp * 10.0).floor() / 10.0
}

/// Token-weighted mean per-token DP loss over a corpus.
pub fn validation_dp_loss(params: &ModelParams, corpus: &[CorpusExample]) -> Result<f64> {
    let constraint = params.config.constraint;
    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    for ex in corpus {
        let pass = forward(params, &ex.source, None)?;
        let (logz, _) = dp_marginal_logprob(&pass.lattice, &ex.sampled_target, constraint)?;
        nll_sum += -logz;
        tokens += ex.sampled_target.len();
    }
    if tokens == 0 {
        return Err(Error::Corpus("empty validation corpus".into()));
    }
    Ok(nll_sum / tokens as f64)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub k: usize,
    pub tau: f64,
    pub top_p: f64,
    pub beta: f64,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &Config) -> EvalOptions {
        EvalOptions {
            k: cfg.k,
            tau: cfg.tau_infer,
            top_p: cfg.top_p,
            beta: cfg.beta,
            seed: cfg.seed,
        }
    }
}

fn check_vocab(params: &ModelParams, corpus: &[CorpusExample]) -> Result<()> {
    let v = params.config.vocab as u32;
    for ex in corpus {
        if ex.source.iter().any(|&t| t >= v)
            || ex.valid_targets.iter().flatten().any(|&t| t >= v)
        {
            return Err(Error::Config(format!(
                "corpus uses token ids outside the checkpoint vocabulary ({v})"
            )));
        }
    }
    Ok(())
}

/// Full evaluation: lookahead decode for corpus BLEU and the modality
/// metrics, sampling for oracle BLEU, DP NLLs on the sampled targets for
/// NCM.
pub fn evaluate(
    params: &ModelParams,
    corpus: &[CorpusExample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Corpus("empty evaluation corpus".into()));
    }
    check_vocab(params, corpus)?;
    let constraint = params.config.constraint;
    let mut outputs = Vec::with_capacity(corpus.len());
    let mut outputs_full = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    let mut valid_sets = Vec::with_capacity(corpus.len());
    let mut sample_sets = Vec::with_capacity(corpus.len());
    let mut nlls = Vec::with_capacity(corpus.len());
    let mut ref_lens = Vec::with_capacity(corpus.len());
    for (idx, ex) in corpus.iter().enumerate() {
        let pass = forward(params, &ex.source, None)?;
        let hyp = lookahead_decode(&pass.lattice, pass.lattice.positions())?;
        outputs.push(strip_specials(&hyp.tokens));
        outputs_full.push(hyp.tokens.clone());
        refs.push(strip_specials(&ex.sampled_target));
        valid_sets.push(ex.valid_targets.clone());

        let dc = DecodeConfig {
            max_step: pass.lattice.positions(),
            tau: opts.tau,
            top_p: opts.top_p,
            k: opts.k,
            beta: opts.beta,
            seed: crate::rng::mix(opts.seed, &[0xe7a1, idx as u64]),
        };
        let samples = batch_sample(&pass.lattice, &dc)?;
        sample_sets.push(samples.iter().map(|h| strip_specials(&h.tokens)).collect::<Vec<_>>());

        let (logz, _) = dp_marginal_logprob(&pass.lattice, &ex.sampled_target, constraint)?;
        nlls.push(-logz);
        ref_lens.push(ex.sampled_target.len());
    }
    let (match_rate, multi_ref) = modality_metrics(&outputs_full, &valid_sets)?;
    Ok(EvalReport {
        corpus_bleu: corpus_bleu(&outputs, &refs)?,
        ncm: ncm(&nlls, &ref_lens)?,
        oracle_bleu: oracle_bleu(&sample_sets, &refs)?,
        exact_valid_match_rate: match_rate,
        multi_ref_bleu: multi_ref,
    })
}

/// Per-input best-sample reward as the sample budget grows; data for
/// sample-size scaling plots.
pub fn oracle_bleu_curve(
    params: &ModelParams,
    corpus: &[CorpusExample],
    ks: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<Vec<(usize, f64)>>> {
    check_vocab(params, corpus)?;
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut out = Vec::with_capacity(corpus.len());
    for (idx, ex) in corpus.iter().enumerate() {
        let pass = forward(params, &ex.source, None)?;
        let dc = DecodeConfig {
            max_step: pass.lattice.positions(),
            tau: opts.tau,
            top_p: opts.top_p,
            k: max_k,
            beta: opts.beta,
            seed: crate::rng::mix(opts.seed, &[0xc24e, idx as u64]),
        };
        let samples = batch_sample(&pass.lattice, &dc)?;
        let reference = strip_specials(&ex.sampled_target);
        let mut best_so_far = 0.0f64;
        let mut curve = Vec::with_capacity(ks.len());
        let mut consumed = 0usize;
        for &k in ks {
            while consumed < k.min(samples.len()) {
                let b = sentence_bleu(&strip_specials(&samples[consumed].tokens), &reference);
                best_so_far = best_so_far.max(b);
                consumed += 1;
            }
            curve.push((k, best_so_far));
        }
        out.push(curve);
    }
    Ok(out)
}

struct TopK {
    keep: usize,
    entries: Vec<(f64, u64, ModelParams)>, // (valid_bleu, order, params)
    next_order: u64,
}

impl TopK {
    fn new(keep: usize) -> TopK {
        TopK { keep, entries: Vec::new(), next_order: 0 }
    }

    fn offer(&mut self, score: f64, params: &ModelParams) {
        self.entries.push((score, self.next_order, params.clone()));
        self.next_order += 1;
        // stable preference: higher score wins, earlier order breaks ties
        self.entries
            .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        self.entries.truncate(self.keep);
    }

    fn average(&self, fallback: &ModelParams) -> Result<ModelParams> {
        if self.entries.is_empty() {
            return Ok(fallback.clone());
        }
        let sets: Vec<ModelParams> = self.entries.iter().map(|(_, _, p)| p.clone()).collect();
        ModelParams::average(&sets)
    }

    fn clear(&mut self) {
        self.entries.clear();
        self.next_order = 0;
    }
}

struct Trainer<'a> {
    cfg: &'a Config,
    data: &'a TrainData,
    workdir: Option<PathBuf>,
    params: ModelParams,
    adam: AdamState,
    step: usize,
    stage: u8,
    epoch1: usize,
    batch1: usize,
    epoch2: usize,
    alpha: f64,
    stage1_valid_dp: f64,
    stage1_params: Option<ModelParams>,
    top: TopK,
    metrics: Vec<MetricsEvent>,
    run_dp: f64,
    run_dp_tokens: usize,
    run_cl: f64,
    run_rl: f64,
    run_examples: usize,
    started: Instant,
}

fn merge_grads(into: &mut BTreeMap<String, Tensor>, from: BTreeMap<String, Tensor>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

impl<'a> Trainer<'a> {
    fn glancing_schedule(&self) -> GlancingSchedule {
        GlancingSchedule {
            r_start: self.cfg.glancing_start,
            r_end: self.cfg.glancing_end,
            span: self.cfg.glancing_span_effective(),
        }
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr: lr as f32,
            clip_norm: self.cfg.clip_norm as f32,
            ..AdamHyper::default()
        }
    }

    fn eval_subset(&self) -> &[CorpusExample] {
        let n = self.data.valid.len();
        let cap = if self.cfg.eval_subset == 0 { n } else { self.cfg.eval_subset.min(n) };
        &self.data.valid[..cap]
    }

    fn emit_event(&mut self) -> Result<()> {
        let subset = self.eval_subset().to_vec();
        let opts = EvalOptions {
            k: self.cfg.eval_k,
            tau: self.cfg.tau_infer,
            top_p: self.cfg.top_p,
            beta: self.cfg.beta,
            seed: self.cfg.seed,
        };
        let report = evaluate(&self.params, &subset, &opts)?;
        let event = MetricsEvent {
            step: self.step,
            stage: self.stage,
            dp_loss: if self.run_dp_tokens > 0 { self.run_dp / self.run_dp_tokens as f64 } else { 0.0 },
            cl_loss: if self.run_examples > 0 { self.run_cl / self.run_examples as f64 } else { 0.0 },
            rl_loss: if self.run_examples > 0 { self.run_rl / self.run_examples as f64 } else { 0.0 },
            valid_bleu: report.corpus_bleu,
            ncm: report.ncm,
            oracle_bleu: report.oracle_bleu,
            exact_valid_match_rate: report.exact_valid_match_rate,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.run_dp = 0.0;
        self.run_dp_tokens = 0;
        self.run_cl = 0.0;
        self.run_rl = 0.0;
        self.run_examples = 0;
        self.top.offer(event.valid_bleu, &self.params);
        if let Some(dir) = &self.workdir {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&event).expect("serializable event"))?;
        }
        self.metrics.push(event);
        Ok(())
    }

    fn stage1_batch(&mut self, batch: &[usize]) -> Result<()> {
        let constraint = self.cfg.constraint;
        let sched = self.glancing_schedule();
        let batch_tokens: usize = batch
            .iter()
            .map(|&i| self.data.train[i].sampled_target.len())
            .sum();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (slot, &idx) in batch.iter().enumerate() {
            let ex = &self.data.train[idx];
            let ratio = glancing_ratio(self.step, &sched);
            let pass0 = forward(&self.params, &ex.source, None)?;
            let pass = if ratio > 0.0 {
                let mut g_rng = Rng::stream(
                    self.cfg.seed ^ 0x9a7c,
                    crate::rng::mix(self.step as u64, &[slot as u64]),
                );
                let plan =
                    glancing_plan(&pass0.lattice, &ex.sampled_target, ratio, constraint, &mut g_rng)?;
                forward(&self.params, &ex.source, Some(&plan))?
            } else {
                pass0
            };
            let (logz, mut grad) = dp_gradient(&pass.lattice, &ex.sampled_target, constraint)?;
            self.run_dp += -logz;
            self.run_dp_tokens += ex.sampled_target.len();
            grad.scale(-1.0 / batch_tokens as f64);
            merge_grads(&mut grads, pass.backward(&grad)?);
        }
        let hyper = self.hyper(self.cfg.lr_stage1);
        adam_step(&mut self.params, &grads, &mut self.adam, &hyper);
        self.step += 1;
        Ok(())
    }

    fn stage2_batch(&mut self, batch: &[usize]) -> Result<()> {
        let (cl_w, rl_w) = self.cfg.loss_weights();
        let constraint = self.cfg.constraint;
        let batch_tokens: usize = batch
            .iter()
            .map(|&i| self.data.train[i].sampled_target.len())
            .sum();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (slot, &idx) in batch.iter().enumerate() {
            let ex = &self.data.train[idx];
            let pass = forward(&self.params, &ex.source, None)?;
            let obj = ObjectiveConfig {
                cl_weight: cl_w,
                rl_weight: rl_w,
                epsilon_lb: self.cfg.epsilon_lb,
                keep_ratio: self.cfg.keep_ratio,
                alpha: self.alpha,
                k: self.cfg.k,
                tau: self.cfg.tau_train,
                top_p: self.cfg.top_p,
                beta: self.cfg.beta,
                seed: crate::rng::mix(self.cfg.seed ^ 0x5a2e, &[self.step as u64, slot as u64]),
                constraint,
            };
            let (report, cgrad) = combined_step_loss(&pass.lattice, &ex.sampled_target, &obj)?;
            self.run_dp += report.dp_loss * ex.sampled_target.len() as f64;
            self.run_dp_tokens += ex.sampled_target.len();
            self.run_cl += report.cl_loss;
            self.run_rl += report.rl_loss;
            self.run_examples += 1;
            let total = cgrad.weighted(1.0 / batch_tokens as f64, 1.0 / batch.len() as f64);
            merge_grads(&mut grads, pass.backward(&total)?);
        }
        let hyper = self.hyper(self.cfg.lr_stage2);
        adam_step(&mut self.params, &grads, &mut self.adam, &hyper);
        self.step += 1;
        Ok(())
    }

    fn save_state(&self) -> Result<()> {
        let Some(dir) = &self.workdir else { return Ok(()) };
        let mut snapshot = self.params.clone();
        let (m, v) = self.adam.moments();
        for (name, data) in m {
            let shape = self.params.get(name).shape();
            snapshot.tensors_mut().insert(
                format!("adam.m.{name}"),
                Tensor::from_vec(shape.0, shape.1, data.clone()),
            );
        }
        for (name, data) in v {
            let shape = self.params.get(name).shape();
            snapshot.tensors_mut().insert(
                format!("adam.v.{name}"),
                Tensor::from_vec(shape.0, shape.1, data.clone()),
            );
        }
        let extras = vec![
            ("trainer.step".to_string(), self.step.to_string()),
            ("trainer.stage".to_string(), self.stage.to_string()),
            ("trainer.epoch1".to_string(), self.epoch1.to_string()),
            ("trainer.batch1".to_string(), self.batch1.to_string()),
            ("trainer.epoch2".to_string(), self.epoch2.to_string()),
            ("trainer.alpha".to_string(), format!("{:?}", self.alpha)),
            ("trainer.stage1_valid_dp".to_string(), format!("{:?}", self.stage1_valid_dp)),
            ("trainer.adam_step".to_string(), self.adam.step.to_string()),
            ("trainer.adam_skipped".to_string(), self.adam.skipped.to_string()),
        ];
        save_checkpoint_file(&dir.join(STATE_FILE), &snapshot, &extras)?;
        for (i, (score, order, p)) in self.top.entries.iter().enumerate() {
            save_checkpoint_file(
                &dir.join(format!("top{i}.cdat")),
                p,
                &[
                    ("valid_bleu".to_string(), format!("{score:?}")),
                    ("order".to_string(), order.to_string()),
                ],
            )?;
        }
        Ok(())
    }

}

fn parse_extra<T: std::str::FromStr>(
    extras: &BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    extras
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("state file missing '{key}'")))
}

/// Trains from scratch, or resumes from `workdir/state.cdat` when present.
/// Returns `None` when a stop point was hit (state saved for resume).
pub fn train(
    cfg: &Config,
    data: &TrainData,
    workdir: Option<&FsPath>,
    stop: Option<StopPoint>,
) -> Result<Option<TrainOutcome>> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Corpus("training needs nonempty train and valid splits".into()));
    }
    if let Some(dir) = workdir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_ECHO_FILE), cfg.render())?;
    }

    let model_cfg = cfg.model_config(data.vocab.len());
    let mut trainer = Trainer {
        cfg,
        data,
        workdir: workdir.map(|p| p.to_path_buf()),
        params: ModelParams::init(&model_cfg, cfg.seed)?,
        adam: AdamState::default(),
        step: 0,
        stage: 1,
        epoch1: 0,
        batch1: 0,
        epoch2: 0,
        alpha: f64::INFINITY,
        stage1_valid_dp: f64::NAN,
        stage1_params: None,
        top: TopK::new(cfg.ckpt_keep),
        metrics: Vec::new(),
        run_dp: 0.0,
        run_dp_tokens: 0,
        run_cl: 0.0,
        run_rl: 0.0,
        run_examples: 0,
        started: Instant::now(),
    };

    // resume from saved state when the workdir has one
    if let Some(dir) = workdir {
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            let (mut snapshot, extras) = load_checkpoint_file(&state_path)?;
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            let names: Vec<String> = snapshot.tensors().keys().cloned().collect();
            for name in names {
                if let Some(base) = name.strip_prefix("adam.m.") {
                    let t = snapshot.tensors_mut().remove(&name).unwrap();
                    m.insert(base.to_string(), t.data);
                } else if let Some(base) = name.strip_prefix("adam.v.") {
                    let t = snapshot.tensors_mut().remove(&name).unwrap();
                    v.insert(base.to_string(), t.data);
                }
            }
            trainer.adam = AdamState::restore(
                parse_extra(&extras, "trainer.adam_step")?,
                parse_extra(&extras, "trainer.adam_skipped")?,
                m,
                v,
            );
            trainer.params = snapshot;
            trainer.step = parse_extra(&extras, "trainer.step")?;
            trainer.stage = parse_extra(&extras, "trainer.stage")?;
            trainer.epoch1 = parse_extra(&extras, "trainer.epoch1")?;
            trainer.batch1 = parse_extra(&extras, "trainer.batch1")?;
            trainer.epoch2 = parse_extra(&extras, "trainer.epoch2")?;
            trainer.alpha = parse_extra(&extras, "trainer.alpha")?;
            trainer.stage1_valid_dp = parse_extra(&extras, "trainer.stage1_valid_dp")?;
            let stage1_path = dir.join(STAGE1_FILE);
            if stage1_path.exists() {
                trainer.stage1_params = Some(load_checkpoint_file(&stage1_path)?.0);
            }
            for i in 0..cfg.ckpt_keep {
                let p = dir.join(format!("top{i}.cdat"));
                if p.exists() {
                    let (params, extras) = load_checkpoint_file(&p)?;
                    let score: f64 = parse_extra(&extras, "valid_bleu")?;
                    let order: u64 = parse_extra(&extras, "order")?;
                    trainer.top.entries.push((score, order, params));
                    trainer.top.next_order = trainer.top.next_order.max(order + 1);
                }
            }
            trainer
                .top
                .entries
                .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            // reload the metrics emitted so far
            let mpath = dir.join(METRICS_FILE);
            if mpath.exists() {
                for line in std::fs::read_to_string(&mpath)?.lines() {
                    if !line.is_empty() {
                        let ev: MetricsEvent = serde_json::from_str(line)
                            .map_err(|e| Error::Checkpoint(format!("bad metrics line: {e}")))?;
                        trainer.metrics.push(ev);
                    }
                }
            }
        }
    }

    // ---- stage 1: MLE with glancing ----
    if trainer.stage == 1 {
        let mut batches = crate::data::make_batches(
            &data.train,
            cfg.max_tokens,
            crate::rng::mix(cfg.seed, &[1, trainer.epoch1 as u64]),
        )?;
        while trainer.step < cfg.stage1_steps {
            if trainer.batch1 >= batches.len() {
                trainer.epoch1 += 1;
                trainer.batch1 = 0;
                batches = crate::data::make_batches(
                    &data.train,
                    cfg.max_tokens,
                    crate::rng::mix(cfg.seed, &[1, trainer.epoch1 as u64]),
                )?;
            }
            let batch = batches[trainer.batch1].clone();
            trainer.batch1 += 1;
            trainer.stage1_batch(&batch)?;
            if trainer.step % cfg.eval_interval == 0 {
                trainer.emit_event()?;
            }
            if let Some(StopPoint::Stage1Step(s)) = stop {
                if trainer.step >= s && trainer.step < cfg.stage1_steps {
                    trainer.save_state()?;
                    return Ok(None);
                }
            }
        }
        // stage boundary
        trainer.stage1_valid_dp = validation_dp_loss(&trainer.params, &data.valid)?;
        trainer.alpha = match cfg.alpha_mode {
            AlphaMode::Fixed => cfg.alpha,
            AlphaMode::FromValidation => alpha_from_validation(trainer.stage1_valid_dp),
        };
        trainer.stage1_params = Some(trainer.params.clone());
        if let Some(dir) = workdir {
            save_checkpoint_file(
                &dir.join(STAGE1_FILE),
                &trainer.params,
                &[("stage1_valid_dp".to_string(), format!("{:?}", trainer.stage1_valid_dp))],
            )?;
        }
        trainer.stage = 2;
        // the final artifact averages checkpoints of the stage being shipped
        if cfg.stage2_epochs > 0 {
            trainer.top.clear();
        }
        if let Some(StopPoint::StageBoundary) = stop {
            trainer.save_state()?;
            return Ok(None);
        }
    }

    // ---- stage 2: joint objective ----
    while trainer.epoch2 < cfg.stage2_epochs {
        let batches = crate::data::make_batches(
            &data.train,
            cfg.max_tokens,
            crate::rng::mix(cfg.seed, &[2, trainer.epoch2 as u64]),
        )?;
        for batch in &batches {
            trainer.stage2_batch(batch)?;
            if trainer.step % cfg.eval_interval == 0 {
                trainer.emit_event()?;
            }
        }
        trainer.epoch2 += 1;
        if let Some(StopPoint::Stage2Epoch(e)) = stop {
            if trainer.epoch2 >= e && trainer.epoch2 < cfg.stage2_epochs {
                trainer.save_state()?;
                return Ok(None);
            }
        }
    }

    // final eval event unless one just fired
    if trainer
        .metrics
        .last()
        .map(|ev| ev.step != trainer.step)
        .unwrap_or(true)
    {
        trainer.emit_event()?;
    }

    let stage2_valid_dp = validation_dp_loss(&trainer.params, &data.valid)?;
    let final_params = trainer.top.average(&trainer.params)?;
    if let Some(dir) = workdir {
        save_checkpoint_file(
            &dir.join(FINAL_FILE),
            &final_params,
            &[
                ("alpha".to_string(), format!("{:?}", trainer.alpha)),
                ("stage2_valid_dp".to_string(), format!("{stage2_valid_dp:?}")),
            ],
        )?;
        // a finished run does not resume
        let state = dir.join(STATE_FILE);
        if state.exists() {
            std::fs::remove_file(state)?;
        }
    }
    let stage1_params = trainer
        .stage1_params
        .take()
        .expect("stage1 snapshot exists after stage 1");
    Ok(Some(TrainOutcome {
        params: final_params,
        stage1_params,
        metrics: trainer.metrics,
        alpha: trainer.alpha,
        stage1_valid_dp: trainer.stage1_valid_dp,
        stage2_valid_dp,
    }))
}
