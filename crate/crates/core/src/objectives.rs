//! Training losses: the DP (marginal likelihood) loss, the contrastive
//! ranking loss over model-sampled hypotheses, the REINFORCE reward loss,
//! and the two filtering tricks (hypothesis-level keep-ratio and the
//! sample-level alpha gate).

use crate::decoding::{batch_sample, dedup, DecodeConfig};
use crate::dp::{dp_gradient, dp_marginal_logprob};
use crate::error::{Error, Result};
use crate::lattice::{
    path_joint_gradient, Hypothesis, Lattice, LatticeGrad, PathConstraint, BOS, EOS, PAD,
};
use crate::metrics::sentence_bleu;

/// Removes pad/bos/eos before reward computation; unk stays, it is a real
/// (if unfortunate) token.
pub fn strip_specials(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != PAD && t != BOS && t != EOS)
        .collect()
}

/// Sentence-level reward in [0, 1]: smoothed BLEU-4 on the content tokens.
pub fn reward_fn(hyp: &[u32], reference: &[u32]) -> f64 {
    sentence_bleu(&strip_specials(hyp), &strip_specials(reference))
}

/// Log-ratio of the reward distribution for two samples. The normalizer
/// cancels, so the ratio is exactly the reward gap; kept as a testable
/// identity.
pub fn reward_distribution_identity_check(r1: f64, r2: f64) -> f64 {
    r1 - r2
}

/// Negative marginal log-likelihood of the target.
pub fn mle_loss(lattice: &Lattice, target: &[u32], constraint: PathConstraint) -> Result<f64> {
    let (logz, _) = dp_marginal_logprob(lattice, target, constraint)?;
    Ok(-logz)
}

/// K model samples ranked ascending by reward, with length-normalized
/// marginal log-likelihoods for the contrastive loss.
#[derive(Clone, Debug)]
pub struct RankedSampleSet {
    hypotheses: Vec<Hypothesis>,
    pub kept_count: usize,
}

impl RankedSampleSet {
    /// Ranks deduplicated samples by reward against the reference.
    /// Exact reward ties collapse to the member with the higher
    /// length-normalized marginal log-likelihood; hypotheses whose marginal
    /// is not finite under the constraint are dropped.
    pub fn rank(
        lattice: &Lattice,
        hyps: Vec<Hypothesis>,
        reference: &[u32],
        constraint: PathConstraint,
    ) -> Result<RankedSampleSet> {
        let mut scored: Vec<Hypothesis> = hyps
            .into_iter()
            .map(|mut h| {
                h.reward = Some(reward_fn(&h.tokens, reference));
                h
            })
            .collect();
        scored.sort_by(|a, b| a.reward.unwrap().partial_cmp(&b.reward.unwrap()).unwrap());

        let mut collapsed: Vec<Hypothesis> = Vec::with_capacity(scored.len());
        let mut i = 0;
        while i < scored.len() {
            let mut j = i + 1;
            while j < scored.len() && scored[j].reward == scored[i].reward {
                j += 1;
            }
            if j == i + 1 {
                collapsed.push(scored[i].clone());
            } else {
                // tie group: keep the best-scoring member
                let mut best: Option<Hypothesis> = None;
                for h in &mut scored[i..j] {
                    ensure_norm_score(h, lattice, constraint)?;
                    let s = h.norm_marginal_logprob.unwrap();
                    if !s.is_finite() {
                        continue;
                    }
                    if best
                        .as_ref()
                        .map(|b| s > b.norm_marginal_logprob.unwrap())
                        .unwrap_or(true)
                    {
                        best = Some(h.clone());
                    }
                }
                if let Some(b) = best {
                    collapsed.push(b);
                }
            }
            i = j;
        }
        let kept_count = collapsed.len();
        Ok(RankedSampleSet { hypotheses: collapsed, kept_count })
    }

    /// Builds a set from already scored-and-sorted hypotheses; rewards must
    /// be strictly ascending.
    pub fn from_scored(hypotheses: Vec<Hypothesis>) -> Result<RankedSampleSet> {
        check_ascending(&hypotheses)?;
        let kept_count = hypotheses.len();
        Ok(RankedSampleSet { hypotheses, kept_count })
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Fills any missing length-normalized marginal log-likelihoods.
    pub fn ensure_norm_scores(
        &mut self,
        lattice: &Lattice,
        constraint: PathConstraint,
    ) -> Result<()> {
        for h in &mut self.hypotheses {
            ensure_norm_score(h, lattice, constraint)?;
        }
        // drop non-finite entries; they cannot participate in ranking losses
        self.hypotheses
            .retain(|h| h.norm_marginal_logprob.unwrap().is_finite());
        self.kept_count = self.hypotheses.len();
        Ok(())
    }
}

fn ensure_norm_score(
    h: &mut Hypothesis,
    lattice: &Lattice,
    constraint: PathConstraint,
) -> Result<()> {
    if h.norm_marginal_logprob.is_none() {
        let (logz, _) = dp_marginal_logprob(lattice, &h.tokens, constraint)?;
        h.norm_marginal_logprob = Some(logz / h.tokens.len() as f64);
    }
    Ok(())
}

fn check_ascending(hyps: &[Hypothesis]) -> Result<()> {
    for (i, pair) in hyps.windows(2).enumerate() {
        let a = pair[0]
            .reward
            .ok_or_else(|| Error::InvalidTarget("hypothesis missing reward".into()))?;
        let b = pair[1]
            .reward
            .ok_or_else(|| Error::InvalidTarget("hypothesis missing reward".into()))?;
        if b <= a {
            return Err(Error::Ordering { index: i + 1 });
        }
    }
    Ok(())
}

/// Keeps the ceil(keep_ratio * K) highest-reward hypotheses, order
/// preserved.
pub fn filter_hypotheses(samples: RankedSampleSet, keep_ratio: f64) -> Result<RankedSampleSet> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep_ratio {keep_ratio} not in (0, 1]")));
    }
    let k = samples.len();
    if k == 0 {
        return Ok(samples);
    }
    let keep = ((keep_ratio * k as f64).ceil() as usize).clamp(1, k);
    let hypotheses: Vec<Hypothesis> = samples.hypotheses[k - keep..].to_vec();
    Ok(RankedSampleSet { hypotheses, kept_count: keep })
}

/// True iff the example's DP loss strictly exceeds alpha, in which case
/// the model-sample losses are skipped for this example.
pub fn sample_gate(dp_loss: f64, alpha: f64) -> bool {
    dp_loss > alpha
}

fn pair_normalizer(k: usize) -> f64 {
    2.0 / (k as f64 * (k as f64 - 1.0))
}

/// Pairwise hinge ranking loss over the sample set:
/// (2 / K(K-1)) * sum_{i>j} max(0, -s_i + s_j + (i-j) * epsilon_lb)
/// with s_k the length-normalized marginal log-likelihood and ranks
/// ascending by reward. Hinges exactly at the boundary stay inactive.
pub fn contrastive_loss(samples: &RankedSampleSet, epsilon_lb: f64) -> Result<f64> {
    check_ascending(&samples.hypotheses)?;
    let k = samples.len();
    if k < 2 {
        return Ok(0.0);
    }
    let s: Vec<f64> = samples
        .hypotheses
        .iter()
        .map(|h| {
            h.norm_marginal_logprob
                .ok_or_else(|| Error::InvalidTarget("hypothesis missing norm score".into()))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 1..k {
        for j in 0..i {
            let margin = -s[i] + s[j] + (i - j) as f64 * epsilon_lb;
            if margin > 0.0 {
                total += margin;
            }
        }
    }
    Ok(pair_normalizer(k) * total)
}

/// Subgradient of the contrastive loss with respect to the shared
/// lattice's raw logits. Each active hinge contributes
/// +-(1/|y_k|) * dp_gradient(k), scaled by the pair normalizer.
pub fn contrastive_gradient(
    lattice: &Lattice,
    samples: &RankedSampleSet,
    epsilon_lb: f64,
    constraint: PathConstraint,
) -> Result<(f64, LatticeGrad)> {
    check_ascending(&samples.hypotheses)?;
    let k = samples.len();
    let mut grad = LatticeGrad::zeros(lattice.positions(), lattice.vocab());
    if k < 2 {
        return Ok((0.0, grad));
    }
    let s: Vec<f64> = samples
        .hypotheses
        .iter()
        .map(|h| {
            h.norm_marginal_logprob
                .ok_or_else(|| Error::InvalidTarget("hypothesis missing norm score".into()))
        })
        .collect::<Result<_>>()?;
    let norm = pair_normalizer(k);
    let mut coeff = vec![0.0f64; k]; // d loss / d s_k
    let mut total = 0.0;
    for i in 1..k {
        for j in 0..i {
            let margin = -s[i] + s[j] + (i - j) as f64 * epsilon_lb;
            if margin > 0.0 {
                total += margin;
                coeff[i] -= norm;
                coeff[j] += norm;
            }
        }
    }
    for (c, h) in coeff.iter().zip(&samples.hypotheses) {
        if *c == 0.0 {
            continue;
        }
        let (_, g) = dp_gradient(lattice, &h.tokens, constraint)?;
        grad.axpy(c / h.tokens.len() as f64, &g);
    }
    Ok((norm * total, grad))
}

/// REINFORCE surrogate on raw hypotheses: -(1/K) sum_k (R_k - b) log
/// q(y'_k, a_k | x) with b the mean sample reward. Gradients flow through
/// the sampled path's joint log-probability only.
pub fn reward_loss_samples(lattice: &Lattice, hyps: &[Hypothesis]) -> Result<(f64, LatticeGrad)> {
    let k = hyps.len();
    if k < 2 {
        return Err(Error::DegenerateBaseline { k });
    }
    let rewards: Vec<f64> = hyps
        .iter()
        .map(|h| {
            h.reward
                .ok_or_else(|| Error::InvalidTarget("hypothesis missing reward".into()))
        })
        .collect::<Result<_>>()?;
    let baseline = rewards.iter().sum::<f64>() / k as f64;
    let mut loss = 0.0;
    let mut grad = LatticeGrad::zeros(lattice.positions(), lattice.vocab());
    for (h, &r) in hyps.iter().zip(&rewards) {
        let advantage = r - baseline;
        loss -= advantage * h.joint_logprob() / k as f64;
        if advantage != 0.0 {
            let g = path_joint_gradient(lattice, &h.path, &h.tokens)?;
            grad.axpy(-advantage / k as f64, &g);
        }
    }
    Ok((loss, grad))
}

/// REINFORCE loss on a ranked sample set.
pub fn reward_loss(lattice: &Lattice, samples: &RankedSampleSet) -> Result<(f64, LatticeGrad)> {
    reward_loss_samples(lattice, samples.hypotheses())
}

/// Per-example loss summary. `dp_loss` is the per-token (length-normalized)
/// negative marginal log-likelihood; the alpha gate compares against it.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub dp_loss: f64,
    pub cl_loss: f64,
    pub rl_loss: f64,
    pub gated: bool,
    pub pairs_evaluated: usize,
}

impl LossReport {
    pub fn total(&self, cl_weight: f64, rl_weight: f64) -> f64 {
        self.dp_loss + cl_weight * self.cl_loss + rl_weight * self.rl_loss
    }
}

/// Gradient of the composite objective, split so a batch reducer can weight
/// the DP part by token count and the sample part per example.
#[derive(Clone, Debug)]
pub struct CombinedGrad {
    /// Gradient of the (unnormalized, per-sequence) DP loss.
    pub dp: LatticeGrad,
    /// Weighted gradient of the enabled model-sample losses, if any ran.
    pub samples: Option<LatticeGrad>,
}

impl CombinedGrad {
    /// dp_scale * dp + sample_scale * samples, as one lattice gradient.
    pub fn weighted(&self, dp_scale: f64, sample_scale: f64) -> LatticeGrad {
        let mut out = LatticeGrad::zeros(self.dp.l, self.dp.v);
        out.axpy(dp_scale, &self.dp);
        if let Some(s) = &self.samples {
            out.axpy(sample_scale, s);
        }
        out
    }
}

/// Per-example configuration for the composite objective.
#[derive(Clone, Debug)]
pub struct ObjectiveConfig {
    pub cl_weight: f64,
    pub rl_weight: f64,
    pub epsilon_lb: f64,
    pub keep_ratio: f64,
    /// Examples with DP loss above this skip the model-sample losses.
    pub alpha: f64,
    pub k: usize,
    pub tau: f64,
    pub top_p: f64,
    pub beta: f64,
    pub seed: u64,
    pub constraint: PathConstraint,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            cl_weight: 1.0,
            rl_weight: 0.0,
            epsilon_lb: 0.001,
            keep_ratio: 0.25,
            alpha: f64::INFINITY,
            k: 128,
            tau: 0.1,
            top_p: 0.5,
            beta: 0.5,
            seed: 0,
            constraint: PathConstraint::Anchored,
        }
    }
}

/// Composite per-example objective: the DP loss always, plus the
/// configured model-sample losses on filtered samples unless the alpha
/// gate fires on the per-token DP loss.
pub fn combined_step_loss(
    lattice: &Lattice,
    target: &[u32],
    config: &ObjectiveConfig,
) -> Result<(LossReport, CombinedGrad)> {
    let (logz, dp_grad) = dp_gradient(lattice, target, config.constraint)?;
    let mut grad = CombinedGrad { dp: dp_grad, samples: None };
    grad.dp.scale(-1.0);

    let mut report = LossReport {
        dp_loss: -logz / target.len() as f64,
        cl_loss: 0.0,
        rl_loss: 0.0,
        gated: false,
        pairs_evaluated: 0,
    };
    let wants_samples = config.cl_weight > 0.0 || config.rl_weight > 0.0;
    if !wants_samples {
        return Ok((report, grad));
    }
    if sample_gate(report.dp_loss, config.alpha) {
        report.gated = true;
        return Ok((report, grad));
    }

    let decode_cfg = DecodeConfig {
        max_step: lattice.positions(),
        tau: config.tau,
        top_p: config.top_p,
        k: config.k,
        beta: config.beta,
        seed: config.seed,
    };
    let raw = batch_sample(lattice, &decode_cfg)?;
    let unique = dedup(raw, config.beta);
    let ranked = RankedSampleSet::rank(lattice, unique, target, config.constraint)?;
    let mut kept = filter_hypotheses(ranked, config.keep_ratio)?;
    kept.ensure_norm_scores(lattice, config.constraint)?;

    if kept.len() >= 2 {
        report.pairs_evaluated = kept.len() * (kept.len() - 1) / 2;
        let mut sample_grad = LatticeGrad::zeros(lattice.positions(), lattice.vocab());
        if config.cl_weight > 0.0 {
            let (cl, cl_grad) =
                contrastive_gradient(lattice, &kept, config.epsilon_lb, config.constraint)?;
            report.cl_loss = cl;
            sample_grad.axpy(config.cl_weight, &cl_grad);
        }
        if config.rl_weight > 0.0 {
            let (rl, rl_grad) = reward_loss(lattice, &kept)?;
            report.rl_loss = rl;
            sample_grad.axpy(config.rl_weight, &rl_grad);
        }
        grad.samples = Some(sample_grad);
    }
    Ok((report, grad))
}
