//! Python bindings over the core lattice, dynamic-programming, decoding,
//! and metrics APIs. Scores and lattices cross the boundary as plain
//! lists; heavy state (the lattice) lives on the Rust side.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use daglat::decoding::{self, DecodeConfig};
use daglat::dp;
use daglat::lattice::{
    brute_force_marginal, enumerate_paths, normalize_lattice, path_joint_logprob, Hypothesis,
    Lattice as CoreLattice, Path, PathConstraint,
};
use daglat::metrics;
use daglat::objectives;

fn to_py_err(e: daglat::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_constraint(s: &str) -> PyResult<PathConstraint> {
    s.parse().map_err(to_py_err)
}

fn hyp_dict<'py>(py: Python<'py>, h: &Hypothesis) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tokens", h.tokens.clone())?;
    d.set_item("path", h.path.0.clone())?;
    d.set_item("log_transition", h.log_transition)?;
    d.set_item("log_emission", h.log_emission)?;
    d.set_item("truncated", h.truncated)?;
    Ok(d)
}

/// One example's decoder state: token logits (L x V) and transition
/// logits (L x L), plus the path-anchoring mode.
#[pyclass]
struct Lattice {
    inner: CoreLattice,
}

#[pymethods]
impl Lattice {
    #[new]
    #[pyo3(signature = (token_logits, transition_logits, constraint="anchored"))]
    fn new(
        token_logits: Vec<Vec<f64>>,
        transition_logits: Vec<Vec<f64>>,
        constraint: &str,
    ) -> PyResult<Self> {
        let l = token_logits.len();
        let v = token_logits.first().map(Vec::len).unwrap_or(0);
        if token_logits.iter().any(|row| row.len() != v) {
            return Err(PyValueError::new_err("ragged token logits"));
        }
        if transition_logits.len() != l || transition_logits.iter().any(|row| row.len() != l) {
            return Err(PyValueError::new_err("transition logits must be L x L"));
        }
        let inner = CoreLattice::new(
            l,
            v,
            token_logits.into_iter().flatten().collect(),
            transition_logits.into_iter().flatten().collect(),
            parse_constraint(constraint)?,
        )
        .map_err(to_py_err)?;
        Ok(Lattice { inner })
    }

    #[getter]
    fn positions(&self) -> usize {
        self.inner.positions()
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    /// Marginal log-likelihood of the target over all alignment paths.
    #[pyo3(signature = (target, constraint=None))]
    fn marginal_logprob(&self, target: Vec<u32>, constraint: Option<&str>) -> PyResult<f64> {
        let c = match constraint {
            Some(s) => parse_constraint(s)?,
            None => self.inner.constraint(),
        };
        dp::dp_marginal_logprob(&self.inner, &target, c)
            .map(|(logz, _)| logz)
            .map_err(to_py_err)
    }

    /// Exhaustive oracle for `marginal_logprob`.
    #[pyo3(signature = (target, constraint=None))]
    fn brute_force_marginal(&self, target: Vec<u32>, constraint: Option<&str>) -> PyResult<f64> {
        let c = match constraint {
            Some(s) => parse_constraint(s)?,
            None => self.inner.constraint(),
        };
        brute_force_marginal(&self.inner, &target, c).map_err(to_py_err)
    }

    /// Best-alignment path for the target.
    #[pyo3(signature = (target, constraint=None))]
    fn viterbi_align(&self, target: Vec<u32>, constraint: Option<&str>) -> PyResult<Vec<usize>> {
        let c = match constraint {
            Some(s) => parse_constraint(s)?,
            None => self.inner.constraint(),
        };
        dp::viterbi_align(&self.inner, &target, c)
            .map(|p| p.0)
            .map_err(to_py_err)
    }

    /// Joint log-probability of one (path, tokens) pair.
    fn path_joint_logprob(&self, path: Vec<usize>, tokens: Vec<u32>) -> PyResult<f64> {
        let norm = normalize_lattice(&self.inner).map_err(to_py_err)?;
        path_joint_logprob(&norm, &Path(path), &tokens).map_err(to_py_err)
    }

    /// Greedy lookahead walk; returns a hypothesis dict.
    #[pyo3(signature = (max_step=None))]
    fn lookahead<'py>(&self, py: Python<'py>, max_step: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let h = decoding::lookahead_decode(
            &self.inner,
            max_step.unwrap_or_else(|| self.inner.positions()),
        )
        .map_err(to_py_err)?;
        hyp_dict(py, &h)
    }

    /// Draws `k` hypotheses with the vectorized sampler.
    #[pyo3(signature = (k=8, tau=0.1, top_p=0.5, seed=0, max_step=None))]
    fn sample<'py>(
        &self,
        py: Python<'py>,
        k: usize,
        tau: f64,
        top_p: f64,
        seed: u64,
        max_step: Option<usize>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = DecodeConfig {
            max_step: max_step.unwrap_or_else(|| self.inner.positions()),
            tau,
            top_p,
            k,
            beta: 0.5,
            seed,
        };
        let hyps = decoding::batch_sample(&self.inner, &cfg).map_err(to_py_err)?;
        hyps.iter().map(|h| hyp_dict(py, h)).collect()
    }
}

/// Number of alignment paths enumerable for (L, n) under a constraint.
#[pyfunction]
#[pyo3(signature = (l, n, constraint="free"))]
fn path_count(l: usize, n: usize, constraint: &str) -> PyResult<usize> {
    enumerate_paths(l, n, parse_constraint(constraint)?)
        .map(|p| p.len())
        .map_err(to_py_err)
}

#[pyfunction]
fn sentence_bleu(hyp: Vec<u32>, reference: Vec<u32>) -> f64 {
    metrics::sentence_bleu(&hyp, &reference)
}

#[pyfunction]
fn corpus_bleu(hyps: Vec<Vec<u32>>, refs: Vec<Vec<u32>>) -> PyResult<f64> {
    metrics::corpus_bleu(&hyps, &refs).map_err(to_py_err)
}

#[pyfunction]
fn rouge_l(hyp: Vec<u32>, reference: Vec<u32>) -> f64 {
    metrics::rouge_l(&hyp, &reference)
}

#[pyfunction]
fn ncm(nlls: Vec<f64>, ref_lens: Vec<usize>) -> PyResult<f64> {
    metrics::ncm(&nlls, &ref_lens).map_err(to_py_err)
}

/// Pairwise hinge ranking loss on (reward, normalized score) pairs sorted
/// ascending by reward.
#[pyfunction]
fn contrastive_loss(rewards: Vec<f64>, scores: Vec<f64>, epsilon_lb: f64) -> PyResult<f64> {
    if rewards.len() != scores.len() {
        return Err(PyValueError::new_err("rewards and scores differ in length"));
    }
    let hyps: Vec<Hypothesis> = rewards
        .iter()
        .zip(&scores)
        .map(|(&r, &s)| Hypothesis {
            tokens: vec![],
            path: Path(vec![0]),
            log_transition: 0.0,
            log_emission: 0.0,
            reward: Some(r),
            norm_marginal_logprob: Some(s),
            truncated: false,
        })
        .collect();
    let set = objectives::RankedSampleSet::from_scored(hyps).map_err(to_py_err)?;
    objectives::contrastive_loss(&set, epsilon_lb).map_err(to_py_err)
}

#[pymodule]
fn _daglat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lattice>()?;
    m.add_function(wrap_pyfunction!(path_count, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(ncm, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    Ok(())
}
