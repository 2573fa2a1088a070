//! DAG lattice data model: per-example token/transition logits, path
//! semantics, masking, and exhaustive path enumeration used as the
//! correctness oracle for the dynamic-programming routines.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Reserved vocabulary slots. Ids are dense `0..V`.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED_SURFACES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Masked logits are stored as a large negative sentinel rather than exact
/// -inf so downstream arithmetic stays total.
pub const NEG_SENTINEL: f64 = -1e9;

/// Paths with more than this many oracle candidates refuse to enumerate.
pub const ENUM_CAP: u128 = 1_000_000;

/// Path-anchoring mode. `Anchored` paths start at position 0 and end at
/// position L-1; `Free` paths are arbitrary ascending subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathConstraint {
    Anchored,
    Free,
}

impl std::fmt::Display for PathConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PathConstraint::Anchored => write!(f, "anchored"),
            PathConstraint::Free => write!(f, "free"),
        }
    }
}

impl std::str::FromStr for PathConstraint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchored" => Ok(PathConstraint::Anchored),
            "free" => Ok(PathConstraint::Free),
            other => Err(Error::Config(format!("unknown constraint '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from the full surface list. The first four
    /// entries must be the reserved tokens.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::Config("vocabulary needs the 4 reserved tokens".into()));
        }
        for (i, s) in RESERVED_SURFACES.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Config(format!(
                    "reserved token {i} must be '{s}', got '{}'",
                    tokens[i]
                )));
            }
        }
        Ok(Vocabulary { tokens })
    }

    /// Synthetic vocabulary of `size` ids: reserved tokens then `w4`, `w5`, ...
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= 5, "synthetic vocabulary needs at least one content token");
        let mut tokens: Vec<String> = RESERVED_SURFACES.iter().map(|s| s.to_string()).collect();
        for i in 4..size {
            tokens.push(format!("w{i}"));
        }
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surface(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED_SURFACES[UNK as usize])
    }

    /// Surface lookup; unknown surfaces map to `UNK`.
    pub fn lookup(&self, surface: &str) -> u32 {
        self.tokens
            .iter()
            .position(|t| t == surface)
            .map(|i| i as u32)
            .unwrap_or(UNK)
    }

    pub fn surfaces(&self) -> &[String] {
        &self.tokens
    }
}

/// One example's decoder state: token logits (L x V) and transition logits
/// (L x L), both row-major. This is the object every loss and decoder
/// consumes.
#[derive(Clone, Debug)]
pub struct Lattice {
    l: usize,
    v: usize,
    token_logits: Vec<f64>,
    transition_logits: Vec<f64>,
    constraint: PathConstraint,
    normalized: bool,
}

impl Lattice {
    pub fn new(
        l: usize,
        v: usize,
        token_logits: Vec<f64>,
        transition_logits: Vec<f64>,
        constraint: PathConstraint,
    ) -> Result<Self> {
        if l < 2 {
            return Err(Error::InvalidLattice(format!("L = {l} < 2")));
        }
        if token_logits.len() != l * v {
            return Err(Error::InvalidLattice(format!(
                "token logits have {} entries, expected {}x{}",
                token_logits.len(),
                l,
                v
            )));
        }
        if transition_logits.len() != l * l {
            return Err(Error::InvalidLattice(format!(
                "transition logits have {} entries, expected {}x{}",
                transition_logits.len(),
                l,
                l
            )));
        }
        if token_logits.iter().chain(&transition_logits).any(|x| x.is_nan()) {
            return Err(Error::InvalidLattice("NaN logit".into()));
        }
        Ok(Lattice {
            l,
            v,
            token_logits,
            transition_logits,
            constraint,
            normalized: false,
        })
    }

    pub fn from_f32(
        l: usize,
        v: usize,
        token_logits: &[f32],
        transition_logits: &[f32],
        constraint: PathConstraint,
    ) -> Result<Self> {
        Lattice::new(
            l,
            v,
            token_logits.iter().map(|&x| x as f64).collect(),
            transition_logits.iter().map(|&x| x as f64).collect(),
            constraint,
        )
    }

    pub fn positions(&self) -> usize {
        self.l
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn constraint(&self) -> PathConstraint {
        self.constraint
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn token_row(&self, u: usize) -> &[f64] {
        &self.token_logits[u * self.v..(u + 1) * self.v]
    }

    pub fn transition_row(&self, u: usize) -> &[f64] {
        &self.transition_logits[u * self.l..(u + 1) * self.l]
    }

    pub fn token_logits(&self) -> &[f64] {
        &self.token_logits
    }

    pub fn transition_logits(&self) -> &[f64] {
        &self.transition_logits
    }

    /// Random lattice for tests and oracles.
    pub fn random(
        l: usize,
        v: usize,
        constraint: PathConstraint,
        rng: &mut crate::rng::Rng,
    ) -> Lattice {
        let token: Vec<f64> = (0..l * v).map(|_| rng.gauss()).collect();
        let trans: Vec<f64> = (0..l * l).map(|_| rng.gauss()).collect();
        Lattice::new(l, v, token, trans, constraint).expect("valid random lattice")
    }
}

/// Transition mask: entry (i, j) is allowed iff j > i. Anchoring does not
/// change the mask; start/end requirements are enforced by path consumers.
pub fn build_transition_mask(l: usize, _constraint: PathConstraint) -> Result<Vec<bool>> {
    if l < 2 {
        return Err(Error::InvalidLattice(format!("L = {l} < 2")));
    }
    let mut mask = vec![false; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            mask[i * l + j] = true;
        }
    }
    Ok(mask)
}

fn log_softmax_masked(row: &[f64], allowed: impl Fn(usize) -> bool, out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        return false; // no allowed entries
    }
    let mut sum = 0.0;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) {
            sum += (x - max).exp();
        }
    }
    let lse = max + sum.ln();
    for (j, &x) in row.iter().enumerate() {
        out[j] = if allowed(j) { x - lse } else { NEG_SENTINEL };
    }
    true
}

/// Log-softmax over token rows and masked transition rows. The terminal row
/// L-1 has no allowed transitions and is left fully masked.
pub fn normalize_lattice(lattice: &Lattice) -> Result<Lattice> {
    if lattice.normalized {
        return Ok(lattice.clone());
    }
    let l = lattice.l;
    let v = lattice.v;
    let mut token = vec![0.0; l * v];
    let mut trans = vec![NEG_SENTINEL; l * l];
    for u in 0..l {
        let ok = log_softmax_masked(lattice.token_row(u), |_| true, &mut token[u * v..(u + 1) * v]);
        if !ok {
            return Err(Error::InvalidLattice(format!("token row {u} has no finite mass")));
        }
    }
    for u in 0..l.saturating_sub(1) {
        let ok = log_softmax_masked(
            lattice.transition_row(u),
            |j| j > u,
            &mut trans[u * l..(u + 1) * l],
        );
        if !ok {
            return Err(Error::DegenerateRow { row: u });
        }
    }
    Ok(Lattice {
        l,
        v,
        token_logits: token,
        transition_logits: trans,
        constraint: lattice.constraint,
        normalized: true,
    })
}

/// Ascending sequence of decoder position indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path(pub Vec<usize>);

impl Path {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidPath("empty path".into()));
        }
        for w in self.0.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidPath(format!(
                    "non-increasing step {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if *self.0.last().unwrap() >= l {
            return Err(Error::InvalidPath(format!(
                "index {} out of range for L = {l}",
                self.0.last().unwrap()
            )));
        }
        Ok(())
    }
}

/// A decoded or sampled output: emitted tokens, the path that produced
/// them, and the score decomposition.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub path: Path,
    pub log_transition: f64,
    pub log_emission: f64,
    pub reward: Option<f64>,
    pub norm_marginal_logprob: Option<f64>,
    pub truncated: bool,
}

impl Hypothesis {
    pub fn joint_logprob(&self) -> f64 {
        self.log_transition + self.log_emission
    }
}

/// Joint log-probability of a (path, tokens) pair on a normalized lattice:
/// sum of transition log-probs along the path plus per-position token
/// log-probs.
pub fn path_joint_logprob(lattice: &Lattice, path: &Path, tokens: &[u32]) -> Result<f64> {
    debug_assert!(lattice.normalized, "path_joint_logprob wants a normalized lattice");
    path.validate(lattice.l)?;
    if tokens.len() != path.len() {
        return Err(Error::InvalidPath(format!(
            "{} tokens for a {}-step path",
            tokens.len(),
            path.len()
        )));
    }
    let mut total = 0.0;
    for (i, &u) in path.0.iter().enumerate() {
        let t = tokens[i];
        if t as usize >= lattice.v {
            return Err(Error::Vocab { id: t, vocab: lattice.v });
        }
        total += lattice.token_row(u)[t as usize];
        if i + 1 < path.len() {
            total += lattice.transition_row(u)[path.0[i + 1]];
        }
    }
    Ok(total)
}

/// Gradient of `path_joint_logprob` with respect to the raw (unnormalized)
/// logits: `onehot - softmax` per visited row.
pub fn path_joint_gradient(lattice: &Lattice, path: &Path, tokens: &[u32]) -> Result<LatticeGrad> {
    let norm = normalize_lattice(lattice)?;
    path.validate(norm.l)?;
    if tokens.len() != path.len() {
        return Err(Error::InvalidPath(format!(
            "{} tokens for a {}-step path",
            tokens.len(),
            path.len()
        )));
    }
    let mut grad = LatticeGrad::zeros(norm.l, norm.v);
    for (i, &u) in path.0.iter().enumerate() {
        let t = tokens[i] as usize;
        if t >= norm.v {
            return Err(Error::Vocab { id: tokens[i], vocab: norm.v });
        }
        let row = norm.token_row(u);
        for c in 0..norm.v {
            grad.token[u * norm.v + c] -= row[c].exp();
        }
        grad.token[u * norm.v + t] += 1.0;
        if i + 1 < path.len() {
            let next = path.0[i + 1];
            let trow = norm.transition_row(u);
            for w in (u + 1)..norm.l {
                grad.transition[u * norm.l + w] -= trow[w].exp();
            }
            grad.transition[u * norm.l + next] += 1.0;
        }
    }
    Ok(grad)
}

/// Gradients with respect to a lattice's raw logits.
#[derive(Clone, Debug)]
pub struct LatticeGrad {
    pub l: usize,
    pub v: usize,
    pub token: Vec<f64>,
    pub transition: Vec<f64>,
}

impl LatticeGrad {
    pub fn zeros(l: usize, v: usize) -> Self {
        LatticeGrad {
            l,
            v,
            token: vec![0.0; l * v],
            transition: vec![0.0; l * l],
        }
    }

    pub fn axpy(&mut self, coeff: f64, other: &LatticeGrad) {
        debug_assert_eq!(self.l, other.l);
        debug_assert_eq!(self.v, other.v);
        for (a, b) in self.token.iter_mut().zip(&other.token) {
            *a += coeff * b;
        }
        for (a, b) in self.transition.iter_mut().zip(&other.transition) {
            *a += coeff * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.token.iter_mut().for_each(|x| *x *= c);
        self.transition.iter_mut().for_each(|x| *x *= c);
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// All ascending n-subsets of [0, L) in lexicographic order; anchored mode
/// keeps only those starting at 0 and ending at L-1.
pub fn enumerate_paths(l: usize, n: usize, constraint: PathConstraint) -> Result<Vec<Path>> {
    if n == 0 || n > l {
        return Err(Error::InvalidTarget(format!("n = {n} not in 1..={l}")));
    }
    let count = match constraint {
        PathConstraint::Free => binomial(l, n),
        PathConstraint::Anchored => {
            if n == 1 {
                0 // cannot both start at 0 and end at L-1 with L >= 2
            } else {
                binomial(l - 2, n - 2)
            }
        }
    };
    if count > ENUM_CAP {
        return Err(Error::OracleTooLarge { l, n, count, cap: ENUM_CAP });
    }
    let mut out = Vec::with_capacity(count as usize);
    match constraint {
        PathConstraint::Free => {
            let mut idx: Vec<usize> = (0..n).collect();
            loop {
                out.push(Path(idx.clone()));
                // next lexicographic combination
                let mut i = n;
                loop {
                    if i == 0 {
                        return Ok(out);
                    }
                    i -= 1;
                    if idx[i] != i + l - n {
                        break;
                    }
                }
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
            }
        }
        PathConstraint::Anchored => {
            if n == 1 {
                return Ok(out);
            }
            if n == 2 {
                out.push(Path(vec![0, l - 1]));
                return Ok(out);
            }
            for middle in enumerate_paths(l - 2, n - 2, PathConstraint::Free)? {
                let mut full = Vec::with_capacity(n);
                full.push(0);
                full.extend(middle.0.iter().map(|&i| i + 1));
                full.push(l - 1);
                out.push(Path(full));
            }
            Ok(out)
        }
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exhaustive marginal log-likelihood: log-sum-exp of the joint score over
/// every enumerable path. This is the correctness oracle for the dp module.
pub fn brute_force_marginal(
    lattice: &Lattice,
    tokens: &[u32],
    constraint: PathConstraint,
) -> Result<f64> {
    let norm = normalize_lattice(lattice)?;
    let paths = enumerate_paths(norm.l, tokens.len(), constraint)?;
    let scores: Vec<f64> = paths
        .iter()
        .map(|p| path_joint_logprob(&norm, p, tokens))
        .collect::<Result<_>>()?;
    Ok(logsumexp(&scores))
}

const LATTICE_MAGIC: &[u8; 4] = b"CLAT";
const LATTICE_VERSION: u32 = 1;

/// Binary lattice dump: magic "CLAT", version, L, V (u32 LE), then row-major
/// f32 token logits and row-major f32 transition logits.
pub fn write_lattice(w: &mut impl Write, lattice: &Lattice) -> Result<()> {
    w.write_all(LATTICE_MAGIC)?;
    w.write_all(&LATTICE_VERSION.to_le_bytes())?;
    w.write_all(&(lattice.l as u32).to_le_bytes())?;
    w.write_all(&(lattice.v as u32).to_le_bytes())?;
    for &x in &lattice.token_logits {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    for &x in &lattice.transition_logits {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_lattice(r: &mut impl Read, constraint: PathConstraint) -> Result<Lattice> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LATTICE_MAGIC {
        return Err(Error::InvalidLattice("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != LATTICE_VERSION {
        return Err(Error::InvalidLattice(format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let l = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let v = u32::from_le_bytes(buf4) as usize;
    let mut read_f32s = |count: usize| -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(count);
        let mut b = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut b)?;
            out.push(f32::from_le_bytes(b));
        }
        Ok(out)
    };
    let token = read_f32s(l * v)?;
    let trans = read_f32s(l * l)?;
    Lattice::from_f32(l, v, &token, &trans, constraint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn mask_is_strict_upper_triangle() {
        let mask = build_transition_mask(3, PathConstraint::Free).unwrap();
        let allowed: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| mask[i * 3 + j])
            .collect();
        assert_eq!(allowed, vec![(0, 1), (0, 2), (1, 2)]);

        let mask2 = build_transition_mask(2, PathConstraint::Anchored).unwrap();
        assert_eq!(mask2.iter().filter(|&&b| b).count(), 1);
        assert!(mask2[1]);

        let mask6 = build_transition_mask(6, PathConstraint::Free).unwrap();
        assert_eq!(mask6.iter().filter(|&&b| b).count(), 15);

        assert!(build_transition_mask(1, PathConstraint::Free).is_err());
    }

    #[test]
    fn normalization_symmetric_and_forced() {
        // token row [0,0] with V=2 -> log 0.5 each
        let lat = Lattice::new(
            2,
            2,
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0],
            PathConstraint::Free,
        )
        .unwrap();
        let norm = normalize_lattice(&lat).unwrap();
        assert!((norm.token_row(0)[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!((norm.token_row(0)[1] - 0.5f64.ln()).abs() < 1e-12);
        // single allowed transition gets log-prob 0
        assert!((norm.transition_row(0)[1]).abs() < 1e-12);
        // terminal row stays masked
        assert_eq!(norm.transition_row(1)[0], NEG_SENTINEL);
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let mut rng = Rng::new(123);
        let lat = Lattice::random(4, 4, PathConstraint::Free, &mut rng);
        let norm = normalize_lattice(&lat).unwrap();
        for u in 0..3 {
            let sum: f64 = (u + 1..4).map(|j| norm.transition_row(u)[j].exp()).sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {u} sums to {sum}");
        }
        for u in 0..4 {
            let sum: f64 = norm.token_row(u).iter().map(|x| x.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn path_joint_gathers_named_entries() {
        let mut rng = Rng::new(7);
        let lat = Lattice::random(10, 5, PathConstraint::Free, &mut rng);
        let norm = normalize_lattice(&lat).unwrap();
        let path = Path(vec![0, 1, 7, 9]);
        let tokens = vec![4, 0, 2, 3];
        let got = path_joint_logprob(&norm, &path, &tokens).unwrap();
        // transition part uses exactly E[0,1], E[1,7], E[7,9]
        let expect = norm.transition_row(0)[1]
            + norm.transition_row(1)[7]
            + norm.transition_row(7)[9]
            + norm.token_row(0)[4]
            + norm.token_row(1)[0]
            + norm.token_row(7)[2]
            + norm.token_row(9)[3];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn single_node_path_has_no_transition_term() {
        let mut rng = Rng::new(9);
        let lat = Lattice::random(4, 5, PathConstraint::Free, &mut rng);
        let norm = normalize_lattice(&lat).unwrap();
        let got = path_joint_logprob(&norm, &Path(vec![0]), &[2]).unwrap();
        assert!((got - norm.token_row(0)[2]).abs() < 1e-12);
    }

    #[test]
    fn path_errors() {
        let mut rng = Rng::new(1);
        let lat = Lattice::random(4, 5, PathConstraint::Free, &mut rng);
        let norm = normalize_lattice(&lat).unwrap();
        assert!(matches!(
            path_joint_logprob(&norm, &Path(vec![2, 1]), &[0, 0]),
            Err(Error::InvalidPath(_))
        ));
        assert!(matches!(
            path_joint_logprob(&norm, &Path(vec![0, 1]), &[0, 9]),
            Err(Error::Vocab { .. })
        ));
    }

    #[test]
    fn enumeration_counts_and_order() {
        let free = enumerate_paths(6, 3, PathConstraint::Free).unwrap();
        assert_eq!(free.len(), 20);
        assert_eq!(free[0], Path(vec![0, 1, 2]));
        assert_eq!(free[19], Path(vec![3, 4, 5]));
        for w in free.windows(2) {
            assert!(w[0].0 < w[1].0, "lexicographic order");
        }

        let anchored = enumerate_paths(6, 3, PathConstraint::Anchored).unwrap();
        let got: Vec<Vec<usize>> = anchored.iter().map(|p| p.0.clone()).collect();
        assert_eq!(
            got,
            vec![vec![0, 1, 5], vec![0, 2, 5], vec![0, 3, 5], vec![0, 4, 5]]
        );

        // L = n forces the identity path
        let forced = enumerate_paths(4, 4, PathConstraint::Free).unwrap();
        assert_eq!(forced.len(), 1);
        assert_eq!(forced[0], Path(vec![0, 1, 2, 3]));
    }

    #[test]
    fn enumeration_cap_guard() {
        // C(60, 30) is astronomically over the cap
        assert!(matches!(
            enumerate_paths(60, 30, PathConstraint::Free),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn brute_force_degenerate_single_alignment() {
        let mut rng = Rng::new(77);
        let lat = Lattice::random(4, 6, PathConstraint::Free, &mut rng);
        let norm = normalize_lattice(&lat).unwrap();
        let tokens = vec![1, 2, 3, 4];
        let bf = brute_force_marginal(&lat, &tokens, PathConstraint::Free).unwrap();
        let only = path_joint_logprob(&norm, &Path(vec![0, 1, 2, 3]), &tokens).unwrap();
        assert!((bf - only).abs() < 1e-12);
    }

    #[test]
    fn brute_force_uniform_closed_form_n1() {
        // uniform token rows, n = 1, free mode: log(L / V)
        let l = 6;
        let v = 4;
        let lat = Lattice::new(
            l,
            v,
            vec![0.0; l * v],
            vec![0.0; l * l],
            PathConstraint::Free,
        )
        .unwrap();
        let got = brute_force_marginal(&lat, &[2], PathConstraint::Free).unwrap();
        let expect = (l as f64 / v as f64).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn permutation_sensitivity_only_in_emission() {
        let mut rng = Rng::new(5);
        let lat = Lattice::random(6, 6, PathConstraint::Free, &mut rng);
        let norm = normalize_lattice(&lat).unwrap();
        let path = Path(vec![0, 2, 5]);
        let a = path_joint_logprob(&norm, &path, &[4, 5, 3]).unwrap();
        let b = path_joint_logprob(&norm, &path, &[3, 5, 4]).unwrap();
        let trans: f64 = norm.transition_row(0)[2] + norm.transition_row(2)[5];
        let em_a = a - trans;
        let em_b = b - trans;
        assert!((em_a + trans - a).abs() < 1e-12);
        assert!((em_b + trans - b).abs() < 1e-12);
        assert_ne!(a, b);
    }

    #[test]
    fn lattice_dump_roundtrip() {
        let mut rng = Rng::new(31);
        let lat = Lattice::random(5, 7, PathConstraint::Anchored, &mut rng);
        let mut buf = Vec::new();
        write_lattice(&mut buf, &lat).unwrap();
        let back = read_lattice(&mut buf.as_slice(), PathConstraint::Anchored).unwrap();
        assert_eq!(back.positions(), 5);
        assert_eq!(back.vocab(), 7);
        for (a, b) in lat.token_logits.iter().zip(back.token_logits.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn binom(n: u64, k: u64) -> u64 {
            if k > n {
                return 0;
            }
            let k = k.min(n - k);
            let mut acc = 1u64;
            for i in 0..k {
                acc = acc * (n - i) / (i + 1);
            }
            acc
        }

        proptest! {
            #[test]
            fn path_count_is_binomial(l in 2usize..=12, n_off in 0usize..12) {
                let n = 1 + n_off % l;
                let paths = enumerate_paths(l, n, PathConstraint::Free).unwrap();
                prop_assert_eq!(paths.len() as u64, binom(l as u64, n as u64));
                for p in &paths {
                    for w in p.0.windows(2) {
                        prop_assert!(w[1] > w[0], "monotone paths only");
                    }
                }
            }

            #[test]
            fn normalized_rows_are_distributions(seed in 0u64..500, l in 2usize..=7) {
                let mut rng = crate::rng::Rng::new(seed);
                let lat = Lattice::random(l, 4, PathConstraint::Free, &mut rng);
                let norm = normalize_lattice(&lat).unwrap();
                for u in 0..l - 1 {
                    let sum: f64 =
                        (u + 1..l).map(|j| norm.transition_row(u)[j].exp()).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn path_joint_gradient_matches_finite_differences() {
        let mut rng = Rng::new(64);
        let lat = Lattice::random(5, 4, PathConstraint::Free, &mut rng);
        let path = Path(vec![0, 2, 4]);
        let tokens = vec![1, 3, 2];
        let grad = path_joint_gradient(&lat, &path, &tokens).unwrap();
        let h = 1e-6;
        let score = |l: &Lattice| {
            let n = normalize_lattice(l).unwrap();
            path_joint_logprob(&n, &path, &tokens).unwrap()
        };
        for idx in [0usize, 5, 9, 13, 19] {
            let mut up = lat.clone();
            up.token_logits[idx] += h;
            let mut dn = lat.clone();
            dn.token_logits[idx] -= h;
            let fd = (score(&up) - score(&dn)) / (2.0 * h);
            assert!(
                (fd - grad.token[idx]).abs() < 1e-6,
                "token idx {idx}: fd {fd} vs analytic {}",
                grad.token[idx]
            );
        }
        for idx in [2usize, 7, 14, 22] {
            let mut up = lat.clone();
            up.transition_logits[idx] += h;
            let mut dn = lat.clone();
            dn.transition_logits[idx] -= h;
            let fd = (score(&up) - score(&dn)) / (2.0 * h);
            assert!(
                (fd - grad.transition[idx]).abs() < 1e-6,
                "transition idx {idx}: fd {fd} vs analytic {}",
                grad.transition[idx]
            );
        }
    }
}
