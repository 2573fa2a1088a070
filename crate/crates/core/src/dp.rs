//! Dynamic-programming marginal likelihood over the lattice, its analytic
//! gradient via forward-backward, and max-product alignment.
//!
//! Everything here runs in log space with max-shifted log-sum-exp; decoder
//! lengths of several times the source length underflow probability space
//! immediately.

use crate::error::{Error, Result};
use crate::lattice::{normalize_lattice, Lattice, LatticeGrad, Path, PathConstraint};

/// Forward table: `alpha[i][u]` is the log-mass of all prefix alignments
/// placing target step `i` at position `u`; `logz` is the marginal
/// log-likelihood.
#[derive(Clone, Debug)]
pub struct ForwardTable {
    pub n: usize,
    pub l: usize,
    pub alpha: Vec<f64>,
    pub logz: f64,
}

impl ForwardTable {
    pub fn alpha(&self, i: usize, u: usize) -> f64 {
        self.alpha[i * self.l + u]
    }
}

fn check_target(lattice: &Lattice, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidTarget("empty target".into()));
    }
    if tokens.len() > lattice.positions() {
        return Err(Error::InfeasibleTarget {
            n: tokens.len(),
            l: lattice.positions(),
        });
    }
    for &t in tokens {
        if t as usize >= lattice.vocab() {
            return Err(Error::Vocab {
                id: t,
                vocab: lattice.vocab(),
            });
        }
    }
    Ok(())
}

#[inline]
fn lse_accum(acc: &mut (f64, f64), x: f64) {
    // streaming log-sum-exp: acc = (max, sum of exp(x - max))
    if x == f64::NEG_INFINITY {
        return;
    }
    if x > acc.0 {
        if acc.0 == f64::NEG_INFINITY {
            *acc = (x, 1.0);
        } else {
            acc.1 = acc.1 * (acc.0 - x).exp() + 1.0;
            acc.0 = x;
        }
    } else {
        acc.1 += (x - acc.0).exp();
    }
}

#[inline]
fn lse_value(acc: (f64, f64)) -> f64 {
    if acc.0 == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        acc.0 + acc.1.ln()
    }
}

/// Marginal log-likelihood log q(y|x) over all alignment paths, computed by
/// the forward recurrence in O(n L^2).
pub fn dp_marginal_logprob(
    lattice: &Lattice,
    tokens: &[u32],
    constraint: PathConstraint,
) -> Result<(f64, ForwardTable)> {
    check_target(lattice, tokens)?;
    let norm = normalize_lattice(lattice)?;
    let l = norm.positions();
    let n = tokens.len();
    let mut alpha = vec![f64::NEG_INFINITY; n * l];

    let starts: Box<dyn Iterator<Item = usize>> = match constraint {
        PathConstraint::Anchored => Box::new(std::iter::once(0)),
        PathConstraint::Free => Box::new(0..l),
    };
    for u in starts {
        alpha[u] = norm.token_row(u)[tokens[0] as usize];
    }

    for i in 1..n {
        let (prev_part, cur_part) = alpha.split_at_mut(i * l);
        let prev = &prev_part[(i - 1) * l..];
        let cur = &mut cur_part[..l];
        for u in 1..l {
            let mut acc = (f64::NEG_INFINITY, 0.0);
            for v in 0..u {
                let a = prev[v];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                lse_accum(&mut acc, a + norm.transition_row(v)[u]);
            }
            let inner = lse_value(acc);
            if inner != f64::NEG_INFINITY {
                cur[u] = inner + norm.token_row(u)[tokens[i] as usize];
            }
        }
    }

    let logz = match constraint {
        PathConstraint::Anchored => alpha[(n - 1) * l + (l - 1)],
        PathConstraint::Free => {
            let mut acc = (f64::NEG_INFINITY, 0.0);
            for u in 0..l {
                lse_accum(&mut acc, alpha[(n - 1) * l + u]);
            }
            lse_value(acc)
        }
    };

    Ok((logz, ForwardTable { n, l, alpha, logz }))
}

/// Gradient of log q(y|x) with respect to the raw token and transition
/// logits, by forward-backward: posterior node marginals feed the token
/// softmax, posterior edge marginals feed each transition-row softmax.
pub fn dp_gradient(
    lattice: &Lattice,
    tokens: &[u32],
    constraint: PathConstraint,
) -> Result<(f64, LatticeGrad)> {
    check_target(lattice, tokens)?;
    let norm = normalize_lattice(lattice)?;
    let l = norm.positions();
    let v = norm.vocab();
    let n = tokens.len();

    let (logz, table) = dp_marginal_logprob(lattice, tokens, constraint)?;
    if logz == f64::NEG_INFINITY {
        return Err(Error::InvalidTarget(
            "target has zero probability under every alignment".into(),
        ));
    }

    // beta[i][u]: log-mass of suffix alignments given step i sits at u,
    // excluding step i's own emission.
    let mut beta = vec![f64::NEG_INFINITY; n * l];
    match constraint {
        PathConstraint::Anchored => beta[(n - 1) * l + (l - 1)] = 0.0,
        PathConstraint::Free => {
            for u in 0..l {
                beta[(n - 1) * l + u] = 0.0;
            }
        }
    }
    for i in (0..n - 1).rev() {
        for u in 0..l {
            let mut acc = (f64::NEG_INFINITY, 0.0);
            for w in (u + 1)..l {
                let b = beta[(i + 1) * l + w];
                if b == f64::NEG_INFINITY {
                    continue;
                }
                lse_accum(
                    &mut acc,
                    norm.transition_row(u)[w] + norm.token_row(w)[tokens[i + 1] as usize] + b,
                );
            }
            beta[i * l + u] = lse_value(acc);
        }
    }

    // Node marginals: gamma[i][u] = P(a_i = u | y, x).
    // d logZ / d token_logprob[u][c] = sum_i gamma[i][u] [y_i = c].
    let mut g_token_lp = vec![0.0; l * v];
    let mut occupancy = vec![0.0; l]; // sum_i gamma[i][u]
    for i in 0..n {
        let c = tokens[i] as usize;
        for u in 0..l {
            let a = table.alpha(i, u);
            let b = beta[i * l + u];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            let gamma = (a + b - logz).exp();
            g_token_lp[u * v + c] += gamma;
            occupancy[u] += gamma;
        }
    }

    // Edge marginals: xi[i][(u,w)] summed over i.
    // d logZ / d transition_logprob[u][w] = sum_i xi.
    let mut g_trans_lp = vec![0.0; l * l];
    let mut trans_row_mass = vec![0.0; l];
    for i in 0..n - 1 {
        let c_next = tokens[i + 1] as usize;
        for u in 0..l {
            let a = table.alpha(i, u);
            if a == f64::NEG_INFINITY {
                continue;
            }
            for w in (u + 1)..l {
                let b = beta[(i + 1) * l + w];
                if b == f64::NEG_INFINITY {
                    continue;
                }
                let xi =
                    (a + norm.transition_row(u)[w] + norm.token_row(w)[c_next] + b - logz).exp();
                g_trans_lp[u * l + w] += xi;
                trans_row_mass[u] += xi;
            }
        }
    }

    // Chain through the two log-softmaxes:
    // d/d logit[u][c'] = g[u][c'] - (sum_c g[u][c]) * softmax[u][c'].
    let mut grad = LatticeGrad::zeros(l, v);
    for u in 0..l {
        let row = norm.token_row(u);
        let total = occupancy[u];
        for c in 0..v {
            grad.token[u * v + c] = g_token_lp[u * v + c] - total * row[c].exp();
        }
    }
    for u in 0..l.saturating_sub(1) {
        let row = norm.transition_row(u);
        let total = trans_row_mass[u];
        for w in (u + 1)..l {
            grad.transition[u * l + w] = g_trans_lp[u * l + w] - total * row[w].exp();
        }
    }

    Ok((logz, grad))
}

/// Max-product alignment: the argmax path of q(y|a,x) q(a|x), ties broken
/// toward the lexicographically smallest index sequence.
pub fn viterbi_align(
    lattice: &Lattice,
    tokens: &[u32],
    constraint: PathConstraint,
) -> Result<Path> {
    check_target(lattice, tokens)?;
    let norm = normalize_lattice(lattice)?;
    let l = norm.positions();
    let n = tokens.len();

    // score_from[i][u]: best joint log-prob of steps i.. given step i at u,
    // including step i's emission. Computed backward so reconstruction can
    // walk forward picking the smallest position at each tie.
    let mut score_from = vec![f64::NEG_INFINITY; n * l];
    for u in 0..l {
        let terminal_ok = match constraint {
            PathConstraint::Anchored => u == l - 1,
            PathConstraint::Free => true,
        };
        if terminal_ok {
            score_from[(n - 1) * l + u] = norm.token_row(u)[tokens[n - 1] as usize];
        }
    }
    for i in (0..n - 1).rev() {
        for u in 0..l {
            let mut best = f64::NEG_INFINITY;
            for w in (u + 1)..l {
                let s = score_from[(i + 1) * l + w];
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let cand = norm.transition_row(u)[w] + s;
                if cand > best {
                    best = cand;
                }
            }
            if best != f64::NEG_INFINITY {
                score_from[i * l + u] = norm.token_row(u)[tokens[i] as usize] + best;
            }
        }
    }

    let start_range: Vec<usize> = match constraint {
        PathConstraint::Anchored => vec![0],
        PathConstraint::Free => (0..l).collect(),
    };
    let mut best_start = None;
    let mut best_score = f64::NEG_INFINITY;
    for &u in &start_range {
        let s = score_from[u];
        if s > best_score {
            best_score = s;
            best_start = Some(u);
        }
    }
    let Some(mut cur) = best_start else {
        return Err(Error::InvalidTarget(
            "target has zero probability under every alignment".into(),
        ));
    };
    if best_score == f64::NEG_INFINITY {
        return Err(Error::InvalidTarget(
            "target has zero probability under every alignment".into(),
        ));
    }

    let mut path = Vec::with_capacity(n);
    path.push(cur);
    for i in 0..n - 1 {
        // remainder to distribute over steps i+1..; pick the smallest w
        // reproducing the stored optimum exactly
        let want = score_from[i * l + cur] - norm.token_row(cur)[tokens[i] as usize];
        let mut chosen = None;
        let mut best = f64::NEG_INFINITY;
        for w in (cur + 1)..l {
            let s = score_from[(i + 1) * l + w];
            if s == f64::NEG_INFINITY {
                continue;
            }
            let cand = norm.transition_row(cur)[w] + s;
            if cand > best {
                best = cand;
                chosen = Some(w);
            }
        }
        debug_assert!((best - want).abs() < 1e-9);
        let _ = want;
        cur = chosen.expect("viterbi successor exists by construction");
        path.push(cur);
    }
    Ok(Path(path))
}
