//! Factorial HMM: one two-state Gaussian chain per appliance, trained by
//! Baum-Welch on its own sub-metered channel, decoded jointly on the
//! aggregate by exact Viterbi over the product state space.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_CHAINS: usize = 12;
pub const VARIANCE_FLOOR: f64 = 1e-2;

/// Two-state chain; state 1 (ON) has the larger emission mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmChain {
    pub name: String,
    pub initial: [f64; 2],
    pub transition: [[f64; 2]; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    /// Generation chain: its mean is subtracted from the aggregate.
    pub is_injection: bool,
}

impl HmmChain {
    fn swapped(&self) -> Self {
        let a = self.transition;
        HmmChain {
            name: self.name.clone(),
            initial: [self.initial[1], self.initial[0]],
            transition: [[a[1][1], a[1][0]], [a[0][1], a[0][0]]],
            means: [self.means[1], self.means[0]],
            variances: [self.variances[1], self.variances[0]],
            is_injection: self.is_injection,
        }
    }

    fn sign(&self) -> f64 {
        if self.is_injection {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EmInit {
    /// Split at the midpoint of the observed range.
    Midpoint,
    /// Random parameters from a seed.
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub variance_floor: f64,
    pub init: EmInit,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 200,
            tol: 1e-6,
            variance_floor: VARIANCE_FLOOR,
            init: EmInit::Midpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmReport {
    pub chain: HmmChain,
    /// Log-likelihood of the parameters entering each iteration, and of the
    /// final parameters last.
    pub log_likelihood: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

fn initial_chain(name: &str, obs: &[f64], opts: &EmOptions) -> HmmChain {
    let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = opts.variance_floor;
    match opts.init {
        EmInit::Midpoint => {
            let mid = 0.5 * (lo + hi);
            let mut stats = [(0.0, 0.0, 0usize); 2];
            for &x in obs {
                let s = usize::from(x > mid);
                stats[s].0 += x;
                stats[s].1 += x * x;
                stats[s].2 += 1;
            }
            let moments = |(sum, sq, n): (f64, f64, usize)| {
                let n = n.max(1) as f64;
                let m = sum / n;
                (m, (sq / n - m * m).max(floor))
            };
            let (m0, v0) = moments(stats[0]);
            let (m1, v1) = moments(stats[1]);
            HmmChain {
                name: name.into(),
                initial: [0.5, 0.5],
                transition: [[0.9, 0.1], [0.1, 0.9]],
                means: [m0, m1],
                variances: [v0, v1],
                is_injection: false,
            }
        }
        EmInit::Random(seed) => {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = obs.len() as f64;
            let mean = obs.iter().sum::<f64>() / n;
            let var = (obs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(floor);
            let mut means = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
            means.sort_by(f64::total_cmp);
            let p0 = rng.gen_range(0.05..0.95);
            let stay0 = rng.gen_range(0.5..0.99);
            let stay1 = rng.gen_range(0.5..0.99);
            HmmChain {
                name: name.into(),
                initial: [p0, 1.0 - p0],
                transition: [[stay0, 1.0 - stay0], [1.0 - stay1, stay1]],
                means,
                variances: [
                    (var * rng.gen_range(0.2..2.0)).max(floor),
                    (var * rng.gen_range(0.2..2.0)).max(floor),
                ],
                is_injection: false,
            }
        }
    }
}

/// One E-step: posterior occupancies, expected transitions, log-likelihood.
struct Posterior {
    gamma: Vec<[f64; 2]>,
    xi: [[f64; 2]; 2],
    log_likelihood: f64,
}

fn e_step(c: &HmmChain, obs: &[f64]) -> Posterior {
    let n = obs.len();
    let mut alpha = vec![[0.0; 2]; n];
    let mut emis = vec![[0.0; 2]; n];
    let mut scale = vec![0.0; n];
    let mut ll = 0.0;
    for (t, &x) in obs.iter().enumerate() {
        let l = [log_normal(x, c.means[0], c.variances[0]), log_normal(x, c.means[1], c.variances[1])];
        let m = l[0].max(l[1]);
        emis[t] = [(l[0] - m).exp(), (l[1] - m).exp()];
        let prior = if t == 0 {
            c.initial
        } else {
            let a = alpha[t - 1];
            [
                a[0] * c.transition[0][0] + a[1] * c.transition[1][0],
                a[0] * c.transition[0][1] + a[1] * c.transition[1][1],
            ]
        };
        let raw = [prior[0] * emis[t][0], prior[1] * emis[t][1]];
        let s = raw[0] + raw[1];
        scale[t] = s;
        alpha[t] = [raw[0] / s, raw[1] / s];
        ll += s.ln() + m;
    }
    let mut beta = vec![[1.0; 2]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let nb = [emis[t + 1][0] * beta[t + 1][0], emis[t + 1][1] * beta[t + 1][1]];
        for i in 0..2 {
            beta[t][i] = (c.transition[i][0] * nb[0] + c.transition[i][1] * nb[1]) / scale[t + 1];
        }
    }
    let mut gamma = vec![[0.0; 2]; n];
    let mut xi = [[0.0; 2]; 2];
    for t in 0..n {
        let g = [alpha[t][0] * beta[t][0], alpha[t][1] * beta[t][1]];
        let s = g[0] + g[1];
        gamma[t] = [g[0] / s, g[1] / s];
        if t + 1 < n {
            let mut block = [[0.0; 2]; 2];
            let mut total = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    block[i][j] = alpha[t][i] * c.transition[i][j] * emis[t + 1][j] * beta[t + 1][j];
                    total += block[i][j];
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    xi[i][j] += block[i][j] / total;
                }
            }
        }
    }
    Posterior {
        gamma,
        xi,
        log_likelihood: ll,
    }
}

fn m_step(prev: &HmmChain, obs: &[f64], post: &Posterior, floor: f64) -> HmmChain {
    let mut next = prev.clone();
    next.initial = post.gamma[0];
    for i in 0..2 {
        let row = post.xi[i][0] + post.xi[i][1];
        if row > 0.0 {
            next.transition[i] = [post.xi[i][0] / row, post.xi[i][1] / row];
        }
        let w: f64 = post.gamma.iter().map(|g| g[i]).sum();
        if w > 0.0 {
            let mean = post.gamma.iter().zip(obs).map(|(g, x)| g[i] * x).sum::<f64>() / w;
            let var = post.gamma.iter().zip(obs).map(|(g, x)| g[i] * (x - mean).powi(2)).sum::<f64>() / w;
            next.means[i] = mean;
            next.variances[i] = var.max(floor);
        }
    }
    next
}

/// Log-likelihood of `obs` under `chain`.
pub fn log_likelihood(chain: &HmmChain, obs: &[f64]) -> f64 {
    e_step(chain, obs).log_likelihood
}

/// Baum-Welch on one channel.
pub fn fit_chain(name: &str, obs: &[f64], opts: &EmOptions) -> Result<EmReport> {
    let first = obs.iter().find(|v| v.is_finite());
    let distinct = match first {
        Some(&f) => obs.iter().any(|&v| v.is_finite() && v != f),
        None => false,
    };
    if !distinct || obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(name.into()));
    }
    let mut chain = initial_chain(name, obs, opts);
    let mut trace = Vec::new();
    for _ in 0..opts.max_iter {
        let post = e_step(&chain, obs);
        let ll = post.log_likelihood;
        let improved = trace.last().map_or(f64::INFINITY, |&prev: &f64| ll - prev);
        trace.push(ll);
        if improved < opts.tol {
            break;
        }
        chain = m_step(&chain, obs, &post, opts.variance_floor);
    }
    if trace.len() == opts.max_iter {
        trace.push(log_likelihood(&chain, obs));
    }
    if chain.means[0] > chain.means[1] {
        chain = chain.swapped();
    }
    Ok(EmReport {
        chain,
        log_likelihood: trace,
    })
}

/// Fits one chain per channel; the last is the injection chain when
/// `injection` is given.
pub fn fhmm_fit(
    appliances: &[(&str, &[f64])],
    injection: Option<(&str, &[f64])>,
    opts: &EmOptions,
) -> Result<Vec<HmmChain>> {
    let jobs: Vec<(&str, &[f64], bool)> = appliances
        .iter()
        .map(|&(n, o)| (n, o, false))
        .chain(injection.map(|(n, o)| (n, o, true)))
        .collect();
    // Chains are independent; fit them on scoped threads.
    let results: Vec<Result<HmmChain>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(name, obs, inj)| {
                s.spawn(move || {
                    fit_chain(name, obs, opts).map(|r| HmmChain {
                        is_injection: inj,
                        ..r.chain
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain fitting thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Per chain, per step, 0/1.
    pub states: Vec<Vec<u8>>,
    /// Mean sequence of the injection chain, if any.
    pub injection: Option<Vec<f64>>,
    /// Log joint probability of the decoded path.
    pub log_prob: f64,
}

/// Emission log-density of `y` for joint state `s` (bit `k` = chain `k`).
pub fn joint_log_emission(chains: &[HmmChain], s: usize, y: f64) -> f64 {
    let (mut mean, mut var) = (0.0, 0.0);
    for (k, c) in chains.iter().enumerate() {
        let b = (s >> k) & 1;
        mean += c.sign() * c.means[b];
        var += c.variances[b];
    }
    log_normal(y, mean, var)
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Exact Viterbi over all `2^K` joint states, maximising over one chain's
/// previous state at a time (`O(T K 2^K)`).
pub fn fhmm_decode(aggregate: &[f64], chains: &[HmmChain]) -> Result<Decoded> {
    let k = chains.len();
    if k > MAX_CHAINS {
        return Err(Error::ProductSpaceTooLarge { k });
    }
    if k == 0 {
        return Err(Error::Config("no chains to decode".into()));
    }
    let n_states = 1usize << k;
    let t_len = aggregate.len();
    let log_a: Vec<[[f64; 2]; 2]> = chains
        .iter()
        .map(|c| {
            let a = c.transition;
            [[ln(a[0][0]), ln(a[0][1])], [ln(a[1][0]), ln(a[1][1])]]
        })
        .collect();
    let mut delta: Vec<f64> = (0..n_states)
        .map(|s| {
            let prior: f64 = chains.iter().enumerate().map(|(j, c)| ln(c.initial[(s >> j) & 1])).sum();
            prior + aggregate.first().map_or(0.0, |&y| joint_log_emission(chains, s, y))
        })
        .collect();
    let mut back: Vec<Vec<u32>> = Vec::with_capacity(t_len.saturating_sub(1));
    let mut score = vec![0.0; n_states];
    let mut origin = vec![0u32; n_states];
    let mut next_score = vec![0.0; n_states];
    let mut next_origin = vec![0u32; n_states];
    for &y in aggregate.iter().skip(1) {
        score.copy_from_slice(&delta);
        for (s, o) in origin.iter_mut().enumerate() {
            *o = s as u32;
        }
        // After pass j, score[s] maximises over previous states that agree
        // with s on chains > j; chains <= j have already moved to s's bits.
        for (j, la) in log_a.iter().enumerate() {
            let bit = 1usize << j;
            for s in 0..n_states {
                let to = (s >> j) & 1;
                let stay_src = s;
                let flip_src = s ^ bit;
                let from_stay = to;
                let from_flip = 1 - to;
                let a = score[stay_src] + la[from_stay][to];
                let b = score[flip_src] + la[from_flip][to];
                if a >= b {
                    next_score[s] = a;
                    next_origin[s] = origin[stay_src];
                } else {
                    next_score[s] = b;
                    next_origin[s] = origin[flip_src];
                }
            }
            std::mem::swap(&mut score, &mut next_score);
            std::mem::swap(&mut origin, &mut next_origin);
        }
        for s in 0..n_states {
            delta[s] = score[s] + joint_log_emission(chains, s, y);
        }
        back.push(origin.clone());
    }
    let (mut best, mut best_score) = (0usize, f64::NEG_INFINITY);
    for (s, &v) in delta.iter().enumerate() {
        if v > best_score {
            best = s;
            best_score = v;
        }
    }
    let mut path = vec![0usize; t_len];
    if t_len > 0 {
        path[t_len - 1] = best;
        for t in (1..t_len).rev() {
            path[t - 1] = back[t - 1][path[t]] as usize;
        }
    }
    let states = (0..k)
        .map(|j| path.iter().map(|&s| ((s >> j) & 1) as u8).collect())
        .collect();
    let injection = chains
        .iter()
        .position(|c| c.is_injection)
        .map(|j| path.iter().map(|&s| chains[j].means[(s >> j) & 1]).collect());
    Ok(Decoded {
        states,
        injection,
        log_prob: if t_len == 0 { 0.0 } else { best_score },
    })
}

/// Log joint probability of a given joint-state path.
pub fn path_log_prob(aggregate: &[f64], chains: &[HmmChain], path: &[usize]) -> f64 {
    let mut lp = 0.0;
    for (t, (&s, &y)) in path.iter().zip(aggregate).enumerate() {
        for (j, c) in chains.iter().enumerate() {
            let b = (s >> j) & 1;
            lp += if t == 0 {
                ln(c.initial[b])
            } else {
                ln(c.transition[(path[t - 1] >> j) & 1][b])
            };
        }
        lp += joint_log_emission(chains, s, y);
    }
    lp
}
