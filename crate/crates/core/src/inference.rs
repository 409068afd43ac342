//! Log-space forward-backward and Viterbi recursions shared by the Gaussian
//! and feature-saliency models. Emissions are passed as a row-major `T x K`
//! matrix of log densities; transitions as a row-major `K x K` matrix of log
//! probabilities.

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_vec(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.ln()).collect()
}

pub fn log_matrix(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.iter().map(|v| v.ln())).collect()
}

/// Posterior quantities from one forward-backward sweep.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub n_states: usize,
    pub log_likelihood: f64,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    /// `gamma[t * K + i] = P(x_t = i | y)`.
    pub gamma: Vec<f64>,
    /// `xi_sum[i * K + j] = sum_t P(x_{t-1} = i, x_t = j | y)`.
    pub xi_sum: Vec<f64>,
}

impl Posterior {
    pub fn n_steps(&self) -> usize {
        self.gamma.len() / self.n_states
    }

    pub fn gamma_row(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.n_states..(t + 1) * self.n_states]
    }

    /// Pairwise posterior `P(x_{t-1} = i, x_t = j | y)` for `t >= 1`.
    pub fn xi(&self, t: usize, log_a: &[f64], log_b: &[f64]) -> Vec<f64> {
        let k = self.n_states;
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                out[i * k + j] = (self.log_alpha[(t - 1) * k + i]
                    + log_a[i * k + j]
                    + log_b[t * k + j]
                    + self.log_beta[t * k + j]
                    - self.log_likelihood)
                    .exp();
            }
        }
        out
    }
}

/// Forward pass; returns `log alpha` (`T x K`) and `log p(y)`.
pub fn forward(log_pi: &[f64], log_a: &[f64], log_b: &[f64]) -> (Vec<f64>, f64) {
    let k = log_pi.len();
    let t_len = log_b.len() / k;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * k];
    for i in 0..k {
        alpha[i] = log_pi[i] + log_b[i];
    }
    let mut scratch = vec![0.0; k];
    for t in 1..t_len {
        for j in 0..k {
            for i in 0..k {
                scratch[i] = alpha[(t - 1) * k + i] + log_a[i * k + j];
            }
            alpha[t * k + j] = log_sum_exp(&scratch) + log_b[t * k + j];
        }
    }
    let ll = log_sum_exp(&alpha[(t_len - 1) * k..]);
    (alpha, ll)
}

pub fn backward(log_a: &[f64], log_b: &[f64], k: usize) -> Vec<f64> {
    let t_len = log_b.len() / k;
    let mut beta = vec![0.0; t_len * k];
    let mut scratch = vec![0.0; k];
    for t in (0..t_len.saturating_sub(1)).rev() {
        for i in 0..k {
            for j in 0..k {
                scratch[j] = log_a[i * k + j] + log_b[(t + 1) * k + j] + beta[(t + 1) * k + j];
            }
            beta[t * k + i] = log_sum_exp(&scratch);
        }
    }
    beta
}

pub fn forward_backward(log_pi: &[f64], log_a: &[f64], log_b: &[f64]) -> Posterior {
    let k = log_pi.len();
    let t_len = log_b.len() / k;
    let (log_alpha, ll) = forward(log_pi, log_a, log_b);
    let log_beta = backward(log_a, log_b, k);

    let mut gamma = vec![0.0; t_len * k];
    for t in 0..t_len {
        let row = &mut gamma[t * k..(t + 1) * k];
        for i in 0..k {
            row[i] = log_alpha[t * k + i] + log_beta[t * k + i];
        }
        // normalise each row on its own so rounding never accumulates
        let norm = log_sum_exp(row);
        row.iter_mut().for_each(|g| *g = (*g - norm).exp());
    }

    let mut xi_sum = vec![0.0; k * k];
    let mut local = vec![0.0; k * k];
    for t in 1..t_len {
        for i in 0..k {
            for j in 0..k {
                local[i * k + j] = log_alpha[(t - 1) * k + i]
                    + log_a[i * k + j]
                    + log_b[t * k + j]
                    + log_beta[t * k + j];
            }
        }
        let norm = log_sum_exp(&local);
        for (acc, v) in xi_sum.iter_mut().zip(&local) {
            *acc += (v - norm).exp();
        }
    }

    Posterior {
        n_states: k,
        log_likelihood: ll,
        log_alpha,
        log_beta,
        gamma,
        xi_sum,
    }
}

/// Running Viterbi scores `delta_t(i)`; the argmax of the current scores is
/// the final state of the most probable path through the data seen so far.
#[derive(Debug, Clone)]
pub struct ViterbiFilter {
    delta: Vec<f64>,
    started: bool,
}

impl ViterbiFilter {
    pub fn new(n_states: usize) -> Self {
        Self {
            delta: vec![f64::NEG_INFINITY; n_states],
            started: false,
        }
    }

    /// Advances one step. Writes the best predecessor of each state into
    /// `backpointer` (ties go to the lower index).
    pub fn step(
        &mut self,
        log_pi: &[f64],
        log_a: &[f64],
        log_b_row: &[f64],
        backpointer: &mut [usize],
    ) {
        let k = self.delta.len();
        if !self.started {
            for i in 0..k {
                self.delta[i] = log_pi[i] + log_b_row[i];
                backpointer[i] = 0;
            }
            self.started = true;
            return;
        }
        let prev = self.delta.clone();
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, p) in prev.iter().enumerate() {
                let s = p + log_a[i * k + j];
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            self.delta[j] = best + log_b_row[j];
            backpointer[j] = arg;
        }
    }

    pub fn scores(&self) -> &[f64] {
        &self.delta
    }

    pub fn best_state(&self) -> usize {
        argmax(&self.delta)
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > best {
            best = x;
            arg = i;
        }
    }
    arg
}

/// Most probable state path and its joint log probability.
pub fn viterbi(log_pi: &[f64], log_a: &[f64], log_b: &[f64]) -> (Vec<usize>, f64) {
    let k = log_pi.len();
    let t_len = log_b.len() / k;
    let mut filter = ViterbiFilter::new(k);
    let mut back = vec![0usize; t_len * k];
    for t in 0..t_len {
        filter.step(
            log_pi,
            log_a,
            &log_b[t * k..(t + 1) * k],
            &mut back[t * k..(t + 1) * k],
        );
    }
    let last = filter.best_state();
    let score = filter.scores()[last];
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    (path, score)
}
