//! Unrolled log-domain Sinkhorn iterations and their exact reverse pass.
//!
//! Potentials are tracked in the log domain, but the inner sums run on a
//! cached kernel `K = exp(z + ū + v̄)` scaled by `exp(u - ū)` and
//! `exp(v - v̄)`. The reference potentials `ū, v̄` are re-absorbed whenever
//! the current ones drift more than [`REBASE_LOG_GAP`] away, so no factor
//! ever leaves a comfortable floating-point range. Everything runs in f64.

use super::kernels::log_sum_exp;

/// Largest allowed `|u - ū|` (and `|v - v̄|`) before the kernel is rebuilt.
const REBASE_LOG_GAP: f64 = 30.0;

/// Log-potentials of every iteration, kept for the reverse pass.
#[derive(Clone, Debug)]
pub(super) struct SinkhornTrace {
    log_mu: Vec<f64>,
    log_nu: Vec<f64>,
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
}

impl SinkhornTrace {
    pub(super) fn iterations(&self) -> usize {
        self.us.len()
    }
}

struct Kernel<'a> {
    z: &'a [f64],
    m1: usize,
    n1: usize,
    k: Vec<f64>,
    ref_u: Vec<f64>,
    ref_v: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new(z: &'a [f64], m1: usize, n1: usize) -> Self {
        // start from row maxima so every entry is at most 1
        let ref_u = (0..m1)
            .map(|i| {
                -z[i * n1..(i + 1) * n1]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut k = Self {
            z,
            m1,
            n1,
            k: vec![0.0; m1 * n1],
            ref_u,
            ref_v: vec![0.0; n1],
        };
        k.rebuild();
        k
    }

    fn rebuild(&mut self) {
        for i in 0..self.m1 {
            let ui = self.ref_u[i];
            let zr = &self.z[i * self.n1..(i + 1) * self.n1];
            let kr = &mut self.k[i * self.n1..(i + 1) * self.n1];
            for ((k, &z), &vj) in kr.iter_mut().zip(zr).zip(&self.ref_v) {
                *k = (z + ui + vj).exp();
            }
        }
    }

    fn rebase(&mut self, u: &[f64], v: &[f64]) {
        self.ref_u.copy_from_slice(u);
        self.ref_v.copy_from_slice(v);
        self.rebuild();
    }

    fn close(reference: &[f64], x: &[f64]) -> bool {
        reference.iter().zip(x).all(|(r, x)| (x - r).abs() <= REBASE_LOG_GAP)
    }

    /// `exp(x - reference)`, or `None` if some entry drifted too far.
    fn factors(reference: &[f64], x: &[f64]) -> Option<Vec<f64>> {
        Self::close(reference, x).then(|| reference.iter().zip(x).map(|(r, x)| (x - r).exp()).collect())
    }
}

/// Runs `iterations` row-then-column updates on the (M+1)×(N+1) matrix `z`
/// toward row marginals `(1,…,1,N)` and column marginals `(1,…,1,M)`.
/// Returns `log P̂ = z + u + v` and the trace.
pub(super) fn forward(z: &[f64], m1: usize, n1: usize, iterations: usize) -> (Vec<f64>, SinkhornTrace) {
    let (m, n) = (m1 - 1, n1 - 1);
    let mut log_mu = vec![0.0; m1];
    log_mu[m] = (n as f64).ln();
    let mut log_nu = vec![0.0; n1];
    log_nu[n] = (m as f64).ln();

    let mut kernel = Kernel::new(z, m1, n1);
    let mut u = vec![0.0; m1];
    let mut v = vec![0.0; n1];
    let mut us = Vec::with_capacity(iterations);
    let mut vs = Vec::with_capacity(iterations);
    let row_lse = |i: usize, v: &[f64]| log_sum_exp(z[i * n1..(i + 1) * n1].iter().zip(v).map(|(z, v)| z + v));
    let col_lse = |j: usize, u: &[f64]| log_sum_exp((0..m1).map(|i| z[i * n1 + j] + u[i]));
    for _ in 0..iterations {
        // rows: u_i = log μ_i - lse_j(z_ij + v_j)
        let mut stale = false;
        match Kernel::factors(&kernel.ref_v, &v) {
            Some(b) => {
                for i in 0..m1 {
                    let kr = &kernel.k[i * n1..(i + 1) * n1];
                    let s: f64 = kr.iter().zip(&b).map(|(k, b)| k * b).sum();
                    u[i] = if s > 0.0 && s.is_finite() {
                        log_mu[i] + kernel.ref_u[i] - s.ln()
                    } else {
                        stale = true;
                        log_mu[i] - row_lse(i, &v)
                    };
                }
            }
            None => {
                for i in 0..m1 {
                    u[i] = log_mu[i] - row_lse(i, &v);
                }
                stale = true;
            }
        }
        if stale {
            kernel.rebase(&u, &v);
            stale = false;
        }
        // columns: v_j = log ν_j - lse_i(z_ij + u_i)
        match Kernel::factors(&kernel.ref_u, &u) {
            Some(a) => {
                let mut s = vec![0.0; n1];
                for (i, &ai) in a.iter().enumerate() {
                    for (s, &k) in s.iter_mut().zip(&kernel.k[i * n1..(i + 1) * n1]) {
                        *s += k * ai;
                    }
                }
                for j in 0..n1 {
                    v[j] = if s[j] > 0.0 && s[j].is_finite() {
                        log_nu[j] + kernel.ref_v[j] - s[j].ln()
                    } else {
                        stale = true;
                        log_nu[j] - col_lse(j, &u)
                    };
                }
            }
            None => {
                for j in 0..n1 {
                    v[j] = log_nu[j] - col_lse(j, &u);
                }
                stale = true;
            }
        }
        if stale {
            kernel.rebase(&u, &v);
        }
        us.push(u.clone());
        vs.push(v.clone());
    }
    let mut out = z.to_vec();
    for i in 0..m1 {
        for (o, &vj) in out[i * n1..(i + 1) * n1].iter_mut().zip(&v) {
            *o += u[i] + vj;
        }
    }
    (out, SinkhornTrace { log_mu, log_nu, us, vs })
}

/// Gradient with respect to `z` given the gradient `g` of `log P̂`.
pub(super) fn backward(z: &[f64], m1: usize, n1: usize, trace: &SinkhornTrace, g: &[f64]) -> Vec<f64> {
    // log P̂ = z + u_T + v_T
    let mut gz = g.to_vec();
    let mut du: Vec<f64> = (0..m1).map(|i| g[i * n1..(i + 1) * n1].iter().sum()).collect();
    let mut dv = vec![0.0; n1];
    for i in 0..m1 {
        for (d, &gv) in dv.iter_mut().zip(&g[i * n1..(i + 1) * n1]) {
            *d += gv;
        }
    }
    let last = trace.iterations() - 1;
    let mut kernel = Kernel {
        z,
        m1,
        n1,
        k: vec![0.0; m1 * n1],
        ref_u: trace.us[last].clone(),
        ref_v: trace.vs[last].clone(),
    };
    kernel.rebuild();
    let zeros = vec![0.0; n1];
    let inv_nu: Vec<f64> = trace.log_nu.iter().map(|l| (-l).exp()).collect();
    let inv_mu: Vec<f64> = trace.log_mu.iter().map(|l| (-l).exp()).collect();

    for t in (0..trace.iterations()).rev() {
        let u = &trace.us[t];
        let v = &trace.vs[t];
        let v_prev = if t == 0 { &zeros } else { &trace.vs[t - 1] };

        // v_t = log ν - lse_i(z + u_t): weights exp(z + u_t + v_t - log ν)
        if !(Kernel::close(&kernel.ref_u, u) && Kernel::close(&kernel.ref_v, v)) {
            kernel.rebase(u, v);
        }
        let a = Kernel::factors(&kernel.ref_u, u).expect("within gap");
        let b = Kernel::factors(&kernel.ref_v, v).expect("within gap");
        let cb: Vec<f64> = dv.iter().zip(&b).zip(&inv_nu).map(|((d, b), w)| d * b * w).collect();
        for i in 0..m1 {
            let kr = &kernel.k[i * n1..(i + 1) * n1];
            let gr = &mut gz[i * n1..(i + 1) * n1];
            let ai = a[i];
            let mut acc = 0.0;
            for ((gv, &k), &c) in gr.iter_mut().zip(kr).zip(&cb) {
                let w = k * ai * c;
                *gv -= w;
                acc += w;
            }
            du[i] -= acc;
        }

        // u_t = log μ - lse_j(z + v_{t-1}): weights exp(z + v_{t-1} + u_t - log μ)
        if !(Kernel::close(&kernel.ref_u, u) && Kernel::close(&kernel.ref_v, v_prev)) {
            kernel.rebase(u, v_prev);
        }
        let a = Kernel::factors(&kernel.ref_u, u).expect("within gap");
        let b = Kernel::factors(&kernel.ref_v, v_prev).expect("within gap");
        let mut dv_prev = vec![0.0; n1];
        for i in 0..m1 {
            let kr = &kernel.k[i * n1..(i + 1) * n1];
            let gr = &mut gz[i * n1..(i + 1) * n1];
            let ci = du[i] * a[i] * inv_mu[i];
            for (((gv, dp), &k), &bj) in gr.iter_mut().zip(dv_prev.iter_mut()).zip(kr).zip(&b) {
                let w = k * bj * ci;
                *gv -= w;
                *dp -= w;
            }
        }
        du.iter_mut().for_each(|d| *d = 0.0);
        dv = dv_prev;
    }
    gz
}
