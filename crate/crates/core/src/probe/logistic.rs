use ndarray::{s, Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub penalty: Penalty,
    /// Inverse regularization strength.
    #[serde(rename = "C")]
    pub c: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl ProbeConfig {
    /// Settings for probes on raw activations.
    pub fn raw_default() -> Self {
        Self {
            penalty: Penalty::L2,
            c: 1e-3,
            tolerance: 1e-4,
            max_iterations: 20_000,
        }
    }

    /// Settings for probes on SAE features.
    pub fn sae_default() -> Self {
        Self {
            penalty: Penalty::L1,
            c: 0.1,
            tolerance: 1e-3,
            max_iterations: 50_000,
        }
    }

    pub fn with_c(mut self, c: f64) -> Self {
        self.c = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Invalid(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid("tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `Σᵢ log(1 + exp(−yᵢ(w·xᵢ + b))) + (1/C)·R(w)` with labels mapped to ±1.
pub struct LogisticObjective<'a> {
    x: ArrayView2<'a, f64>,
    y: Array1<f64>,
    inv_c: f64,
    penalty: Penalty,
}

impl<'a> LogisticObjective<'a> {
    pub fn new(x: ArrayView2<'a, f64>, labels: &[u8], c: f64, penalty: Penalty) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::dims("labels", x.nrows(), labels.len()));
        }
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        if n_pos == 0 || n_pos == labels.len() {
            return Err(Error::SingleClass);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            x,
            y: labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect(),
            inv_c: 1.0 / c,
            penalty,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Data term and its gradient with respect to `(w, b)`.
    pub fn loss_grad(&self, w: ArrayView1<f64>, b: f64) -> (f64, Array1<f64>, f64) {
        let margins = self.x.dot(&w) + b;
        let mut loss = 0.0;
        let mut coef = Array1::zeros(self.y.len());
        for ((m, &y), c) in margins.iter().zip(self.y.iter()).zip(coef.iter_mut()) {
            loss += softplus(-y * m);
            *c = -y * sigmoid(-y * m);
        }
        let gw = self.x.t().dot(&coef);
        (loss, gw, coef.sum())
    }

    pub fn regularizer(&self, w: ArrayView1<f64>) -> f64 {
        match self.penalty {
            Penalty::L2 => 0.5 * w.dot(&w),
            Penalty::L1 => w.iter().map(|v| v.abs()).sum(),
        }
    }

    pub fn value(&self, w: ArrayView1<f64>, b: f64) -> f64 {
        self.loss_grad(w, b).0 + self.inv_c * self.regularizer(w)
    }

    /// Gradient norm (L2) or distance of the loss gradient to the
    /// subdifferential, maximized over coordinates (L1).
    pub fn residual(&self, w: ArrayView1<f64>, b: f64) -> f64 {
        let (_, gw, gb) = self.loss_grad(w, b);
        self.residual_from(w, &gw, gb)
    }

    fn residual_from(&self, w: ArrayView1<f64>, gw: &Array1<f64>, gb: f64) -> f64 {
        match self.penalty {
            Penalty::L2 => {
                let g = gw + &(self.inv_c * &w);
                (g.dot(&g) + gb * gb).sqrt()
            }
            Penalty::L1 => {
                let lam = self.inv_c;
                gw.iter().zip(w.iter()).fold(gb.abs(), |acc, (&g, &wj)| {
                    let d = if wj > 0.0 {
                        (g + lam).abs()
                    } else if wj < 0.0 {
                        (g - lam).abs()
                    } else {
                        (g.abs() - lam).max(0.0)
                    };
                    acc.max(d)
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub residual: f64,
    pub objective: f64,
}

/// Fits the regularized logistic regression from a zero start.
pub fn fit_logistic(x: ArrayView2<f64>, labels: &[u8], config: &ProbeConfig) -> Result<LinearFit> {
    config.validate()?;
    let obj = LogisticObjective::new(x, labels, config.c, config.penalty)?;
    match config.penalty {
        Penalty::L2 => lbfgs(&obj, config),
        Penalty::L1 => fista(&obj, config),
    }
}

fn split(theta: &Array1<f64>) -> (ArrayView1<'_, f64>, f64) {
    let d = theta.len() - 1;
    (theta.slice(s![..d]), theta[d])
}

fn l2_value_grad(obj: &LogisticObjective, theta: &Array1<f64>) -> (f64, Array1<f64>) {
    let (w, b) = split(theta);
    let (loss, gw, gb) = obj.loss_grad(w, b);
    let mut g = Array1::zeros(theta.len());
    g.slice_mut(s![..w.len()]).assign(&(gw + &(obj.inv_c * &w)));
    g[w.len()] = gb;
    (loss + obj.inv_c * 0.5 * w.dot(&w), g)
}

fn lbfgs(obj: &LogisticObjective, config: &ProbeConfig) -> Result<LinearFit> {
    const MEMORY: usize = 10;
    let n = obj.dim() + 1;
    let mut theta = Array1::zeros(n);
    let (mut f, mut g) = l2_value_grad(obj, &theta);
    let mut history: std::collections::VecDeque<(Array1<f64>, Array1<f64>, f64)> = Default::default();
    for iter in 0..config.max_iterations {
        let gnorm = g.dot(&g).sqrt();
        if gnorm <= config.tolerance {
            return Ok(finish(theta, iter, gnorm, f));
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q.scaled_add(-a, y);
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => s.dot(y) / y.dot(y),
            None => 1.0 / gnorm.max(1.0),
        };
        q *= gamma;
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let beta = rho * y.dot(&q);
            q.scaled_add(a - beta, s);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            history.clear();
            dir = -&g / gnorm.max(1.0);
            slope = g.dot(&dir);
        }
        let mut step = 1.0;
        let (theta_new, f_new, g_new) = loop {
            let cand = &theta + &(step * &dir);
            let (fc, gc) = l2_value_grad(obj, &cand);
            // approximate Armijo: tolerate rounding in f near the optimum
            if fc <= f + 1e-4 * step * slope + 1e-14 * f.abs().max(1.0) {
                break (cand, fc, gc);
            }
            step *= 0.5;
            if step < 1e-20 {
                // no further progress is representable
                let residual = gnorm;
                return if residual <= config.tolerance {
                    Ok(finish(theta, iter, residual, f))
                } else {
                    Err(Error::NotConverged {
                        iterations: iter,
                        residual,
                    })
                };
            }
        };
        let s_vec = &theta_new - &theta;
        let y_vec = &g_new - &g;
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.dot(&s_vec).sqrt() * y_vec.dot(&y_vec).sqrt() {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s_vec, y_vec, 1.0 / sy));
        }
        theta = theta_new;
        f = f_new;
        g = g_new;
    }
    let residual = g.dot(&g).sqrt();
    if residual <= config.tolerance {
        return Ok(finish(theta, config.max_iterations, residual, f));
    }
    Err(Error::NotConverged {
        iterations: config.max_iterations,
        residual,
    })
}

fn finish(theta: Array1<f64>, iterations: usize, residual: f64, objective: f64) -> LinearFit {
    let d = theta.len() - 1;
    LinearFit {
        bias: theta[d],
        weights: theta.slice(s![..d]).to_owned(),
        iterations,
        residual,
        objective,
    }
}

/// Largest eigenvalue of `XᵀX` by power iteration, slightly inflated.
fn spectral_sq(x: ArrayView2<f64>) -> f64 {
    let d = x.ncols();
    if d == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..50 {
        let u = x.t().dot(&x.dot(&v));
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lam = norm;
        v = u / norm;
    }
    lam * 1.05
}

/// Accelerated proximal gradient with a diagonal metric (separate step sizes
/// for weights and bias), backtracking and function-value restarts.
fn fista(obj: &LogisticObjective, config: &ProbeConfig) -> Result<LinearFit> {
    let d = obj.dim();
    let n = obj.y.len() as f64;
    let lam = obj.inv_c;
    // block-diagonal bound on the Hessian of the data term
    let lw = (spectral_sq(obj.x) / 2.0).max(1e-12);
    let lb = n / 2.0;
    let mut scale = 1.0;

    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut yw = w.clone();
    let mut yb = b;
    let mut t: f64 = 1.0;
    let mut f_prev = obj.value(w.view(), b);
    let mut residual = f64::INFINITY;

    for iter in 0..config.max_iterations {
        let (fy, gw, gb) = obj.loss_grad(yw.view(), yb);
        let (nw, nb, f_new) = loop {
            let (sw, sb) = (1.0 / (lw * scale), 1.0 / (lb * scale));
            let nw = (&yw - &(sw * &gw)).mapv(|v| v.signum() * (v.abs() - sw * lam).max(0.0));
            let nb = yb - sb * gb;
            let dw = &nw - &yw;
            let db = nb - yb;
            let (f_cand, _, _) = obj.loss_grad(nw.view(), nb);
            let model = fy + gw.dot(&dw) + gb * db + 0.5 * scale * (lw * dw.dot(&dw) + lb * db * db);
            if f_cand <= model + 1e-12 * fy.abs().max(1.0) {
                let f = f_cand + lam * nw.iter().map(|v| v.abs()).sum::<f64>();
                break (nw, nb, f);
            }
            scale *= 2.0;
        };
        let (_, gw_new, gb_new) = obj.loss_grad(nw.view(), nb);
        residual = obj.residual_from(nw.view(), &gw_new, gb_new);
        if residual <= config.tolerance {
            return Ok(LinearFit {
                weights: nw,
                bias: nb,
                iterations: iter + 1,
                residual,
                objective: f_new,
            });
        }
        if f_new > f_prev + 1e-14 * f_prev.abs().max(1.0) && t > 1.0 {
            // restart momentum from the last accepted point
            t = 1.0;
            yw = w.clone();
            yb = b;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        yw = &nw + &(mom * &(&nw - &w));
        yb = nb + mom * (nb - b);
        w = nw;
        b = nb;
        t = t_next;
        f_prev = f_new;
        // let the step grow back after conservative backtracking
        scale = (scale * 0.9).max(1.0);
    }
    Err(Error::NotConverged {
        iterations: config.max_iterations,
        residual,
    })
}
