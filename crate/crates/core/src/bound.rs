//! Convergence upper bound for age-aware over-the-air FL.
//!
//! The optimality gap after `T` rounds is bounded by
//! `(L/2) [ prod_i D(i) * ||theta(0) - theta*||^2 + sum_j Q(j) prod_{i>j} D(i) ]`,
//! which is evaluated here through the equivalent forward recursion
//! `b(t+1) = D(t) b(t) + Q(t)`.

use crate::error::{Error, Result};

/// A per-round quantity: one value for every round, or an explicit list.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    PerRound(Vec<f64>),
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::PerRound(v) => v[t],
        }
    }

    fn check(&self, name: &'static str, rounds: usize, valid: impl Fn(f64) -> bool, what: &str) -> Result<()> {
        let values: &[f64] = match self {
            Schedule::Constant(v) => std::slice::from_ref(v),
            Schedule::PerRound(v) => {
                if v.len() < rounds {
                    return Err(Error::invalid(name, format!("schedule has {} entries, need {rounds}", v.len())));
                }
                &v[..rounds]
            }
        };
        match values.iter().position(|&v| !valid(v)) {
            Some(t) => Err(Error::invalid(name, format!("entry {t} = {} {what}", values[t]))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundParams {
    /// Smoothness constant `L`.
    pub smoothness: f64,
    /// Strong-convexity constant `mu`.
    pub mu: f64,
    /// Gradient second-moment bound `G^2`.
    pub g2: f64,
    /// Stochastic-gradient variance bound `sigma^2`.
    pub sigma2: f64,
    /// Bound on the largest / r-th largest buffer magnitude ratio, `>= 1`.
    pub beta: f64,
    /// Data-heterogeneity bias `Gamma`.
    pub heterogeneity: f64,
    pub d: usize,
    pub r_abs: usize,
    pub k_abs: usize,
    pub tau: usize,
    pub rounds: usize,
    pub eta: Schedule,
    pub alpha: Schedule,
    pub antennas: usize,
    pub clients: usize,
    pub sigma_h2: f64,
    pub sigma_z2: f64,
    /// `||theta(0) - theta*||^2`.
    pub theta0_dist2: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("smoothness", self.smoothness)?;
        finite_nonneg("mu", self.mu)?;
        finite_nonneg("g2", self.g2)?;
        finite_nonneg("sigma2", self.sigma2)?;
        finite_nonneg("heterogeneity", self.heterogeneity)?;
        finite_nonneg("sigma_z2", self.sigma_z2)?;
        finite_nonneg("theta0_dist2", self.theta0_dist2)?;
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", format!("must be >= 1, got {}", self.beta)));
        }
        if !(self.sigma_h2 > 0.0 && self.sigma_h2.is_finite()) {
            return Err(Error::invalid("sigma_h2", "must be > 0"));
        }
        if self.tau == 0 {
            return Err(Error::invalid("tau", "must be >= 1"));
        }
        if self.antennas == 0 || self.clients == 0 {
            return Err(Error::invalid("antennas", "antennas and clients must be >= 1"));
        }
        check_dims(self.k_abs, self.r_abs, self.d)?;
        let eta_max = if self.mu > 0.0 {
            (1.0 / (self.mu * self.tau as f64)).min(1.0)
        } else {
            1.0
        };
        self.eta.check(
            "eta",
            self.rounds,
            |v| v > 0.0 && v <= eta_max,
            &format!("is outside (0, {eta_max}]"),
        )?;
        self.alpha.check("alpha", self.rounds, |v| v > 0.0 && v.is_finite(), "is not > 0")
    }
}

fn check_dims(k: usize, r: usize, d: usize) -> Result<()> {
    if !(1 <= k && k <= r && r <= d) {
        return Err(Error::invalid("k_abs", format!("need 1 <= k <= r <= d, got k={k} r={r} d={d}")));
    }
    Ok(())
}

/// Contraction constant `k / (k + (r - k) beta + (d - r))`.
pub fn gamma(k_abs: usize, r_abs: usize, d: usize, beta: f64) -> Result<f64> {
    check_dims(k_abs, r_abs, d)?;
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", format!("must be >= 1, got {beta}")));
    }
    let k = k_abs as f64;
    Ok(k / (k + (r_abs - k_abs) as f64 * beta + (d - r_abs) as f64))
}

/// `D = 2 [1 - mu eta (tau - eta (tau - 1))]`.
pub fn d_term(eta: f64, mu: f64, tau: usize) -> f64 {
    let tau = tau as f64;
    2.0 * (1.0 - mu * eta * (tau - eta * (tau - 1.0)))
}

/// The five additive contributions to `Q(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QTerms {
    /// `2 (1 - gamma) eta^2 tau^2 (G^2 + sigma^2)`
    pub compression: f64,
    /// `eta^2 tau^2 G^2 / N`
    pub interference: f64,
    /// `2 (1 + mu (1 - eta)) eta^2 G^2 tau (tau - 1)(2 tau - 1) / 6`
    pub local_drift: f64,
    /// `2 eta^2 ((tau^2 + tau - 1) G^2 + 4 eta (tau - 1) Gamma)`
    pub local_variance: f64,
    /// `sigma_z^2 k / (2 alpha^2 N M sigma_h^2)`
    pub noise: f64,
}

impl QTerms {
    pub fn total(&self) -> f64 {
        self.compression + self.interference + self.local_drift + self.local_variance + self.noise
    }
}

pub fn q_terms(p: &BoundParams, gamma: f64, t: usize) -> QTerms {
    let eta = p.eta.at(t);
    let alpha = p.alpha.at(t);
    let tau = p.tau as f64;
    let eta2 = eta * eta;
    let (n, m) = (p.antennas as f64, p.clients as f64);
    QTerms {
        compression: 2.0 * (1.0 - gamma) * eta2 * tau * tau * (p.g2 + p.sigma2),
        interference: eta2 * tau * tau * p.g2 / n,
        local_drift: 2.0 * (1.0 + p.mu * (1.0 - eta)) * eta2 * p.g2 * tau * (tau - 1.0) * (2.0 * tau - 1.0) / 6.0,
        local_variance: 2.0 * eta2 * ((tau * tau + tau - 1.0) * p.g2 + 4.0 * eta * (tau - 1.0) * p.heterogeneity),
        noise: p.sigma_z2 * p.k_abs as f64 / (2.0 * alpha * alpha * n * m * p.sigma_h2),
    }
}

pub fn q_term(p: &BoundParams, gamma: f64, t: usize) -> f64 {
    q_terms(p, gamma, t).total()
}

/// Power scaling implied by the transmit budget when each of the `k` sent
/// coordinates carries mean energy `coord_energy`: `sqrt(p_bar / (k e))`.
///
/// With `alpha` held fixed, `Q` is concave in `k` and is minimised at an end
/// of the range. Tying `alpha` to `k` this way makes the noise term grow
/// like `k^2`, which is what produces an optimal intermediate `k`.
pub fn alpha_for_k(p_bar: f64, k_abs: usize, coord_energy: f64) -> f64 {
    (p_bar / (k_abs as f64 * coord_energy)).sqrt()
}

/// Total `Q(0)` for each `k` in `ks`, with `alpha` from [`alpha_for_k`].
pub fn q_over_k(p: &BoundParams, ks: &[usize], p_bar: f64, coord_energy: f64) -> Result<Vec<f64>> {
    ks.iter()
        .map(|&k| {
            let mut pk = p.clone();
            pk.k_abs = k;
            pk.alpha = Schedule::Constant(alpha_for_k(p_bar, k, coord_energy));
            let g = gamma(k, pk.r_abs, pk.d, pk.beta)?;
            Ok(q_term(&pk, g, 0))
        })
        .collect()
}

/// Bound on `E||e_comp||^2`: `(1 - gamma) eta^2 tau^2 (G^2 + sigma^2)`.
pub fn comp_error_bound(p: &BoundParams, gamma: f64, t: usize) -> f64 {
    let eta = p.eta.at(t);
    let tau = p.tau as f64;
    (1.0 - gamma) * eta * eta * tau * tau * (p.g2 + p.sigma2)
}

/// Bound on `E||e_channel||^2`: `eta^2 tau^2 G^2 / N + sigma_z^2 k / (2 alpha^2 N M sigma_h^2)`.
pub fn channel_error_bound(p: &BoundParams, t: usize) -> f64 {
    let q = q_terms(p, 1.0, t);
    q.interference + q.noise
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrajectory {
    /// Bound on `E[F(theta(t))] - F*` for `t = 0..=T`.
    pub values: Vec<f64>,
    pub d: Vec<f64>,
    pub q: Vec<f64>,
    /// Some `D(t) >= 1`: the bound does not contract.
    pub diverging: bool,
}

pub fn bound_trajectory(p: &BoundParams) -> Result<BoundTrajectory> {
    p.validate()?;
    let g = gamma(p.k_abs, p.r_abs, p.d, p.beta)?;
    let half_l = p.smoothness / 2.0;
    let mut b = p.theta0_dist2;
    let mut values = Vec::with_capacity(p.rounds + 1);
    let mut ds = Vec::with_capacity(p.rounds);
    let mut qs = Vec::with_capacity(p.rounds);
    values.push(half_l * b);
    for t in 0..p.rounds {
        let d = d_term(p.eta.at(t), p.mu, p.tau);
        let q = q_term(p, g, t);
        b = d * b + q;
        ds.push(d);
        qs.push(q);
        values.push(half_l * b);
    }
    let diverging = ds.iter().any(|&d| d >= 1.0);
    Ok(BoundTrajectory {
        values,
        d: ds,
        q: qs,
        diverging,
    })
}

/// Quantities observed during a simulation, used to stand in for the
/// assumption constants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstantTrace {
    /// Squared norms of the local stochastic gradients.
    pub grad_norm_sq: Vec<f64>,
    /// Largest over `r`-th largest buffer magnitude, per round.
    pub buffer_ratios: Vec<f64>,
}

/// Empirical stand-ins for the assumption constants. These are
/// trajectory maxima, not the uniform bounds the theory asks for; `None`
/// marks a constant that must be supplied by the user.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConstants {
    pub g2: Option<f64>,
    pub beta: Option<f64>,
    pub sigma2: Option<f64>,
    pub heterogeneity: Option<f64>,
}

impl SurrogateConstants {
    pub fn describe(&self) -> Vec<(&'static str, String)> {
        let show = |v: Option<f64>| match v {
            Some(v) => format!("{v} (surrogate: max over trace)"),
            None => "user-supplied".to_string(),
        };
        vec![
            ("g2", show(self.g2)),
            ("beta", show(self.beta)),
            ("sigma2", show(self.sigma2)),
            ("heterogeneity", show(self.heterogeneity)),
        ]
    }
}

pub fn estimate_constants(trace: &ConstantTrace) -> Result<SurrogateConstants> {
    if trace.grad_norm_sq.is_empty() && trace.buffer_ratios.is_empty() {
        return Err(Error::invalid("trace", "no observations"));
    }
    let max = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).reduce(f64::max);
    Ok(SurrogateConstants {
        g2: max(&trace.grad_norm_sq),
        beta: max(&trace.buffer_ratios).map(|b| b.max(1.0)),
        sigma2: None,
        heterogeneity: None,
    })
}
