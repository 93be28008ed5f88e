//! Closed-form quantities of the forward and reverse diffusion chains.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`. The convention
//! `alpha_bar(0) = 1` makes the `t = 1` posterior degenerate, so ancestral
//! sampling ends deterministically.
//!
//! All arithmetic here is `f64`, whatever precision the caller trains in.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::param("kind", format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Reverse-process variance choice for `sigma_t^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `sigma_t^2 = posterior variance` (zero at `t = 1`).
    #[default]
    Posterior,
    /// `sigma_t^2 = beta_t`.
    Beta,
}

/// Everything needed to rebuild a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

fn cosine_alpha_bar(s: f64) -> f64 {
    const OFFSET: f64 = 0.008;
    let x = (s + OFFSET) / (1.0 + OFFSET) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl NoiseSchedule {
    /// Builds a schedule with `steps` timesteps.
    ///
    /// For [`ScheduleKind::Cosine`] the betas come from the squared-cosine
    /// `alpha_bar` curve clipped at 0.999; `beta_start`/`beta_end` are still
    /// validated but do not shape the curve.
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::param("T", "need at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::param("beta_end", format!("{beta_end} not in (0, 1)")));
        }
        if beta_start > beta_end {
            return Err(Error::param(
                "beta_start",
                format!("{beta_start} exceeds beta_end {beta_end}"),
            ));
        }

        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => {
                let span = beta_end - beta_start;
                (0..steps)
                    .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                    .collect()
            }
            ScheduleKind::Cosine => (0..steps)
                .map(|i| {
                    let a = cosine_alpha_bar(i as f64 / steps as f64);
                    let b = cosine_alpha_bar((i + 1) as f64 / steps as f64);
                    (1.0 - b / a).min(0.999)
                })
                .collect(),
        };

        // Strict ordering is part of the contract; a flat linear range
        // (beta_start == beta_end) is only admissible for a single step.
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param(
                "beta_end",
                "betas must be strictly increasing over the schedule",
            ));
        }

        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let posterior_vars = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();

        Ok(Self {
            spec: ScheduleSpec {
                kind,
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn linear_default() -> Self {
        ScheduleSpec::default()
            .build()
            .expect("default schedule is valid")
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn sigma(&self, t: usize, variance: ReverseVariance) -> f64 {
        match variance {
            ReverseVariance::Posterior => self.posterior_var(t).sqrt(),
            ReverseVariance::Beta => self.beta(t).sqrt(),
        }
    }

    /// Coefficients `(c_w0, c_wt)` of the posterior mean
    /// `mu = c_w0 * w0 + c_wt * wt`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c_w0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_wt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c_w0, c_wt)
    }

    /// Factor `d w0 / d eps` of [`Self::w0_from_eps`] at fixed `wt`.
    pub fn w0_eps_factor(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        -(1.0 - ab).sqrt() / ab.sqrt()
    }

    /// `w_t = sqrt(alpha_bar_t) w0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, w0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_len("q_sample eps", w0.len(), eps.len())?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(w0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Forward-process posterior `q(w_{t-1} | w_t, w_0)` mean and variance.
    pub fn posterior_mean_var(&self, w0: &[f64], wt: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
        let mean = self.mu_from_w0(wt, t, w0)?;
        Ok((mean, self.posterior_var(t)))
    }

    pub fn mu_from_w0(&self, wt: &[f64], t: usize, w0_pred: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_len("mu_from_w0", wt.len(), w0_pred.len())?;
        let (c0, ct) = self.posterior_coefs(t);
        Ok(w0_pred
            .iter()
            .zip(wt)
            .map(|(x0, xt)| c0 * x0 + ct * xt)
            .collect())
    }

    pub fn mu_from_eps(&self, wt: &[f64], t: usize, eps_pred: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_len("mu_from_eps", wt.len(), eps_pred.len())?;
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        Ok(wt
            .iter()
            .zip(eps_pred)
            .map(|(xt, e)| inv_sqrt_alpha * (xt - coef * e))
            .collect())
    }

    /// Inverse of [`Self::q_sample`] in `w0`: `(wt - sqrt(1 - ab) eps) / sqrt(ab)`.
    pub fn w0_from_eps(&self, wt: &[f64], t: usize, eps_pred: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_len("w0_from_eps", wt.len(), eps_pred.len())?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(wt.iter().zip(eps_pred).map(|(xt, e)| (xt - b * e) / a).collect())
    }

    pub fn eps_from_w0(&self, wt: &[f64], t: usize, w0_pred: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_len("eps_from_w0", wt.len(), w0_pred.len())?;
        let ab = self.alpha_bar(t);
        if ab >= 1.0 {
            return Err(Error::contract(format!("alpha_bar({t}) = 1, noise is unidentifiable")));
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(wt.iter().zip(w0_pred).map(|(xt, x0)| (xt - a * x0) / b).collect())
    }

    /// CSV rows `t,beta,alpha_bar,posterior_var` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,posterior_var\n");
        for t in 1..=self.steps() {
            out.push_str(&format!(
                "{t},{:e},{:e},{:e}\n",
                self.beta(t),
                self.alpha_bar(t),
                self.posterior_var(t)
            ));
        }
        out
    }
}
