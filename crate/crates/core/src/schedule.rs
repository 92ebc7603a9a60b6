//! Noise schedules over training timesteps and their inference-time stride.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Diffusion coefficients over training timesteps: beta_t, alpha_t = 1 -
/// beta_t, and the cumulative product alpha_bar_t.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub num_train_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds with `beta` as given and derives `alpha`, `alpha_bar`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let num_train_steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(num_train_steps);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sched = Self {
            num_train_steps,
            beta,
            alpha,
            alpha_bar,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        if self.num_train_steps < 10 {
            return Err(Error::Config(format!(
                "num_train_steps {} < 10",
                self.num_train_steps
            )));
        }
        if !self.beta.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err(Error::Config("beta out of (0, 1)".into()));
        }
        if !self.alpha_bar.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::Config("alpha_bar not strictly decreasing".into()));
        }
        if self.alpha_bar[0] <= 0.99 {
            return Err(Error::Config(format!(
                "alpha_bar_0 = {} too far from 1",
                self.alpha_bar[0]
            )));
        }
        Ok(())
    }

    /// Signal-to-noise ratio alpha_bar / (1 - alpha_bar) at a timestep.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    /// `num_steps` training timesteps at a uniform stride, descending from
    /// the noisiest. The step below the last is treated as fully clean
    /// (alpha_bar = 1).
    pub fn inference_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps < 1 || num_steps > self.num_train_steps {
            return Err(Error::Config(format!(
                "inference steps {} out of [1, {}]",
                num_steps, self.num_train_steps
            )));
        }
        let stride = self.num_train_steps / num_steps;
        let ts: Vec<usize> = (0..num_steps)
            .map(|i| (i + 1) * stride - 1)
            .rev()
            .collect();
        Ok(ts)
    }
}

/// Standard schedule constructions.
pub fn make_schedule(num_train_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if num_train_steps < 10 {
        return Err(Error::Config(format!(
            "num_train_steps {num_train_steps} < 10"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            (0..num_train_steps)
                .map(|t| lo + (hi - lo) * t as f64 / (num_train_steps - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            // Squared-cosine alpha_bar with offset s = 0.008, betas clipped
            // away from 1 for stability.
            let s = 0.008;
            let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let n = num_train_steps as f64;
            (0..num_train_steps)
                .map(|t| {
                    let a_now = f((t as f64 + 1.0) / n) / f(0.0);
                    let a_prev = f(t as f64 / n) / f(0.0);
                    (1.0 - a_now / a_prev).clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoint_is_heavily_noised() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        // Independent route: recompute the product directly.
        let mut prod = 1.0;
        for t in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 999.0);
        }
        assert!((s.alpha_bar[999] - prod).abs() < 1e-12);
        assert!(s.alpha_bar[999] < 0.01);
    }

    #[test]
    fn alpha_bar_monotone_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(500, kind).unwrap();
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn snr_strictly_decreasing() {
        let s = make_schedule(200, ScheduleKind::Cosine).unwrap();
        for t in 1..200 {
            assert!(s.snr(t) < s.snr(t - 1));
        }
    }

    #[test]
    fn cosine_starts_at_least_as_clean_as_linear() {
        let lin = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let cos = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        assert!(cos.alpha_bar[0] >= lin.alpha_bar[0]);
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(make_schedule(9, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn unknown_kind_string_rejected() {
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        assert_eq!(
            "cosine".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::Cosine
        );
    }

    #[test]
    fn inference_stride_is_uniform_and_descending() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let ts = s.inference_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 19);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
    }

    #[test]
    fn inference_steps_bounds_checked() {
        let s = make_schedule(100, ScheduleKind::Linear).unwrap();
        assert!(s.inference_timesteps(0).is_err());
        assert!(s.inference_timesteps(101).is_err());
        assert_eq!(s.inference_timesteps(100).unwrap().len(), 100);
    }
}
