//! Linear beta schedule in the gamma (cumulative signal retention) form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters a schedule is rebuilt from. This is what gets written to run manifests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    /// Training configuration of the reference SR model: 2000 steps, beta in [1e-6, 1e-2].
    pub const TRAINED: ScheduleSpec = ScheduleSpec {
        steps: 2000,
        beta_start: 1e-6,
        beta_end: 1e-2,
    };

    /// Short inference schedule: 100 steps, beta in [1e-4, 1e-1].
    pub const FAST: ScheduleSpec = ScheduleSpec {
        steps: 100,
        beta_start: 1e-4,
        beta_end: 1e-1,
    };

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Noise schedule with timesteps indexed `1..=T`.
///
/// `gamma(t) = prod_{s<=t} (1 - beta(s))`, `gamma(0) = 1`, and
/// `alpha(t) = gamma(t) / gamma(t-1) = 1 - beta(t)`. Always double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    gammas: Vec<f64>,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Endpoint-inclusive linear betas.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("timestep count must be at least 1".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(Error::Schedule(format!(
                "betas must lie in (0, 1), got [{beta_start}, {beta_end}]"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::Schedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut gammas = Vec::with_capacity(steps);
        let mut g = 1.0;
        for a in &alphas {
            g *= a;
            gammas.push(g);
        }
        if !(g > 0.0) {
            return Err(Error::Schedule("gamma underflowed to zero".into()));
        }
        Ok(Self {
            spec: ScheduleSpec {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            gammas,
            alphas,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `beta(t)` for `t` in `1..=T`.
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha(t)` for `t` in `1..=T`.
    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `gamma(t)` for `t` in `0..=T`.
    #[inline]
    pub fn gamma(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.gammas[t - 1]
        }
    }

    /// Scale of the injected noise at step `t`: `sqrt(1 - alpha(t))`.
    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha(t)).sqrt()
    }

    pub fn to_manifest(&self) -> String {
        toml::to_string(&self.spec).expect("schedule spec serializes")
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let spec: ScheduleSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("schedule manifest: {e}")))?;
        spec.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.gammas(), &[0.5]);
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.gamma(0), 1.0);
    }

    #[test]
    fn two_steps() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.3]);
        assert!((s.gamma(1) - 0.9).abs() < 1e-15);
        assert!((s.gamma(2) - 0.63).abs() < 1e-15);
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha(2) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.2).is_err());
    }

    #[test]
    fn invariants_hold_for_trained_schedule() {
        let s = ScheduleSpec::TRAINED.build().unwrap();
        assert_eq!(s.beta(1), 1e-6);
        assert_eq!(s.beta(2000), 1e-2);
        for t in 1..=s.steps() {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            let rel = (s.gamma(t) - s.gamma(t - 1) * s.alpha(t)).abs() / s.gamma(t);
            assert!(rel <= 1e-12);
            assert!(s.gamma(t) < s.gamma(t - 1));
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
        }
    }

    #[test]
    fn terminal_gamma_matches_extended_precision_product() {
        // 50-digit running products of (1 - beta_s), computed offline.
        let trained = ScheduleSpec::TRAINED.build().unwrap();
        let g = trained.gamma(2000);
        assert!((g - 4.3859782361332093e-5).abs() / g < 1e-12, "{g:e}");
        let short = NoiseSchedule::linear(100, 1e-6, 1e-2).unwrap();
        assert!((short.gamma(100) / 0.605480017240082 - 1.0).abs() < 1e-12);
        let fast = ScheduleSpec::FAST.build().unwrap();
        let g = fast.gamma(100);
        assert!((g - 5.6187610193737382e-3).abs() / g < 1e-12, "{g:e}");
    }

    #[test]
    fn manifest_roundtrip() {
        let s = NoiseSchedule::linear(100, 1e-6, 1e-2).unwrap();
        let back = NoiseSchedule::from_manifest(&s.to_manifest()).unwrap();
        assert_eq!(back, s);
    }
}
