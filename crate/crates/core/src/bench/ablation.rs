use serde::{Deserialize, Serialize};

use crate::embedding_store::{sample_k_shot, FrozenData, TaskManifest};
use crate::error::{Error, Result};
use crate::objectives::CoMuCoConfig;
use crate::trainer::{train, zero_shot_accuracy};

pub const DEFAULT_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];

/// Which experts and loss terms are active in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_fi: bool,
    pub use_fr: bool,
    pub use_li: bool,
    pub use_lr: bool,
    pub use_ld: bool,
}

impl AblationConfig {
    pub const FULL: Self = Self {
        use_fi: true,
        use_fr: true,
        use_li: true,
        use_lr: true,
        use_ld: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.use_li && !self.use_fi {
            return Err(Error::Parameter("L_I requires the integrator".into()));
        }
        if self.use_lr && !self.use_fr {
            return Err(Error::Parameter("L_R requires the refiner".into()));
        }
        if self.use_ld && !(self.use_fi && self.use_fr) {
            return Err(Error::Parameter("L_D requires both experts".into()));
        }
        Ok(())
    }

    pub fn is_zero_shot(&self) -> bool {
        !self.use_fi && !self.use_fr
    }

    /// Reduced config: a disabled expert's fusion weight moves to the
    /// zero-shot head and a disabled loss gets weight 0.
    pub fn apply(&self, base: &CoMuCoConfig) -> Result<CoMuCoConfig> {
        self.validate()?;
        let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
        Ok(CoMuCoConfig {
            alpha: on(self.use_fr, base.alpha),
            beta: on(self.use_fi, base.beta),
            lambda1: on(self.use_lr, base.lambda1),
            lambda2: on(self.use_li, base.lambda2),
            lambda3: on(self.use_ld, base.lambda3),
            ..base.clone()
        })
    }
}

/// The nine component rows in their fixed order.
pub fn ablation_grid() -> [(&'static str, AblationConfig); 9] {
    let row = |use_fi, use_fr, use_li, use_lr, use_ld| AblationConfig {
        use_fi,
        use_fr,
        use_li,
        use_lr,
        use_ld,
    };
    [
        ("zero-shot", row(false, false, false, false, false)),
        ("FI", row(true, false, false, false, false)),
        ("FI+L_I", row(true, false, true, false, false)),
        ("FR", row(false, true, false, false, false)),
        ("FR+L_R", row(false, true, false, true, false)),
        ("FI+FR", row(true, true, false, false, false)),
        ("FI+FR+L_D", row(true, true, false, false, true)),
        ("FI+FR+L_I+L_R", row(true, true, true, true, false)),
        ("full", AblationConfig::FULL),
    ]
}

/// Seed-averaged accuracy of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_id: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

impl RunReport {
    fn new(config_id: impl Into<String>, k: usize, seeds: &[u64], per_seed: Vec<f64>) -> Self {
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        Self {
            config_id: config_id.into(),
            k,
            seeds: seeds.to_vec(),
            per_seed,
            mean,
        }
    }
}

fn run_one(
    manifest: &TaskManifest,
    frozen: &FrozenData,
    k: usize,
    seed: u64,
    cfg: &CoMuCoConfig,
    zero_shot: bool,
) -> Result<f64> {
    let task = sample_k_shot(manifest, k, seed)?;
    if zero_shot {
        return zero_shot_accuracy(frozen, &task.test_rows);
    }
    let epochs = cfg.epochs_for(manifest.cross_domain);
    Ok(train(&task, frozen, cfg, epochs, seed)?.1.final_accuracy)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::Parameter("at least one seed is required".into()))
    } else {
        Ok(())
    }
}

/// Trains and evaluates every row of [`ablation_grid`] for each seed.
pub fn run_ablation(
    manifest: &TaskManifest,
    frozen: &FrozenData,
    k: usize,
    seeds: &[u64],
    base: &CoMuCoConfig,
) -> Result<Vec<RunReport>> {
    check_seeds(seeds)?;
    base.validate()?;
    let grid = ablation_grid();
    let configs = grid
        .iter()
        .map(|(_, a)| a.apply(base))
        .collect::<Result<Vec<_>>>()?;
    // fail on shot count before any training starts
    sample_k_shot(manifest, k, seeds[0])?;

    grid.iter()
        .zip(&configs)
        .map(|((id, abl), cfg)| {
            let per_seed = seeds
                .iter()
                .map(|&s| run_one(manifest, frozen, k, s, cfg, abl.is_zero_shot()))
                .collect::<Result<Vec<_>>>()?;
            Ok(RunReport::new(*id, k, seeds, per_seed))
        })
        .collect()
}

/// Full-model accuracy for each shot count.
pub fn run_shots_sweep(
    manifest: &TaskManifest,
    frozen: &FrozenData,
    shots: &[usize],
    seeds: &[u64],
    cfg: &CoMuCoConfig,
) -> Result<Vec<RunReport>> {
    check_seeds(seeds)?;
    cfg.validate()?;
    if let Some(&max_k) = shots.iter().max() {
        sample_k_shot(manifest, max_k, seeds[0])?;
    }
    shots
        .iter()
        .map(|&k| {
            let per_seed = seeds
                .iter()
                .map(|&s| run_one(manifest, frozen, k, s, cfg, false))
                .collect::<Result<Vec<_>>>()?;
            Ok(RunReport::new(format!("K={k}"), k, seeds, per_seed))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_obey_dependencies() {
        let g = ablation_grid();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0].0, "zero-shot");
        assert_eq!(g[8].1, AblationConfig::FULL);
        for (_, a) in g {
            a.validate().unwrap();
        }
    }

    #[test]
    fn invalid_combinations_rejected() {
        let bad = AblationConfig {
            use_fi: true,
            use_fr: false,
            use_li: false,
            use_lr: false,
            use_ld: true,
        };
        assert!(bad.validate().is_err());
        assert!(bad.apply(&CoMuCoConfig::default()).is_err());
    }

    #[test]
    fn disabled_expert_weight_goes_to_zero_shot() {
        let base = CoMuCoConfig::default();
        let fi_only = ablation_grid()[1].1.apply(&base).unwrap();
        assert_eq!((fi_only.alpha, fi_only.beta), (0.0, 0.2));
        assert!((fi_only.gamma() - 0.8).abs() < 1e-15);
        assert_eq!(
            (fi_only.lambda1, fi_only.lambda2, fi_only.lambda3),
            (0.0, 0.0, 0.0)
        );
        let full = ablation_grid()[8].1.apply(&base).unwrap();
        assert_eq!(full, base);
    }

    #[test]
    fn mean_is_arithmetic_mean() {
        let r = RunReport::new("x", 1, &[0, 1, 2], vec![0.1, 0.2, 0.6]);
        assert!((r.mean - 0.3).abs() < 1e-12);
    }
}
