//! Adam and RMSprop with layer-wise learning-rate groups: the base rate
//! for the "convlstm" group, `base * gamma` for everything else, zero for
//! frozen groups, all linearly decayed to zero over the configured steps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

pub const CONVLSTM_GROUP: &str = "convlstm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Rmsprop,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Learning-rate scale for every group except "convlstm".
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Linear decay of all rates to zero at `total_steps`.
    #[serde(default = "default_true")]
    pub linear_decay: bool,
    #[serde(default)]
    pub total_steps: usize,
    /// Groups whose parameters stay bit-identical.
    #[serde(default, rename = "freeze")]
    pub frozen_groups: BTreeSet<String>,
}

fn default_base_lr() -> f64 {
    0.001
}
fn default_gamma() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_rho() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

impl OptimizerConfig {
    pub fn new(kind: OptimKind) -> Self {
        OptimizerConfig {
            kind,
            base_lr: default_base_lr(),
            gamma: default_gamma(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            rho: default_rho(),
            eps: default_eps(),
            linear_decay: default_true(),
            total_steps: 0,
            frozen_groups: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("optim.gamma must be in (0,1], got {}", self.gamma)));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config(format!("optim.base_lr must be positive, got {}", self.base_lr)));
        }
        if self.linear_decay && self.total_steps == 0 {
            return Err(Error::Config("optim.total_steps required when linear decay is on".to_string()));
        }
        Ok(())
    }

    /// Per-group learning rates at a step: linear interpolation of the
    /// base rate to zero, then group scaling and freezing. Steps past the
    /// horizon clamp to zero with a warning.
    pub fn lr_at(&self, step: usize, groups: &[&str]) -> BTreeMap<String, f64> {
        let decayed = if self.linear_decay {
            if step > self.total_steps {
                log::warn!("lr_at: step {} past total_steps {}; clamping to 0", step, self.total_steps);
                0.0
            } else {
                self.base_lr * (1.0 - step as f64 / self.total_steps as f64)
            }
        } else {
            self.base_lr
        };
        groups
            .iter()
            .map(|&g| {
                let lr = if self.frozen_groups.contains(g) {
                    0.0
                } else if g == CONVLSTM_GROUP {
                    decayed
                } else {
                    decayed * self.gamma
                };
                (g.to_string(), lr)
            })
            .collect()
    }
}

/// Owns the per-parameter moment state; one instance per parameter set.
pub struct Optimizer {
    cfg: OptimizerConfig,
    steps_taken: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, steps_taken: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn cfg(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Applies one update from the gradients stored on the parameters.
    /// Frozen groups are skipped untouched; any unfrozen parameter
    /// without a gradient is an error.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let group_names: Vec<String> = params.groups().into_iter().collect();
        let group_refs: Vec<&str> = group_names.iter().map(|s| s.as_str()).collect();
        let lrs = self.cfg.lr_at(self.steps_taken, &group_refs);
        self.steps_taken += 1;
        let t = self.steps_taken as f64;

        for (name, param) in params.iter_mut() {
            if self.cfg.frozen_groups.contains(&param.group) {
                continue;
            }
            let lr = lrs[&param.group];
            let grad = param
                .tensor
                .grad()
                .ok_or_else(|| {
                    Error::arg("optimizer_step", format!("parameter {name} has no gradient"))
                })?
                .to_vec();
            let data = param.tensor.data_mut();
            match self.cfg.kind {
                OptimKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; data.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; data.len()]);
                    let bc1 = 1.0 - self.cfg.beta1.powf(t);
                    let bc2 = 1.0 - self.cfg.beta2.powf(t);
                    for i in 0..data.len() {
                        m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * grad[i];
                        v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * grad[i] * grad[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                    }
                }
                OptimKind::Rmsprop => {
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; data.len()]);
                    for i in 0..data.len() {
                        v[i] = self.cfg.rho * v[i] + (1.0 - self.cfg.rho) * grad[i] * grad[i];
                        data[i] -= lr * grad[i] / (v[i].sqrt() + self.cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment state as checkpoint entries ("optim/step", "optim/m/...",
    /// "optim/v/...").
    pub fn state_entries(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert("optim/step".to_string(), Tensor::scalar(self.steps_taken as f64));
        for (name, m) in &self.m {
            out.insert(format!("optim/m/{name}"), Tensor::new(vec![m.len()], m.clone()).unwrap());
        }
        for (name, v) in &self.v {
            out.insert(format!("optim/v/{name}"), Tensor::new(vec![v.len()], v.clone()).unwrap());
        }
        out
    }

    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let step = entries
            .get("optim/step")
            .ok_or_else(|| Error::Checkpoint("missing optim/step".to_string()))?;
        self.steps_taken = step.item()? as usize;
        self.m.clear();
        self.v.clear();
        for (name, tensor) in entries {
            if let Some(p) = name.strip_prefix("optim/m/") {
                self.m.insert(p.to_string(), tensor.data().to_vec());
            } else if let Some(p) = name.strip_prefix("optim/v/") {
                self.v.insert(p.to_string(), tensor.data().to_vec());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, group: &str, data: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        let mut t = Tensor::new(vec![data.len()], data).unwrap();
        t.set_grad(grad).unwrap();
        store.insert(name, group, t);
        store
    }

    fn plain_cfg(kind: OptimKind) -> OptimizerConfig {
        OptimizerConfig { linear_decay: false, ..OptimizerConfig::new(kind) }
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut store = store_with("w", "convlstm", vec![1.0], vec![1.0]);
        let mut opt = Optimizer::new(plain_cfg(OptimKind::Adam)).unwrap();
        opt.step(&mut store).unwrap();
        let w = store.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.001)).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn rmsprop_first_step_matches_hand_evaluation() {
        let mut store = store_with("w", "convlstm", vec![0.0], vec![1.0]);
        let mut opt = Optimizer::new(plain_cfg(OptimKind::Rmsprop)).unwrap();
        opt.step(&mut store).unwrap();
        // v = 0.1, delta = -lr / (sqrt(0.1) + eps)
        let expect = -0.001 / (0.1f64.sqrt() + 1e-8);
        let w = store.get("w").unwrap().data()[0];
        assert!((w - expect).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_constant_gradient_reaches_lr_magnitude() {
        let mut store = store_with("w", "convlstm", vec![0.0], vec![0.7]);
        let mut opt = Optimizer::new(plain_cfg(OptimKind::Rmsprop)).unwrap();
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..400 {
            store.get_mut("w").unwrap().set_grad(vec![0.7]).unwrap();
            opt.step(&mut store).unwrap();
            let w = store.get("w").unwrap().data()[0];
            delta = (w - prev).abs();
            prev = w;
        }
        // v converges to g^2, so |delta| converges to lr.
        assert!((delta - 0.001).abs() < 0.001 * 0.02, "delta {delta}");
    }

    #[test]
    fn frozen_group_is_bit_unchanged() {
        let mut store = store_with("enc/w", "conv1", vec![0.123456789, -7.5], vec![5.0, 5.0]);
        let before: Vec<u64> = store.get("enc/w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let mut cfg = plain_cfg(OptimKind::Adam);
        cfg.frozen_groups.insert("conv1".to_string());
        let mut opt = Optimizer::new(cfg).unwrap();
        for _ in 0..3 {
            opt.step(&mut store).unwrap();
        }
        let after: Vec<u64> = store.get("enc/w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_gradient_means_zero_update() {
        for kind in [OptimKind::Adam, OptimKind::Rmsprop] {
            let mut store = store_with("w", "convlstm", vec![2.5], vec![0.0]);
            let mut opt = Optimizer::new(plain_cfg(kind)).unwrap();
            opt.step(&mut store).unwrap();
            assert_eq!(store.get("w").unwrap().data()[0], 2.5);
        }
    }

    #[test]
    fn missing_gradient_on_unfrozen_param_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", "convlstm", Tensor::zeros(vec![2]));
        let mut opt = Optimizer::new(plain_cfg(OptimKind::Adam)).unwrap();
        assert!(opt.step(&mut store).is_err());
    }

    #[test]
    fn lr_schedule_endpoints_and_gamma() {
        let cfg = OptimizerConfig {
            total_steps: 100,
            gamma: 0.05,
            ..OptimizerConfig::new(OptimKind::Adam)
        };
        let groups = ["convlstm", "conv1"];
        let at0 = cfg.lr_at(0, &groups);
        assert!((at0["convlstm"] - 0.001).abs() < 1e-15);
        assert!((at0["conv1"] - 0.00005).abs() < 1e-15);
        let mid = cfg.lr_at(50, &groups);
        assert!((mid["convlstm"] - 0.0005).abs() < 1e-15);
        assert!((mid["conv1"] - 0.000025).abs() < 1e-15);
        let end = cfg.lr_at(100, &groups);
        assert_eq!(end["convlstm"], 0.0);
        // Past the horizon: clamped to zero.
        assert_eq!(cfg.lr_at(101, &groups)["convlstm"], 0.0);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.ssk");
        let mut store = store_with("w", "convlstm", vec![1.0, 2.0], vec![0.3, -0.4]);
        let mut opt = Optimizer::new(plain_cfg(OptimKind::Adam)).unwrap();
        opt.step(&mut store).unwrap();
        crate::checkpoint::save_checkpoint(&path, &opt.state_entries()).unwrap();

        let mut restored = Optimizer::new(plain_cfg(OptimKind::Adam)).unwrap();
        restored.load_state(&crate::checkpoint::load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(restored.steps_taken(), 1);
        let bits = |m: &BTreeMap<String, Vec<f64>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&opt.m), bits(&restored.m));
        assert_eq!(bits(&opt.v), bits(&restored.v));
    }
}
