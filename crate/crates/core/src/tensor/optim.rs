//! AdamW with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule.

use indexmap::IndexMap;

use super::{ParamGroup, ParamStore};

/// Piecewise-linear multiplier: rises from 0 to 1 over the first
/// `warmup_frac · total` steps, then falls linearly to 0 at `total`. Steps
/// past the end clamp to 0.
pub fn schedule_factor(step: u64, total: u64, warmup_frac: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warmup = warmup_frac * total as f64;
    let s = step as f64;
    if s < warmup {
        s / warmup
    } else {
        ((total as f64 - s) / (total as f64 - warmup)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_encoder: 2e-5,
            lr_other: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.06,
            total_steps: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: per-parameter moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Schedule multiplier that the next `step` call will use.
    pub fn current_factor(&self) -> f64 {
        schedule_factor(self.step, self.config.total_steps, self.config.warmup_frac)
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        let c = &self.config;
        let factor = self.current_factor();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let lr = factor
                * match p.group {
                    ParamGroup::Encoder => c.lr_encoder,
                    ParamGroup::Other => c.lr_other,
                };
            let n = p.value.numel();
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = p.value.data_mut();
            for i in 0..n {
                let g = p.grad[i];
                data[i] -= lr * c.weight_decay * data[i];
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn warmup_peak_at_six_percent() {
        assert_eq!(schedule_factor(6, 100, 0.06), 1.0);
        assert_eq!(schedule_factor(0, 100, 0.06), 0.0);
        assert!((schedule_factor(3, 100, 0.06) - 0.5).abs() < 1e-15);
        assert!((schedule_factor(53, 100, 0.06) - 0.5).abs() < 1e-15);
        assert_eq!(schedule_factor(100, 100, 0.06), 0.0);
        assert_eq!(schedule_factor(250, 100, 0.06), 0.0);
    }

    #[test]
    fn step_zero_does_not_move() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0]), ParamGroup::Other);
        store.get_mut("w").unwrap().grad = vec![0.3, 0.4];
        let mut opt = AdamW::new(AdamWConfig {
            total_steps: 10,
            ..Default::default()
        });
        opt.step(&mut store);
        assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    /// Scalar re-derivation of the update, written independently of the
    /// vectorized loop above.
    fn scalar_adamw(p0: f64, g: f64, steps: u64, cfg: &AdamWConfig) -> Vec<f64> {
        let (mut p, mut m, mut v) = (p0, 0.0f64, 0.0f64);
        let mut traj = Vec::new();
        for s in 0..steps {
            let warm = cfg.warmup_frac * cfg.total_steps as f64;
            let sf = s as f64;
            let total = cfg.total_steps as f64;
            let f = if s >= cfg.total_steps {
                0.0
            } else if sf < warm {
                sf / warm
            } else {
                ((total - sf) / (total - warm)).max(0.0)
            };
            let lr = cfg.lr_other * f;
            p *= 1.0 - lr * cfg.weight_decay;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let k = (s + 1) as f64;
            let mh = m / (1.0 - cfg.beta1.powf(k));
            let vh = v / (1.0 - cfg.beta2.powf(k));
            p -= lr * mh / (vh.sqrt() + cfg.eps);
            traj.push(p);
        }
        traj
    }

    #[test]
    fn trajectory_matches_scalar_reference() {
        let cfg = AdamWConfig {
            lr_other: 0.05,
            weight_decay: 0.1,
            total_steps: 100,
            ..Default::default()
        };
        let expected = scalar_adamw(0.7, 0.25, 100, &cfg);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.7]), ParamGroup::Other);
        let mut opt = AdamW::new(cfg);
        for want in expected {
            store.get_mut("w").unwrap().grad = vec![0.25];
            opt.step(&mut store);
            let got = store.value("w").unwrap().data()[0];
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn groups_use_their_own_rate() {
        let mut store = ParamStore::new();
        store.insert("enc", Tensor::vector(vec![0.0]), ParamGroup::Encoder);
        store.insert("head", Tensor::vector(vec![0.0]), ParamGroup::Other);
        let mut opt = AdamW::new(AdamWConfig {
            lr_encoder: 1e-3,
            lr_other: 1e-2,
            weight_decay: 0.0,
            warmup_frac: 0.0,
            total_steps: 1000,
            ..Default::default()
        });
        for (_, p) in store.iter_mut() {
            p.grad = vec![1.0];
        }
        opt.step(&mut store);
        // First Adam step moves by ~lr regardless of gradient scale.
        assert!((store.value("enc").unwrap().data()[0] + 1e-3).abs() < 1e-9);
        assert!((store.value("head").unwrap().data()[0] + 1e-2).abs() < 1e-9);
    }
}
