//! Decoupled-weight-decay adaptive optimizer with linear warmup.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate: 0 at step 0, linear ramp to the peak over `warmup_steps`,
/// constant afterwards. `warmup_steps = 0` means the peak from the start.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak_lr: f32,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// Warmup as a fraction of the total step budget, at least one step.
    pub fn from_ratio(peak_lr: f32, warmup_ratio: f32, total_steps: usize) -> LrSchedule {
        let warmup_steps = ((warmup_ratio * total_steps as f32).round() as usize).max(1);
        LrSchedule {
            peak_lr,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f32 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.peak_lr
        } else {
            self.peak_lr * step as f32 / self.warmup_steps as f32
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// AdamW over an ordered parameter list. Gradient clipping at a global norm
/// runs before the update; frozen tensors never enter (the caller passes only
/// trainables, and the tensors themselves refuse gradient accumulation).
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    state: Vec<Moments>,
}

impl AdamW {
    pub fn new(param_count: usize, beta1: f32, beta2: f32, weight_decay: f32) -> AdamW {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(1.0),
            state: (0..param_count)
                .map(|_| Moments {
                    m: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
        }
    }

    /// One update at the given step index (0-based; bias correction uses
    /// `step_index + 1`). Gradients are consumed and cleared. Parameters with
    /// no accumulated gradient this step see a zero gradient.
    pub fn step(
        &mut self,
        params: &[(String, Tensor)],
        step_index: usize,
        lr: f32,
    ) -> Result<()> {
        if params.len() != self.state.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, got {}",
                self.state.len(),
                params.len()
            )));
        }
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|(name, t)| {
                let g = t.grad().unwrap_or_else(|| vec![0.0; t.len()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter {name}"
                    )));
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut scale = 1.0f32;
        if let Some(clip) = self.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip as f64 {
                scale = (clip as f64 / norm) as f32;
            }
        }

        let t = (step_index + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((_, p), (g, st)) in params.iter().zip(grads.iter().zip(&mut self.state)) {
            if st.m.is_empty() {
                st.m = vec![0.0; p.len()];
                st.v = vec![0.0; p.len()];
            }
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let gi = g[i] * scale;
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            p.apply_update(&data)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_starts_at_zero_ramps_linearly_and_holds() {
        let s = LrSchedule::from_ratio(1e-4, 0.01, 1000);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 5e-5).abs() < 1e-9);
        assert_eq!(s.lr(10), 1e-4);
        assert_eq!(s.lr(500), 1e-4);
        // Continuity across the warmup boundary.
        assert!((s.lr(9) - 9e-5).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_parameters_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(1, 0.9, 0.95, 0.0);
        let params = vec![("p".to_string(), p.clone())];
        for step in 0..5 {
            opt.step(&params, step, 1e-2).unwrap();
        }
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn quadratic_objective_decreases_strictly_for_fifty_steps() {
        // f(x) = x² from x₀ = 1 with a constant learning rate.
        let x = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(1, 0.9, 0.95, 0.0);
        let params = vec![("x".to_string(), x.clone())];
        let mut prev = 1.0f32;
        for step in 0..50 {
            let loss = x.mul_elem(&x).unwrap().sum_all();
            loss.backward().unwrap();
            opt.step(&params, step, 0.01).unwrap();
            let now = x.item().abs();
            assert!(now < prev, "step {step}: |x| {now} did not decrease from {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        // Drive a NaN into the gradient through a degenerate loss.
        let loss = p.scale(f32::INFINITY).sum_all();
        let _ = loss.backward();
        let mut opt = AdamW::new(1, 0.9, 0.95, 0.1);
        let err = opt
            .step(&[("spiky".to_string(), p.clone())], 0, 1e-4)
            .unwrap_err();
        assert!(err.to_string().contains("spiky"), "{err}");
    }

    #[test]
    fn paper_quoted_hyperparameters_are_the_stage_defaults() {
        let cfg = crate::training::StageConfig::defaults(crate::training::StageId::I);
        assert_eq!(cfg.peak_lr, 1e-4);
        assert_eq!(cfg.weight_decay, 0.1);
        assert_eq!(cfg.warmup_ratio, 0.01);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.95);
    }
}
