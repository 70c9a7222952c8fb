//! Adam with per-group moment buffers and gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::nets::{GroupKind, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub kind: GroupKind,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub groups: Vec<AdamState>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        let groups = store
            .groups
            .iter()
            .map(|g| AdamState {
                kind: g.kind,
                step: 0,
                m: g.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
                v: g.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            })
            .collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, groups }
    }

    pub fn drop_group(&mut self, kind: GroupKind) {
        self.groups.retain(|g| g.kind != kind);
    }

    /// One update of `kind` with gradients `grads` (one slice per parameter).
    /// Returns the gradient norm before clipping.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        kind: GroupKind,
        grads: &[Vec<f64>],
        lr: f64,
        max_norm: f64,
    ) -> Result<f64> {
        let group = store.group_mut(kind).ok_or_else(|| Error::Config(format!("no parameter group {kind}")))?;
        let st = self
            .groups
            .iter_mut()
            .find(|g| g.kind == kind)
            .ok_or_else(|| Error::Config(format!("no optimizer state for {kind}")))?;
        if grads.len() != group.params.len() {
            return Err(Error::Shape(format!(
                "{kind}: {} gradients for {} parameters",
                grads.len(),
                group.params.len()
            )));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("{kind}: gradient norm {norm}")));
        }
        let scale = if max_norm > 0.0 && norm > max_norm { max_norm / norm } else { 1.0 };
        st.step += 1;
        let bc1 = 1.0 - self.beta1.powi(st.step as i32);
        let bc2 = 1.0 - self.beta2.powi(st.step as i32);
        for (i, p) in group.params.iter_mut().enumerate() {
            let (m, v) = (&mut st.m[i], &mut st.v[i]);
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grads[i][j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let upd = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w = T::of(w.to_f64() - upd);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ParamBuilder;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let r = ParamBuilder::new(&mut store, 0).filled(GroupKind::Critic, "w", 1, 2, 1.0);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, GroupKind::Critic, &[vec![0.5, -2.0]], 0.1, 0.0).unwrap();
        let d = &store.get(r).data;
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut store = ParamStore::<f64>::new();
        ParamBuilder::new(&mut store, 0).filled(GroupKind::Actor, "w", 1, 2, 0.0);
        let mut adam = Adam::new(&store);
        let n = adam.step(&mut store, GroupKind::Actor, &[vec![3.0, 4.0]], 1e-3, 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert!(adam.step(&mut store, GroupKind::Actor, &[vec![f64::NAN, 0.0]], 1e-3, 1.0).is_err());
    }
}
