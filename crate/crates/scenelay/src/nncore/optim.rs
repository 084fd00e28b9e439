//! RMSprop with per-tensor accumulators keyed by parameter name.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// θ ← θ − η g / (√acc + ε) with acc ← ρ acc + (1−ρ) g².
///
/// Accumulator state lives here, keyed by tensor name, so the caller can hand
/// in fresh borrows every step. `clip` rescales the whole gradient to that
/// global L2 norm before anything else.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    acc: HashMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            rho: 0.9,
            eps: 1e-8,
            clip: None,
            acc: HashMap::new(),
        }
    }

    /// Apply one update. `params` and `grads` must pair up by name and shape;
    /// a non-finite gradient aborts the run rather than poisoning weights.
    pub fn step(&mut self, params: &mut [(String, &mut [f64])], grads: &[(String, &[f64])]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "param/grad tensor count mismatch");

        for ((pname, p), (gname, g)) in params.iter().zip(grads) {
            assert_eq!(pname, gname, "param/grad name mismatch");
            assert_eq!(p.len(), g.len(), "param/grad length mismatch for {pname}");
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                let _ = bad;
                return Err(Error::NonFiniteGradient {
                    name: gname.clone(),
                });
            }
        }

        let mut scale = 1.0;
        if let Some(clip) = self.clip {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }

        for ((name, p), (_, g)) in params.iter_mut().zip(grads) {
            let acc = self
                .acc
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            assert_eq!(acc.len(), g.len(), "accumulator shape changed for {name}");
            for k in 0..g.len() {
                let gk = g[k] * scale;
                acc[k] = self.rho * acc[k] + (1.0 - self.rho) * gk * gk;
                p[k] -= self.lr * gk / (acc[k].sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
