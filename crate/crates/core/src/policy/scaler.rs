//! Online min-max observation scaling.
//!
//! The observation distribution is unknown up front, so per-feature ranges
//! are learnt on the fly: each call widens the running min/max with the new
//! vector, then maps it into [0,1]. The scaler state travels with checkpoints
//! so learnt scales carry over to later training and inference.

use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineScaler {
    min: Vec<f64>,
    max: Vec<f64>,
    // running mean/variance kept alongside, reserved for a standardising mode
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
}

impl OnlineScaler {
    pub fn new(dim: usize) -> Self {
        OnlineScaler {
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Fold another scaler's observations into this one (range union).
    pub fn merge(&mut self, other: &OnlineScaler) {
        for i in 0..self.min.len() {
            self.min[i] = self.min[i].min(other.min[i]);
            self.max[i] = self.max[i].max(other.max[i]);
        }
        // mean/m2 merge via Chan's parallel update
        if other.count > 0 {
            let n1 = self.count as f64;
            let n2 = other.count as f64;
            for i in 0..self.mean.len() {
                let d = other.mean[i] - self.mean[i];
                let n = n1 + n2;
                self.mean[i] += d * n2 / n;
                self.m2[i] += other.m2[i] + d * d * n1 * n2 / n;
            }
            self.count += other.count;
        }
    }

    /// Update running statistics with `raw`, then return the min-max scaled
    /// vector. Features with a degenerate range map to 0.5.
    pub fn update_transform(&mut self, raw: &[f64]) -> SimResult<Vec<f64>> {
        if raw.len() != self.min.len() {
            return Err(SimError::Dimension { expected: self.min.len(), got: raw.len() });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Numeric("non-finite observation feature".into()));
        }
        self.count += 1;
        let n = self.count as f64;
        let mut out = Vec::with_capacity(raw.len());
        for (i, &x) in raw.iter().enumerate() {
            self.min[i] = self.min[i].min(x);
            self.max[i] = self.max[i].max(x);
            let d = x - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x - self.mean[i]);
            let range = self.max[i] - self.min[i];
            out.push(if range > 0.0 { (x - self.min[i]) / range } else { 0.5 });
        }
        Ok(out)
    }

    /// Transform without updating statistics (frozen inference).
    pub fn transform(&self, raw: &[f64]) -> SimResult<Vec<f64>> {
        if raw.len() != self.min.len() {
            return Err(SimError::Dimension { expected: self.min.len(), got: raw.len() });
        }
        Ok(raw
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let range = self.max[i] - self.min[i];
                if range > 0.0 {
                    ((x - self.min[i]) / range).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_call_maps_to_half() {
        let mut s = OnlineScaler::new(3);
        let out = s.update_transform(&[5.0, -2.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn midpoint_after_range_established() {
        let mut s = OnlineScaler::new(1);
        s.update_transform(&[0.0]).unwrap();
        s.update_transform(&[10.0]).unwrap();
        let out = s.update_transform(&[5.0]).unwrap();
        assert_eq!(out, vec![0.5]);
    }

    #[test]
    fn outputs_always_in_unit_interval() {
        let mut s = OnlineScaler::new(2);
        let mut x = [1.0, -3.0];
        for i in 0..200 {
            x[0] = (i as f64 * 0.77).sin() * 1e6;
            x[1] = (i as f64).exp().min(1e12);
            let out = s.update_transform(&x).unwrap();
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)), "{out:?}");
        }
    }

    #[test]
    fn dimension_change_rejected() {
        let mut s = OnlineScaler::new(2);
        s.update_transform(&[1.0, 2.0]).unwrap();
        assert!(matches!(
            s.update_transform(&[1.0]),
            Err(SimError::Dimension { .. })
        ));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut s = OnlineScaler::new(1);
        assert!(matches!(
            s.update_transform(&[f64::NAN]),
            Err(SimError::Numeric(_))
        ));
    }

    #[test]
    fn stationary_stream_becomes_fixed_affine_map() {
        let mut s = OnlineScaler::new(1);
        for i in 0..100 {
            s.update_transform(&[(i % 10) as f64]).unwrap();
        }
        // range converged to [0,9]; further in-range points scale affinely
        let a = s.update_transform(&[3.0]).unwrap()[0];
        let b = s.update_transform(&[3.0]).unwrap()[0];
        assert_eq!(a, b);
        assert!((a - 3.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn merge_is_range_union() {
        let mut a = OnlineScaler::new(1);
        let mut b = OnlineScaler::new(1);
        a.update_transform(&[0.0]).unwrap();
        b.update_transform(&[10.0]).unwrap();
        a.merge(&b);
        assert_eq!(a.transform(&[5.0]).unwrap()[0], 0.5);
        assert_eq!(a.count(), 2);
    }
}
