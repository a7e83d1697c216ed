use serde::{Deserialize, Serialize};

/// Empirical CDF over a sorted sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    /// NaNs are dropped.
    pub fn new(mut samples: Vec<f64>) -> Self {
        samples.retain(|x| !x.is_nan());
        samples.sort_by(f64::total_cmp);
        Self { sorted: samples }
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }

    /// Inverse-CDF lookup for `u` in `[0, 1)`; always returns a stored sample.
    pub fn quantile(&self, u: f64) -> Option<f64> {
        let n = self.sorted.len();
        if n == 0 {
            return None;
        }
        let idx = ((u * n as f64).floor() as usize).min(n - 1);
        Some(self.sorted[idx])
    }

    /// `(x, F(x))` at every distinct sample value.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, x) in self.sorted.iter().enumerate() {
            let f = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == *x => last.1 = f,
                _ => out.push((*x, f)),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_merge_duplicates() {
        let c = EmpiricalCdf::new(vec![3.0, 1.0, 1.0]);
        let steps = c.steps();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].0, 1.0);
        assert!((steps[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(steps[1], (3.0, 1.0));
        assert_eq!(c.eval(0.5), 0.0);
        assert!((c.eval(2.0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_returns_members() {
        let c = EmpiricalCdf::new(vec![5.0, 2.0, 9.0]);
        for k in 0..100 {
            let q = c.quantile(k as f64 / 100.0).unwrap();
            assert!(c.samples().contains(&q));
        }
        assert_eq!(c.quantile(0.999_999), Some(9.0));
        assert_eq!(EmpiricalCdf::new(vec![]).quantile(0.3), None);
    }
}
