use serde::{Deserialize, Serialize};

use super::NORM_EPS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flattened, ordered parameters and running statistics of one network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightVector {
    pub entries: Vec<NamedTensor>,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_compatible(&self, other: &WeightVector) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} tensors vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name
                || a.shape != b.shape
                || b.data.len() != b.shape.iter().product::<usize>()
            {
                return Err(Error::ArchitectureMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Concatenation of every entry, widened to f64.
    pub fn to_flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter().map(|&v| f64::from(v)))
            .collect()
    }

    /// Same layout as `self` with values taken from `flat` (rounded to f32).
    /// Running variances are clamped at the normalization epsilon.
    pub fn with_flat(&self, flat: &[f64]) -> Result<WeightVector> {
        if flat.len() != self.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "flat vector of {} values for a {}-value layout",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let n = e.data.len();
                let clamp = e.name.ends_with("running_var");
                let data = flat[offset..offset + n]
                    .iter()
                    .map(|&v| {
                        let v = v as f32;
                        if clamp {
                            v.max(NORM_EPS)
                        } else {
                            v
                        }
                    })
                    .collect();
                offset += n;
                NamedTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data,
                }
            })
            .collect();
        Ok(WeightVector { entries })
    }
}

/// `λ·teacher + (1 − λ)·random`, elementwise; running variances floor-clamped at ε.
pub fn interpolate_weights(
    teacher: &WeightVector,
    random: &WeightVector,
    lambda: f32,
) -> Result<WeightVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "λ must lie in [0, 1], got {lambda}"
        )));
    }
    teacher.check_compatible(random)?;
    let entries = teacher
        .entries
        .iter()
        .zip(&random.entries)
        .map(|(t, r)| {
            let clamp = t.name.ends_with("running_var");
            let data = t
                .data
                .iter()
                .zip(&r.data)
                .map(|(&a, &b)| {
                    // Exact at the endpoints.
                    let v = if lambda == 1.0 {
                        a
                    } else if lambda == 0.0 {
                        b
                    } else {
                        lambda * a + (1.0 - lambda) * b
                    };
                    if clamp {
                        v.max(NORM_EPS)
                    } else {
                        v
                    }
                })
                .collect();
            NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data,
            }
        })
        .collect();
    Ok(WeightVector { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Network;

    #[test]
    fn endpoints_are_exact() {
        let t = Network::from_preset("mlp-8-ln@1x3x3", 1).unwrap().weights();
        let r = Network::from_preset("mlp-8-ln@1x3x3", 2).unwrap().weights();
        assert_eq!(interpolate_weights(&t, &r, 1.0).unwrap(), t);
        assert_eq!(interpolate_weights(&t, &r, 0.0).unwrap(), r);
    }

    #[test]
    fn midpoint_entries() {
        let t = Network::from_preset("mlp-8@1x3x3", 1).unwrap().weights();
        let r = Network::from_preset("mlp-8@1x3x3", 2).unwrap().weights();
        let m = interpolate_weights(&t, &r, 0.5).unwrap();
        for (e, k) in [(0usize, 0usize), (0, 17), (2, 5)] {
            let want = 0.5 * t.entries[e].data[k] + 0.5 * r.entries[e].data[k];
            assert!((m.entries[e].data[k] - want).abs() < 1e-7);
        }
    }

    #[test]
    fn mismatched_architectures_are_rejected() {
        let t = Network::from_preset("mlp-8@1x3x3", 1).unwrap().weights();
        let r = Network::from_preset("mlp-9@1x3x3", 1).unwrap().weights();
        assert!(matches!(
            interpolate_weights(&t, &r, 0.3),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn running_var_is_clamped() {
        let mut t = Network::from_preset("mlp-4-bn@1x2x2", 1).unwrap();
        let mut r = t.clone();
        t.set_running_stats(0.0, 0.0);
        r.set_running_stats(0.0, 0.0);
        let m = interpolate_weights(&t.weights(), &r.weights(), 0.5).unwrap();
        let var = m
            .entries
            .iter()
            .find(|e| e.name.ends_with("running_var"))
            .unwrap();
        assert!(var.data.iter().all(|&v| v >= NORM_EPS));
    }

    #[test]
    fn flat_round_trip() {
        let w = Network::from_preset("lenet5-bn", 3).unwrap().weights();
        assert_eq!(w.with_flat(&w.to_flat()).unwrap(), w);
    }
}
