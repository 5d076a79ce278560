use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::info::gram::{matrix_entropy, joint_gram, prepared_gram, GramMatrix, MaskMatrix};
use crate::scalar::Scalar;

/// Representations captured at one timestep.
///
/// `layers[0]` is the input representation `T_0`; `layers[l]` for `l >= 1` is
/// the output of layer `l`. Every batch shares the same sample order as
/// `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepReps<T> {
    pub layers: Vec<Tensor<T>>,
    pub labels: Tensor<T>,
    pub mask: Option<MaskMatrix>,
}

/// MI estimates for one `(timestep, layer)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbEntry {
    pub timestep: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub i_y: f64,
    pub i_prev: f64,
}

/// Grid of per-layer, per-timestep estimates plus the aggregate IB value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IBTrace {
    pub beta: f64,
    pub sigma: f64,
    pub n_layers: usize,
    pub n_timesteps: usize,
    pub entries: Vec<IbEntry>,
    pub ib_value: f64,
}

impl IBTrace {
    /// Mean over timesteps of `sum_l (i_y - beta * i_prev)`.
    pub fn recompute(&self) -> f64 {
        if self.n_timesteps == 0 {
            return 0.0;
        }
        let total: f64 = self.entries.iter().map(|e| e.i_y - self.beta * e.i_prev).sum();
        total / self.n_timesteps as f64
    }

    pub fn entry(&self, timestep: usize, layer: usize) -> Option<&IbEntry> {
        self.entries
            .iter()
            .find(|e| e.timestep == timestep && e.layer == layer)
    }

    /// Per-layer means over timesteps, indexed from layer 1.
    pub fn layer_means(&self) -> Vec<(f64, f64)> {
        let p = self.n_timesteps.max(1) as f64;
        (1..=self.n_layers)
            .map(|l| {
                let (y, prev) = self
                    .entries
                    .iter()
                    .filter(|e| e.layer == l)
                    .fold((0.0, 0.0), |(a, b), e| (a + e.i_y, b + e.i_prev));
                (y / p, prev / p)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("trace serialization: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,layer,i_y,i_prev,ib_contrib\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.timestep,
                e.layer,
                e.i_y,
                e.i_prev,
                e.i_y - self.beta * e.i_prev
            ));
        }
        out
    }
}

struct Prepared<T> {
    raw: GramMatrix<T>,
    entropy: T,
}

fn prepare<T: Scalar>(u: &Tensor<T>, sigma: T, mask: Option<&MaskMatrix>) -> Result<Prepared<T>> {
    let (raw, normalized) = prepared_gram(u, sigma, mask)?;
    Ok(Prepared {
        entropy: matrix_entropy(&normalized)?,
        raw,
    })
}

fn mi<T: Scalar>(a: &Prepared<T>, b: &Prepared<T>) -> Result<T> {
    let joint = joint_gram(&a.raw, &b.raw)?;
    Ok(a.entropy + b.entropy - matrix_entropy(&joint)?)
}

/// Token-level IB value over sampled timesteps.
///
/// Each layer's Gram matrix is built once per timestep and shared between the
/// `I(Y; T_l)`, `I(T_{l-1}; T_l)` and `I(T_l; T_{l+1})` terms.
pub fn token_ib_value<T: Scalar>(reps: &[TimestepReps<T>], beta: T, sigma: T) -> Result<IBTrace> {
    let n_layers = match reps.first() {
        Some(r) if r.layers.len() >= 2 => r.layers.len() - 1,
        Some(_) => return Err(Error::Contract("need T_0 and at least one layer per timestep".into())),
        None => return Err(Error::Contract("no timesteps to estimate over".into())),
    };
    let mut entries = Vec::with_capacity(reps.len() * n_layers);
    for (p, step) in reps.iter().enumerate() {
        if step.layers.len() != n_layers + 1 {
            return Err(Error::Contract(format!(
                "timestep {p} has {} representation batches, expected {}",
                step.layers.len(),
                n_layers + 1
            )));
        }
        let mask = step.mask.as_ref();
        let y = prepare(&step.labels, sigma, mask)?;
        let mut prev = prepare(&step.layers[0], sigma, mask)?;
        for l in 1..=n_layers {
            let cur = prepare(&step.layers[l], sigma, mask)?;
            let i_y = mi(&y, &cur)?.as_f64();
            let i_prev = mi(&prev, &cur)?.as_f64();
            if !i_y.is_finite() || !i_prev.is_finite() {
                return Err(Error::Numeric(format!("non-finite MI at timestep {p}, layer {l}")));
            }
            entries.push(IbEntry {
                timestep: p,
                layer: l,
                i_y,
                i_prev,
            });
            prev = cur;
        }
    }
    let mut trace = IBTrace {
        beta: beta.as_f64(),
        sigma: sigma.as_f64(),
        n_layers,
        n_timesteps: reps.len(),
        entries,
        ib_value: 0.0,
    };
    trace.ib_value = trace.recompute();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::info::gram::mutual_information;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn degenerate_constant_representations() {
        let c = Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let reps = vec![TimestepReps {
            layers: vec![c.clone(), c.clone()],
            labels: c,
            mask: None,
        }];
        let t = token_ib_value(&reps, 1.0, 1.0).unwrap();
        assert_eq!(t.entries.len(), 1);
        assert_relative_eq!(t.ib_value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scripted_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let reps: Vec<_> = (0..2)
            .map(|_| TimestepReps {
                layers: (0..3).map(|_| random(&mut rng, 8, 4)).collect(),
                labels: random(&mut rng, 8, 3),
                mask: None,
            })
            .collect();
        for beta in [0.0, 1.0, 0.3] {
            let t = token_ib_value(&reps, beta, 1.0).unwrap();
            let mut expect = 0.0;
            for r in &reps {
                for l in 1..3 {
                    expect += mutual_information(&r.labels, &r.layers[l], 1.0, None).unwrap()
                        - beta * mutual_information(&r.layers[l - 1], &r.layers[l], 1.0, None).unwrap();
                }
            }
            expect /= 2.0;
            assert_relative_eq!(t.ib_value, expect, epsilon = 1e-12);
            assert_relative_eq!(t.ib_value, t.recompute(), epsilon = 1e-12);
        }
    }

    #[test]
    fn missing_layer_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reps = vec![
            TimestepReps {
                layers: vec![random(&mut rng, 4, 2), random(&mut rng, 4, 2)],
                labels: random(&mut rng, 4, 2),
                mask: None,
            },
            TimestepReps {
                layers: vec![random(&mut rng, 4, 2)],
                labels: random(&mut rng, 4, 2),
                mask: None,
            },
        ];
        assert!(matches!(token_ib_value(&reps, 1.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps = vec![TimestepReps {
            layers: (0..4).map(|_| random(&mut rng, 5, 2)).collect(),
            labels: random(&mut rng, 5, 2),
            mask: None,
        }];
        let t = token_ib_value(&reps, 1.0, 1.0).unwrap();
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("timestep,layer,i_y,i_prev,ib_contrib"));
        let back: IBTrace = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
