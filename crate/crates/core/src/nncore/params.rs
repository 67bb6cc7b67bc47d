use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nncore::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One trainable array with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if value.len() != len {
            return Err(Error::Contract(format!(
                "parameter of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(Self {
            shape,
            grad: vec![T::zero(); len],
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            value,
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named trainable arrays, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: ParamEntry<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    /// Adds an entry drawn from `N(0, 2/fan_in)`.
    pub fn insert_he(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let len = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let value = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(std * z)
            })
            .collect();
        self.insert(name, ParamEntry::new(shape, value)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<()> {
        let len = shape.iter().product();
        self.insert(name, ParamEntry::new(shape, vec![T::zero(); len])?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::of(factor);
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g *= f);
        }
    }

    /// One Adam update with bias correction, then zeroes the gradients.
    pub fn adam_step(&mut self, lr: f64) {
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let (one_b1, one_b2) = (T::of(1.0 - ADAM_BETA1), T::of(1.0 - ADAM_BETA2));
        let eps = T::of(ADAM_EPS);
        for e in self.entries.values_mut() {
            e.step += 1;
            let t = e.step as i32;
            let c1 = T::of(1.0 / (1.0 - ADAM_BETA1.powi(t)));
            let c2 = T::of(1.0 / (1.0 - ADAM_BETA2.powi(t)));
            let lr = T::of(lr);
            for i in 0..e.value.len() {
                let g = e.grad[i];
                e.m[i] = b1 * e.m[i] + one_b1 * g;
                e.v[i] = b2 * e.v[i] + one_b2 * g * g;
                let m_hat = e.m[i] * c1;
                let v_hat = e.v[i] * c2;
                e.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                e.grad[i] = T::zero();
            }
        }
    }

    /// Clears Adam moments and step counters, keeping values.
    pub fn reset_moments(&mut self) {
        for e in self.entries.values_mut() {
            e.m.iter_mut().for_each(|x| *x = T::zero());
            e.v.iter_mut().for_each(|x| *x = T::zero());
            e.step = 0;
        }
    }

    /// Copy in another precision. Moments and step counters come along.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            shape: e.shape.clone(),
                            value: conv(&e.value),
                            grad: conv(&e.grad),
                            m: conv(&e.m),
                            v: conv(&e.v),
                            step: e.step,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies values (not moments) from `other` for every shared name.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, src) in other.iter() {
            let dst = self.get_mut(name)?;
            if dst.shape != src.shape {
                return Err(Error::Contract(format!("shape mismatch copying {name}")));
            }
            dst.value.copy_from_slice(&src.value);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes, and values rounded to `f32`.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, e) in self.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update((e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                h.update((*d as u32).to_le_bytes());
            }
            for v in &e.value {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let mut e = ParamEntry::new(vec![1], vec![value]).unwrap();
        e.grad[0] = grad;
        p.insert("w", e).unwrap();
        p
    }

    #[test]
    fn single_adam_step_closed_form() {
        // bias-corrected first step: Δ = -lr·g/(|g| + ε)
        for g in [3.0, -0.25, 1e-3] {
            let mut p = scalar_store(1.0, g);
            p.adam_step(1e-3);
            let want = 1.0 - 1e-3 * g / (g.abs() + ADAM_EPS);
            let got = p.get("w").unwrap().value[0];
            assert!((got - want).abs() < 1e-15, "g={g}: {got} vs {want}");
            assert_eq!(p.get("w").unwrap().grad[0], 0.0);
        }
    }

    #[test]
    fn reset_moments_restarts_bias_correction() {
        let mut p = scalar_store(1.0, 2.0);
        p.adam_step(1e-3);
        p.get_mut("w").unwrap().grad[0] = -0.5;
        p.reset_moments();
        let before = p.get("w").unwrap().value[0];
        p.adam_step(1e-3);
        let e = p.get("w").unwrap();
        assert_eq!(e.step, 1);
        assert!((e.value[0] - (before + 1e-3 * 0.5 / (0.5 + ADAM_EPS))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_value_and_counts_step() {
        let mut p = scalar_store(0.7, 0.0);
        p.adam_step(1e-3);
        p.adam_step(1e-3);
        let e = p.get("w").unwrap();
        assert_eq!(e.value[0], 0.7);
        assert_eq!(e.step, 2);
    }

    #[test]
    fn identical_entries_get_identical_updates() {
        let mut p = ParamStore::<f32>::new();
        for name in ["a", "b"] {
            let mut e = ParamEntry::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
            e.grad = vec![0.5, 0.0, -2.0];
            p.insert(name, e).unwrap();
        }
        for _ in 0..3 {
            for (_, e) in p.iter_mut() {
                e.grad = vec![0.5, 0.0, -2.0];
            }
            p.adam_step(1e-2);
        }
        assert_eq!(p.get("a").unwrap().value, p.get("b").unwrap().value);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::<f32>::new();
        p.insert_zeros("x", vec![2]).unwrap();
        assert!(p.insert_zeros("x", vec![2]).is_err());
    }

    #[test]
    fn he_init_is_seeded_and_scaled() {
        let make = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::<f32>::new();
            p.insert_he("w", vec![100, 100], 50, &mut rng).unwrap();
            p
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1), make(2));
        let p = make(3);
        let w = &p.get("w").unwrap().value;
        let var = w.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "var {var}");
    }

    #[test]
    fn digest_tracks_values() {
        let a = scalar_store(1.0, 0.0);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.get_mut("w").unwrap().value[0] = 1.5;
        assert_ne!(a.digest(), b.digest());
    }
}
