//! Named model parameters.
//!
//! All trainable state lives in one flat, name-keyed store. Operations
//! declare the parameters they need as [`ParamSpec`]s; `ensure_init` fills
//! in any that are missing, so loading a checkpoint first and initializing
//! the rest works naturally. Optimizer slot variables (Adam moments) live
//! in a separate namespace within the same store.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// How a parameter is filled in when it is not already present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// Uniform on `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
}

/// Declaration of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: String, dtype: DType, shape: &[usize], init: Init) -> ParamSpec {
        ParamSpec { name, dtype, shape: shape.to_vec(), init }
    }
}

/// Flat name-to-tensor map holding parameters and optimizer slots.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    slots: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.params.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Creates the parameter if absent. Existing tensors are left alone
    /// after a shape check, so checkpoints loaded beforehand win.
    pub fn ensure_init<R: Rng + ?Sized>(&mut self, spec: &ParamSpec, rng: &mut R) -> Result<()> {
        if let Some(existing) = self.params.get(&spec.name) {
            if existing.shape() != spec.shape.as_slice() || existing.dtype() != spec.dtype {
                return Err(Error::Config(format!(
                    "parameter {:?} exists with dtype {} shape {:?}, but the operation wants dtype {} shape {:?}",
                    spec.name,
                    existing.dtype(),
                    existing.shape(),
                    spec.dtype,
                    spec.shape
                )));
            }
            return Ok(());
        }
        let t = match spec.init {
            Init::Zero => Tensor::zeros(spec.dtype, &spec.shape),
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = spec.shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::from_f64_values(spec.dtype, &spec.shape, &data)?
            }
        };
        self.params.insert(spec.name.clone(), t);
        Ok(())
    }

    /// Removes and returns an optimizer slot tensor, zeros shaped like
    /// `like` on first access. Pair with [`ParameterStore::put_slot`].
    pub fn take_slot(&mut self, kind: &str, name: &str, like: &Tensor) -> Tensor {
        self.slots
            .remove(&format!("{kind}/{name}"))
            .unwrap_or_else(|| Tensor::zeros(like.dtype(), like.shape()))
    }

    /// Stores an optimizer slot tensor back.
    pub fn put_slot(&mut self, kind: &str, name: &str, slot: Tensor) {
        self.slots.insert(format!("{kind}/{name}"), slot);
    }

    /// Drops all optimizer slots (used when restarting training).
    pub fn clear_slots(&mut self) {
        self.slots.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_rng;

    #[test]
    fn ensure_init_respects_existing_tensors() {
        let mut store = ParameterStore::new();
        store.insert("fc/b", Tensor::from_f32(&[3], vec![1., 2., 3.]).unwrap());
        let spec = ParamSpec::new("fc/b".into(), DType::Float32, &[3], Init::Zero);
        let mut rng = seeded_rng(0);
        store.ensure_init(&spec, &mut rng).unwrap();
        assert_eq!(store.get("fc/b").unwrap().as_f32().unwrap(), &[1., 2., 3.]);

        let clash = ParamSpec::new("fc/b".into(), DType::Float32, &[4], Init::Zero);
        assert!(store.ensure_init(&clash, &mut rng).is_err());
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let spec =
            ParamSpec::new("w".into(), DType::Float32, &[20, 30], Init::Glorot { fan_in: 20, fan_out: 30 });
        let limit = (6.0_f64 / 50.0).sqrt();
        let mut a = ParameterStore::new();
        a.ensure_init(&spec, &mut seeded_rng(9)).unwrap();
        let mut b = ParameterStore::new();
        b.ensure_init(&spec, &mut seeded_rng(9)).unwrap();
        let av = a.get("w").unwrap().as_f32().unwrap();
        assert_eq!(av, b.get("w").unwrap().as_f32().unwrap());
        assert!(av.iter().all(|v| v.abs() as f64 <= limit));
        assert!(av.iter().any(|v| v.abs() as f64 > limit * 0.5));
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let store = ParameterStore::new();
        let err = store.get("nope").unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }
}
