use std::collections::HashMap;

use rand::Rng;

use super::{NnError, Result, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
    /// Set when a backward pass deposited a gradient since the last reset.
    pub has_grad: bool,
}

/// Ordered, named collection of parameters. Order is insertion order and is
/// what checkpoints and the optimizer iterate over.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Param<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        let id = self.entries.len();
        let grad = vec![T::zero(); value.numel()];
        self.entries.push((
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
                has_grad: false,
            },
        ));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    /// He-uniform, suited to layers followed by ReLU.
    pub fn insert_he<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<usize> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<usize> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![T::lit(value); n])?, trainable)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.entries[self.id(name)?].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id].1)
    }

    pub fn by_id(&self, id: usize) -> &Param<T> {
        &self.entries[id].1
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
            p.has_grad = false;
        }
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for (name, p) in &self.entries {
            out.insert(name, p.value.cast(), p.trainable).expect("names are unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insertion_order_and_lookup() {
        let mut ps = ParameterSet::<f32>::new();
        ps.insert_const("b", &[2], 1.0, true).unwrap();
        ps.insert_const("a", &[3], 0.0, false).unwrap();
        let names: Vec<_> = ps.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(ps.id("a").unwrap(), 1);
        assert!(matches!(ps.insert_const("a", &[1], 0.0, true), Err(NnError::DuplicateParameter(_))));
        assert!(matches!(ps.get("zz"), Err(NnError::UnknownParameter(_))));
        assert_eq!(ps.num_values(), 5);
    }

    #[test]
    fn uniform_init_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::<f64>::new();
        ps.insert_uniform("w", &[16, 25], 25, &mut rng).unwrap();
        assert!(ps.get("w").unwrap().value.data().iter().all(|v| v.abs() <= 0.2));
    }
}
