use alloc::string::String;
use alloc::vec::Vec;

use crate::linalg::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), shapes: Vec::new(), values: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: String, shape: &[usize], values: Vec<T>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(|v| alloc::vec![T::zero(); v.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = T::zero()));
    }

    /// `self += other * scale`, elementwise. Layouts must match.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        assert_eq!(self.shapes, other.shapes, "parameter layouts differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y * scale;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|x| x.is_finite())
    }

    /// Replaces the values of `id`; the length must match its shape.
    pub fn set(&mut self, id: ParamId, values: Vec<T>) -> crate::Result<()> {
        if values.len() != self.values[id.0].len() {
            return Err(crate::Error::Shape(alloc::format!(
                "{}: expected {} values, got {}",
                self.names[id.0],
                self.values[id.0].len(),
                values.len()
            )));
        }
        self.values[id.0] = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan())).collect())
                .collect(),
        }
    }
}
