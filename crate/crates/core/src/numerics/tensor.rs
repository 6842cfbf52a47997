use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::usage(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Column count of a matrix (last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Row slice of a matrix.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Named tensors making up a model's parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::usage(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    fn check_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::usage("parameter sets have different layouts"))
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParameterSet, alpha: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= alpha;
            }
        }
    }

    pub fn dot(&self, other: &ParameterSet) -> Result<f64> {
        self.check_layout(other)?;
        let mut acc = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).unwrap_or(0.0).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Scalar at flat position `k` across all tensors, in insertion order.
    pub fn flat_get(&self, mut k: usize) -> f64 {
        for t in &self.tensors {
            if k < t.len() {
                return t.data[k];
            }
            k -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut k: usize, value: f64) {
        for t in &mut self.tensors {
            if k < t.len() {
                t.data[k] = value;
                return;
            }
            k -= t.len();
        }
        panic!("flat index out of range");
    }

    /// All scalars concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn names_unique_and_flat_indexing() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        p.insert("b", Tensor::zeros(&[3])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.num_scalars(), 5);
        p.flat_set(3, 7.0);
        assert_eq!(p.get("b").unwrap().data(), &[0.0, 7.0, 0.0]);
        assert_eq!(p.flat_get(3), 7.0);
    }

    #[test]
    fn add_scaled_requires_layout() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        let mut q = ParameterSet::new();
        q.insert("a", Tensor::zeros(&[3])).unwrap();
        assert!(p.add_scaled(&q, 1.0).is_err());
    }
}
