//! Dense row-major `f64` tensors with an optional gradient buffer.

use crate::error::TensorError;

/// A dense n-dimensional array of 64-bit floats.
///
/// The element count always equals the product of the extents, every extent
/// is positive, and all values are finite. A 0-dimensional tensor (empty
/// shape) holds a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::domain(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                shapes: format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor whose values are already known to satisfy the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![values.len()], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                shapes: format!("{} values for shape {:?}", grad.len(), self.shape),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Returns the single value of a 0-dimensional or one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(TensorError::shapes("reshape", &[&self.shape, &shape]));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    /// Applies `f` to every element in place, rejecting non-finite results.
    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) -> Result<(), TensorError> {
        for v in &mut self.data {
            *v = f(*v);
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "map_inplace" });
        }
        Ok(())
    }

    /// Clamps every value into `[lo, hi]`.
    pub fn clamp(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Copies rows `[start, start + len)` along the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let lead = *self.shape.first().ok_or_else(|| TensorError::NotScalar(vec![]))?;
        if len == 0 || start + len > lead {
            return Err(TensorError::domain(
                "rows",
                format!("range {start}..{} out of bounds for leading extent {lead}", start + len),
            ));
        }
        let row = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * row..(start + len) * row].to_vec(),
        ))
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let lead = *self.shape.first().ok_or_else(|| TensorError::NotScalar(vec![]))?;
        if indices.is_empty() {
            return Err(TensorError::domain("gather_rows", "no rows requested"));
        }
        let row = self.data.len() / lead;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= lead {
                return Err(TensorError::domain(
                    "gather_rows",
                    format!("row {i} out of bounds for leading extent {lead}"),
                ));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Stacks tensors of identical trailing shape along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::domain("concat_rows", "no tensors given"))?;
        if first.ndim() == 0 {
            return Err(TensorError::NotScalar(vec![]));
        }
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.ndim() == 0 || &p.shape[1..] != tail {
                return Err(TensorError::shapes("concat_rows", &[&first.shape, &p.shape]));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Plain stochastic gradient step: `param <- param - lr * grad`, then clears grads.
///
/// Every parameter must carry a populated gradient; the first one that does
/// not is reported by its position and shape.
pub fn sgd_update(params: &mut [&mut Tensor], lr: f64) -> Result<(), TensorError> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(TensorError::domain("sgd_update", format!("learning rate {lr} is invalid")));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.is_none() {
            return Err(TensorError::MissingGrad(format!("#{i} (shape {:?})", p.shape)));
        }
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let updated: Vec<f64> = p
            .data
            .iter()
            .zip(&grad)
            .map(|(w, g)| w - lr * g)
            .collect();
        if updated.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "sgd_update" });
        }
        p.data = updated;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        assert_eq!(Tensor::scalar(2.5).unwrap().item().unwrap(), 2.5);
    }

    #[test]
    fn sgd_step_matches_hand_arithmetic() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        p.set_grad(vec![2.0]).unwrap();
        sgd_update(&mut [&mut p], 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn sgd_zero_lr_or_zero_grad_is_identity() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        p.set_grad(vec![3.0, 4.0]).unwrap();
        sgd_update(&mut [&mut p], 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        p.set_grad(vec![0.0, 0.0]).unwrap();
        sgd_update(&mut [&mut p], 0.7).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_names_parameter_without_grad() {
        let mut a = Tensor::vector(vec![1.0]).unwrap();
        let mut b = Tensor::zeros(&[2, 3]);
        a.set_grad(vec![1.0]).unwrap();
        let err = sgd_update(&mut [&mut a, &mut b], 0.1).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad("#1 (shape [2, 3])".into()));
        // nothing was applied
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn row_helpers() {
        let t = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.rows(1, 2).unwrap().data(), &[2., 3., 4., 5.]);
        assert_eq!(t.gather_rows(&[2, 0]).unwrap().data(), &[4., 5., 0., 1.]);
        let c = Tensor::concat_rows(&[&t, &t.rows(0, 1).unwrap()]).unwrap();
        assert_eq!(c.shape(), &[4, 2]);
        assert!(t.rows(2, 2).is_err());
    }
}
