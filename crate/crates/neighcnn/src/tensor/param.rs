use super::{Scalar, Tensor};

/// A named learnable value. Non-trainable parameters (frozen extractor
/// weights, running statistics) are carried through checkpoints but never
/// receive optimizer updates.
#[derive(Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::from_shape_vec(value.shape().clone(), vec![T::zero(); value.numel()]);
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::from_shape_vec(
            self.value.shape().clone(),
            vec![T::zero(); self.value.numel()],
        );
    }

    /// Store a gradient; `accumulate` adds onto the existing slot instead of
    /// replacing it.
    pub fn write_grad(&mut self, grad: Tensor<T>, accumulate: bool) {
        debug_assert_eq!(grad.shape(), self.value.shape());
        if accumulate {
            let sum: Vec<T> = self
                .grad
                .data()
                .iter()
                .zip(grad.data().iter())
                .map(|(&a, &b)| a + b)
                .collect();
            self.grad = Tensor::from_shape_vec(self.value.shape().clone(), sum);
        } else {
            self.grad = grad;
        }
    }
}
