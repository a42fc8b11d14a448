//! Adam optimizer over the canonical parameter traversal.

use crate::diff::Matrix;
use crate::model::DragParams;

/// First/second-moment state is kept per tensor, indexed by the canonical
/// traversal order, so the same `DragParams` instance must be stepped with
/// gradients collected in that order every time.
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: u64,
    mean: Vec<Matrix>,
    variance: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            mean: Vec::new(),
            variance: Vec::new(),
        }
    }

    /// One update from gradients in canonical order. Moment buffers are
    /// allocated on the first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut DragParams, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.num_tensors(), "gradient list does not match the parameter traversal");
        if self.mean.is_empty() {
            self.mean = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.variance = self.mean.clone();
        }
        self.steps += 1;
        let bias1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - self.beta2.powi(self.steps as i32);
        let mut index = 0;
        params.visit_mut(&mut |name, value| {
            let g = &grads[index];
            assert_eq!(g.shape(), value.shape(), "gradient shape mismatch at {name}");
            let m = &mut self.mean[index];
            let v = &mut self.variance[index];
            for (((x, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            index += 1;
        });
    }
}
