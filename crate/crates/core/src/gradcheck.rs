//! Central finite-difference checks for analytic gradients.

use crate::nn::ParamTree;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub diff_norm: f64,
}

impl TensorCheck {
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both are
    /// negligible.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic_norm.max(self.numeric_norm);
        if scale < 1e-8 {
            self.diff_norm
        } else {
            self.diff_norm / scale
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.relative_error() < tol
    }
}

/// Numeric derivative of `loss` with respect to every element of `x`.
pub fn numeric_slice(x: &[f64], step: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = loss(&probe);
            probe[i] = x[i] - step;
            let down = loss(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    TensorCheck {
        name: name.to_string(),
        analytic_norm: norm(analytic),
        numeric_norm: norm(numeric),
        diff_norm: diff,
    }
}

/// Checks every tensor of `analytic` against central differences of `loss`
/// evaluated at perturbed copies of `params`.
pub fn check_tree<T: ParamTree + Clone>(
    params: &T,
    analytic: &T,
    step: f64,
    mut loss: impl FnMut(&T) -> f64,
) -> Vec<TensorCheck> {
    let mut probe = params.clone();
    let grads = analytic.named_tensors();
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (ti, &len) in sizes.iter().enumerate() {
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = params.named_tensors()[ti].1.data()[i];
            set(&mut probe, ti, i, orig + step);
            let up = loss(&probe);
            set(&mut probe, ti, i, orig - step);
            let down = loss(&probe);
            set(&mut probe, ti, i, orig);
            numeric.push((up - down) / (2.0 * step));
        }
        out.push(compare(&grads[ti].0, grads[ti].1.data(), &numeric));
    }
    out
}

fn set<T: ParamTree>(tree: &mut T, tensor: usize, index: usize, value: f64) {
    let mut list = tree.named_tensors_mut();
    list[tensor].1.data_mut()[index] = value;
}
