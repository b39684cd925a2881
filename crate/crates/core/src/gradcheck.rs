//! Central finite differences, used as the independent oracle for analytic
//! gradients. Only forward evaluations of `f` are used here.

use crate::autodiff::Tensor;

/// Central-difference gradient of `f` at `inputs`, one tensor per input.
pub fn central_difference<F>(f: F, inputs: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error among entries whose absolute error exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Compares entrywise; an entry within `abs_floor` in absolute terms counts as exact.
pub fn compare(analytic: &[Tensor], numeric: &[Tensor], abs_floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient list lengths differ");
    let mut check = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, entries: 0 };
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shapes differ");
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let abs = (x - y).abs();
            check.entries += 1;
            check.max_abs_err = check.max_abs_err.max(abs);
            if abs > abs_floor {
                check.max_rel_err = check.max_rel_err.max(abs / x.abs().max(y.abs()));
            }
        }
    }
    check
}
