use crate::real::Real;

/// A flat view over every trainable tensor of a model, in declaration order.
pub trait ParamSet<F: Real> {
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// L2 norm over all tensors, accumulated in f64.
    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Parameter at a flat index across all tensors.
    fn get_flat(&self, mut idx: usize) -> F {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    fn set_flat(&mut self, mut idx: usize, value: F) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }
}

impl<F: Real> ParamSet<F> for Vec<F> {
    fn tensors(&self) -> Vec<&[F]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![self.as_mut_slice()]
    }
}
