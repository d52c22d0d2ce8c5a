//! Small dense-vector helpers. Everything here is plain `f64` slices; the
//! models are small enough that a tensor library would only add noise.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn scale(alpha: f64, x: &mut [f64]) {
    for xi in x.iter_mut() {
        *xi *= alpha;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm2(a) * norm2(b))
}

/// Largest coordinate-wise relative error of `approx` against `reference`.
///
/// Each coordinate is normalised by `max(|reference_i|, floor * ||reference||_inf)`
/// so that coordinates many orders of magnitude below the vector's scale are
/// compared absolutely rather than relatively.
pub fn max_rel_err(approx: &[f64], reference: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(approx.len(), reference.len());
    let scale = floor * norm_inf(reference);
    approx
        .iter()
        .zip(reference)
        .map(|(a, r)| {
            let denom = r.abs().max(scale);
            if denom == 0.0 {
                (a - r).abs()
            } else {
                (a - r).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}

/// Kahan-Babuska (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor_for_tiny_coordinates() {
        let r = [1.0, 1e-12];
        let a = [1.0, 2e-12];
        assert!(max_rel_err(&a, &r, 0.0) > 0.9);
        assert!(max_rel_err(&a, &r, 1e-6) < 1e-5);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..10 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 10.0);
    }
}
