//! Central finite differences, used as an independent oracle for gradients.
#![allow(dead_code)]

use rn_autodiff::Tensor;

/// Central-difference estimate of `d f / d point[i]` for each index in
/// `indices` (all indices when `None`).
pub fn central_gradient<F>(f: F, point: &Tensor, step: f64, indices: Option<&[usize]>) -> Vec<f64>
where
    F: Fn(&Tensor) -> f64,
{
    let all: Vec<usize>;
    let indices = match indices {
        Some(i) => i,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut probe = point.clone();
    indices
        .iter()
        .map(|&i| {
            let original = probe.data()[i];
            probe.data_mut()[i] = original + step;
            let up = f(&probe);
            probe.data_mut()[i] = original - step;
            let down = f(&probe);
            probe.data_mut()[i] = original;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Central-difference directional derivative `d/dt f(point + t * direction)` at 0.
pub fn directional_derivative<F>(f: F, point: &Tensor, direction: &Tensor, step: f64) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    let up = point.zip_map(direction, |p, d| p + step * d);
    let down = point.zip_map(direction, |p, d| p - step * d);
    (f(&up) - f(&down)) / (2.0 * step)
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let p = Tensor::new(&[2], vec![3.0, -1.0]).unwrap();
        let g = central_gradient(|t| t.data()[0].powi(2) + 3.0 * t.data()[1], &p, 1e-4, None);
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0], 1e-12), 0.0);
        let e1 = relative_error(&[1.0], &[1.1], 1e-12);
        let e2 = relative_error(&[100.0], &[110.0], 1e-12);
        assert!((e1 - e2).abs() < 1e-12);
    }
}
