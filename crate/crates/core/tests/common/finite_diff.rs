//! Central finite differences, used as an independent oracle for gradients.

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
