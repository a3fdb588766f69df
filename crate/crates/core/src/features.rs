//! Progress-rate features and the per-modality projection head.
//!
//! A raw encoder vector is L2-normalized, the 2-d sinusoidal progress
//! feature is appended, the result is normalized again and then passed
//! through `linear -> relu -> linear -> l2-normalize`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Normalized position in `[0, 1]` along a video or a manual.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ProgressRate(f64);

impl ProgressRate {
    pub fn new(r: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&r) {
            Ok(Self(r))
        } else {
            Err(Error::InvalidArgument(format!("progress rate {r} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Midpoint of `[t_start, t_end]` as a fraction of the video duration.
pub fn progress_rate_video(t_start: f64, t_end: f64, t_duration: f64) -> Result<ProgressRate> {
    if !(t_duration > 0.0 && 0.0 <= t_start && t_start <= t_end && t_end <= t_duration) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= t_start <= t_end <= duration, got ({t_start}, {t_end}, {t_duration})"
        )));
    }
    ProgressRate::new((t_start + t_end) / (2.0 * t_duration))
}

/// `j / M` for the 1-based diagram index `j` of a manual with `M` entries.
pub fn progress_rate_diagram(j: usize, m: usize) -> Result<ProgressRate> {
    if j == 0 || j > m {
        return Err(Error::InvalidArgument(format!("diagram index {j} outside 1..={m}")));
    }
    ProgressRate::new(j as f64 / m as f64)
}

/// Maps a progress rate onto the upper half circle, `(sin πr, cos πr)`.
pub fn sprf(r: ProgressRate) -> [f64; 2] {
    let angle = PI * r.0;
    [angle.sin(), angle.cos()]
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument(
            "cannot normalize a zero or non-finite vector".into(),
        ));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Head input for a raw feature: `normalize(concat(normalize(raw), sprf(r)))`.
/// With `r = None` the progress feature is omitted and the normalized raw
/// vector is returned.
pub fn augment(raw: &[f64], r: Option<ProgressRate>) -> Result<Vec<f64>> {
    let mut x = l2_normalize(raw)?;
    match r {
        Some(r) => {
            x.extend_from_slice(&sprf(r));
            l2_normalize(&x)
        }
        None => Ok(x),
    }
}

const NORM_FLOOR: f64 = 1e-12;

/// Two affine layers with a ReLU between them, followed by L2
/// normalization of the output. Weights are stored input-major:
/// `w1` is `in x hidden`, `w2` is `hidden x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    norms: Array1<f64>,
    /// Normalized outputs, one row per input.
    pub y: Array2<f64>,
}

impl ProjectionHead {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = |fan_in: usize, rows: usize, cols: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
            let b = Array1::from_shape_simple_fn(cols, || dist.sample(rng));
            (w, b)
        };
        let (w1, b1) = layer(input, input, hidden);
        let (w2, b2) = layer(hidden, hidden, output);
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, output)),
            b2: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn check_shapes(&self) -> Result<()> {
        if self.b1.len() != self.hidden_dim()
            || self.w2.nrows() != self.hidden_dim()
            || self.b2.len() != self.output_dim()
        {
            return Err(Error::InvalidArgument("inconsistent projection head shapes".into()));
        }
        Ok(())
    }

    /// Projects one input vector.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.forward(xs)?.y.row(0).to_vec())
    }

    /// Projects a batch, one input per row.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<HeadCache> {
        self.check_shapes()?;
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "head expects inputs of width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let pre = x.dot(&self.w1) + &self.b1;
        let act = pre.mapv(|v| v.max(0.0));
        let z = act.dot(&self.w2) + &self.b2;
        let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt().max(NORM_FLOOR));
        let y = &z / &norms.view().insert_axis(Axis(1));
        Ok(HeadCache {
            x: x.to_owned(),
            pre,
            act,
            norms,
            y,
        })
    }

    /// Accumulates parameter gradients into `grads` given the gradient of
    /// the loss with respect to the normalized outputs.
    pub fn backward(&self, cache: &HeadCache, grad_y: &Array2<f64>, grads: &mut ProjectionHead) {
        // d/dz of z/|z|: (g - y (y.g)) / |z|
        let radial = (&cache.y * grad_y).sum_axis(Axis(1));
        let grad_z = (grad_y - &(&cache.y * &radial.insert_axis(Axis(1)))) / cache.norms.view().insert_axis(Axis(1));
        grads.w2 += &cache.act.t().dot(&grad_z);
        grads.b2 += &grad_z.sum_axis(Axis(0));
        let mut grad_pre = grad_z.dot(&self.w2.t());
        grad_pre.zip_mut_with(&cache.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        grads.w1 += &cache.x.t().dot(&grad_pre);
        grads.b1 += &grad_pre.sum_axis(Axis(0));
    }

    /// Parameter tensors in a fixed order: w1, b1, w2, b2.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn progress_rates() {
        assert!((progress_rate_video(2.0, 4.0, 10.0).unwrap().value() - 0.3).abs() < 1e-15);
        assert_eq!(progress_rate_video(0.0, 10.0, 10.0).unwrap().value(), 0.5);
        assert_eq!(progress_rate_video(0.0, 0.0, 10.0).unwrap().value(), 0.0);
        assert!(progress_rate_video(5.0, 4.0, 10.0).is_err());
        assert!(progress_rate_video(0.0, 11.0, 10.0).is_err());
        assert!(progress_rate_video(0.0, 0.0, 0.0).is_err());

        assert_eq!(progress_rate_diagram(1, 4).unwrap().value(), 0.25);
        assert_eq!(progress_rate_diagram(7, 7).unwrap().value(), 1.0);
        assert!((progress_rate_diagram(2, 3).unwrap().value() - 0.6667).abs() < 1e-4);
        assert!(progress_rate_diagram(0, 3).is_err());
        assert!(progress_rate_diagram(4, 3).is_err());
    }

    #[test]
    fn sprf_endpoints() {
        let at = |r| sprf(ProgressRate::new(r).unwrap());
        let [s, c] = at(0.0);
        assert_eq!((s, c), (0.0, 1.0));
        let [s, c] = at(0.5);
        assert!((s - 1.0).abs() < 1e-15 && c.abs() < 1e-15);
        let [s, c] = at(1.0);
        assert!(s.abs() < 1e-15 && (c + 1.0).abs() < 1e-15);
    }

    #[test]
    fn augment_unit_raw_at_zero_progress() {
        let raw = [0.6, 0.8];
        let out = augment(&raw, Some(ProgressRate::new(0.0).unwrap())).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [0.6 * h, 0.8 * h, 0.0, h];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(augment(&[0.0, 0.0], None).is_err());
    }

    #[test]
    fn identity_head_passes_nonnegative_unit_input() {
        let head = ProjectionHead {
            w1: Array2::eye(3),
            b1: Array1::zeros(3),
            w2: Array2::eye(3),
            b2: Array1::zeros(3),
        };
        let x = [0.0, 0.6, 0.8];
        let y = head.project(&x).unwrap();
        for (a, b) in y.iter().zip(x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn project_rejects_wrong_width() {
        let head = ProjectionHead::zeros(3, 3, 2);
        assert!(head.project(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn relu_blocks_gradient_of_inactive_units() {
        let head = ProjectionHead {
            w1: array![[1.0, -1.0]],
            b1: array![0.0, 0.0],
            w2: array![[1.0, 0.0], [0.0, 1.0]],
            b2: array![0.0, 0.5],
        };
        let x = array![[1.0]];
        let cache = head.forward(x.view()).unwrap();
        let mut grads = head.zeros_like();
        head.backward(&cache, &array![[0.3, -0.2]], &mut grads);
        assert_eq!(grads.w1[[0, 1]], 0.0);
        assert_eq!(grads.b1[1], 0.0);
        assert!(grads.w1[[0, 0]] != 0.0);
    }
}
