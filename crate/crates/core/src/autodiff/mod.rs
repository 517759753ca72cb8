//! Real-valued arrays with reverse-mode differentiation, the layers the CVAE
//! is built from, and the Adam optimizer. Everything is 64-bit.

mod adam;
mod array;
mod conv;
mod norm;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::NdArray;
pub use conv::{conv_output_len, deconv_output_len};
pub use norm::{batchnorm1d, BatchMoments, Mode, RunningStats, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
pub use tape::{sigmoid, softmax, softmax_in_place, Gradients, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray {
        NdArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 4], &[1., 2., 3., 4.]));
        let k = t.constant(arr(&[1, 1, 1], &[1.]));
        let b = t.constant(arr(&[1], &[0.]));
        let y = t.conv1d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[1., 2., 3., 4.]);
        assert_eq!(t.value(y).shape(), &[1, 4]);
    }

    #[test]
    fn conv1d_hand_example() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 3], &[1., 2., 3.]));
        let k = t.constant(arr(&[1, 1, 2], &[1., 1.]));
        let b = t.constant(arr(&[1], &[0.]));
        let y = t.conv1d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[3., 5.]);
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(NdArray::zeros(&[2, 5]));
        let k = t.constant(NdArray::zeros(&[1, 3, 2]));
        let b = t.constant(NdArray::zeros(&[1]));
        assert!(matches!(t.conv1d(x, k, b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn deconv1d_hand_example() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 2], &[1., 1.]));
        let k = t.constant(arr(&[1, 1, 2], &[1., 1.]));
        let b = t.constant(arr(&[1], &[0.]));
        let y = t.deconv1d(x, k, b, 2, 0).unwrap();
        assert_eq!(t.value(y).data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 3], &[4., 4., 4., -1., -1., -1.]));
        let g = t.constant(NdArray::full(&[2], 1.0));
        let b = t.constant(NdArray::zeros(&[2]));
        let mut stats = RunningStats::empty();
        let y = batchnorm1d(&mut t, x, g, b, Mode::Train, &mut stats).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_hand_example() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 2], &[0., 2.]));
        let g = t.constant(NdArray::full(&[1], 1.0));
        let b = t.constant(NdArray::zeros(&[1]));
        let mut stats = RunningStats::empty();
        let y = batchnorm1d(&mut t, x, g, b, Mode::Train, &mut stats).unwrap();
        let expected = 1.0 / (1.0 + BATCHNORM_EPS).sqrt();
        let out = t.value(y).data();
        assert!((out[0] + expected).abs() < 1e-15 && (out[1] - expected).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-5);
        // running mean 0.9*0 + 0.1*1, running var 0.9*1 + 0.1*2 (unbiased variance of [0,2])
        assert!((stats.mean[0] - 0.1).abs() < 1e-15);
        assert!((stats.var[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_needs_running_stats() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 2], &[0., 2.]));
        let g = t.constant(NdArray::full(&[1], 1.0));
        let b = t.constant(NdArray::zeros(&[1]));
        let mut stats = RunningStats::empty();
        let res = batchnorm1d(&mut t, x, g, b, Mode::Eval, &mut stats);
        assert!(matches!(res, Err(Error::State(_))));
    }

    #[test]
    fn batchnorm_eval_is_deterministic() {
        let mut stats = RunningStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let run = |stats: &mut RunningStats| {
            let mut t = Tape::new();
            let x = t.constant(arr(&[1, 3], &[1., 3., 5.]));
            let g = t.constant(NdArray::full(&[1], 2.0));
            let b = t.constant(NdArray::full(&[1], 0.5));
            let y = batchnorm1d(&mut t, x, g, b, Mode::Eval, stats).unwrap();
            t.value(y).clone()
        };
        let a = run(&mut stats);
        let b = run(&mut stats);
        assert_eq!(a, b);
        let s = 1.0 / (4.0 + BATCHNORM_EPS).sqrt();
        assert!((a.data()[1] - (2.0 * 2.0 * s + 0.5)).abs() < 1e-14);
        assert_eq!(stats.mean, vec![1.0]);
    }

    #[test]
    fn glu_examples() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[3], &[2., -4., 6.]));
        let b = t.constant(NdArray::zeros(&[3]));
        let y = t.glu(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[1., -2., 3.]);

        let a = t.constant(arr(&[1], &[2.]));
        let b = t.constant(arr(&[1], &[50.]));
        let y = t.glu(a, b).unwrap();
        assert!((t.value(y).data()[0] - 2.0).abs() < 1e-15);

        let c = t.constant(NdArray::zeros(&[2]));
        assert!(matches!(t.glu(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0., 0., 0., 0.]), vec![0.25; 4]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let q = softmax(&[2f64.ln() + 700.0, 700.0]);
        assert!((q[0] - p[0]).abs() < 1e-12);
    }

    #[test]
    fn backward_quadratic_and_unreachable() {
        let mut t = Tape::new();
        let p = t.param(arr(&[3], &[1., -2., 0.5]));
        let unused = t.param(arr(&[2], &[7., 8.]));
        let sq = t.mul(p, p).unwrap();
        let loss = t.sum(sq);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(p).data(), &[2., -4., 1.]);
        assert_eq!(grads.get(unused).data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut t = Tape::new();
        let p = t.param(arr(&[2], &[1., 2.]));
        let e = t.exp(p);
        assert!(matches!(t.backward(e), Err(Error::Contract(_))));
        let loss = t.sum(e);
        assert!(t.backward(loss).is_ok());
        assert!(matches!(t.backward(loss), Err(Error::State(_))));
    }
}
