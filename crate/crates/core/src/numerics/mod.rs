//! Dense tensors, counter-based random numbers and a reverse-mode tape.

pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, primitive_suite, GradCheck, GradCheckReport};
pub use kernels::{attention as attention_kernel, conv2d, softmax};
pub use rng::{stream_key, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Scalar, Tensor};

/// `softmax(q·kᵀ/√d)·v` for 2-D `q [Lq×d]`, `k [Lk×d]`, `v [Lk×dv]`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> crate::Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(crate::error::invalid("attention", "expected 2-D operands"));
    }
    let dims = kernels::attention_dims(q, k, v, 1)?;
    let (out, _) = kernels::attention(q, k, v, dims);
    Tensor::new(&[dims.lq, dims.dv], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use super::rng::Rng;

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut rng = Rng::new(11, 0);
        let q: Tensor<f64> = rng.normal_tensor(&[5, 4]);
        let k: Tensor<f64> = rng.normal_tensor(&[1, 4]);
        let v: Tensor<f64> = rng.normal_tensor(&[1, 3]);
        let o = attention(&q, &k, &v).unwrap();
        for row in o.data().chunks(3) {
            assert_eq!(row, v.data());
        }
    }

    #[test]
    fn attention_orthogonal_query_averages_values() {
        let q = Tensor::new(&[1, 2], alloc::vec![1.0f64, 0.0]).unwrap();
        let k = Tensor::new(&[3, 2], alloc::vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap();
        let v = Tensor::new(&[3, 2], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let o = attention(&q, &k, &v).unwrap();
        assert!((o.data()[0] - 3.0).abs() < 1e-12 && (o.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let q = Tensor::<f32>::zeros(&[2, 3]);
        let k = Tensor::<f32>::zeros(&[2, 4]);
        assert!(attention(&q, &k, &k).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(xs in proptest::collection::vec(-80.0f32..80.0, 1..40)) {
            let n = xs.len();
            let t = Tensor::new(&[n], xs).unwrap();
            let y = softmax(&t, 0).unwrap();
            let s: f64 = y.data().iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }

        #[test]
        fn attention_key_value_permutation_invariance(seed in 0u64..1000, lk in 1usize..9) {
            let mut rng = Rng::new(seed, 1);
            let q: Tensor<f32> = rng.normal_tensor(&[4, 6]);
            let k: Tensor<f32> = rng.normal_tensor(&[lk, 6]);
            let v: Tensor<f32> = rng.normal_tensor(&[lk, 5]);
            let mut perm: Vec<usize> = (0..lk).collect();
            for i in (1..lk).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let pk = Tensor::from_fn(&[lk, 6], |i| k.data()[perm[i / 6] * 6 + i % 6]);
            let pv = Tensor::from_fn(&[lk, 5], |i| v.data()[perm[i / 5] * 5 + i % 5]);
            let a = attention(&q, &k, &v).unwrap();
            let b = attention(&q, &pk, &pv).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }
}
