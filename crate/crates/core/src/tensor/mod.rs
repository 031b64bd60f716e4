//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is 64-bit: the gradient-check tolerances used across the test
//! suite are only meaningful at double precision. A [`Tape`] is rebuilt per
//! forward pass and owned by one execution context; [`Array`] is the plain
//! value type shared freely once constructed.

mod adam;
mod array;
pub mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array;
pub use tape::{concat, Tape, Tensor};

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_diff, max_rel_err, rel_err};
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const FD_STEP: f64 = 1e-5;

    fn rand_array(shape: &[usize], rng: &mut StdRng) -> Array {
        let n: usize = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let i2 = tape.leaf(Array::eye(2));
        let a = tape.leaf(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        assert_eq!(i2.matmul(a).unwrap().value(), a.value());

        let r = tape.leaf(Array::from_rows(&[vec![1.0, 2.0]]));
        let c = tape.leaf(Array::from_rows(&[vec![3.0], vec![4.0]]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let a0 = rand_array(&[3, 4], &mut rng);
        let b0 = rand_array(&[4, 2], &mut rng);

        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        a.matmul(b).unwrap().sum().backward().unwrap();

        let mut f_a = |x: &[f64]| {
            let a = Array::new(vec![3, 4], x.to_vec()).unwrap();
            a.matmul(&b0).unwrap().sum()
        };
        let fd = central_diff(&mut f_a, a0.data(), FD_STEP);
        assert!(max_rel_err(a.grad().data(), &fd) < 1e-6);

        let mut f_b = |x: &[f64]| {
            let b = Array::new(vec![4, 2], x.to_vec()).unwrap();
            a0.matmul(&b).unwrap().sum()
        };
        let fd = central_diff(&mut f_b, b0.data(), FD_STEP);
        assert!(max_rel_err(b.grad().data(), &fd) < 1e-6);
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let x = tape.leaf(Array::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(Array::scalar(0.0));
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(0.3));
        x.tanh().sum().backward().unwrap();
        let mut f = |v: &[f64]| v[0].tanh();
        let fd = central_diff(&mut f, &[0.3], FD_STEP);
        assert!(rel_err(x.grad().data()[0], fd[0]) < 1e-6);
    }

    #[test]
    fn elementwise_shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.leaf(Array::zeros(&[2, 2]));
        let b = tape.leaf(Array::zeros(&[2, 3]));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_rows(&[vec![0.0, 0.0, 0.0]]));
        let y = x.softmax_rows().unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.leaf(Array::from_rows(&[vec![1000.0, 1000.0]]));
        let y = big.softmax_rows().unwrap().value();
        assert!(y.is_finite());
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_rows(&[vec![f64::NAN, 0.0]]));
        assert!(x.softmax_rows().is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let x0 = rand_array(&[2, 4], &mut rng);
        let w0 = rand_array(&[2, 4], &mut rng);

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        x.softmax_rows()
            .unwrap()
            .mul(w)
            .unwrap()
            .sum()
            .backward()
            .unwrap();

        let mut f = |v: &[f64]| {
            let tape = Tape::new();
            let x = tape.leaf(Array::new(vec![2, 4], v.to_vec()).unwrap());
            let w = tape.leaf(w0.clone());
            x.softmax_rows().unwrap().mul(w).unwrap().sum().value().data()[0]
        };
        let fd = central_diff(&mut f, x0.data(), FD_STEP);
        assert!(max_rel_err(x.grad().data(), &fd) < 1e-5);
    }

    #[test]
    fn concat_values() {
        let tape = Tape::new();
        let a = tape.leaf(Array::from_rows(&[vec![1.0], vec![2.0]]));
        let b = tape.leaf(Array::from_rows(&[vec![3.0], vec![4.0]]));
        let c = concat(&[a, b], 1).unwrap().value();
        assert_eq!(c, Array::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]));

        let single = concat(&[a], 1).unwrap();
        assert_eq!(single.value(), a.value());

        let rows = concat(&[a, b], 0).unwrap().value();
        assert_eq!(rows, Array::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]));
    }

    #[test]
    fn concat_gradient_partitions_exactly() {
        // Gradient of sum(w ⊙ concat(a, b)) w.r.t. the concatenation must
        // split into the parts' gradients; verified against finite
        // differences over the stacked input.
        let mut rng = StdRng::seed_from_u64(3);
        let a0 = rand_array(&[2, 2], &mut rng);
        let b0 = rand_array(&[2, 3], &mut rng);
        let w0 = rand_array(&[2, 5], &mut rng);

        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let w = tape.leaf(w0.clone());
        concat(&[a, b], 1)
            .unwrap()
            .mul(w)
            .unwrap()
            .sum()
            .backward()
            .unwrap();

        let mut flat: Vec<f64> = a0.data().to_vec();
        flat.extend_from_slice(b0.data());
        let mut f = |v: &[f64]| {
            let a = Array::new(vec![2, 2], v[..4].to_vec()).unwrap();
            let b = Array::new(vec![2, 3], v[4..].to_vec()).unwrap();
            let tape = Tape::new();
            let (ta, tb, tw) = (tape.leaf(a), tape.leaf(b), tape.leaf(w0.clone()));
            concat(&[ta, tb], 1).unwrap().mul(tw).unwrap().sum().value().data()[0]
        };
        let fd = central_diff(&mut f, &flat, FD_STEP);
        let mut got = a.grad().into_data();
        got.extend(b.grad().into_data());
        assert!(max_rel_err(&got, &fd) < 1e-6);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::new();
        let w = tape.leaf(Array::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        w.sum().backward().unwrap();
        assert_eq!(w.grad().data(), &[1.0, 1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let w = tape.leaf(Array::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        w.mul(w).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(Array::zeros(&[2, 2]));
        assert!(w.backward().is_err());
    }

    #[test]
    fn composite_expression_gradient() {
        // Exercises transpose, add_row_vec, mul_col_vec, slice_cols, abs,
        // exp, scale, add_scalar and sub in one expression.
        let mut rng = StdRng::seed_from_u64(42);
        let x0 = rand_array(&[3, 4], &mut rng);
        let w0 = rand_array(&[2, 4], &mut rng);
        let b0 = rand_array(&[2], &mut rng);
        let s0 = rand_array(&[3], &mut rng);

        fn build<'t>(
            tape: &'t Tape,
            x: &Array,
            w: &Array,
            b: &Array,
            s: &Array,
        ) -> (Tensor<'t>, [Tensor<'t>; 4]) {
            let x = tape.leaf(x.clone());
            let w = tape.leaf(w.clone());
            let b = tape.leaf(b.clone());
            let s = tape.leaf(s.clone());
            let h = x.matmul(w.t()).unwrap().add_row_vec(b).unwrap();
            let h = h.mul_col_vec(s).unwrap().tanh();
            let left = h.slice_cols(0, 1).unwrap();
            let right = h.slice_cols(1, 1).unwrap();
            let loss = left
                .sub(right)
                .unwrap()
                .abs()
                .scale(0.5)
                .add_scalar(0.1)
                .exp()
                .sum();
            (loss, [x, w, b, s])
        }

        let tape = Tape::new();
        let (loss, leaves) = build(&tape, &x0, &w0, &b0, &s0);
        loss.backward().unwrap();
        let mut got = Vec::new();
        for leaf in leaves {
            got.extend(leaf.grad().into_data());
        }

        let mut flat: Vec<f64> = x0.data().to_vec();
        flat.extend_from_slice(w0.data());
        flat.extend_from_slice(b0.data());
        flat.extend_from_slice(s0.data());
        let mut f = |v: &[f64]| {
            let x = Array::new(vec![3, 4], v[..12].to_vec()).unwrap();
            let w = Array::new(vec![2, 4], v[12..20].to_vec()).unwrap();
            let b = Array::new(vec![2], v[20..22].to_vec()).unwrap();
            let s = Array::new(vec![3], v[22..].to_vec()).unwrap();
            let tape = Tape::new();
            build(&tape, &x, &w, &b, &s).0.value().data()[0]
        };
        let fd = central_diff(&mut f, &flat, FD_STEP);
        assert!(max_rel_err(&got, &fd) < 1e-5, "err {}", max_rel_err(&got, &fd));
    }

    #[test]
    fn relu_propagates_nan() {
        let tape = Tape::new();
        let x = tape.leaf(Array::new(vec![2], vec![f64::NAN, -1.0]).unwrap());
        let y = x.relu().value();
        assert!(y.data()[0].is_nan());
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn tape_dump_lists_ops() {
        let tape = Tape::new();
        let a = tape.leaf(Array::zeros(&[2, 2]));
        let _ = a.relu().sum();
        let dump = tape.dump();
        assert!(dump.contains("leaf") && dump.contains("relu") && dump.contains("sum"));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in 1usize..5,
            cols in 1usize..6,
            seed in 0u64..1000,
            shift in -50.0f64..50.0,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-10.0..10.0)).collect();
            let a = Array::new(vec![rows, cols], x.clone()).unwrap();
            let shifted = a.map(|v| v + shift);

            let tape = Tape::new();
            let y = tape.leaf(a).softmax_rows().unwrap().value();
            let ys = tape.leaf(shifted).softmax_rows().unwrap().value();
            for r in 0..rows {
                let sum: f64 = y.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                for c in 0..cols {
                    prop_assert!((y.at(r, c) - ys.at(r, c)).abs() <= 1e-12);
                }
            }
        }
    }
}
