//! Property tests over arbitrary inputs for the Gram-matrix layer.

use kernelblend_core::{assemble_gram, build_base_kernels, KernelFunctionSpec, ThetaVector};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn input_matrix() -> impl Strategy<Value = DMatrix<f64>> {
    (2usize..7, 1usize..4).prop_flat_map(|(n, d)| {
        proptest::collection::vec(-5.0..5.0f64, n * d)
            .prop_map(move |vals| DMatrix::from_vec(n, d, vals))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn built_kernels_validate_and_factorise(
        x in input_matrix(),
        lengthscale in 0.2..3.0f64,
        signal in 0.1..4.0f64,
        w in proptest::collection::vec(0.0..3.0f64, 2),
    ) {
        let specs = [
            KernelFunctionSpec::squared_exponential(lengthscale, signal).unwrap(),
            KernelFunctionSpec::Linear,
        ];
        let set = build_base_kernels(&specs, x).unwrap();
        // diagonal of the squared-exponential base is the signal variance
        for i in 0..set.dim() {
            prop_assert!((set.base(0)[(i, i)] - signal).abs() <= 1e-12 * signal);
        }
        let theta = ThetaVector::new(w).unwrap();
        let gram = assemble_gram(&theta, &set, 1e-8).unwrap();
        // factor reproduces the matrix
        let rebuilt = gram.chol() * gram.chol().transpose();
        let rel = (&rebuilt - gram.matrix()).norm() / gram.matrix().norm();
        prop_assert!(rel <= 1e-10, "relative reconstruction error {rel}");
    }

    #[test]
    fn logdet_monotone_under_weight_increase(
        x in input_matrix(),
        w in proptest::collection::vec(0.0..2.0f64, 2),
        bump in 0.01..2.0f64,
        which in 0usize..2,
    ) {
        let specs = [
            KernelFunctionSpec::squared_exponential(1.0, 1.0).unwrap(),
            KernelFunctionSpec::Linear,
        ];
        let set = build_base_kernels(&specs, x).unwrap();
        let lo = assemble_gram(&ThetaVector::new(w.clone()).unwrap(), &set, 1e-8)
            .unwrap()
            .logdet();
        let mut w_hi = w;
        w_hi[which] += bump;
        let hi = assemble_gram(&ThetaVector::new(w_hi).unwrap(), &set, 1e-8)
            .unwrap()
            .logdet();
        prop_assert!(hi >= lo - 1e-12, "logdet decreased: {lo} -> {hi}");
    }
}
