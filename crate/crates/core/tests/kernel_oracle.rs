//! Sparse kernels against dense f64 oracles on the densified subnet.

mod common;

use common::props::{self, conv_case, table_case};
use common::{fixture, Counts};
use dress::infer::{sparse_linear, spmm};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn spmm_and_linear_match_dense((n, h, k, seed, mode) in table_case(), cols in 1usize..=8) {
        props::spmm_matches_dense(n, h, k, seed, mode, cols)?;
    }

    #[test]
    fn conv_matches_direct_convolution((case, k, seed, mode, batch) in conv_case()) {
        props::conv_matches_dense(case, k, seed, mode, batch)?;
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let f = fixture(4, 3, 2, 7, Counts::Random);
    let sub = f.model.layers[0].extract(1).unwrap();
    let mut out = vec![0.0; 3 * 2];
    assert!(spmm(&sub, &[0.0; 7], 2, &mut out).is_err());
    assert!(sparse_linear(&sub, &[0.0; 5], 1, &mut out[..3]).is_err());
}
