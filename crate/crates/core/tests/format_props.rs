mod common;

use common::props::{self, table_case};
use common::{fixture, Counts};
use dress::csr::DressCsr;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nested_tables_reproduce_every_level((n, h, k, seed, mode) in table_case()) {
        props::tables_reproduce_every_level(n, h, k, seed, mode)?;
    }

    #[test]
    fn rows_are_ordered_by_depth_then_magnitude_then_column((n, h, k, seed, _) in table_case()) {
        props::rows_ordered_by_depth_magnitude_column(n, h, k, seed)?;
    }

    #[test]
    fn file_round_trip_is_byte_identical((n, h, k, seed, mode) in table_case()) {
        props::round_trip_is_byte_identical(n, h, k, seed, mode)?;
    }

    #[test]
    fn magnitude_sampled_masks_are_nested_and_sorted((n, h, k, seed, _) in table_case()) {
        props::magnitude_masks_are_nested(n, h, k, seed)?;
    }

    #[test]
    fn corrupted_files_are_rejected(
        (n, h, k, seed, _) in table_case(),
        pos in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let f = fixture(n, h, k, seed, Counts::Random);
        let mut bytes = f.model.to_bytes().unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(DressCsr::from_bytes(&bytes).is_err());
    }
}
