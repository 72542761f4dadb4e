#![no_main]

use libfuzzer_sys::fuzz_target;
use xclp::data::{decode_raw_matrix, encode_raw_matrix};

fuzz_target!(|data: &[u8]| {
    // Decoding is exact, so a decoded matrix must re-encode to the input.
    if let Ok(m) = decode_raw_matrix(data) {
        assert_eq!(encode_raw_matrix(&m), data);
    }
});
