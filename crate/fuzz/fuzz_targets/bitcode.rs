#![no_main]

use libfuzzer_sys::fuzz_target;
use xclp::BitCodeMatrix;

fuzz_target!(|data: &[u8]| {
    if let Ok(codes) = BitCodeMatrix::from_bytes(data) {
        assert_eq!(codes.to_bytes(), data);
    }
});
