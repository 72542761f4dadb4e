#![no_main]

use libfuzzer_sys::fuzz_target;
use xclp::bus::Envelope;

fuzz_target!(|data: &[u8]| {
    if let Ok(env) = Envelope::decode(data) {
        assert_eq!(env.encode(), data);
    }
});
