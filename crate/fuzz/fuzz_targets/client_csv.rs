#![no_main]

use libfuzzer_sys::fuzz_target;
use xclp::data::{parse_client_csv, write_client_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(client) = parse_client_csv(data, "fuzz", 16) else {
        return;
    };
    let mut buf = Vec::new();
    write_client_csv(&mut buf, &client).expect("parsed client writes");
    let again = parse_client_csv(buf.as_slice(), "fuzz", 16).expect("written client parses");
    assert_eq!(again.len(), client.len());
    assert_eq!(again.labels(), client.labels());
});
