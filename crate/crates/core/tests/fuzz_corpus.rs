//! Replays the checked-in fuzz seeds through the decoders with the same
//! properties the fuzz targets assert.

use std::fs;
use std::path::PathBuf;

use xclp::bus::Envelope;
use xclp::data::{decode_raw_matrix, encode_raw_matrix, parse_client_csv, write_client_csv};
use xclp::ssl::RoundConfig;
use xclp::{BitCodeMatrix, XclpConfig};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn raw_matrix_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("raw_matrix") {
        if let Ok(m) = decode_raw_matrix(&data) {
            assert_eq!(encode_raw_matrix(&m), data, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn client_csv_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("client_csv") {
        if let Ok(client) = parse_client_csv(data.as_slice(), "seed", 16) {
            let mut buf = Vec::new();
            write_client_csv(&mut buf, &client).unwrap();
            let again = parse_client_csv(buf.as_slice(), "seed", 16).unwrap();
            assert_eq!(again, client, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn bitcode_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("bitcode") {
        if let Ok(codes) = BitCodeMatrix::from_bytes(&data) {
            assert_eq!(codes.to_bytes(), data, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 2);
}

#[test]
fn envelope_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("envelope") {
        if let Ok(env) = Envelope::decode(&data) {
            assert_eq!(env.encode(), data, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded >= 3);
}

#[test]
fn config_json_seeds() {
    let mut parsed = 0;
    for (name, data) in seeds("config_json") {
        if let Ok(config) = serde_json::from_slice::<XclpConfig>(&data) {
            config.validate(1000).unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = serde_json::to_string(&config).unwrap();
            assert_eq!(serde_json::from_str::<XclpConfig>(&text).unwrap(), config, "{name}");
            parsed += 1;
        }
        if let Ok(rounds) = serde_json::from_slice::<RoundConfig>(&data) {
            rounds.validate().unwrap();
            parsed += 1;
        }
    }
    assert_eq!(parsed, 3);
}
