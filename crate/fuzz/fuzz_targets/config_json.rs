#![no_main]

use libfuzzer_sys::fuzz_target;
use xclp::ssl::RoundConfig;
use xclp::XclpConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = serde_json::from_slice::<XclpConfig>(data) {
        let _ = config.validate(1000);
        let text = serde_json::to_string(&config).expect("config serializes");
        serde_json::from_str::<XclpConfig>(&text).expect("serialized config parses");
    }
    if let Ok(rounds) = serde_json::from_slice::<RoundConfig>(data) {
        let _ = rounds.validate();
        let _ = rounds.learning_rate_at(rounds.rounds);
    }
});
