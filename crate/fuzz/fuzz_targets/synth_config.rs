#![no_main]

use libfuzzer_sys::fuzz_target;
use solis_core::dataset::SynthConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(config) = serde_json::from_slice::<SynthConfig>(data) else {
        return;
    };
    let _ = config.validate();
});
