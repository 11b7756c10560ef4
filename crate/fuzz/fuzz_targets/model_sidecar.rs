#![no_main]

use libfuzzer_sys::fuzz_target;
use solis_core::classifier::ModelSidecar;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = ModelSidecar::from_json(text);
});
