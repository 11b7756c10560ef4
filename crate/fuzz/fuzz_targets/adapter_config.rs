#![no_main]

use libfuzzer_sys::fuzz_target;
use solis_core::segmentation::AdapterConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = AdapterConfig::from_json(text);
});
