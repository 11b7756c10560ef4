#![no_main]

use libfuzzer_sys::fuzz_target;
use solis_core::trainer::CvReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = CvReport::from_json(text);
});
