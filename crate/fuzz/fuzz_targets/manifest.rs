#![no_main]

use libfuzzer_sys::fuzz_target;
use solis_core::dataset::{manifest_to_string, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(records) = parse_manifest(text) {
        // Accepted manifests survive a write/parse round trip.
        let again = parse_manifest(&manifest_to_string(&records).unwrap()).unwrap();
        assert_eq!(again, records);
    }
});
