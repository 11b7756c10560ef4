#![no_main]

use libfuzzer_sys::fuzz_target;
use solis_core::ImageRgb;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ImageRgb::from_png_bytes(data) {
        let back = ImageRgb::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
    }
});
