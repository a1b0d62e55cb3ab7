#![no_main]

use libfuzzer_sys::fuzz_target;
use vispromo_core::image::Image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode(data, 8) {
        assert_eq!(img.side(), 8);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
