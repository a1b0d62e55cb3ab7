#![no_main]

use libfuzzer_sys::fuzz_target;
use vispromo_core::dataset::parse_interactions;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_interactions(data) {
        for r in &rows {
            assert!(!r.user.is_empty());
            assert!(r.rating.is_finite());
        }
    }
});
