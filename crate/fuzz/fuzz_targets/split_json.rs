#![no_main]

use std::collections::HashMap;
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use vispromo_core::dataset::{Catalog, RawInteraction, Split};
use vispromo_core::image::Image;

/// Three users who each rated all five items.
fn catalog() -> &'static Catalog {
    static CATALOG: OnceLock<Catalog> = OnceLock::new();
    CATALOG.get_or_init(|| {
        let mut raw = Vec::new();
        for u in 0..3 {
            for i in 0..5 {
                raw.push(RawInteraction { user: format!("u{u}"), item: format!("i{i}"), rating: 1.0, timestamp: i });
            }
        }
        let images: HashMap<String, Image> = (0..5).map(|i| (format!("i{i}"), Image::filled(8, 0.5))).collect();
        Catalog::build(raw, images).expect("fixture catalog")
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let cat = catalog();
    if let Ok(split) = Split::from_json(text, cat) {
        let again = Split::from_json(&split.to_json(cat).unwrap(), cat).unwrap();
        assert_eq!(split, again);
    }
});
