#![no_main]

use libfuzzer_sys::fuzz_target;
use vispromo_nn::blob::decode;

fuzz_target!(|data: &[u8]| {
    if let Ok(arrays) = decode(data) {
        for a in &arrays {
            assert_eq!(a.shape.iter().product::<usize>(), a.data.len());
        }
    }
});
