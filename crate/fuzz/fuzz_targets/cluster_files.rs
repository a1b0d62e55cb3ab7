#![no_main]

use libfuzzer_sys::fuzz_target;
use vispromo_core::visual::cluster::ClusterModel;

// Input is the JSON document, a NUL byte, then the centroid blob.
fuzz_target!(|data: &[u8]| {
    let Some(cut) = data.iter().position(|&b| b == 0) else { return };
    let Ok(json) = std::str::from_utf8(&data[..cut]) else { return };
    let ids: Vec<String> = (0..200).map(|i| format!("i{i:05}")).collect();
    if let Ok(model) = ClusterModel::from_files(json, &data[cut + 1..], &ids) {
        let (j, b) = model.to_files(&ids).unwrap();
        assert_eq!(ClusterModel::from_files(&j, &b, &ids).unwrap(), model);
    }
});
