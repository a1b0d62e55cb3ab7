#![no_main]

use libfuzzer_sys::fuzz_target;
use vispromo::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let again = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg.hash(), again.hash());
    }
});
