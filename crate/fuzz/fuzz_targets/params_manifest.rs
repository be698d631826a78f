#![no_main]
use dirmask_core::params_io::parse_params_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_params_manifest(text) {
        assert_eq!(parse_params_manifest(&m.to_text()).unwrap(), m);
        for key in m.entries.keys().filter_map(|k| k.strip_prefix("tensor.")) {
            let _ = m.shape(key);
        }
    }
});
